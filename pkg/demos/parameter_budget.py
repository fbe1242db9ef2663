"""How many parameters does each tuning mode actually train?

Builds the default model once per tuning mode, counts trainable tensors by
budget group and checks the enumeration against the closed-form count that
is derived from the configuration alone.
"""

from tadformer import ModelConfig, TADFormer, TuningMode
from tadformer.mtl import closed_form_params, count_params
from tadformer.peft import GROUPS

cfg = ModelConfig()
print(f"backbone widths {cfg.backbone.stage_dims}, rank {cfg.rank}, kernel {cfg.kernel}, {cfg.num_tasks} tasks\n")

header = ["mode"] + [g for g in GROUPS if g != "backbone"] + ["total"]
print("  ".join(f"{h:>10}" for h in header))
for mode in TuningMode:
    counts = count_params(TADFormer(cfg, mode), mode)
    assert counts == closed_form_params(cfg, mode)
    print("  ".join(f"{v:>10}" for v in [mode.value[:10]] + [counts[g] for g in header[1:]]))

# The dynamic task filters are cheap: each TA module adds r*r*k*k generator
# weights plus r FilterNorm scales, independent of the backbone width.
r, k = cfg.rank, cfg.kernel
print(f"\none generator: {r}*{r}*{k}*{k} = {r * r * k * k} weights")
