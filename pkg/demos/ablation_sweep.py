"""Train the four ablation settings on the synthetic three-task benchmark.

Each run uses the default configuration (300 Adam steps, batch 4) and
reports the held-out weighted loss. One seed takes about two minutes on a
single core; pass more seeds on the command line for a sweep.

    python3 demos/ablation_sweep.py 0 1 2
"""

import sys

import numpy as np

from tadformer import RunConfig, TuningMode, run_training

modes = [TuningMode.TADFORMER, TuningMode.DTF_ONLY, TuningMode.SHARED_LORA_ONLY, TuningMode.DECODERS_ONLY]
seeds = [int(s) for s in sys.argv[1:]] or [0]

finals = {m: [] for m in modes}
for seed in seeds:
    for mode in modes:
        result = run_training(RunConfig(mode=mode, seed=seed))
        before, after = result.initial_eval["weighted_loss"], result.final_eval["weighted_loss"]
        finals[mode].append(after)
        metrics = ", ".join(f"{m:.3f}" for m in result.final_eval["metrics"])
        print(f"seed {seed}  {mode.value:<17} {before:.4f} -> {after:.4f}   metrics [{metrics}]")

print("\nmean final weighted loss")
for mode in modes:
    print(f"  {mode.value:<17} {np.mean(finals[mode]):.4f}")
