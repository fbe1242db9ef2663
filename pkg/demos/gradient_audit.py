"""Finite-difference audit of every trainable tensor at toy scale.

The analytic gradients come from the float32 training path. The reference
is a central difference on a float64 copy of the model, one coordinate at a
time. Expect roughly half a minute on one core.
"""

import time

from tadformer import toy_config
from tadformer.gradcheck import TOLERANCE, audit_model
from tadformer.tensor import corrupt_backward

cfg = toy_config()
t0 = time.perf_counter()
errors = audit_model(cfg)
print(f"clean audit ({time.perf_counter() - t0:.1f}s)")
for group, err in sorted(errors.items()):
    print(f"  {group:<11} {err:.2e} {'ok' if err <= TOLERANCE else 'FAIL'}")

# Negative control: scale the filter gradient of the depthwise convolution by
# 1.5. The dynamic-filter group has to light up.
with corrupt_backward("depthwise_conv2d", input_index=1, scale=1.5):
    broken = audit_model(cfg)
print("\nwith a corrupted depthwise-conv filter gradient")
for group, err in sorted(broken.items()):
    print(f"  {group:<11} {err:.2e} {'ok' if err <= TOLERANCE else 'FAIL'}")
