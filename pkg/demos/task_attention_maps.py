"""Train briefly, then look at where each task prompt attends.

Writes one PGM per (stage, task) to ``runs/tam_demo``. The images are the
head-averaged attention of each task prompt over the patch grid, scaled to
0..255, and open in any image viewer.
"""

from pathlib import Path

import numpy as np

from tadformer import RunConfig, run_training
from tadformer.cli import tam_images, write_pgm
from tadformer.train import make_datasets

cfg = RunConfig(steps=100, seed=0)
result = run_training(cfg)
model = result.model
print(f"weighted loss {result.initial_eval['weighted_loss']:.4f} -> {result.final_eval['weighted_loss']:.4f}")

_, evals = make_datasets(cfg)
images, _ = evals.batch(np.array([0]))
out = model(images)

out_dir = Path("runs/tam_demo")
out_dir.mkdir(parents=True, exist_ok=True)
for s, tam in enumerate(out.task_attention):
    head_avg = tam.data[0].mean(axis=0)
    for i, img in enumerate(tam_images(tam.data[0], model.stages[s].grid)):
        write_pgm(out_dir / f"tam_stage{s}_task{i}.pgm", img)
    # how different are the task prompts' attention patterns?
    spread = np.abs(head_avg[0] - head_avg[1:]).max() if len(head_avg) > 1 else 0.0
    print(f"stage {s}: max attention difference between task prompts {spread:.2e}")
print(f"wrote maps to {out_dir}/")
