import time

import pytest

from tadformer.config import RunConfig
from tadformer.train import run_training


class SweepCache:
    """Memoised default-benchmark training runs keyed by (mode, seed)."""

    def __init__(self):
        self.results = {}
        self.seconds = {}

    def get(self, mode, seed):
        key = (mode, seed)
        if key not in self.results:
            t0 = time.perf_counter()
            r = run_training(RunConfig(mode=mode, seed=seed))
            self.seconds[key] = time.perf_counter() - t0
            self.results[key] = {"initial": r.initial_eval["weighted_loss"], "final": r.final_eval["weighted_loss"]}
        return self.results[key]


@pytest.fixture(scope="session")
def sweep():
    return SweepCache()
