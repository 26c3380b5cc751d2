import time

import numpy as np
import pytest

from cmdistill.checks import CHECKS, run_all
from cmdistill.numcore import Rng, Tensor, grad_check, ops


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composed_blocks_pass_at_default_eps(seed):
    t0 = time.perf_counter()
    errs = run_all(seed, eps=1e-5)
    assert time.perf_counter() - t0 < 60.0
    assert {k.split("/")[0] for k in errs} >= {"attention_layer", "conv_stem", "combined_loss"}
    assert all(np.isfinite(v) and v < 1e-4 for v in errs.values()), errs


def test_run_all_is_deterministic():
    assert run_all(3) == run_all(3)


def test_every_family_is_registered():
    assert set(CHECKS) == {"attention", "conv_stem", "combined_loss"}


def test_check_detects_a_wrong_gradient():
    x = Rng(0).normal((4,), dtype=np.float64)

    def wrong(t: Tensor) -> Tensor:
        # forward is sum(t^2), but one factor is a constant so backward reports half the gradient
        return ops.sum(t * Tensor(t.data))

    assert grad_check(wrong, x, 1e-5) > 1e-2
