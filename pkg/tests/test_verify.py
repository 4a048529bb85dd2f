"""Tests for the built-in invariant suite."""
import numpy as np
import pytest

from app.verify import (
    check_dsp_oracles,
    check_identity_resynthesis,
    check_intrinsic_zero,
    check_nnls,
    check_perfect_reconstruction,
    run_checks,
)


@pytest.mark.parametrize(
    "check",
    [check_dsp_oracles, check_perfect_reconstruction, check_intrinsic_zero, check_nnls, check_identity_resynthesis],
)
def test_fast_check_passes(check):
    passed, detail = check(np.random.default_rng(0))
    assert passed, detail


def test_run_checks_reports_every_fast_check():
    results = run_checks(seed=1)
    assert {r.name for r in results} >= {"dsp_oracles", "gradients", "nnls"}
    assert all(r.passed for r in results), [r.detail for r in results if not r.passed]
    assert all(r.seconds >= 0 for r in results)


@pytest.mark.slow
def test_training_checks(tmp_path):
    results = run_checks(seed=0, with_training=True, workdir=tmp_path)
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed
