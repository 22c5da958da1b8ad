import pytest

from intensivenet import checks, ctc


def test_ctc_grid_small():
    summary = checks.ctc_oracle_grid(4, 2)
    assert summary["passed"] and summary["feasibility_mismatches"] == 0
    # every T in 1..4, A in 1..2, target of length <= 3 including the empty one
    assert summary["cases"] == 4 * (1 + 1 + 1 + 1) + 4 * (1 + 2 + 4 + 8)
    assert 0 < summary["infeasible"] < summary["cases"]


def test_ctc_grid_size_guard():
    with pytest.raises(ctc.InstanceTooLargeError):
        checks.ctc_oracle_grid(20, 5)


def test_bias_before_batch_norm_row():
    row = checks.bias_before_bn_check()
    assert row["passed"] and row["max_abs_grad"] < 1e-10


def test_tiny_suite_passes_and_reports():
    seen = []
    rows = checks.gradcheck_suite("tiny", report=seen.append)
    assert rows == seen
    assert all(r["passed"] for r in rows)
    assert all(r["max_rel_error"] < checks.GRAD_TOLERANCE for r in rows if r["max_rel_error"] is not None)
