import pytest

from mddradar import verify
from mddradar.numerics import ContractError


@pytest.mark.parametrize("seed", [1, 2])
def test_lemma_suite_passes(seed):
    res = verify.lemma_suite(1000, seed)
    assert res.passed, res.counterexample
    # four chain checks per trial plus the dataset-level check every tenth trial
    assert res.checks == 4 * 1000 + 100


def test_flipped_ramp_is_caught():
    res = verify.lemma_suite(200, 1, phi=verify.flipped_ramp)
    assert not res.passed
    case = res.counterexample
    assert {"k", "f", "y", "rho", "property"} <= set(case)


def test_identities_suite_passes():
    res = verify.identities_suite(100, 3)
    assert res.passed, res.counterexample


def test_gradients_suite_passes():
    res = verify.gradients_suite(1, 5)
    assert res.passed, res.counterexample


def test_suite_line_format():
    res = verify.lemma_suite(10, 0)
    assert res.line().startswith("PASS lemma: ")


def test_run_suites_rejects_zero_trials():
    with pytest.raises(ContractError):
        verify.run_suites("lemma", 0, 1)


def test_run_suites_all():
    names = [r.name for r in verify.run_suites("all", 20, 0)]
    assert names == list(verify.SUITES)
