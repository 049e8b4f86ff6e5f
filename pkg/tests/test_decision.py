from itertools import combinations

import numpy as np
import pytest

from diagengine.decision import (NF, Decision, DecisionConfig, build_decision_trace, classify,
                                 classify_trace, diagnosis_records, fixed_threshold, inv_norm_cdf,
                                 minimal_diagnoses, minimal_hitting_sets, norm_cdf,
                                 single_fault_diagnoses, single_fault_matrix)
from diagengine.errors import DecisionError
from diagengine.structural import FaultSignatureMatrix

FSM = FaultSignatureMatrix(
    ("r1", "r2", "r3"),
    ("f1", "f2", "f3"),
    np.array([[1, 1, 0],
              [0, 1, 1],
              [1, 0, 1]], dtype=bool),
)


def brute_force_hitting_sets(conflicts, universe):
    hits = [frozenset(c) for k in range(len(universe) + 1) for c in combinations(sorted(universe), k)
            if all(set(c) & conflict for conflict in conflicts)]
    return {h for h in hits if not any(other < h for other in hits)}


# =============================================================================
# NORMAL QUANTILE
# =============================================================================

def test_inverse_normal_known_values():
    assert inv_norm_cdf(0.5) == pytest.approx(0.0, abs=1e-12)
    assert inv_norm_cdf(0.975) == pytest.approx(1.959963984540054, abs=1e-9)
    assert inv_norm_cdf(0.995) == pytest.approx(2.5758293035489004, abs=1e-9)


@pytest.mark.parametrize("p", [1e-10, 1e-4, 0.02, 0.3, 0.7, 0.98, 1 - 1e-6])
def test_inverse_normal_inverts_cdf(p):
    assert abs(norm_cdf(inv_norm_cdf(p)) - p) < 1e-9


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, float("nan")])
def test_inverse_normal_domain(p):
    with pytest.raises(DecisionError):
        inv_norm_cdf(p)


@pytest.mark.parametrize("p", [np.float32(0.3), np.float64(0.975), np.int64(0) + 0.5])
def test_inverse_normal_accepts_numpy_scalars(p):
    assert inv_norm_cdf(p) == pytest.approx(inv_norm_cdf(float(p)), abs=1e-12)


@pytest.mark.parametrize("p", [True, "0.5", np.array([0.5]), None])
def test_inverse_normal_rejects_non_scalars(p):
    with pytest.raises(DecisionError):
        inv_norm_cdf(p)


# =============================================================================
# CLASSIFICATION
# =============================================================================

def test_classify_three_way():
    cfg = DecisionConfig(p_fa=0.05, epsilon=1.0)
    assert cfg.alpha == pytest.approx(1.96, abs=1e-3)
    assert classify(0.5, 1.0, 0.2, cfg) is Decision.NO_CONCLUSION
    assert classify(2.5, 1.0, 0.2, cfg) is Decision.FAULT_DETECTED
    # rejection wins even for a large residual
    assert classify(2.5, 1.0, 1.5, cfg) is Decision.OUT_OF_RANGE


def test_classify_without_ood_and_fixed_threshold():
    cfg = DecisionConfig(p_fa=0.05, epsilon=1.0, use_ood=False, adaptive=False, fixed_threshold=0.3)
    assert classify(0.5, 10.0, 5.0, cfg) is Decision.FAULT_DETECTED
    assert classify(0.2, 0.01, 5.0, cfg) is Decision.NO_CONCLUSION


def test_classify_rejects_bad_input():
    cfg = DecisionConfig()
    with pytest.raises(DecisionError):
        classify(float("nan"), 1.0, 0.0, cfg)
    with pytest.raises(DecisionError, match="sigma"):
        classify(0.0, 0.0, 0.0, cfg)
    with pytest.raises(DecisionError, match="fixed threshold"):
        classify(0.0, 1.0, 0.0, DecisionConfig(adaptive=False))
    with pytest.raises(DecisionError):
        DecisionConfig(p_fa=1.5)


def test_trace_matches_pointwise_classify():
    rng = np.random.default_rng(0)
    r = rng.normal(0, 2, 200)
    sigma = rng.uniform(0.5, 1.5, 200)
    u_epi = rng.uniform(0, 2, 200)
    cfg = DecisionConfig(p_fa=0.01, epsilon=1.0)
    trace = build_decision_trace(np.arange(200.0), r, sigma, u_epi, cfg)
    assert list(trace.columns) == ["t", "r", "sigma_star", "J", "u_epi", "decision"]
    expected = [classify(a, b, c, cfg).value for a, b, c in zip(r, sigma, u_epi)]
    assert trace["decision"].tolist() == expected
    assert np.allclose(trace["J"], cfg.alpha * sigma)


def test_nominal_false_alarm_rate_near_design():
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0.5, 2.0, 200_000)
    r = sigma * rng.standard_normal(sigma.size)
    cfg = DecisionConfig(p_fa=0.01, epsilon=1.0, use_ood=False)
    out = classify_trace(r, sigma, np.zeros_like(r), cfg)
    assert np.mean(out == Decision.FAULT_DETECTED.value) == pytest.approx(0.01, abs=0.002)


def _random_trace(seed, n=2000):
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0.1, 3.0, n)
    return rng.normal(0, 2, n) * sigma, sigma, rng.uniform(0, 2, n)


@pytest.mark.parametrize("scale", [2.0 ** -10, 0.5, 4.0, 2.0 ** 12])
def test_decisions_invariant_to_joint_scaling(scale):
    r, sigma, u_epi = _random_trace(11)
    cfg = DecisionConfig(p_fa=0.01, epsilon=1.0)
    base = classify_trace(r, sigma, u_epi, cfg)
    assert classify_trace(scale * r, scale * sigma, u_epi, cfg).tolist() == base.tolist()


@pytest.mark.parametrize("cfg", [DecisionConfig(p_fa=0.01, epsilon=1.0),
                                 DecisionConfig(p_fa=0.01, use_ood=False),
                                 DecisionConfig(adaptive=False, fixed_threshold=1.5)])
def test_larger_residual_keeps_alarm(cfg):
    r, sigma, u_epi = _random_trace(12)
    grown = np.sign(r) * (np.abs(r) + np.random.default_rng(13).uniform(0, 2, r.size))
    before = classify_trace(r, sigma, u_epi, cfg)
    after = classify_trace(grown, sigma, u_epi, cfg)
    fd = Decision.FAULT_DETECTED.value
    assert np.all(after[before == fd] == fd)
    oor = Decision.OUT_OF_RANGE.value
    assert np.array_equal(before == oor, after == oor)


def test_larger_false_alarm_rate_never_removes_alarms():
    r, sigma, u_epi = _random_trace(14)
    fd = Decision.FAULT_DETECTED.value
    alarms = [classify_trace(r, sigma, u_epi, DecisionConfig(p_fa=p)) == fd
              for p in (0.001, 0.01, 0.05, 0.2, 0.5)]
    for tight, loose in zip(alarms, alarms[1:]):
        assert np.all(loose[tight])
    assert alarms[-1].sum() > alarms[0].sum()


def test_fixed_threshold_quantile():
    r = np.concatenate([np.linspace(-1, 1, 99), [5.0]])
    assert fixed_threshold(r, 0.01) == 5.0
    assert fixed_threshold(r, 0.5) <= 1.0
    with pytest.raises(DecisionError):
        fixed_threshold([], 0.01)


# =============================================================================
# DIAGNOSIS
# =============================================================================

def test_no_alarm_gives_nominal():
    assert minimal_diagnoses([0, 0, 0], [0, 0, 0], FSM) == {frozenset({NF})}
    assert single_fault_diagnoses([0, 0, 0], [0, 0, 0], FSM) == {"f1", "f2", "f3", NF}


def test_single_alarm():
    assert minimal_diagnoses([1, 0, 0], [0, 0, 0], FSM) == {frozenset({"f1"}), frozenset({"f2"})}


def test_two_alarms_single_fault():
    assert minimal_diagnoses([1, 1, 0], [0, 0, 0], FSM) == {frozenset({"f2"}), frozenset({"f1", "f3"})}
    assert single_fault_diagnoses([1, 1, 0], [0, 0, 0], FSM) == {"f2"}


def test_out_of_range_residual_contributes_nothing():
    assert minimal_diagnoses([1, 1, 0], [0, 1, 0], FSM) == minimal_diagnoses([1, 0, 0], [0, 0, 0], FSM)
    assert minimal_diagnoses([1, 0, 0], [1, 0, 0], FSM) == {frozenset({NF})}


def test_all_alarms():
    diagnoses = minimal_diagnoses([1, 1, 1], [0, 0, 0], FSM)
    assert diagnoses == {frozenset({"f1", "f2"}), frozenset({"f1", "f3"}), frozenset({"f2", "f3"})}
    assert single_fault_diagnoses([1, 1, 1], [0, 0, 0], FSM) == frozenset()


def test_hitting_sets_match_brute_force():
    rng = np.random.default_rng(7)
    universe = [f"f{i}" for i in range(7)]
    for _ in range(40):
        conflicts = [frozenset(rng.choice(universe, size=rng.integers(1, 4), replace=False))
                     for _ in range(rng.integers(1, 6))]
        assert set(minimal_hitting_sets(conflicts)) == brute_force_hitting_sets(conflicts, universe)


def test_single_fault_matrix_agrees_with_per_sample():
    rng = np.random.default_rng(2)
    alarms = rng.random((50, 3)) < 0.4
    ood = rng.random((50, 3)) < 0.2
    matrix = single_fault_matrix(alarms, ood, FSM)
    for k in range(50):
        expected = single_fault_diagnoses(alarms[k], ood[k], FSM)
        row = {f for f, on in zip(FSM.faults + (NF,), matrix[k]) if on}
        assert row == set(expected)


@pytest.mark.parametrize("seed", range(30))
def test_single_fault_matrix_agrees_with_minimal_diagnoses(seed):
    rng = np.random.default_rng(seed)
    n_r, n_f = int(rng.integers(2, 7)), int(rng.integers(2, 8))
    fsm = FaultSignatureMatrix(tuple(f"r{i}" for i in range(n_r)), tuple(f"f{j}" for j in range(n_f)),
                               rng.random((n_r, n_f)) < 0.5)
    seeing = fsm.matrix.any(axis=1)
    alarms = (rng.random((40, n_r)) < 0.4) & seeing
    ood = rng.random((40, n_r)) < 0.2
    matrix = single_fault_matrix(alarms, ood, fsm)
    for k in range(40):
        diagnoses = minimal_diagnoses(alarms[k], ood[k], fsm)
        # a single fault hitting every conflict is always a minimal diagnosis
        expected = {f for d in diagnoses if len(d) == 1 for f in d}
        if expected == {NF}:
            expected |= set(fsm.faults)
        row = {f for f, on in zip(fsm.faults + (NF,), matrix[k]) if on}
        assert row == expected


def test_alarm_of_blind_residual_rejected():
    fsm = FaultSignatureMatrix(("r1",), ("f1",), np.array([[0]], dtype=bool))
    with pytest.raises(DecisionError):
        minimal_diagnoses([1], [0], fsm)
    with pytest.raises(DecisionError):
        single_fault_matrix(np.array([[True]]), np.array([[False]]), fsm)


def test_diagnosis_records_are_json_ready():
    records = diagnosis_records([0.0, 0.5], np.array([[0, 0, 0], [1, 1, 0]], dtype=bool),
                                np.zeros((2, 3), dtype=bool), FSM)
    assert records[0] == {"t": 0.0, "diagnoses": [["NF"]]}
    assert records[1]["diagnoses"] == [["f1", "f3"], ["f2"]]
