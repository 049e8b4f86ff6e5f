import numpy as np
import pandas as pd
import pytest

from diagengine.decision import NF, DecisionConfig
from diagengine.errors import MetricsError
from diagengine.metrics import (ScenarioResult, format_matrix, isolation_performance, reclassify,
                                scalar_metrics, sensitivity_matrix, with_baseline)
from diagengine.structural import FaultSignatureMatrix, isolability

FD, NC, OOR = "FaultDetected", "NoConclusion", "OutOfRange"

FSM = FaultSignatureMatrix(
    ("r1", "r2", "r3"),
    ("f1", "f2", "f3"),
    np.array([[1, 1, 0],
              [0, 1, 1],
              [1, 0, 1]], dtype=bool),
)


def _trace(decisions, r=None, sigma=None, u_epi=None):
    n = len(decisions)
    return pd.DataFrame({
        "t": np.arange(n, dtype=float),
        "r": np.zeros(n) if r is None else r,
        "sigma_star": np.ones(n) if sigma is None else sigma,
        "J": np.ones(n),
        "u_epi": np.zeros(n) if u_epi is None else u_epi,
        "decision": decisions,
    })


def _results():
    nominal = ScenarioResult("NF", NF, None, {
        "r1": _trace([NC, NC, NC, FD, NC, NC, NC, NC, NC, NC]),
        "r2": _trace([NC] * 10),
        "r3": _trace([NC] * 10),
    })
    faulty = ScenarioResult("f1", "f1", 5.0, {
        "r1": _trace([NC] * 5 + [FD] * 5),
        "r2": _trace([NC, FD] + [NC] * 8),
        "r3": _trace([NC] * 5 + [FD] * 4 + [OOR]),
    })
    return [nominal, faulty]


def test_sensitivity_counts_post_onset_only():
    sens = sensitivity_matrix(_results(), FSM.residuals)
    assert sens.values.loc["r1"].tolist() == [10.0, 100.0]
    assert sens.values.loc["r2"].tolist() == [0.0, 0.0]
    assert sens.values.loc["r3"].tolist() == [0.0, 80.0]
    assert sens.scenario_faults == {"NF": NF, "f1": "f1"}


def test_isolation_performance_rows():
    iso = isolation_performance(_results(), FSM).values
    assert list(iso.columns) == ["f1", "f2", "f3", NF]
    assert list(iso.index) == [NF, "f1"]
    assert iso.loc[NF].tolist() == [100.0, 100.0, 90.0, 90.0]
    assert iso.loc["f1"].tolist() == [100.0, 20.0, 0.0, 0.0]


def test_scalar_metrics():
    results = _results()
    sens = sensitivity_matrix(results, FSM.residuals)
    iso = isolation_performance(results, FSM)
    report = scalar_metrics(sens, FSM, iso, isolability(FSM), "test", "abc")
    assert report.S_FA == pytest.approx(2.5)
    assert report.S_MD == pytest.approx(10.0)
    assert report.p_FA == pytest.approx(10.0)
    assert report.p_MD == pytest.approx(0.0)
    assert report.p_D == pytest.approx(0.0)
    assert report.to_dict()["config_hash"] == "abc"


def test_p_d_counts_unisolable_pairs():
    fsm = FaultSignatureMatrix(("r1", "r2"), ("f1", "f2"), np.array([[1, 1], [0, 1]], dtype=bool))
    results = [
        ScenarioResult("NF", NF, None, {"r1": _trace([NC] * 4), "r2": _trace([NC] * 4)}),
        ScenarioResult("f1", "f1", 0.0, {"r1": _trace([FD, FD, FD, NC]), "r2": _trace([NC, NC, NC, FD])}),
        ScenarioResult("f2", "f2", 0.0, {"r1": _trace([FD, FD, NC, NC]), "r2": _trace([FD, FD, FD, NC])}),
    ]
    iso = isolation_performance(results, fsm)
    assert iso.values.loc["f1"].tolist() == [75.0, 100.0, 0.0]
    assert iso.values.loc["f2"].tolist() == [25.0, 100.0, 25.0]
    report = scalar_metrics(sensitivity_matrix(results, fsm.residuals), fsm, iso, isolability(fsm))
    # f1: (1 - 0) * (|0.75 - 1| + |1 - 1|), f2: (1 - 0.25) * |1 - 1|, over n_f^2 = 4
    assert report.p_D == pytest.approx(6.25)
    assert report.p_MD == pytest.approx(12.5)


def test_p_d_normalizes_by_every_fault_in_the_signature_matrix():
    fsm = FaultSignatureMatrix(("r1", "r2"), ("f1", "f2", "f3", "f4"),
                               np.array([[1, 1, 1, 0], [0, 1, 0, 1]], dtype=bool))
    results = [
        ScenarioResult("NF", NF, None, {"r1": _trace([NC] * 4), "r2": _trace([NC] * 4)}),
        ScenarioResult("f1", "f1", 0.0, {"r1": _trace([FD, FD, FD, NC]), "r2": _trace([NC, NC, NC, FD])}),
        ScenarioResult("f2", "f2", 0.0, {"r1": _trace([FD, FD, NC, NC]), "r2": _trace([FD, FD, FD, NC])}),
    ]
    iso = isolation_performance(results, fsm)
    assert list(iso.values.index) == [NF, "f1", "f2"]
    assert iso.values.loc["f1"].tolist() == [75.0, 100.0, 75.0, 25.0, 0.0]
    assert iso.values.loc["f2"].tolist() == [25.0, 100.0, 25.0, 50.0, 25.0]
    report = scalar_metrics(sensitivity_matrix(results, fsm.residuals), fsm, iso, isolability(fsm))
    # f3 and f4 have no scenario: f1 gives 1 * (0.25 + 0 + 0.25), f2 adds 0, over 4^2
    assert report.p_D == pytest.approx(3.125)
    assert report.p_MD == pytest.approx(12.5)


def test_metrics_need_both_kinds_of_scenarios():
    nominal_only = _results()[:1]
    sens = sensitivity_matrix(nominal_only, FSM.residuals)
    iso = isolation_performance(nominal_only, FSM)
    with pytest.raises(MetricsError, match="N1"):
        scalar_metrics(sens, FSM, iso, isolability(FSM))
    faulty_only = _results()[1:]
    sens = sensitivity_matrix(faulty_only, FSM.residuals)
    iso = isolation_performance(faulty_only, FSM)
    with pytest.raises(MetricsError, match="p_FA"):
        scalar_metrics(sens, FSM, iso, isolability(FSM))


def test_missing_trace_and_unknown_fault():
    results = _results()
    del results[0].traces["r3"]
    with pytest.raises(MetricsError, match="lacks traces"):
        sensitivity_matrix(results, FSM.residuals)
    stray = _results()
    stray[1].fault = "f9"
    with pytest.raises(MetricsError, match="outside the signature matrix"):
        isolation_performance(stray, FSM)


def test_reclassify_switches_components():
    r = np.array([0.5, 3.0, 0.5, 3.0])
    u_epi = np.array([0.0, 0.0, 2.0, 2.0])
    traces = {name: _trace([NC] * 4, r=r, u_epi=u_epi) for name in FSM.residuals}
    results = [ScenarioResult("NF", NF, None, traces)]
    full = {name: DecisionConfig(p_fa=0.01, epsilon=1.0, fixed_threshold=1.0) for name in FSM.residuals}
    plain = {name: DecisionConfig(p_fa=0.01, epsilon=1.0, use_ood=False, adaptive=False, fixed_threshold=0.4)
             for name in FSM.residuals}
    a = reclassify(results, full)[0].traces["r1"]
    b = reclassify(results, plain)[0].traces["r1"]
    assert a["decision"].tolist() == [NC, FD, OOR, OOR]
    assert b["decision"].tolist() == [FD, FD, FD, FD]
    assert np.allclose(b["J"], 0.4)
    # stored traces stay untouched
    assert results[0].traces["r1"]["decision"].tolist() == [NC] * 4


def test_baseline_delta_and_formatting():
    results = _results()
    sens = sensitivity_matrix(results, FSM.residuals)
    quiet = {name: DecisionConfig(use_ood=False, adaptive=False, fixed_threshold=10.0) for name in FSM.residuals}
    base = sensitivity_matrix(reclassify(results, quiet), FSM.residuals)
    sens = with_baseline(sens, base)
    assert sens.baseline_delta.loc["r1", "f1"] == pytest.approx(100.0)
    text = format_matrix(sens.values, sens.baseline_delta, "Sensitivity")
    assert text.splitlines()[0] == "Sensitivity"
    assert "100.0 (+100.0)" in text
