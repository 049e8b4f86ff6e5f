"""
Diagnosis Engine — Metrics
============================
Residual-level and diagnosis-level performance over a set of evaluated
scenarios.

    sensitivity matrix       s_ij = % of samples where residual i alarms in
                             scenario j (OutOfRange is not an alarm)
    isolation performance    p_ij = % of samples of true mode i where f_j is a
                             single-fault diagnosis (last column NF)
    scalar metrics           S_FA, S_MD, p_FA, p_MD, p_D, all in percent

Faulty scenarios count post-onset samples only; nominal scenarios count
every sample. The nominal scenario is a sensitivity column with no
expected alarms.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .decision import NF, Decision, classify_trace, single_fault_matrix
from .errors import MetricsError


@dataclass
class ScenarioResult:
    """Decision traces of every residual for one evaluated scenario."""

    name: str
    fault: str
    onset: float = None
    traces: dict = field(default_factory=dict)

    def mask(self):
        t = next(iter(self.traces.values()))["t"].to_numpy()
        if self.fault == NF or self.onset is None:
            return np.ones(len(t), dtype=bool)
        return t >= self.onset

    def decisions(self, residuals):
        """(n_samples, n_residuals) decision strings over the evaluation mask."""
        mask = self.mask()
        return np.column_stack([self.traces[r]["decision"].to_numpy()[mask] for r in residuals])


@dataclass
class SensitivityMatrix:
    values: pd.DataFrame
    scenario_faults: dict
    baseline_delta: pd.DataFrame = None


@dataclass
class IsolationPerformanceMatrix:
    values: pd.DataFrame
    baseline_delta: pd.DataFrame = None


@dataclass
class MetricsReport:
    S_FA: float
    S_MD: float
    p_FA: float
    p_MD: float
    p_D: float
    label: str = ""
    config_hash: str = ""

    def to_dict(self):
        return {"S_FA": self.S_FA, "S_MD": self.S_MD, "p_FA": self.p_FA, "p_MD": self.p_MD,
                "p_D": self.p_D, "label": self.label, "config_hash": self.config_hash}


def _check_residuals(results, residuals):
    for res in results:
        if res.fault is None:
            raise MetricsError(f"scenario {res.name} has no true-fault label")
        missing = [r for r in residuals if r not in res.traces]
        if missing:
            raise MetricsError(f"scenario {res.name} lacks traces for {missing}")
        if not res.mask().any():
            raise MetricsError(f"scenario {res.name} has no samples to evaluate")


# =============================================================================
# MATRICES
# =============================================================================

def sensitivity_matrix(results, residuals):
    """
    Alarm percentage per residual (rows) and scenario (columns).

    Args:
        results: list of ScenarioResult
        residuals: residual names, in signature-matrix row order
    """
    _check_residuals(results, residuals)
    columns = {}
    for res in results:
        d = res.decisions(residuals)
        columns[res.name] = 100.0 * (d == Decision.FAULT_DETECTED.value).mean(axis=0)
    values = pd.DataFrame(columns, index=list(residuals))
    return SensitivityMatrix(values, {res.name: res.fault for res in results})


def isolation_performance(results, fsm):
    """
    Single-fault diagnosis percentages per true mode.

    Rows are the true modes present in `results` (NF first, then faults in
    signature-matrix order); columns are the faults followed by NF. Scenarios
    sharing a true fault are pooled.
    """
    _check_residuals(results, fsm.residuals)
    pooled = {}
    for res in results:
        d = res.decisions(fsm.residuals)
        alarms = d == Decision.FAULT_DETECTED.value
        ood = d == Decision.OUT_OF_RANGE.value
        pooled.setdefault(res.fault, []).append(single_fault_matrix(alarms, ood, fsm))
    order = [NF] + list(fsm.faults)
    unknown = [f for f in pooled if f not in order]
    if unknown:
        raise MetricsError(f"scenarios labelled with faults outside the signature matrix: {unknown}")
    rows = {mode: 100.0 * np.vstack(pooled[mode]).mean(axis=0) for mode in order if mode in pooled}
    values = pd.DataFrame.from_dict(rows, orient="index", columns=list(fsm.faults) + [NF])
    return IsolationPerformanceMatrix(values)


# =============================================================================
# SCALAR METRICS
# =============================================================================

def scalar_metrics(sens, fsm, iso_perf, isolability, label="", config_hash=""):
    """
    S_FA  mean alarm % over (residual, scenario) cells with no expected alarm
    S_MD  100 - mean alarm % over cells with an expected alarm
    p_FA  100 - P(NF in D | NF)
    p_MD  mean over faults of P(NF in D | f_i)
    p_D   (1/n_f^2) sum_i P(NF not in D | f_i) sum_{j: I_ij = 1} |P(f_j in D | f_i) - I_ij|

    n_f counts every fault of the signature matrix; faults without a
    scenario add nothing to the sum.

    Raises:
        MetricsError: no cell with T = 0 (N0) or T = 1 (N1), or a mode missing
    """
    T = pd.DataFrame(np.asarray(fsm.matrix, dtype=bool), index=list(fsm.residuals), columns=list(fsm.faults))
    s = sens.values.loc[list(fsm.residuals)]
    expected = np.zeros(s.shape, dtype=bool)
    for j, scenario in enumerate(s.columns):
        fault = sens.scenario_faults[scenario]
        if fault != NF:
            if fault not in T.columns:
                raise MetricsError(f"scenario {scenario}: fault {fault} not in the signature matrix")
            expected[:, j] = T[fault].to_numpy()
    n0, n1 = int((~expected).sum()), int(expected.sum())
    if n0 == 0:
        raise MetricsError("S_FA undefined: N0 = 0 (no residual/scenario pair with T = 0)")
    if n1 == 0:
        raise MetricsError("S_MD undefined: N1 = 0 (no residual/scenario pair with T = 1)")
    vals = s.to_numpy()
    S_FA = float(vals[~expected].sum() / n0)
    S_MD = float(100.0 - vals[expected].sum() / n1)

    p = iso_perf.values
    if NF not in p.index:
        raise MetricsError("p_FA undefined: no nominal scenario")
    faults = [f for f in fsm.faults if f in p.index]
    if not faults:
        raise MetricsError("p_MD undefined: no faulty scenario")
    p_FA = float(100.0 - p.loc[NF, NF])
    p_MD = float(np.mean([p.loc[f, NF] for f in faults]))

    I = isolability.to_frame().astype(bool)
    n_f = len(fsm.faults)
    total = 0.0
    for fi in faults:
        detected = 1.0 - p.loc[fi, NF] / 100.0
        err = sum(abs(p.loc[fi, fj] / 100.0 - 1.0) for fj in fsm.faults if I.loc[fi, fj])
        total += detected * err
    p_D = float(100.0 * total / n_f ** 2)
    return MetricsReport(S_FA, S_MD, p_FA, p_MD, p_D, label, config_hash)


# =============================================================================
# RECLASSIFICATION / BASELINES
# =============================================================================

def reclassify(results, configs):
    """
    Re-run the decisions of stored traces under other decision configs.

    Args:
        results: list of ScenarioResult whose traces carry r, sigma_star, u_epi
        configs: {residual name: DecisionConfig}

    Returns:
        list of new ScenarioResult
    """
    out = []
    for res in results:
        traces = {}
        for name, trace in res.traces.items():
            cfg = configs[name]
            new = trace.copy()
            if cfg.adaptive:
                new["J"] = cfg.alpha * new["sigma_star"].to_numpy()
            else:
                new["J"] = cfg.fixed_threshold
            new["decision"] = classify_trace(new["r"], new["sigma_star"], new["u_epi"], cfg)
            traces[name] = new
        out.append(replace(res, traces=traces))
    return out


def with_baseline(matrix, baseline):
    """Attach value - baseline as the delta of a sensitivity or isolation matrix."""
    delta = matrix.values - baseline.values.loc[matrix.values.index, matrix.values.columns]
    return replace(matrix, baseline_delta=delta)


def format_matrix(values, delta=None, title=None, precision=1):
    """Aligned text table; cells read 'value (delta)' when a delta is given."""
    cells = {}
    for r in values.index:
        for c in values.columns:
            text = f"{values.loc[r, c]:.{precision}f}"
            if delta is not None:
                text += f" ({delta.loc[r, c]:+.{precision}f})"
            cells[(r, c)] = text
    row_w = max([len(str(r)) for r in values.index] + [4])
    col_w = {c: max([len(str(c))] + [len(cells[(r, c)]) for r in values.index]) for c in values.columns}
    lines = []
    if title:
        lines += [title, "=" * len(title)]
    lines.append(" " * row_w + "  " + "  ".join(f"{str(c):>{col_w[c]}}" for c in values.columns))
    for r in values.index:
        lines.append(f"{str(r):<{row_w}}  " + "  ".join(f"{cells[(r, c)]:>{col_w[c]}}" for c in values.columns))
    return "\n".join(lines) + "\n"
