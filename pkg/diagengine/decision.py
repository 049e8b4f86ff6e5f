"""
Diagnosis Engine — Decisions
==============================
Per-sample three-way residual evaluation and consistency-based diagnosis.

    u_epi > epsilon              -> OutOfRange    (evidence rejected)
    |r| > J = alpha * sigma*     -> FaultDetected
    otherwise                    -> NoConclusion

alpha = Phi^-1(1 - p_fa / 2) turns the predictive std into a two-sided test
at false-alarm rate p_fa. Alarming residuals yield conflicts (the faults
they are sensitive to); diagnoses are the minimal hitting sets of the
conflicts, or {NF} when nothing alarms.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from .errors import DecisionError

NF = "NF"

# Acklam's rational approximation, central and tail regions
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


class Decision(str, Enum):
    OUT_OF_RANGE = "OutOfRange"
    NO_CONCLUSION = "NoConclusion"
    FAULT_DETECTED = "FaultDetected"


# =============================================================================
# NORMAL DISTRIBUTION
# =============================================================================

def norm_cdf(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _acklam(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def inv_norm_cdf(p):
    """
    Standard normal quantile, |Phi(z) - p| < 1e-9 on (0, 1).

    Rational approximation followed by one Halley step on the erfc-based CDF.
    """
    if not (np.isscalar(p) and isinstance(p, (int, float, np.number)) and not isinstance(p, (bool, np.bool_))):
        raise DecisionError(f"inv_norm_cdf needs a real scalar, got {p!r}")
    p = float(p)
    if not (math.isfinite(p) and 0.0 < p < 1.0):
        raise DecisionError(f"inv_norm_cdf needs 0 < p < 1, got {p}")
    z = _acklam(p)
    e = norm_cdf(z) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(z * z / 2.0)
    return z - u / (1.0 + z * u / 2.0)


# =============================================================================
# CLASSIFICATION
# =============================================================================

@dataclass(frozen=True)
class DecisionConfig:
    """
    p_fa sets the adaptive threshold multiplier; epsilon bounds normalized
    epistemic variance. use_ood / adaptive switch the two components off for
    ablations; without the adaptive threshold, fixed_threshold is used.
    """

    p_fa: float = 0.01
    epsilon: float = 1.0
    use_ood: bool = True
    adaptive: bool = True
    fixed_threshold: float = None

    def __post_init__(self):
        if not 0.0 < self.p_fa < 1.0:
            raise DecisionError(f"p_fa must be in (0, 1), got {self.p_fa}")
        if not self.epsilon > 0:
            raise DecisionError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def alpha(self):
        return inv_norm_cdf(1.0 - self.p_fa / 2.0)


def classify(r, sigma_star, u_epi, cfg):
    """Decision for one sample."""
    if not all(math.isfinite(v) for v in (r, sigma_star, u_epi)):
        raise DecisionError(f"non-finite decision input r={r}, sigma*={sigma_star}, u_epi={u_epi}")
    if cfg.use_ood and u_epi > cfg.epsilon:
        return Decision.OUT_OF_RANGE
    return Decision.FAULT_DETECTED if abs(r) > _threshold(sigma_star, cfg) else Decision.NO_CONCLUSION


def _threshold(sigma_star, cfg):
    if cfg.adaptive:
        if np.any(np.asarray(sigma_star) <= 0):
            raise DecisionError("adaptive threshold needs sigma* > 0")
        return cfg.alpha * sigma_star
    if cfg.fixed_threshold is None:
        raise DecisionError("fixed threshold not set; compute it with fixed_threshold()")
    return cfg.fixed_threshold * np.ones_like(np.asarray(sigma_star, dtype=float))


def classify_trace(r, sigma_star, u_epi, cfg):
    """Vectorized classify over a residual trace; returns decision strings."""
    r = np.asarray(r, dtype=float)
    sigma_star = np.asarray(sigma_star, dtype=float)
    u_epi = np.asarray(u_epi, dtype=float)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(sigma_star)) and np.all(np.isfinite(u_epi))):
        raise DecisionError("non-finite values in residual trace")
    J = _threshold(sigma_star, cfg)
    out = np.where(np.abs(r) > J, Decision.FAULT_DETECTED.value, Decision.NO_CONCLUSION.value).astype(object)
    if cfg.use_ood:
        out[u_epi > cfg.epsilon] = Decision.OUT_OF_RANGE.value
    return out


def build_decision_trace(t, r, sigma_star, u_epi, cfg):
    """DataFrame with columns t, r, sigma_star, J, u_epi, decision."""
    sigma_star = np.asarray(sigma_star, dtype=float)
    return pd.DataFrame({
        "t": np.asarray(t, dtype=float),
        "r": np.asarray(r, dtype=float),
        "sigma_star": sigma_star,
        "J": _threshold(sigma_star, cfg),
        "u_epi": np.asarray(u_epi, dtype=float),
        "decision": classify_trace(r, sigma_star, u_epi, cfg),
    })


def fixed_threshold(training_residuals, p_fa):
    """(1 - p_fa) empirical quantile of |r| over nominal training residuals."""
    r = np.abs(np.asarray(training_residuals, dtype=float)).ravel()
    if r.size == 0:
        raise DecisionError("fixed_threshold needs a non-empty residual trace")
    return float(np.quantile(r, 1.0 - p_fa, method="higher"))


# =============================================================================
# DIAGNOSIS
# =============================================================================

def _conflicts(alarms, ood, fsm):
    alarms = np.asarray(alarms, dtype=bool)
    ood = np.asarray(ood, dtype=bool)
    if alarms.shape != (len(fsm.residuals),) or ood.shape != alarms.shape:
        raise DecisionError("alarm/ood vectors must match the signature matrix rows")
    conflicts = []
    for i in np.flatnonzero(alarms & ~ood):
        conflict = frozenset(f for f, s in zip(fsm.faults, fsm.matrix[i]) if s)
        if not conflict:
            raise DecisionError(f"residual {fsm.residuals[i]} alarms but is sensitive to no fault")
        conflicts.append(conflict)
    return conflicts


def minimal_hitting_sets(conflicts):
    """All minimal sets intersecting every conflict (incremental, with
    subset pruning after each conflict)."""
    hitting = {frozenset()}
    for conflict in sorted(set(conflicts), key=lambda c: (len(c), sorted(c))):
        grown = set()
        for h in hitting:
            if h & conflict:
                grown.add(h)
            else:
                grown.update(h | {f} for f in conflict)
        hitting = {h for h in grown if not any(other < h for other in grown)}
    return frozenset(hitting)


def minimal_diagnoses(alarms, ood, fsm):
    """
    Minimal diagnoses of one sample.

    Each alarming residual that is not out of range contributes the set of
    faults it is sensitive to; OutOfRange residuals contribute nothing.

    Returns:
        frozenset of frozensets of fault ids; {{NF}} when nothing alarms
    """
    conflicts = _conflicts(alarms, ood, fsm)
    if not conflicts:
        return frozenset({frozenset({NF})})
    return minimal_hitting_sets(conflicts)


def single_fault_diagnoses(alarms, ood, fsm):
    """
    Single faults consistent with one sample: f_j is a diagnosis iff every
    alarming, in-range residual is sensitive to f_j. Without conflicts every
    fault and NF are consistent.
    """
    conflicts = _conflicts(alarms, ood, fsm)
    if not conflicts:
        return frozenset(fsm.faults) | {NF}
    return frozenset(f for f in fsm.faults if all(f in c for c in conflicts))


def single_fault_matrix(alarms, ood, fsm):
    """
    single_fault_diagnoses for many samples at once.

    Args:
        alarms, ood: (n_samples, n_residuals) boolean arrays

    Returns:
        (n_samples, n_faults + 1) boolean array; last column is NF
    """
    active = np.asarray(alarms, dtype=bool) & ~np.asarray(ood, dtype=bool)
    T = np.asarray(fsm.matrix, dtype=bool)
    empty_rows = ~T.any(axis=1)
    if np.any(active[:, empty_rows]):
        bad = fsm.residuals[int(np.flatnonzero(empty_rows & active.any(axis=0))[0])]
        raise DecisionError(f"residual {bad} alarms but is sensitive to no fault")
    # f_j inconsistent if some active residual is blind to it
    inconsistent = (active.astype(int) @ (~T).astype(int)) > 0
    nf = ~active.any(axis=1)
    return np.column_stack([~inconsistent, nf])


def diagnosis_records(t, alarms, ood, fsm):
    """JSON-ready per-sample minimal diagnoses."""
    records = []
    for k, tk in enumerate(np.asarray(t, dtype=float)):
        ds = minimal_diagnoses(alarms[k], ood[k], fsm)
        records.append({"t": float(tk), "diagnoses": sorted(sorted(d) for d in ds)})
    return records
