"""
Diagnosis Engine — Ensembles
==============================
M independently seeded members form a uniform Gaussian mixture. Its moments
split the total predictive variance into an aleatoric part (mean member
variance) and an epistemic part (spread of member means):

    mu*   = mean_m mu_m
    U_ale = mean_m sigma_m^2
    U_epi = mean_m (mu_m - mu*)^2
    var*  = U_ale + U_epi

U_epi is normalized per residual by a high quantile of its value on nominal
training data, so the out-of-distribution threshold is epsilon = 1.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .data_loader import atomic_write_json
from .errors import CheckpointError
from .logging_utils import setup_logger
from .pnn import Normalization, load_checkpoint, save_checkpoint, train_member

logger = setup_logger(__name__)

MIN_EPISTEMIC_SCALE = 1e-12


@dataclass
class UncertaintyBreakdown:
    mu_star: np.ndarray
    var_star: np.ndarray
    u_ale: np.ndarray
    u_epi: np.ndarray

    @property
    def sigma_star(self):
        return np.sqrt(self.var_star)


def aggregate(per_member):
    """
    Mixture moments of an ensemble.

    Args:
        per_member: list of (mu_m, sigma_m^2) pairs, scalars or equal-length arrays

    Returns:
        UncertaintyBreakdown
    """
    if len(per_member) == 0:
        raise ValueError("cannot aggregate an empty ensemble")
    mus = np.stack([np.asarray(mu, dtype=float) for mu, _ in per_member])
    variances = np.stack([np.asarray(var, dtype=float) for _, var in per_member])
    if np.any(variances < 0):
        raise ValueError("member variances must be >= 0")
    mu_star = mus.mean(axis=0)
    u_ale = variances.mean(axis=0)
    u_epi = ((mus - mu_star) ** 2).mean(axis=0)
    return UncertaintyBreakdown(mu_star, u_ale + u_epi, u_ale, u_epi)


def mixture_moment_check(per_member, n_samples, seed):
    """Sample mean and variance of the uniform mixture of N(mu_m, sigma_m^2),
    for scalar members."""
    rng = np.random.default_rng(seed)
    mus = np.array([float(mu) for mu, _ in per_member])
    stds = np.sqrt(np.array([float(var) for _, var in per_member]))
    comp = rng.integers(0, len(mus), size=n_samples)
    draws = mus[comp] + stds[comp] * rng.standard_normal(n_samples)
    return float(draws.mean()), float(draws.var())


def epistemic_scale(u_epi, quantile=0.99):
    """Quantile of raw epistemic variance over nominal data, floored above zero."""
    values = np.concatenate([np.ravel(np.asarray(u, dtype=float)) for u in u_epi]) if len(u_epi) else np.array([])
    if values.size == 0:
        raise ValueError("epistemic threshold needs non-empty nominal traces")
    scale = float(np.quantile(values, quantile, method="higher"))
    if scale < MIN_EPISTEMIC_SCALE:
        logger.warning(f"epistemic scale {scale:.3g} clamped to {MIN_EPISTEMIC_SCALE:g}")
        scale = MIN_EPISTEMIC_SCALE
    return scale


# =============================================================================
# ENSEMBLE PREDICTOR
# =============================================================================

class EnsemblePredictor:
    """Trained members sharing architecture and normalization."""

    def __init__(self, members, epsilon_scale=None):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        arch, norm = members[0].arch, members[0].norm
        for m in members[1:]:
            if m.arch != arch or m.norm != norm:
                raise ValueError("ensemble members must share architecture and normalization")
        self.members = list(members)
        self.epsilon_scale = epsilon_scale

    @property
    def arch(self):
        return self.members[0].arch

    def __len__(self):
        return len(self.members)

    def predict(self, dataset, horizon):
        """Per-member (mu, sigma) arrays in target units."""
        return [m.predict(dataset, horizon) for m in self.members]

    def breakdown(self, dataset, horizon):
        return aggregate([(mu, sigma ** 2) for mu, sigma in self.predict(dataset, horizon)])

    def epistemic_threshold(self, datasets, horizon, quantile=0.99):
        """Set and return the epistemic scale from nominal training datasets."""
        self.epsilon_scale = epistemic_scale([self.breakdown(d, horizon).u_epi for d in datasets], quantile)
        return self.epsilon_scale

    def normalized_epistemic(self, breakdown):
        if self.epsilon_scale is None:
            raise ValueError("epistemic scale not calibrated; call epistemic_threshold first")
        return breakdown.u_epi / self.epsilon_scale

    def uncertainty_frame(self, dataset, horizon):
        """Per-sample trace: t, r, mu_star, var_star, u_ale, u_epi_normalized."""
        b = self.breakdown(dataset, horizon)
        target = dataset.channel(self.arch.target_name)
        return pd.DataFrame({
            "t": dataset.t,
            "r": target - b.mu_star,
            "mu_star": b.mu_star,
            "var_star": b.var_star,
            "u_ale": b.u_ale,
            "u_epi_normalized": self.normalized_epistemic(b),
        })

    def save(self, directory, extra=None):
        directory = Path(directory)
        for i, member in enumerate(self.members):
            save_checkpoint(member, directory / f"member_{i:02d}.npz", extra)
        atomic_write_json(directory / "ensemble.json", {
            "members": len(self.members),
            "epsilon_scale": self.epsilon_scale,
            "target": self.arch.target_name,
            "inputs": list(self.arch.input_names),
            **(extra or {}),
        })

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        index = directory / "ensemble.json"
        if not index.exists():
            raise CheckpointError(f"no ensemble checkpoint in {directory}")
        meta = json.loads(index.read_text())
        members = [load_checkpoint(directory / f"member_{i:02d}.npz")[0] for i in range(meta["members"])]
        return cls(members, meta.get("epsilon_scale"))


def _train_job(args):
    datasets, arch, cfg, norm, validation = args
    return train_member(datasets, arch, cfg, norm=norm, validation=validation)


def train_ensemble(datasets, arch, cfg, members, seed, jobs=1, validation=None):
    """
    Train `members` networks on the same nominal data; member m uses seed + m.

    Returns:
        (EnsemblePredictor, list of per-member loss logs)
    """
    norm = Normalization.fit(datasets, arch)
    tasks = [(datasets, arch, replace(cfg, seed=seed + m), norm, validation) for m in range(members)]
    if jobs > 1 and members > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, tasks))
    else:
        results = [_train_job(task) for task in tasks]
    for m, (_, log) in enumerate(results):
        if len(log):
            logger.info(f"{arch.target_name} member {m}: final loss {log['loss'].iloc[-1]:.5f}")
    return EnsemblePredictor([model for model, _ in results]), [log for _, log in results]
