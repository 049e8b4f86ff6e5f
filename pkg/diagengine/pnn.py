"""
Diagnosis Engine — Probabilistic Recurrent Network
====================================================
One ensemble member: a single-layer LSTM over the residual's input channels
with two affine heads, a mean head and a standard-deviation head
(softplus plus a floor, so sigma never drops below sigma_floor).

The target channel is fed back autoregressively: at step t the network sees
the exogenous inputs at t and its own mean prediction from t - 1. A rollout
is cut into chunks of `horizon` samples; each chunk starts from a zero
recurrent state and is seeded with the measured target just before it.

Training follows a two-phase schedule:
    1. tau_w epochs of MSE on the cell + mean head, horizon growing from
       H_init by dH per epoch up to H (std head frozen)
    2. tau epochs of Gaussian NLL on the std head at horizon H
       (cell + mean head frozen)

Gradients are analytic (backpropagation through time, including the
feedback path). Everything works in standardized units; the stored
normalization maps predictions back to signal units.
"""

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import CheckpointError, ConfigError, IngestError, TrainingDivergedError
from .logging_utils import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_VERSION = 1
CELLS = ("lstm", "linear")


# =============================================================================
# CONFIGURATION TYPES
# =============================================================================

@dataclass(frozen=True)
class PnnArchitecture:
    input_names: tuple
    target_name: str
    hidden_dim: int = 16
    cell: str = "lstm"
    sigma_floor: float = 1e-3
    feedback: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_names", tuple(self.input_names))
        if self.hidden_dim < 1:
            raise ConfigError("ensemble.arch.hidden_dim", "must be >= 1")
        if self.cell not in CELLS:
            raise ConfigError("ensemble.arch.cell", f"must be one of {CELLS}")
        if not self.sigma_floor > 0:
            raise ConfigError("ensemble.arch.sigma_floor", "must be > 0")
        if self.target_name in self.input_names:
            raise ConfigError("ensemble.arch", f"target {self.target_name} is also an input")

    @property
    def input_dim(self):
        return len(self.input_names) + (1 if self.feedback else 0)

    @property
    def feature_dim(self):
        """Width of the state the heads read: hidden_dim, or the raw input
        width for the linear cell."""
        return self.hidden_dim if self.cell == "lstm" else self.input_dim


@dataclass(frozen=True)
class TrainConfig:
    H: int = 50
    H_init: int = 5
    dH: int = 5
    tau_w: int = 40
    tau: int = 20
    batch_size: int = 32
    learning_rate: float = 5e-3
    weight_decay: float = 1e-5
    seed: int = 0
    tbptt: int = None
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 1 <= self.H_init <= self.H:
            raise ConfigError("ensemble.train.H_init", "must satisfy 1 <= H_init <= H")
        if self.dH < 1:
            raise ConfigError("ensemble.train.dH", "must be >= 1")
        if self.tau_w < 0 or self.tau < 0:
            raise ConfigError("ensemble.train.tau_w", "epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("ensemble.train.batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("ensemble.train.learning_rate", "must be > 0")

    @classmethod
    def from_config(cls, train_cfg, seed):
        return cls(seed=int(seed), **{k: v for k, v in train_cfg.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Normalization:
    """Per-channel training statistics; std below 1e-12 is replaced by 1."""

    input_mean: tuple
    input_std: tuple
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, datasets, arch):
        inputs = np.vstack([_channels(d, arch.input_names) for d in datasets]) if arch.input_names else None
        target = np.concatenate([_channels(d, (arch.target_name,))[:, 0] for d in datasets])
        if inputs is not None:
            mean, std = inputs.mean(axis=0), inputs.std(axis=0)
        else:
            mean, std = np.zeros(0), np.ones(0)
        std = np.where(std < 1e-12, 1.0, std)
        t_std = float(target.std())
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std),
                   float(target.mean()), t_std if t_std >= 1e-12 else 1.0)

    def standardize(self, dataset, arch):
        x = _channels(dataset, arch.input_names)
        x = (x - np.asarray(self.input_mean)) / np.asarray(self.input_std)
        y = (_channels(dataset, (arch.target_name,))[:, 0] - self.target_mean) / self.target_std
        return x, y


def _channels(dataset, names):
    missing = [n for n in names if n not in dataset.channels]
    if missing:
        raise IngestError(f"dataset '{dataset.label}' is missing channels {missing}")
    return dataset.matrix(names)


# =============================================================================
# PARAMETERS
# =============================================================================

MU_KEYS = ("W_x", "W_h", "b", "w_mu", "b_mu")
SIGMA_KEYS = ("w_sigma", "b_sigma")


class ModelParams:
    """Named parameter arrays, split into the mean partition (cell + mean head)
    and the std partition (std head)."""

    def __init__(self, arrays):
        self.arrays = {k: np.asarray(v, dtype=float) for k, v in arrays.items()}

    @property
    def theta_mu(self):
        return {k: v for k, v in self.arrays.items() if k in MU_KEYS}

    @property
    def theta_sigma(self):
        return {k: v for k, v in self.arrays.items() if k in SIGMA_KEYS}

    def __getitem__(self, key):
        return self.arrays[key]

    def keys(self):
        return self.arrays.keys()

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def count(self):
        return int(sum(v.size for v in self.arrays.values()))

    @classmethod
    def initialize(cls, arch, rng):
        F, D, H = arch.feature_dim, arch.input_dim, arch.hidden_dim
        bound = 1.0 / np.sqrt(F)
        arrays = {}
        if arch.cell == "lstm":
            arrays["W_x"] = rng.uniform(-bound, bound, size=(D, 4 * H))
            arrays["W_h"] = rng.uniform(-bound, bound, size=(H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate
            arrays["b"] = b
        arrays["w_mu"] = rng.uniform(-bound, bound, size=F)
        arrays["b_mu"] = np.zeros(1)
        arrays["w_sigma"] = rng.uniform(-0.1 * bound, 0.1 * bound, size=F)
        # softplus(b_sigma) + floor = 1 at start
        arrays["b_sigma"] = np.array([np.log(np.expm1(1.0 - arch.sigma_floor))])
        return cls(arrays)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


# =============================================================================
# NETWORK
# =============================================================================

class ProbabilisticNetwork:
    """A trained (or freshly initialized) member with its normalization."""

    def __init__(self, arch, params, norm):
        self.arch = arch
        self.params = params
        self.norm = norm

    @classmethod
    def initialize(cls, arch, norm, seed):
        init_seed, _ = np.random.SeedSequence(seed).spawn(2)
        return cls(arch, ModelParams.initialize(arch, np.random.default_rng(init_seed)), norm)

    # -------------------------------------------------------------------------
    # Forward / backward on standardized windows
    # -------------------------------------------------------------------------

    def forward(self, X, seed, params=None):
        """
        Autoregressive pass over a batch of windows.

        Args:
            X: (N, T, n_inputs) standardized exogenous inputs
            seed: (N,) standardized target value preceding each window
            params: Optional ModelParams (default: the model's own)

        Returns:
            (mu, sigma, cache) with mu, sigma of shape (N, T)
        """
        p = self.params if params is None else params
        arch = self.arch
        N, T = X.shape[0], X.shape[1]
        H = arch.hidden_dim
        lstm = arch.cell == "lstm"
        h = np.zeros((N, H))
        c = np.zeros((N, H))
        fb = np.asarray(seed, dtype=float)
        mu = np.empty((N, T))
        s = np.empty((N, T))
        steps = []
        for t in range(T):
            x = np.concatenate([X[:, t, :], fb[:, None]], axis=1) if arch.feedback else X[:, t, :]
            if lstm:
                z = x @ p["W_x"] + h @ p["W_h"] + p["b"]
                i = _sigmoid(z[:, :H])
                f = _sigmoid(z[:, H:2 * H])
                o = _sigmoid(z[:, 2 * H:3 * H])
                g = np.tanh(z[:, 3 * H:])
                c_prev, h_prev = c, h
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                steps.append((x, h_prev, c_prev, i, f, o, g, tc, h))
                feat = h
            else:
                steps.append((x,))
                feat = x
            mu[:, t] = feat @ p["w_mu"] + p["b_mu"][0]
            s[:, t] = feat @ p["w_sigma"] + p["b_sigma"][0]
            fb = mu[:, t]
        sigma = _softplus(s) + arch.sigma_floor
        return mu, sigma, (steps, s)

    def backward(self, cache, dmu, dsigma, params=None, tbptt=None):
        """
        Gradients of a loss given dL/dmu and dL/dsigma of shape (N, T).

        The mean at t - 1 is an input at t, so its gradient collects both the
        loss term and the feedback term. With tbptt, recurrent and feedback
        gradients are cut every tbptt steps.
        """
        p = self.params if params is None else params
        arch = self.arch
        steps, s = cache
        H = arch.hidden_dim
        lstm = arch.cell == "lstm"
        N, T = dmu.shape
        grads = {k: np.zeros_like(v) for k, v in p.arrays.items()}
        ds = dsigma * _sigmoid(s)
        dh_next = np.zeros((N, H))
        dc_next = np.zeros((N, H))
        dfb_next = np.zeros(N)

        for t in range(T - 1, -1, -1):
            dmu_t = dmu[:, t] + dfb_next
            feat = steps[t][-1] if lstm else steps[t][0]
            grads["w_mu"] += feat.T @ dmu_t
            grads["b_mu"][0] += dmu_t.sum()
            grads["w_sigma"] += feat.T @ ds[:, t]
            grads["b_sigma"][0] += ds[:, t].sum()
            dfeat = np.outer(dmu_t, p["w_mu"]) + np.outer(ds[:, t], p["w_sigma"])

            if lstm:
                x, h_prev, c_prev, i, f, o, g, tc, _ = steps[t]
                dh = dfeat + dh_next
                do = dh * tc
                dc = dh * o * (1.0 - tc * tc) + dc_next
                dz = np.concatenate([
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    do * o * (1.0 - o),
                    dc * i * (1.0 - g * g),
                ], axis=1)
                grads["W_x"] += x.T @ dz
                grads["W_h"] += h_prev.T @ dz
                grads["b"] += dz.sum(axis=0)
                dx = dz @ p["W_x"].T
                dh_next = dz @ p["W_h"].T
                dc_next = dc * f
            else:
                dx = dfeat
            dfb_next = dx[:, -1] if arch.feedback else np.zeros(N)

            if tbptt and t % tbptt == 0:
                dh_next = np.zeros((N, H))
                dc_next = np.zeros((N, H))
                dfb_next = np.zeros(N)
        return grads

    def loss_and_grad(self, batch, loss, params=None, tbptt=None):
        """Loss ("mse" or "nll") of a window batch and its parameter gradients."""
        X, y, seed = batch
        mu, sigma, cache = self.forward(X, seed, params)
        n = y.size
        err = y - mu
        if loss == "mse":
            value = float(np.mean(err * err))
            dmu = -2.0 * err / n
            dsigma = np.zeros_like(sigma)
        else:
            value = float(np.mean(err * err / (2.0 * sigma * sigma) + np.log(sigma)))
            dmu = -err / (sigma * sigma) / n
            dsigma = (1.0 / sigma - err * err / sigma ** 3) / n
        return value, self.backward(cache, dmu, dsigma, params, tbptt)

    # -------------------------------------------------------------------------
    # Rollout on datasets
    # -------------------------------------------------------------------------

    def rollout_standardized(self, x, y, horizon):
        """
        Chunked autoregressive rollout over one standardized sequence.

        Each chunk starts from a zero recurrent state and is seeded with the
        measured target at the sample before it. The first chunk has no such
        sample and is seeded with y[0], so the t = 0 measurement of the
        target is an input of the rollout and mu[0] is predicted from it.
        """
        n = len(y)
        horizon = max(1, min(int(horizon), n))
        mu = np.empty(n)
        sigma = np.empty(n)
        n_full = n // horizon
        spans = []
        if n_full:
            spans.append((0, n_full, horizon))
        if n_full * horizon < n:
            spans.append((n_full * horizon, 1, n - n_full * horizon))
        for start, count, length in spans:
            stop = start + count * length
            X = x[start:stop].reshape(count, length, x.shape[1])
            starts = start + length * np.arange(count)
            seed = y[np.maximum(starts - 1, 0)]
            m, s, _ = self.forward(X, seed)
            mu[start:stop] = m.reshape(-1)
            sigma[start:stop] = s.reshape(-1)
        return mu, sigma

    def predict(self, dataset, horizon):
        """(mu, sigma) arrays in target units."""
        x, y = self.norm.standardize(dataset, self.arch)
        mu, sigma = self.rollout_standardized(x, y, horizon)
        return mu * self.norm.target_std + self.norm.target_mean, sigma * self.norm.target_std

    # -------------------------------------------------------------------------
    # Persistence
    # -------------------------------------------------------------------------

    def header(self, extra=None):
        payload = {
            "version": CHECKPOINT_VERSION,
            "arch": asdict(self.arch),
            "normalization": asdict(self.norm),
        }
        payload.update(extra or {})
        return payload


def predict_rollout(model, dataset, horizon):
    """
    Autoregressive prediction over a dataset. The dataset must carry the
    target channel: its measurement at the sample before each chunk, and at
    t = 0 for the first chunk, seeds the feedback input.

    Returns:
        DataFrame with columns t, mu, sigma (target units)
    """
    mu, sigma = model.predict(dataset, horizon)
    return pd.DataFrame({"t": dataset.t, "mu": mu, "sigma": sigma})


# =============================================================================
# LOSSES
# =============================================================================

def loss_mse(targets, means):
    targets, means = np.asarray(targets, dtype=float), np.asarray(means, dtype=float)
    if targets.size == 0:
        raise ValueError("loss_mse of an empty sequence")
    if targets.shape != means.shape:
        raise ValueError("targets and means differ in shape")
    return float(np.mean((targets - means) ** 2))


def loss_nll(targets, means, stds):
    """Mean of (y - mu)^2 / (2 sigma^2) + log(sigma), constant term dropped."""
    targets = np.asarray(targets, dtype=float)
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    if targets.size == 0:
        raise ValueError("loss_nll of an empty sequence")
    if np.any(stds <= 0):
        raise ValueError("loss_nll needs strictly positive stds")
    return float(np.mean((targets - means) ** 2 / (2.0 * stds ** 2) + np.log(stds)))


# =============================================================================
# TRAINING
# =============================================================================

class Adam:
    """Adam with L2 weight decay added to the gradient, over a subset of keys."""

    def __init__(self, keys, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = tuple(keys)
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        for k in self.keys:
            g = grads[k] + self.weight_decay * params.arrays[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params.arrays[k] = params.arrays[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _clip(grads, keys, max_norm):
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: v * scale for k, v in grads.items()}
    return grads


def make_windows(sequences, horizon, rng=None):
    """
    Cut standardized sequences into windows of `horizon` samples.

    Args:
        sequences: list of (x, y) standardized arrays
        horizon: window length (capped at each sequence's length)
        rng: Generator for a random start offset per sequence (None = 0)

    Returns:
        list of (X, y, seed) window groups, one per distinct window length.
        seed is the measured target just before the window; a window at the
        start of a sequence is seeded with its own first measurement y[0].
    """
    groups = {}
    for x, y in sequences:
        n = len(y)
        h = min(horizon, n)
        offset = int(rng.integers(0, h)) if rng is not None and n - h > 0 else 0
        offset = min(offset, n - h)
        for start in range(offset, n - h + 1, h):
            X_w, y_w, s_w = groups.setdefault(h, ([], [], []))
            X_w.append(x[start:start + h])
            y_w.append(y[start:start + h])
            s_w.append(y[start - 1] if start > 0 else y[0])
    return [(np.stack(X), np.stack(Y), np.asarray(S)) for X, Y, S in groups.values()]


def _batches(windows, batch_size, rng):
    out = []
    for X, Y, S in windows:
        order = rng.permutation(len(Y))
        for k in range(0, len(order), batch_size):
            idx = order[k:k + batch_size]
            out.append((X[idx], Y[idx], S[idx]))
    rng.shuffle(out)
    return out


def _validation_loss(model, sequences, horizon, loss):
    total, count = 0.0, 0
    for x, y in sequences:
        mu, sigma = model.rollout_standardized(x, y, horizon)
        value = loss_mse(y, mu) if loss == "mse" else loss_nll(y, mu, sigma)
        total += value * len(y)
        count += len(y)
    return total / count if count else float("nan")


def train_member(datasets, arch, cfg, norm=None, validation=None):
    """
    Train one member on nominal datasets with the two-phase schedule.

    Args:
        datasets: list of nominal TimeSeriesDataset
        arch: PnnArchitecture
        cfg: TrainConfig (its seed drives initialization and shuffling)
        norm: Optional Normalization (default: fitted on `datasets`)
        validation: Optional list of datasets for per-epoch validation loss

    Returns:
        (ProbabilisticNetwork, loss_log DataFrame with columns
        epoch, phase, horizon, loss, val_loss)

    Raises:
        TrainingDivergedError: a loss became non-finite
    """
    if not datasets:
        raise ValueError("train_member needs at least one dataset")
    norm = Normalization.fit(datasets, arch) if norm is None else norm
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    model = ProbabilisticNetwork(arch, ModelParams.initialize(arch, np.random.default_rng(init_seed)), norm)
    rng = np.random.default_rng(shuffle_seed)
    sequences = [norm.standardize(d, arch) for d in datasets]
    val_sequences = [norm.standardize(d, arch) for d in (validation or [])]
    mu_keys = [k for k in MU_KEYS if k in model.params.keys()]

    log = []
    schedule = []
    horizon = cfg.H_init
    for _ in range(cfg.tau_w):
        schedule.append(("mse", horizon, mu_keys))
        horizon = min(horizon + cfg.dH, cfg.H)
    schedule += [("nll", cfg.H, list(SIGMA_KEYS))] * cfg.tau

    optimizer, phase = None, None
    for epoch, (loss_name, h, keys) in enumerate(schedule, start=1):
        if loss_name != phase:
            optimizer = Adam(keys, cfg.learning_rate, cfg.weight_decay)
            phase = loss_name
        total, count = 0.0, 0
        for batch in _batches(make_windows(sequences, h, rng), cfg.batch_size, rng):
            value, grads = model.loss_and_grad(batch, loss_name, tbptt=cfg.tbptt)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite {loss_name} loss at epoch {epoch}", epoch)
            optimizer.step(model.params, _clip(grads, keys, cfg.grad_clip))
            total += value * batch[1].size
            count += batch[1].size
        epoch_loss = total / count
        val_loss = _validation_loss(model, val_sequences, h, loss_name) if val_sequences else float("nan")
        if val_sequences and not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite {loss_name} validation loss at epoch {epoch}", epoch)
        log.append({"epoch": epoch, "phase": loss_name, "horizon": h, "loss": epoch_loss, "val_loss": val_loss})
        logger.debug(f"epoch {epoch:3d} {loss_name} H={h:3d} loss={epoch_loss:.5f} val={val_loss:.5f}")

    loss_log = pd.DataFrame(log, columns=["epoch", "phase", "horizon", "loss", "val_loss"])
    return model, loss_log


# =============================================================================
# GRADIENT CHECK
# =============================================================================

def grad_check(model, batch, losses=("mse", "nll"), n_params=50, step=1e-5, seed=0):
    """
    Max relative error between analytic and central-difference gradients.

    Relative error per parameter is |a - n| / max(|a|, |n|, 1e-3), taken over
    a random sample of at least n_params parameters (all of them if fewer)
    for each loss.
    """
    rng = np.random.default_rng(seed)
    base = model.params
    index = [(k, i) for k in base.keys() for i in range(base[k].size)]
    if len(index) > n_params:
        picks = rng.choice(len(index), size=n_params, replace=False)
        index = [index[j] for j in sorted(picks)]

    worst = 0.0
    for loss in losses:
        _, grads = model.loss_and_grad(batch, loss, params=base)
        for key, flat in index:
            analytic = grads[key].reshape(-1)[flat]
            plus, minus = base.copy(), base.copy()
            plus.arrays[key].reshape(-1)[flat] += step
            minus.arrays[key].reshape(-1)[flat] -= step
            f_plus, _ = model.loss_and_grad(batch, loss, params=plus)
            f_minus, _ = model.loss_and_grad(batch, loss, params=minus)
            numeric = (f_plus - f_minus) / (2 * step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, rel)
    return worst


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model, path, extra=None):
    """Write parameters and a JSON header (version, arch, normalization, extra)
    to an .npz file, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param__{k}": v for k, v in model.params.arrays.items()}
    arrays["header"] = np.array(json.dumps(model.header(extra), sort_keys=True))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Load a member written by save_checkpoint; returns (model, header)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            arrays = {k[len("param__"):]: data[k] for k in data.files if k.startswith("param__")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    arch = PnnArchitecture(**header["arch"])
    norm = Normalization(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in header["normalization"].items()})
    return ProbabilisticNetwork(arch, ModelParams(arrays), norm), header
