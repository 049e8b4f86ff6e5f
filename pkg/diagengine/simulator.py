"""
Diagnosis Engine — Simulation
===============================
Nominal and faulty datasets for the systems the engine is exercised on:

    three_tank   three tanks in series, additive valve/tank faults
    two_tank     pump-fed two-tank process with two flow sensors and the
                 ten-fault catalog (pump, sensors, leaks, clogs)
    cubic_toy    y = x^3 + noise, for uncertainty experiments

Integration is fixed-step RK4. Measurement noise is added at sample times
only, from `seed`; the excitation is drawn from `input_seed`, so two noise
seeds can share one excitation.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import CONFIG, PROFILES
from .data_loader import NOMINAL, TimeSeriesDataset
from .errors import ConfigError, SimulationError
from .logging_utils import setup_logger

logger = setup_logger(__name__)

FAULT_KINDS = ("additive", "multiplicative", "leakage", "clogging")
SHAPES = ("step", "ramp")

# allowed fault kinds per fault id
THREE_TANK_FAULTS = {f: ("additive",) for f in ("fV1", "fV2", "fV3", "fT1", "fT2", "fT3")}
TWO_TANK_FAULTS = {
    "Fa": ("multiplicative", "additive"),
    "Fh1": ("multiplicative", "additive"),
    "Fh2": ("multiplicative", "additive"),
    "Ff1": ("multiplicative", "additive"),
    "Ff2": ("multiplicative", "additive"),
    "Fl1": ("leakage",),
    "Fl2": ("leakage",),
    "Fl3": ("leakage",),
    "Fc1": ("clogging",),
    "Fc2": ("clogging",),
}


# =============================================================================
# CONFIGURATION TYPES
# =============================================================================

@dataclass
class SimConfig:
    """Integration, excitation and noise settings of one simulation run."""

    duration: float
    dt: float
    sample_rate: float
    params: dict
    noise: dict = field(default_factory=dict)
    seed: int = 0
    input_profile: str = "prbs"
    input_seed: int = 0
    input_level: float = 1.0
    input_amplitude: float = 0.5
    input_hold: float = 20.0
    initial_state: tuple = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("simulation.dt", "must be > 0")
        if not self.duration > 0:
            raise ConfigError("simulation.duration", "must be > 0")
        if not self.sample_rate > 0 or self.sample_rate * self.dt > 1 + 1e-12:
            raise ConfigError("simulation.sample_rate", "must be > 0 with sample_rate * dt <= 1")
        ratio = 1.0 / (self.sample_rate * self.dt)
        if abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError("simulation.sample_rate", "1 / sample_rate must be a whole number of dt steps")
        for name, value in self.params.items():
            if not value > 0:
                raise ConfigError(f"simulation.params.{name}", "physical constants must be > 0")
        for name, value in self.noise.items():
            if not value >= 0:
                raise ConfigError(f"simulation.noise.{name}", "noise std must be >= 0")
        if self.input_profile not in PROFILES:
            raise ConfigError("simulation.input_profile", f"must be one of {PROFILES}")

    @property
    def steps_per_sample(self):
        return int(round(1.0 / (self.sample_rate * self.dt)))

    @classmethod
    def from_config(cls, cfg, system, seed=None, input_seed=None):
        """SimConfig for `system` from an experiment config dict."""
        sim = dict(cfg["simulation"][system])
        base_seed = cfg["seed"] if seed is None else seed
        return cls(
            duration=float(sim["duration"]),
            dt=float(sim["dt"]),
            sample_rate=float(sim["sample_rate"]),
            params=dict(sim["params"]),
            noise=dict(sim.get("noise", {})),
            seed=int(base_seed),
            input_profile=sim.get("input_profile", "prbs"),
            input_seed=int(base_seed if input_seed is None else input_seed),
            input_level=float(sim.get("input_level", 1.0)),
            input_amplitude=float(sim.get("input_amplitude", 0.5)),
            input_hold=float(sim.get("input_hold", 20.0)),
        )


@dataclass
class FaultProfile:
    """
    A single fault: where (fault_id), how (kind), how much (magnitude),
    from when (onset), and whether it switches on at once or ramps in.
    """

    fault_id: str
    kind: str
    magnitude: float
    onset: float = 0.0
    shape: str = "step"
    ramp_duration: float = 0.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError("fault.kind", f"must be one of {FAULT_KINDS}")
        if self.shape not in SHAPES:
            raise ConfigError("fault.shape", f"must be one of {SHAPES}")
        if self.shape == "ramp" and not self.ramp_duration > 0:
            raise ConfigError("fault.ramp_duration", "ramp faults need ramp_duration > 0")
        if not self.onset >= 0:
            raise ConfigError("fault.onset", "must be >= 0")
        if not np.isfinite(self.magnitude):
            raise ConfigError("fault.magnitude", "must be finite")
        if self.kind == "multiplicative" and not self.magnitude > 0:
            raise ConfigError("fault.magnitude", "multiplicative factor must be > 0")
        if self.kind in ("leakage", "clogging") and not 0 <= self.magnitude < 1:
            raise ConfigError("fault.magnitude", f"{self.kind} fraction must be in [0, 1)")

    def activation(self, t):
        """0 before onset, 1 once fully developed."""
        if t < self.onset:
            return 0.0
        if self.shape == "step":
            return 1.0
        return min((t - self.onset) / self.ramp_duration, 1.0)

    def effect(self, t):
        """
        Instantaneous fault value at time t:
        additive -> added offset, multiplicative -> factor on the signal,
        leakage/clogging -> fraction of flow lost.
        """
        a = self.activation(t)
        if self.kind == "multiplicative":
            return 1.0 + a * (self.magnitude - 1.0)
        return a * self.magnitude

    def to_dict(self):
        return {"fault_id": self.fault_id, "kind": self.kind, "magnitude": self.magnitude,
                "onset": self.onset, "shape": self.shape, "ramp_duration": self.ramp_duration}


def catalog_fault(system, fault_id, severity="large", onset=0.0, catalog=None):
    """FaultProfile for a catalog fault at the given severity."""
    catalog = CONFIG["fault_catalog"] if catalog is None else catalog
    entries = catalog.get(system, {})
    if fault_id not in entries:
        raise ConfigError("fault_id", f"unknown {system} fault '{fault_id}'")
    entry = entries[fault_id]
    return FaultProfile(fault_id, entry["kind"], float(entry[severity]), float(onset))


class _FaultState:
    """Fault effects by id, neutral for every id except the active one."""

    def __init__(self, fault, catalog, duration):
        if fault is not None:
            if fault.onset > duration:
                raise ConfigError("fault.onset", f"onset {fault.onset} is after the end of the run")
            if fault.fault_id not in catalog:
                raise ConfigError("fault_id", f"unknown fault id '{fault.fault_id}'")
            if fault.kind not in catalog[fault.fault_id]:
                raise ConfigError("fault.kind",
                                  f"{fault.fault_id} does not support {fault.kind} faults")
        self.fault = fault

    def value(self, fault_id, t):
        if self.fault is None or self.fault.fault_id != fault_id:
            return None
        return self.fault.effect(t)

    def scale(self, fault_id, t, signal):
        """Apply a multiplicative or additive fault to a signal."""
        v = self.value(fault_id, t)
        if v is None:
            return signal
        return signal * v if self.fault.kind == "multiplicative" else signal + v

    def offset(self, fault_id, t):
        v = self.value(fault_id, t)
        return 0.0 if v is None else v

    def loss(self, fault_id, t):
        v = self.value(fault_id, t)
        return 0.0 if v is None else v


# =============================================================================
# EXCITATION
# =============================================================================

def input_signal(cfg):
    """
    Excitation as a function of time.

        constant  input_level
        steps     fixed step pattern around input_level, input_hold apart
        prbs      pseudo-random levels in input_level +- input_amplitude,
                  each held for input_hold seconds
        chirp     sine sweep from 0.005 Hz to 0.1 Hz over the run
    """
    level, amp, hold = cfg.input_level, cfg.input_amplitude, cfg.input_hold
    if cfg.input_profile == "constant":
        return lambda t: level
    if cfg.input_profile == "steps":
        pattern = np.array([0.0, 1.0, -1.0, 0.5, -0.5])
        return lambda t: level + amp * pattern[int(np.floor(t / hold + 1e-9)) % len(pattern)]
    if cfg.input_profile == "prbs":
        rng = np.random.default_rng(cfg.input_seed)
        n = int(np.ceil(cfg.duration / hold)) + 2
        levels = level + amp * rng.uniform(-1.0, 1.0, size=n)
        levels[0] = level
        return lambda t: levels[min(int(np.floor(t / hold + 1e-9)), n - 1)]
    f0, f1, T = 0.005, 0.1, cfg.duration
    return lambda t: level + amp * np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * T)))


# =============================================================================
# INTEGRATION
# =============================================================================

def _integrate(rhs, signals, x0, cfg):
    """
    Fixed-step RK4 from t = 0 to cfg.duration.

    Args:
        rhs: f(t, x) -> dx/dt
        signals: g(t, x) -> dict of every recorded signal at a sample time
        x0: initial state

    Returns:
        DataFrame of recorded signals with a leading `t` column
    """
    dt, spp = cfg.dt, cfg.steps_per_sample
    n_steps = int(round(cfg.duration / dt))
    x = np.asarray(x0, dtype=float)
    rows = []
    for k in range(n_steps + 1):
        t = k * dt
        if k % spp == 0:
            rows.append({"t": t, **signals(t, x)})
        if k == n_steps:
            break
        k1 = rhs(t, x)
        k2 = rhs(t + dt / 2, x + dt / 2 * k1)
        k3 = rhs(t + dt / 2, x + dt / 2 * k2)
        k4 = rhs(t + dt, x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at t={t + dt:.6g}", time=t + dt)
    return pd.DataFrame(rows)


def _add_noise(frame, channels, noise, seed):
    rng = np.random.default_rng(seed)
    noisy = frame[["t"] + list(channels)].copy()
    for ch in channels:
        std = float(noise.get(ch, 0.0))
        draws = rng.normal(0.0, 1.0, size=len(noisy))
        if std > 0:
            noisy[ch] = noisy[ch].to_numpy() + std * draws
    return noisy


def _dataset(frame, channels, truth_cols, cfg, fault, system):
    data = _add_noise(frame, channels, cfg.noise, cfg.seed)
    meta = {
        "system": system,
        "seed": cfg.seed,
        "input_seed": cfg.input_seed,
        "sample_rate": cfg.sample_rate,
        "fault": None if fault is None else fault.to_dict(),
    }
    label = NOMINAL if fault is None else fault.fault_id
    onset = None if fault is None else float(fault.onset)
    return TimeSeriesDataset(data, label, onset, meta, frame[list(truth_cols)].copy())


# =============================================================================
# THREE-TANK SYSTEM
# =============================================================================

def simulate_three_tank(cfg, fault=None):
    """
    Three tanks in series fed by inflow q0.

        q1 = (p1 - p2)/R_V1 + fV1      dp1 = (q0 - q1)/C_T1 + fT1
        q2 = (p2 - p3)/R_V2 + fV2      dp2 = (q1 - q2)/C_T2 + fT2
        q3 = p3/R_V3 + fV3             dp3 = (q2 - q3)/C_T3 + fT3

    Outputs q0 (commanded, noise-free), y1 = p1, y2 = q2, y3 = q0.
    The run starts at the equilibrium of the initial inflow unless
    cfg.initial_state gives (p1, p2, p3).
    """
    p = cfg.params
    R1, R2, R3 = p["R_V1"], p["R_V2"], p["R_V3"]
    C1, C2, C3 = p["C_T1"], p["C_T2"], p["C_T3"]
    faults = _FaultState(fault, THREE_TANK_FAULTS, cfg.duration)
    q0_of = input_signal(cfg)

    def flows(t, x):
        p1, p2, p3 = x
        q1 = (p1 - p2) / R1 + faults.offset("fV1", t)
        q2 = (p2 - p3) / R2 + faults.offset("fV2", t)
        q3 = p3 / R3 + faults.offset("fV3", t)
        return q1, q2, q3

    def rhs(t, x):
        q0 = q0_of(t)
        q1, q2, q3 = flows(t, x)
        return np.array([
            (q0 - q1) / C1 + faults.offset("fT1", t),
            (q1 - q2) / C2 + faults.offset("fT2", t),
            (q2 - q3) / C3 + faults.offset("fT3", t),
        ])

    def signals(t, x):
        q0 = q0_of(t)
        q1, q2, q3 = flows(t, x)
        dp1, dp2, dp3 = rhs(t, x)
        return {"q0": q0, "q1": q1, "q2": q2, "q3": q3,
                "p1": x[0], "p2": x[1], "p3": x[2],
                "dp1": dp1, "dp2": dp2, "dp3": dp3,
                "y1": x[0], "y2": q2, "y3": q0}

    if cfg.initial_state is not None:
        x0 = cfg.initial_state
    else:
        q0 = q0_of(0.0)
        p3 = R3 * q0
        p2 = p3 + R2 * q0
        x0 = (p2 + R1 * q0, p2, p3)
    frame = _integrate(rhs, signals, x0, cfg)
    truth = ("q0", "q1", "q2", "q3", "p1", "p2", "p3", "dp1", "dp2", "dp3")
    return _dataset(frame, ("q0", "y1", "y2", "y3"), truth, cfg, fault, "three_tank")


# =============================================================================
# TWO-TANK BENCHMARK
# =============================================================================

def simulate_two_tank(cfg, fault=None):
    """
    Pump-fed upper tank draining through a pipe into a lower tank.

    The excitation is a level setpoint r(t); a proportional controller on the
    true level sets the pump command u = clip(Kc (r - h1), 0, u_max).

        q_p   = k_p u                  (Fa scales the delivered flow)
        q12   = k1 h1 (1 - Fc1)        A1 dh1 = q_p - q12
        q_s3  = q12 (1 - Fl1)          flow seen by sensor 3
        q_in2 = q_s3 (1 - Fl2)         A2 dh2 = q_in2 - q_out
        q_out = k2 h2 (1 - Fc2)
        q_s4  = q_out (1 - Fl3)        flow seen by sensor 4

    Outputs u, y1 = h1, y2 = h2, y3 = q_s3, y4 = q_s4; sensor faults act on
    their own output only.
    """
    p = cfg.params
    A1, A2, k1, k2 = p["A1"], p["A2"], p["k1"], p["k2"]
    k_p, Kc, u_max = p["k_p"], p["Kc"], p["u_max"]
    faults = _FaultState(fault, TWO_TANK_FAULTS, cfg.duration)
    setpoint = input_signal(cfg)

    def command(t, h1):
        return float(np.clip(Kc * (setpoint(t) - h1), 0.0, u_max))

    def flows(t, x):
        h1, h2 = x
        u = command(t, h1)
        q_p = faults.scale("Fa", t, k_p * u)
        q12 = k1 * h1 * (1.0 - faults.loss("Fc1", t))
        q_s3 = q12 * (1.0 - faults.loss("Fl1", t))
        q_in2 = q_s3 * (1.0 - faults.loss("Fl2", t))
        q_out = k2 * h2 * (1.0 - faults.loss("Fc2", t))
        q_s4 = q_out * (1.0 - faults.loss("Fl3", t))
        return u, q_p, q12, q_s3, q_in2, q_out, q_s4

    def rhs(t, x):
        _, q_p, q12, _, q_in2, q_out, _ = flows(t, x)
        return np.array([(q_p - q12) / A1, (q_in2 - q_out) / A2])

    def signals(t, x):
        u, q_p, q12, q_s3, q_in2, q_out, q_s4 = flows(t, x)
        dh1, dh2 = rhs(t, x)
        return {"u": u, "q_p": q_p, "h1": x[0], "h2": x[1], "dh1": dh1, "dh2": dh2,
                "q12": q12, "q_s3": q_s3, "q_in2": q_in2, "q_out": q_out, "q_s4": q_s4,
                "y1": faults.scale("Fh1", t, x[0]),
                "y2": faults.scale("Fh2", t, x[1]),
                "y3": faults.scale("Ff1", t, q_s3),
                "y4": faults.scale("Ff2", t, q_s4)}

    if cfg.initial_state is not None:
        x0 = cfg.initial_state
    else:
        r0 = setpoint(0.0)
        h1 = k_p * Kc * r0 / (k1 + k_p * Kc)
        if Kc * (r0 - h1) > u_max:
            h1 = k_p * u_max / k1
        x0 = (max(h1, 0.0), max(k1 * h1 / k2, 0.0))
    frame = _integrate(rhs, signals, x0, cfg)
    truth = ("q_p", "h1", "h2", "dh1", "dh2", "q12", "q_s3", "q_in2", "q_out", "q_s4")
    return _dataset(frame, ("u", "y1", "y2", "y3", "y4"), truth, cfg, fault, "two_tank")


# =============================================================================
# CUBIC TOY PROBLEM
# =============================================================================

def make_cubic_toy(n_train, n_test, seed, noise_scale=0.1):
    """
    One-dimensional regression data y = x^3 + xi(x), std(xi) = noise_scale (1 + |x|).

    Training inputs are uniform on [-2, 2], test inputs on [-3, 3]. The
    sample index serves as time; truth holds the noise-free target and the
    noise std at each sample.

    Returns:
        (train, test) TimeSeriesDataset pair with channels x and y
    """
    if n_train <= 0 or n_test <= 0:
        raise ConfigError("cubic_toy.n_train", "sample counts must be > 0")
    rng = np.random.default_rng(seed)

    def draw(n, bound):
        x = rng.uniform(-bound, bound, size=n)
        std = noise_scale * (1.0 + np.abs(x))
        y = x ** 3 + std * rng.normal(0.0, 1.0, size=n)
        frame = pd.DataFrame({"t": np.arange(n, dtype=float), "x": x, "y": y})
        truth = pd.DataFrame({"y_clean": x ** 3, "noise_std": std})
        meta = {"system": "cubic_toy", "seed": seed, "sample_rate": 1.0, "fault": None}
        return TimeSeriesDataset(frame, NOMINAL, None, meta, truth)

    return draw(n_train, 2.0), draw(n_test, 3.0)


def simulate(system, cfg, fault=None):
    """Dispatch to the simulator of `system`."""
    if system == "three_tank":
        return simulate_three_tank(cfg, fault)
    if system == "two_tank":
        return simulate_two_tank(cfg, fault)
    raise ConfigError("system", f"no simulator for '{system}'")
