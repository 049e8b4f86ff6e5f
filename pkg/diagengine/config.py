"""
Diagnosis Engine — Configuration
==================================
All tunable parameters in one place.

An experiment file is a JSON document whose keys are deep-merged over
CONFIG, so it only needs the values it changes. Environment variables
override nothing: (config, seed) fully determines every output.
"""

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

CONFIG = {
    # -------------------------------------------------------------------------
    # EXPERIMENT
    # -------------------------------------------------------------------------
    # system: three_tank | two_tank | cubic_toy | external_csv
    # seed: master seed; noise, initialization and shuffling derive from it
    # model_file: structural model text file (None = bundled model of `system`)
    "system": "two_tank",
    "seed": 0,
    "output_dir": "runs/two_tank",
    "model_file": None,

    # -------------------------------------------------------------------------
    # SIMULATION
    # -------------------------------------------------------------------------
    # dt is the RK4 step, sample_rate the logging rate; 1/sample_rate must be
    # a whole number of dt steps. Noise std is per sensor channel, roughly 1%
    # of the channel's signal scale. input_profile: prbs | steps | chirp |
    # constant. prbs holds each pseudo-random level for input_hold seconds.
    "simulation": {
        "three_tank": {
            "duration": 300.0,
            "dt": 0.02,
            "sample_rate": 5.0,
            "params": {"R_V1": 1.0, "R_V2": 1.0, "R_V3": 1.0,
                       "C_T1": 1.0, "C_T2": 1.0, "C_T3": 1.0},
            "noise": {"y1": 0.03, "y2": 0.01, "y3": 0.01},
            "input_profile": "prbs",
            "input_level": 1.0,
            "input_amplitude": 0.5,
            "input_hold": 20.0,
        },
        "two_tank": {
            "duration": 300.0,
            "dt": 0.02,
            "sample_rate": 5.0,
            # A_i tank areas, k_i outlet coefficients (q = k*h), k_p pump gain,
            # Kc level controller gain, u_max pump command saturation
            "params": {"A1": 1.0, "A2": 1.0, "k1": 1.0, "k2": 1.0,
                       "k_p": 1.0, "Kc": 2.0, "u_max": 4.0},
            "noise": {"y1": 0.01, "y2": 0.01, "y3": 0.01, "y4": 0.01},
            "input_profile": "prbs",
            "input_level": 1.2,
            "input_amplitude": 0.6,
            "input_hold": 15.0,
        },
    },

    # -------------------------------------------------------------------------
    # CUBIC TOY
    # -------------------------------------------------------------------------
    # y = x^3 + xi(x), std(xi) = noise_scale * (1 + |x|)
    "cubic_toy": {
        "n_train": 2000,
        "n_test": 2000,
        "noise_scale": 0.1,
    },

    # -------------------------------------------------------------------------
    # FAULT CATALOG
    # -------------------------------------------------------------------------
    # Magnitudes per severity. multiplicative: factor applied to the signal
    # (0.9 = reads 10% low). leakage: fraction of the local flow lost.
    # clogging: fraction by which the outlet coefficient shrinks.
    # additive: value added to the equation (three-tank equations e1..e6).
    "fault_catalog": {
        "two_tank": {
            "Fa":  {"kind": "multiplicative", "small": 0.95, "medium": 0.9, "large": 0.8},
            "Fh1": {"kind": "multiplicative", "small": 0.95, "medium": 0.9, "large": 0.8},
            "Fh2": {"kind": "multiplicative", "small": 0.95, "medium": 0.9, "large": 0.8},
            "Ff1": {"kind": "multiplicative", "small": 0.95, "medium": 0.9, "large": 0.8},
            "Ff2": {"kind": "multiplicative", "small": 0.95, "medium": 0.9, "large": 0.8},
            "Fl1": {"kind": "leakage", "small": 0.05, "medium": 0.1, "large": 0.2},
            "Fl2": {"kind": "leakage", "small": 0.05, "medium": 0.1, "large": 0.2},
            "Fl3": {"kind": "leakage", "small": 0.05, "medium": 0.1, "large": 0.2},
            "Fc1": {"kind": "clogging", "small": 0.05, "medium": 0.1, "large": 0.2},
            "Fc2": {"kind": "clogging", "small": 0.05, "medium": 0.1, "large": 0.2},
        },
        "three_tank": {
            "fV1": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
            "fV2": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
            "fV3": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
            "fT1": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
            "fT2": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
            "fT3": {"kind": "additive", "small": 0.05, "medium": 0.1, "large": 0.2},
        },
    },

    # -------------------------------------------------------------------------
    # SCENARIOS
    # -------------------------------------------------------------------------
    # "auto" = one scenario per catalog fault at `severity`, plus nominal.
    # Otherwise a list of {"name", "fault_id", "kind", "magnitude", "onset",
    # "shape", "ramp_duration"}; the nominal test scenario is always added.
    # nominal_runs: independent fault-free runs (different excitation) used
    # for training; the first 1 - validation_fraction of each is training data.
    "scenarios": "auto",
    "severity": "large",
    "fault_onset": 100.0,
    "nominal_runs": 4,
    "validation_fraction": 0.2,

    # -------------------------------------------------------------------------
    # RESIDUALS
    # -------------------------------------------------------------------------
    # "auto" = MSO enumeration + test selection (residual_budget caps the
    # number of tests). Otherwise a list of {"mso": [...], "residual_equation"}.
    "residuals": "auto",
    "residual_budget": None,

    # -------------------------------------------------------------------------
    # ENSEMBLE + TRAINING SCHEDULE
    # -------------------------------------------------------------------------
    # H: full horizon, H_init: first warm-up horizon, dH: horizon increment
    # per warm-up epoch, tau_w: MSE warm-up epochs, tau: NLL epochs.
    # sigma_floor is in standardized target units. tbptt: truncation length
    # for backpropagation through time (None = full sequence). grad_clip: global
    # gradient-norm cap per step (None = no clipping).
    "ensemble": {
        "members": 5,
        "arch": {
            "hidden_dim": 16,
            "cell": "lstm",
            "sigma_floor": 1e-3,
        },
        "train": {
            "H": 50,
            "H_init": 5,
            "dH": 5,
            "tau_w": 40,
            "tau": 20,
            "batch_size": 32,
            "learning_rate": 5e-3,
            "weight_decay": 1e-5,
            "tbptt": None,
            "grad_clip": 5.0,
        },
    },

    # -------------------------------------------------------------------------
    # DECISION
    # -------------------------------------------------------------------------
    # p_fa: design false-alarm rate per sample -> alpha = Phi^-1(1 - p_fa/2).
    # epsilon: OOD threshold on normalized epistemic variance.
    # ood_quantile: training quantile of raw U_epi that maps to epsilon = 1.
    "decision": {
        "p_fa": 0.01,
        "epsilon": 1.0,
        "ood_quantile": 0.99,
    },

    # -------------------------------------------------------------------------
    # EVALUATION
    # -------------------------------------------------------------------------
    # horizon: rollout chunk length at evaluation (None = training H).
    "evaluation": {
        "horizon": None,
    },

    # -------------------------------------------------------------------------
    # ABLATION
    # -------------------------------------------------------------------------
    # Components of the decision logic used by `evaluate`; `ablate` always
    # runs all four combinations.
    "ablation": {
        "ood": True,
        "adaptive_j": True,
    },

    # -------------------------------------------------------------------------
    # EXTERNAL DATA (system = external_csv)
    # -------------------------------------------------------------------------
    # train / test: lists of CSV paths (or lists of paths merged into one
    # dataset). channels: required channel names. sample_rate: target rate
    # in Hz; sources at other rates are linearly interpolated onto it.
    "external": {
        "train": [],
        "test": [],
        "channels": [],
        "sample_rate": None,
    },
}

SYSTEMS = ("three_tank", "two_tank", "cubic_toy", "external_csv")
PROFILES = ("prbs", "steps", "chirp", "constant")
SEVERITIES = ("small", "medium", "large")


def deep_merge(base, override):
    """Return a copy of `base` with `override` merged in, recursing into dicts."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None, overrides=None):
    """
    Build a validated experiment config.

    Args:
        path: Optional JSON file merged over CONFIG
        overrides: Optional dict merged last (CLI flags such as --seed, --out)

    Returns:
        dict with the same layout as CONFIG
    """
    cfg = copy.deepcopy(CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("<file>", f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {path}: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
        cfg = deep_merge(cfg, loaded)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def config_hash(cfg):
    """First 12 hex chars of the SHA-256 of the canonical JSON form.
    output_dir is left out, so a rerun elsewhere hashes the same."""
    content = {k: v for k, v in cfg.items() if k != "output_dir"}
    canonical = json.dumps(content, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _check(condition, path, message):
    if not condition:
        raise ConfigError(path, message)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_sim(sim, path):
    for key in ("duration", "dt", "sample_rate"):
        _check(_is_number(sim.get(key)) and sim[key] > 0, f"{path}.{key}", "must be a positive number")
    _check(sim["sample_rate"] * sim["dt"] <= 1, f"{path}.sample_rate", "sample_rate * dt must be <= 1")
    for name, value in sim.get("params", {}).items():
        _check(_is_number(value) and value > 0, f"{path}.params.{name}", "physical constants must be > 0")
    for name, value in sim.get("noise", {}).items():
        _check(_is_number(value) and value >= 0, f"{path}.noise.{name}", "noise std must be >= 0")
    _check(sim.get("input_profile") in PROFILES, f"{path}.input_profile", f"must be one of {PROFILES}")


def validate_config(cfg):
    """Raise ConfigError naming the first offending field path."""
    _check(cfg.get("system") in SYSTEMS, "system", f"must be one of {SYSTEMS}")
    _check(isinstance(cfg.get("seed"), int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    _check(isinstance(cfg.get("output_dir"), str) and cfg["output_dir"], "output_dir", "must be a path")

    for system, sim in cfg["simulation"].items():
        _check_sim(sim, f"simulation.{system}")

    toy = cfg["cubic_toy"]
    for key in ("n_train", "n_test"):
        _check(isinstance(toy.get(key), int) and toy[key] > 0, f"cubic_toy.{key}", "must be a positive integer")
    _check(_is_number(toy.get("noise_scale")) and toy["noise_scale"] >= 0, "cubic_toy.noise_scale", "must be >= 0")

    _check(cfg.get("severity") in SEVERITIES, "severity", f"must be one of {SEVERITIES}")
    _check(_is_number(cfg.get("fault_onset")) and cfg["fault_onset"] >= 0, "fault_onset", "must be >= 0")
    _check(isinstance(cfg.get("nominal_runs"), int) and cfg["nominal_runs"] >= 1, "nominal_runs", "must be >= 1")
    vf = cfg.get("validation_fraction")
    _check(_is_number(vf) and 0 <= vf < 1, "validation_fraction", "must be in [0, 1)")

    scenarios = cfg.get("scenarios")
    if scenarios != "auto":
        _check(isinstance(scenarios, list), "scenarios", 'must be "auto" or a list')
        names = set()
        for i, sc in enumerate(scenarios):
            path = f"scenarios[{i}]"
            _check(isinstance(sc, dict), path, "must be an object")
            _check(isinstance(sc.get("name"), str), f"{path}.name", "must be a string")
            _check(sc["name"] not in names and sc["name"] != "NF", f"{path}.name", "scenario labels must be unique")
            names.add(sc["name"])
            _check(isinstance(sc.get("fault_id"), str), f"{path}.fault_id", "must be a string")

    residuals = cfg.get("residuals")
    if residuals != "auto":
        _check(isinstance(residuals, list) and residuals, "residuals", 'must be "auto" or a non-empty list')
        for i, res in enumerate(residuals):
            _check(isinstance(res, dict) and isinstance(res.get("mso"), list), f"residuals[{i}].mso",
                   "must list equation ids")
    budget = cfg.get("residual_budget")
    _check(budget is None or (isinstance(budget, int) and budget >= 1), "residual_budget", "must be null or >= 1")

    ens = cfg["ensemble"]
    _check(isinstance(ens.get("members"), int) and ens["members"] >= 1, "ensemble.members", "must be >= 1")
    arch = ens["arch"]
    _check(isinstance(arch.get("hidden_dim"), int) and arch["hidden_dim"] >= 1, "ensemble.arch.hidden_dim",
           "must be >= 1")
    _check(arch.get("cell") in ("lstm", "linear"), "ensemble.arch.cell", "must be lstm or linear")
    _check(_is_number(arch.get("sigma_floor")) and arch["sigma_floor"] > 0, "ensemble.arch.sigma_floor",
           "must be > 0")
    tr = ens["train"]
    for key in ("H", "H_init", "dH", "batch_size"):
        _check(isinstance(tr.get(key), int) and tr[key] >= 1, f"ensemble.train.{key}", "must be an integer >= 1")
    _check(tr["H_init"] <= tr["H"], "ensemble.train.H_init", "must be <= H")
    for key in ("tau_w", "tau"):
        _check(isinstance(tr.get(key), int) and tr[key] >= 0, f"ensemble.train.{key}", "must be an integer >= 0")
    _check(_is_number(tr.get("learning_rate")) and tr["learning_rate"] > 0, "ensemble.train.learning_rate",
           "must be > 0")
    _check(_is_number(tr.get("weight_decay")) and tr["weight_decay"] >= 0, "ensemble.train.weight_decay",
           "must be >= 0")
    _check(tr.get("tbptt") is None or (isinstance(tr["tbptt"], int) and tr["tbptt"] >= 1),
           "ensemble.train.tbptt", "must be null or >= 1")
    _check(tr.get("grad_clip") is None or (_is_number(tr["grad_clip"]) and tr["grad_clip"] > 0),
           "ensemble.train.grad_clip", "must be null or > 0")

    dec = cfg["decision"]
    _check(_is_number(dec.get("p_fa")) and 0 < dec["p_fa"] < 1, "decision.p_fa", "must be in (0, 1)")
    _check(_is_number(dec.get("epsilon")) and dec["epsilon"] > 0, "decision.epsilon", "must be > 0")
    _check(_is_number(dec.get("ood_quantile")) and 0 < dec["ood_quantile"] <= 1, "decision.ood_quantile",
           "must be in (0, 1]")

    horizon = cfg["evaluation"].get("horizon")
    _check(horizon is None or (isinstance(horizon, int) and horizon >= 1), "evaluation.horizon",
           "must be null or >= 1")
    for key in ("ood", "adaptive_j"):
        _check(isinstance(cfg["ablation"].get(key), bool), f"ablation.{key}", "must be true or false")

    if cfg["system"] == "external_csv":
        ext = cfg["external"]
        _check(bool(ext.get("train")), "external.train", "external_csv needs training CSV paths")
        _check(bool(ext.get("channels")), "external.channels", "external_csv needs channel names")
        _check(ext.get("sample_rate") is None or (_is_number(ext["sample_rate"]) and ext["sample_rate"] > 0),
               "external.sample_rate", "must be null or > 0")
        _check(cfg.get("model_file") is not None, "model_file", "external_csv needs a structural model file")
    return cfg


def bundled_model_path(system):
    """Path of the structural model shipped for a simulated system."""
    return Path(__file__).parent / "models" / f"{system}.txt"
