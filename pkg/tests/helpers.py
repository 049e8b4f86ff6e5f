from diagengine.config import CONFIG, deep_merge, validate_config
from diagengine.simulator import SimConfig


def quiet_sim(system, **changes):
    """Short, noise-free run with a constant input."""
    base = SimConfig.from_config(CONFIG, system, seed=0, input_seed=0)
    values = dict(base.__dict__)
    values.update({"duration": 40.0, "noise": {}, "input_profile": "constant"})
    values.update(changes)
    return SimConfig(**values)


def tiny_config(tmp_path, system="two_tank", **changes):
    """A config that runs the whole pipeline in seconds."""
    small = {
        "system": system,
        "output_dir": str(tmp_path / "run"),
        "simulation": {
            "two_tank": {"duration": 60.0, "dt": 0.05, "sample_rate": 2.0, "input_hold": 10.0},
            "three_tank": {"duration": 60.0, "dt": 0.05, "sample_rate": 2.0, "input_hold": 10.0},
        },
        "cubic_toy": {"n_train": 200, "n_test": 200},
        "fault_onset": 30.0,
        "nominal_runs": 2,
        "ensemble": {
            "members": 2,
            "arch": {"hidden_dim": 4},
            "train": {"H": 6, "H_init": 2, "dH": 2, "tau_w": 3, "tau": 2, "batch_size": 16},
        },
    }
    cfg = deep_merge(deep_merge(CONFIG, small), changes)
    return validate_config(cfg)
