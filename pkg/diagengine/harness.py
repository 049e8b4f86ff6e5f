"""
Diagnosis Engine — Experiment Harness
=======================================
DiagnosisExperiment runs the pipeline from one validated config:

    simulate   nominal training runs + one test run per scenario -> out/data
    analyze    MSO family, fault signatures, isolability, test selection and
               residual design -> out/analysis
    train      one ensemble per selected residual -> out/models/<residual>
    evaluate   decision traces and performance matrices -> out/traces, out/results
    ablate     the four decision variants on stored traces -> out/results/ablation.csv
    report     matrices recomputed from stored traces -> out/results/report.txt

Every step reads what earlier steps wrote, so steps can be rerun alone.
(config, seed) determines every CSV and JSON byte.
"""

import argparse
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .config import bundled_model_path, config_hash, load_config
from .data_loader import (NOMINAL, atomic_write_json, atomic_write_text, central_difference,
                          frame_to_csv_text, ingest_external, read_dataset, write_dataset)
from .decision import DecisionConfig, build_decision_trace, diagnosis_records, fixed_threshold
from .ensemble import EnsemblePredictor, train_ensemble
from .errors import (CheckpointError, ConfigError, DiagnosisError, IngestError,
                     ModelValidationError)
from .logging_utils import set_log_level, setup_logger
from .metrics import (ScenarioResult, format_matrix, isolation_performance, reclassify,
                      scalar_metrics, sensitivity_matrix, with_baseline)
from .model_io import dumps_model, load_model
from .pnn import PnnArchitecture, TrainConfig
from .simulator import FaultProfile, SimConfig, catalog_fault, make_cubic_toy, simulate
from .structural import (FaultSignatureMatrix, ResidualSpec, design_residuals, dm_decompose,
                         enumerate_msos, fault_signature, isolability, select_tests)

logger = setup_logger(__name__)

COMMANDS = ("simulate", "analyze", "train", "evaluate", "ablate", "report")
ABLATION_ROWS = (
    ("full", True, True),
    ("no_adaptive", True, False),
    ("no_ood", False, True),
    ("neither", False, False),
)
TOY_RESIDUAL = "toy"

__all__ = ["DiagnosisExperiment", "cli", "ingest_external", "COMMANDS"]


def _simulate_job(args):
    system, sim_cfg, fault = args
    return simulate(system, sim_cfg, fault)


def _write_frame(frame, path):
    atomic_write_text(path, frame_to_csv_text(frame))


def _read_frame(path):
    return pd.read_csv(path, float_precision="round_trip")


def _with_derivatives(dataset, spec):
    if not spec.derivative_inputs:
        return dataset
    return dataset.with_columns({f"d_{k}": central_difference(dataset.channel(k), dataset.t)
                                 for k in spec.derivative_inputs})


class DiagnosisExperiment:
    """One experiment: a config, an output directory and the pipeline steps."""

    def __init__(self, cfg, jobs=1, scenario=None):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.only = scenario
        self.system = cfg["system"]
        self.seed = int(cfg["seed"])
        self.config_hash = config_hash(cfg)
        self.out = Path(cfg["output_dir"])
        self.data_dir = self.out / "data"
        self.analysis_dir = self.out / "analysis"
        self.models_dir = self.out / "models"
        self.traces_dir = self.out / "traces"
        self.results_dir = self.out / "results"

    # =========================================================================
    # STRUCTURAL MODEL + SCENARIOS
    # =========================================================================

    def structural_model(self):
        path = self.cfg.get("model_file") or bundled_model_path(self.system)
        return load_model(path)

    def scenarios(self):
        """[(name, FaultProfile or None)], nominal first."""
        if self.system in ("cubic_toy", "external_csv"):
            return []
        catalog = self.cfg["fault_catalog"][self.system]
        out = [(NOMINAL, None)]
        if self.cfg["scenarios"] == "auto":
            model_faults = self.structural_model().faults
            for fid in model_faults:
                if fid in catalog:
                    out.append((fid, catalog_fault(self.system, fid, self.cfg["severity"],
                                                   self.cfg["fault_onset"], self.cfg["fault_catalog"])))
            return out
        for i, sc in enumerate(self.cfg["scenarios"]):
            fid = sc["fault_id"]
            if fid not in catalog:
                raise ConfigError(f"scenarios[{i}].fault_id", f"unknown {self.system} fault '{fid}'")
            entry = catalog[fid]
            out.append((sc["name"], FaultProfile(
                fault_id=fid,
                kind=sc.get("kind", entry["kind"]),
                magnitude=float(sc.get("magnitude", entry[self.cfg["severity"]])),
                onset=float(sc.get("onset", self.cfg["fault_onset"])),
                shape=sc.get("shape", "step"),
                ramp_duration=float(sc.get("ramp_duration", 0.0)),
            )))
        return out

    def _selected_scenarios(self):
        scenarios = self.scenarios()
        if self.only is None:
            return scenarios
        picked = [s for s in scenarios if s[0] == self.only]
        if not picked:
            raise ConfigError("scenario", f"no scenario named '{self.only}'")
        return picked

    # =========================================================================
    # SIMULATE
    # =========================================================================

    def simulate(self):
        """Generate (or ingest) training and test datasets into out/data."""
        train_dir, test_dir = self.data_dir / "train", self.data_dir / "test"
        if self.system == "cubic_toy":
            toy = self.cfg["cubic_toy"]
            train, test = make_cubic_toy(toy["n_train"], toy["n_test"], self.seed, toy["noise_scale"])
            for ds, path in ((train, train_dir / "cubic_train.csv"), (test, test_dir / "cubic_test.csv")):
                ds.meta["config_hash"] = self.config_hash
                write_dataset(ds, path)
            logger.info(f"cubic toy: {len(train)} training / {len(test)} test samples")
            return {"train": [train], "test": {"cubic_test": test}}

        if self.system == "external_csv":
            ext = self.cfg["external"]
            train = ingest_external(ext["train"], ext["channels"], ext["sample_rate"])
            test = ingest_external(ext["test"], ext["channels"], ext["sample_rate"]) if ext["test"] else []
            tests = {}
            for k, ds in enumerate(train):
                ds.meta["config_hash"] = self.config_hash
                write_dataset(ds, train_dir / f"nominal_{k:02d}.csv")
            for k, ds in enumerate(test):
                name = ds.label if ds.label not in tests else f"{ds.label}_{k}"
                ds.meta["config_hash"] = self.config_hash
                write_dataset(ds, test_dir / f"{name}.csv")
                tests[name] = ds
            return {"train": train, "test": tests}

        tasks, names = [], []
        if self.only is None:
            for k in range(self.cfg["nominal_runs"]):
                sim = SimConfig.from_config(self.cfg, self.system, seed=self.seed + k, input_seed=self.seed + k)
                tasks.append((self.system, sim, None))
                names.append(("train", f"nominal_{k:02d}"))
        test_input_seed = self.seed + 500
        all_names = [name for name, _ in self.scenarios()]
        for name, fault in self._selected_scenarios():
            sim = SimConfig.from_config(self.cfg, self.system, seed=self.seed + 1000 + all_names.index(name),
                                        input_seed=test_input_seed)
            tasks.append((self.system, sim, fault))
            names.append(("test", name))

        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                datasets = list(pool.map(_simulate_job, tasks))
        else:
            datasets = [_simulate_job(task) for task in tasks]

        result = {"train": [], "test": {}}
        for (split, name), ds in zip(names, datasets):
            ds.meta["config_hash"] = self.config_hash
            write_dataset(ds, self.data_dir / split / f"{name}.csv")
            if split == "train":
                result["train"].append(ds)
            else:
                result["test"][name] = ds
        logger.info(f"{self.system}: {len(result['train'])} nominal runs, {len(result['test'])} test scenarios")
        return result

    def _training_data(self):
        paths = sorted((self.data_dir / "train").glob("*.csv"))
        if not paths:
            self.simulate()
            paths = sorted((self.data_dir / "train").glob("*.csv"))
        return [read_dataset(p) for p in paths]

    def _test_data(self):
        test_dir = self.data_dir / "test"
        if self.system in ("cubic_toy", "external_csv"):
            names = [p.stem for p in sorted(test_dir.glob("*.csv"))]
        else:
            names = [name for name, _ in self._selected_scenarios()]
        if not names or any(not (test_dir / f"{n}.csv").exists() for n in names):
            self.simulate()
            if self.system in ("cubic_toy", "external_csv"):
                names = [p.stem for p in sorted(test_dir.glob("*.csv"))]
        return {n: read_dataset(test_dir / f"{n}.csv") for n in names}

    def _split(self, datasets):
        """Contiguous train/validation split of every nominal run."""
        frac = self.cfg["validation_fraction"]
        train, val = [], []
        for ds in datasets:
            cut = int(np.floor(len(ds) * (1.0 - frac)))
            train.append(ds.slice(0, cut))
            if len(ds) - cut >= 2:
                val.append(ds.slice(cut, len(ds)))
        return train, val

    # =========================================================================
    # ANALYZE
    # =========================================================================

    def analyze(self):
        """Structural analysis and residual design; returns the ResidualSpecs."""
        if self.system == "cubic_toy":
            logger.info("cubic_toy has no structural model; nothing to analyze")
            return []
        model = self.structural_model()
        dm = dm_decompose(model)
        msos = enumerate_msos(model)
        if not msos:
            raise ModelValidationError(f"model {model.name} has no redundancy; no residuals can be designed")
        names = [f"r{i}" for i in range(len(msos))]
        fsm = fault_signature(msos, model, names)
        iso = isolability(fsm)

        if self.cfg["residuals"] == "auto":
            rows = select_tests(msos, fsm, self.cfg["residual_budget"])
            chosen = [msos[i] for i in rows]
            chosen_names = [names[i] for i in rows]
            specs = design_residuals(model, chosen, names=chosen_names)
        else:
            specs = []
            for i, res in enumerate(self.cfg["residuals"]):
                mso = frozenset(res["mso"])
                if mso not in msos:
                    raise ConfigError(f"residuals[{i}].mso", "is not an MSO set of the model")
                idx = msos.index(mso)
                specs += design_residuals(model, [mso], [res.get("residual_equation")], [names[idx]])

        selected = self.selected_fsm(specs)
        out = self.analysis_dir
        atomic_write_text(out / "model.txt", dumps_model(model))
        atomic_write_json(out / "dm.json", {
            "under": {"equations": list(dm.under_equations), "unknowns": list(dm.under_unknowns)},
            "exact": {"equations": list(dm.exact_equations), "unknowns": list(dm.exact_unknowns)},
            "over": {"equations": list(dm.over_equations), "unknowns": list(dm.over_unknowns)},
            "redundancy": dm.redundancy,
        })
        mso_table = pd.DataFrame({
            "name": names,
            "size": [len(m) for m in msos],
            "equations": [" ".join(model.sort_equations(m)) for m in msos],
        })
        _write_frame(mso_table, out / "msos.csv")
        atomic_write_text(out / "fsm.csv", frame_to_csv_text(fsm.to_frame(), index=True))
        atomic_write_text(out / "isolability.csv", frame_to_csv_text(iso.to_frame(), index=True))
        atomic_write_text(out / "selected_fsm.csv", frame_to_csv_text(selected.to_frame(), index=True))
        atomic_write_text(out / "selected_isolability.csv",
                          frame_to_csv_text(isolability(selected).to_frame(), index=True))
        atomic_write_json(out / "residuals.json", {"config_hash": self.config_hash,
                                                   "residuals": [s.to_dict() for s in specs]})

        print(f"\n{'='*60}")
        print(f"  STRUCTURAL ANALYSIS: {model.name}")
        print(f"{'='*60}")
        print(f"  Equations / unknowns:   {len(model.equations)} / {len(model.unknowns)}")
        print(f"  Redundancy:             {dm.redundancy}")
        print(f"  MSO sets:               {len(msos)}")
        print(f"  Isolable fault pairs:   {iso.isolated_pairs()}")
        print(f"  Selected residuals:     {len(specs)}")
        for s in specs:
            print(f"    {s.name:<6} {s.residual_equation:<5} target={s.target}  inputs={','.join(s.channels)}")
        return specs

    def residual_specs(self):
        path = self.analysis_dir / "residuals.json"
        if not path.exists():
            return self.analyze()
        return [ResidualSpec.from_dict(d) for d in json.loads(path.read_text())["residuals"]]

    @staticmethod
    def selected_fsm(specs):
        faults = specs[0].faults
        matrix = np.array([s.sensitivity for s in specs], dtype=bool).reshape(len(specs), len(faults))
        return FaultSignatureMatrix(tuple(s.name for s in specs), faults, matrix)

    # =========================================================================
    # TRAIN
    # =========================================================================

    def _arch(self, inputs, target, feedback=True):
        a = self.cfg["ensemble"]["arch"]
        return PnnArchitecture(tuple(inputs), target, a["hidden_dim"], a["cell"], a["sigma_floor"], feedback)

    def _train_config(self, one_step=False):
        tr = dict(self.cfg["ensemble"]["train"])
        if one_step:
            tr.update({"H": 1, "H_init": 1, "dH": 1})
        return TrainConfig.from_config(tr, self.seed)

    @property
    def horizon(self):
        if self.system == "cubic_toy":
            return 1
        return self.cfg["evaluation"]["horizon"] or self.cfg["ensemble"]["train"]["H"]

    def train(self):
        """Train and calibrate one ensemble per residual."""
        nominal = self._training_data()
        train, val = self._split(nominal)
        members = self.cfg["ensemble"]["members"]
        quantile = self.cfg["decision"]["ood_quantile"]
        p_fa = self.cfg["decision"]["p_fa"]
        ensembles = {}

        if self.system == "cubic_toy":
            jobs = [(TOY_RESIDUAL, self._arch(("x",), "y", feedback=False), self._train_config(one_step=True),
                     None, train, val)]
        else:
            jobs = []
            for spec in self.residual_specs():
                if spec.target is None:
                    raise ModelValidationError(f"residual {spec.name}: residual equation has no known variable")
                jobs.append((spec.name, self._arch(spec.channels, spec.target), self._train_config(), spec,
                             [_with_derivatives(d, spec) for d in train],
                             [_with_derivatives(d, spec) for d in val]))

        for k, (name, arch, tcfg, spec, tr_sets, val_sets) in enumerate(jobs):
            logger.info(f"training {name}: {members} members, target {arch.target_name}, inputs {arch.input_names}")
            ens, logs = train_ensemble(tr_sets, arch, tcfg, members, seed=self.seed + 100 * k,
                                       jobs=self.jobs, validation=val_sets or None)
            ens.epistemic_threshold(tr_sets, self.horizon, quantile)
            residuals = np.concatenate([d.channel(arch.target_name) - ens.breakdown(d, self.horizon).mu_star
                                        for d in tr_sets])
            j_fixed = fixed_threshold(residuals, p_fa)
            extra = {"config_hash": self.config_hash, "seed": self.seed, "residual": name,
                     "fixed_threshold": j_fixed}
            if spec is not None:
                extra["spec"] = spec.to_dict()
            target_dir = self.models_dir / name
            ens.save(target_dir, extra)
            for m, log in enumerate(logs):
                _write_frame(log, target_dir / f"loss_member_{m:02d}.csv")
            ensembles[name] = ens
            logger.info(f"{name}: epistemic scale {ens.epsilon_scale:.4g}, fixed threshold {j_fixed:.4g}")
        return ensembles

    def _load_ensembles(self, names):
        ensembles, thresholds = {}, {}
        for name in names:
            directory = self.models_dir / name
            if not (directory / "ensemble.json").exists():
                raise CheckpointError(f"missing checkpoint for residual {name} in {directory}; run `train` first")
            ensembles[name] = EnsemblePredictor.load(directory)
            thresholds[name] = json.loads((directory / "ensemble.json").read_text())["fixed_threshold"]
        return ensembles, thresholds

    # =========================================================================
    # EVALUATE
    # =========================================================================

    def decision_configs(self, thresholds, use_ood=None, adaptive=None):
        dec, abl = self.cfg["decision"], self.cfg["ablation"]
        use_ood = abl["ood"] if use_ood is None else use_ood
        adaptive = abl["adaptive_j"] if adaptive is None else adaptive
        return {name: DecisionConfig(dec["p_fa"], dec["epsilon"], use_ood, adaptive, j)
                for name, j in thresholds.items()}

    def evaluate(self):
        """Decision traces for every test scenario, then matrices and metrics."""
        if self.system == "cubic_toy":
            return self._evaluate_toy()
        specs = self.residual_specs()
        ensembles, thresholds = self._load_ensembles([s.name for s in specs])
        configs = self.decision_configs(thresholds)
        fsm = self.selected_fsm(specs)

        for name, ds in self._test_data().items():
            scenario_dir = self.traces_dir / name
            traces = {}
            for spec in specs:
                ens = ensembles[spec.name]
                data = _with_derivatives(ds, spec)
                frame = ens.uncertainty_frame(data, self.horizon)
                _write_frame(frame, scenario_dir / f"{spec.name}_uncertainty.csv")
                trace = build_decision_trace(frame["t"], frame["r"], np.sqrt(frame["var_star"]),
                                             frame["u_epi_normalized"], configs[spec.name])
                _write_frame(trace, scenario_dir / f"{spec.name}.csv")
                traces[spec.name] = trace
            alarms = np.column_stack([traces[r]["decision"].to_numpy() == "FaultDetected" for r in fsm.residuals])
            ood = np.column_stack([traces[r]["decision"].to_numpy() == "OutOfRange" for r in fsm.residuals])
            atomic_write_json(scenario_dir / "diagnoses.json", {
                "scenario": name, "fault": ds.label, "onset": ds.onset,
                "records": diagnosis_records(ds.t, alarms, ood, fsm),
            })
            logger.info(f"evaluated scenario {name}")

        if self.only is not None:
            logger.info("single-scenario run: matrices need every scenario, skipping metrics")
            return None
        return self.report()

    def _evaluate_toy(self):
        ensembles, _ = self._load_ensembles([TOY_RESIDUAL])
        ens = ensembles[TOY_RESIDUAL]
        summary = []
        for name, ds in self._test_data().items():
            frame = ens.uncertainty_frame(ds, 1)
            frame.insert(1, "x", ds.channel("x"))
            _write_frame(frame, self.traces_dir / name / f"{TOY_RESIDUAL}_uncertainty.csv")
            summary.append(toy_summary(frame, self.cfg["cubic_toy"]["noise_scale"]))
        table = pd.concat(summary, ignore_index=True)
        _write_frame(table, self.results_dir / "toy_uncertainty.csv")
        print(f"\n{'='*60}")
        print("  CUBIC TOY: UNCERTAINTY BY |x|")
        print(f"{'='*60}")
        print(f"  {'|x| bin':<12} {'n':>6} {'u_epi (norm)':>14} {'u_ale':>10} {'xi^2':>10}")
        print(f"  {'-'*56}")
        for _, row in table.iterrows():
            print(f"  {row['bin']:<12} {int(row['n']):>6} {row['u_epi_normalized']:>14.3f} "
                  f"{row['u_ale']:>10.4f} {row['xi_var']:>10.4f}")
        return table

    # =========================================================================
    # REPORT / ABLATE
    # =========================================================================

    def _scenario_labels(self):
        """[(scenario name, true fault, onset)] of every test scenario."""
        if self.system == "external_csv":
            return [(name, ds.label, ds.onset) for name, ds in self._test_data().items()]
        return [(name, NOMINAL if fault is None else fault.fault_id, None if fault is None else fault.onset)
                for name, fault in self.scenarios()]

    def _stored_results(self, specs):
        results = []
        for name, label, onset in self._scenario_labels():
            scenario_dir = self.traces_dir / name
            traces = {}
            for spec in specs:
                path = scenario_dir / f"{spec.name}.csv"
                if not path.exists():
                    raise CheckpointError(f"missing trace {path}; run `evaluate` first")
                traces[spec.name] = _read_frame(path)
            results.append(ScenarioResult(name, label, onset, traces))
        return results

    def _metrics(self, results, fsm, label):
        sens = sensitivity_matrix(results, fsm.residuals)
        iso_perf = isolation_performance(results, fsm)
        report = scalar_metrics(sens, fsm, iso_perf, isolability(fsm), label, self.config_hash)
        return sens, iso_perf, report

    def report(self):
        """Recompute every matrix from stored traces and write the results."""
        if self.system == "cubic_toy":
            return self._evaluate_toy()
        specs = self.residual_specs()
        fsm = self.selected_fsm(specs)
        _, thresholds = self._load_ensembles([s.name for s in specs])
        results = self._stored_results(specs)
        sens, iso_perf, report = self._metrics(results, fsm, "configured")
        baseline_results = reclassify(results, self.decision_configs(thresholds, use_ood=False, adaptive=False))
        b_sens, b_iso, b_report = self._metrics(baseline_results, fsm, "fixed_threshold")
        sens = with_baseline(sens, b_sens)
        iso_perf = with_baseline(iso_perf, b_iso)

        r = self.results_dir
        atomic_write_text(r / "sensitivity.csv", frame_to_csv_text(sens.values, index=True))
        atomic_write_text(r / "sensitivity_delta.csv", frame_to_csv_text(sens.baseline_delta, index=True))
        atomic_write_text(r / "isolation.csv", frame_to_csv_text(iso_perf.values, index=True))
        atomic_write_text(r / "isolation_delta.csv", frame_to_csv_text(iso_perf.baseline_delta, index=True))
        atomic_write_json(r / "metrics.json", {"configured": report.to_dict(), "baseline": b_report.to_dict(),
                                               "seed": self.seed})
        text = (format_matrix(sens.values, sens.baseline_delta, "Residual sensitivity (%), delta vs fixed threshold")
                + "\n"
                + format_matrix(iso_perf.values, iso_perf.baseline_delta,
                                "Fault isolation performance (%), delta vs fixed threshold")
                + "\n" + _metrics_table({"configured": report, "fixed_threshold": b_report}))
        atomic_write_text(r / "report.txt", text)
        print(text)
        return report

    def ablate(self):
        """Metrics for the four OOD / adaptive-threshold combinations."""
        if self.system == "cubic_toy":
            raise ConfigError("system", "ablate needs a diagnosis system, not cubic_toy")
        specs = self.residual_specs()
        fsm = self.selected_fsm(specs)
        _, thresholds = self._load_ensembles([s.name for s in specs])
        results = self._stored_results(specs)
        rows = {}
        for label, use_ood, adaptive in ABLATION_ROWS:
            variant = reclassify(results, self.decision_configs(thresholds, use_ood, adaptive))
            rows[label] = self._metrics(variant, fsm, label)[2]
        table = pd.DataFrame([{"row": k, "ood": o, "adaptive_j": a, **{m: getattr(rows[k], m)
                              for m in ("S_FA", "S_MD", "p_FA", "p_MD", "p_D")}}
                              for k, o, a in ABLATION_ROWS])
        _write_frame(table, self.results_dir / "ablation.csv")
        print(f"\n{'='*60}")
        print("  ABLATION")
        print(f"{'='*60}")
        print(_metrics_table(rows))
        return table


def _metrics_table(reports):
    lines = [f"  {'':<16} {'S_FA':>8} {'S_MD':>8} {'p_FA':>8} {'p_MD':>8} {'p_D':>8}",
             f"  {'-'*56}"]
    for label, rep in reports.items():
        lines.append(f"  {label:<16} {rep.S_FA:>8.2f} {rep.S_MD:>8.2f} {rep.p_FA:>8.2f} "
                     f"{rep.p_MD:>8.2f} {rep.p_D:>8.2f}")
    return "\n".join(lines) + "\n"


def toy_summary(frame, noise_scale, edges=(0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)):
    """Mean uncertainty per |x| bin next to the configured noise variance."""
    ax = frame["x"].abs().to_numpy()
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ax >= lo) & (ax < hi) if hi < edges[-1] else (ax >= lo) & (ax <= hi)
        if not sel.any():
            continue
        rows.append({
            "bin": f"{lo:.1f}-{hi:.1f}",
            "n": int(sel.sum()),
            "u_epi_normalized": float(frame["u_epi_normalized"].to_numpy()[sel].mean()),
            "u_ale": float(frame["u_ale"].to_numpy()[sel].mean()),
            "xi_var": float(np.mean((noise_scale * (1.0 + ax[sel])) ** 2)),
        })
    return pd.DataFrame(rows)


# =============================================================================
# COMMAND LINE
# =============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="diagengine",
                                     description="Uncertainty-aware data-driven fault diagnosis")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="experiment JSON merged over the defaults")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--scenario", help="restrict simulate/evaluate to one scenario")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def cli(argv=None):
    """
    Run one pipeline step; returns 0 on success, 1 on invalid input
    (including an unknown command or bad flags), 2 on failure.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors
        return 0 if exc.code in (0, None) else 1
    set_log_level(args.log_level)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
        exp = DiagnosisExperiment(cfg, jobs=args.jobs, scenario=args.scenario)
        logger.info(f"{args.command}: system={cfg['system']} seed={cfg['seed']} config={exp.config_hash}")
        getattr(exp, args.command)()
    except (ConfigError, ModelValidationError, IngestError) as exc:
        logger.error(f"invalid input: {exc}")
        return 1
    except DiagnosisError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return 2
    except Exception:
        logger.exception(f"{args.command} failed")
        return 2
    return 0
