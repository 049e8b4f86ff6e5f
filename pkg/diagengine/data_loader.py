"""
Diagnosis Engine — Data Loading
=================================
The time-series dataset type shared by every module, CSV + JSON sidecar
persistence, and ingestion of externally logged CSV data.

A dataset CSV has a `t` column followed by one column per known signal.
Floats are written with 17 significant digits and read back with
round-trip precision, so write -> read is lossless. The sidecar
(`<name>.json` next to `<name>.csv`) carries label, onset and provenance.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import IngestError
from .logging_utils import setup_logger

logger = setup_logger(__name__)

NOMINAL = "NF"
FLOAT_FORMAT = "%.17g"


@dataclass
class TimeSeriesDataset:
    """
    Sampled signals of one run.

    frame holds `t` plus one column per known channel. truth optionally holds
    internal signals (unknowns) aligned with frame; it is for verification
    only and never persisted.
    """

    frame: pd.DataFrame
    label: str = NOMINAL
    onset: float = None
    meta: dict = field(default_factory=dict)
    truth: pd.DataFrame = None

    def __post_init__(self):
        if "t" not in self.frame.columns:
            raise IngestError("dataset needs a 't' column")
        cols = ["t"] + [c for c in self.frame.columns if c != "t"]
        self.frame = self.frame[cols].reset_index(drop=True).astype(float)
        t = self.frame["t"].to_numpy()
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            bad = int(np.argmax(np.diff(t) <= 0)) + 1
            raise IngestError(f"timestamps not strictly increasing at row {bad}")

    @property
    def t(self):
        return self.frame["t"].to_numpy()

    @property
    def channels(self):
        return tuple(c for c in self.frame.columns if c != "t")

    @property
    def sample_rate(self):
        if "sample_rate" in self.meta:
            return float(self.meta["sample_rate"])
        return infer_sample_rate(self.t)

    def __len__(self):
        return len(self.frame)

    def channel(self, name):
        if name not in self.frame.columns:
            raise KeyError(f"dataset has no channel '{name}'")
        return self.frame[name].to_numpy()

    def matrix(self, names):
        """Stack the named channels into an (n, len(names)) float array."""
        missing = [n for n in names if n not in self.frame.columns]
        if missing:
            raise KeyError(f"dataset is missing channels {missing}")
        return self.frame[list(names)].to_numpy(dtype=float).reshape(len(self), len(names))

    def slice(self, start, stop):
        """Rows [start, stop) as a new dataset with the same label and meta."""
        truth = None if self.truth is None else self.truth.iloc[start:stop].reset_index(drop=True)
        return TimeSeriesDataset(self.frame.iloc[start:stop].copy(), self.label, self.onset,
                                 dict(self.meta), truth)

    def with_columns(self, columns):
        """Copy with extra or replaced channels."""
        frame = self.frame.copy()
        for name, values in columns.items():
            frame[name] = np.asarray(values, dtype=float)
        return TimeSeriesDataset(frame, self.label, self.onset, dict(self.meta), self.truth)

    def evaluation_mask(self):
        """Samples that count for evaluation: all for nominal runs,
        post-onset only for faulty ones."""
        if self.label == NOMINAL or self.onset is None:
            return np.ones(len(self), dtype=bool)
        return self.t >= self.onset

    def equals(self, other):
        return (self.label == other.label and self.onset == other.onset
                and self.frame.equals(other.frame))


def infer_sample_rate(t):
    if len(t) < 2:
        return 1.0
    return float(1.0 / np.median(np.diff(t)))


def central_difference(values, t):
    """Time derivative by central differences (one-sided at the ends)."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return np.zeros_like(values)
    return np.gradient(values, np.asarray(t, dtype=float))


# =============================================================================
# ATOMIC WRITES
# =============================================================================

def atomic_write_text(path, text):
    """Write text to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def frame_to_csv_text(frame, index=False):
    return frame.to_csv(index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


# =============================================================================
# DATASET FILES
# =============================================================================

def sidecar_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def write_dataset(dataset, csv_path):
    """Write dataset CSV plus JSON sidecar."""
    atomic_write_text(csv_path, frame_to_csv_text(dataset.frame))
    meta = dict(dataset.meta)
    meta.update({"label": dataset.label, "onset": dataset.onset, "channels": list(dataset.channels)})
    atomic_write_json(sidecar_path(csv_path), meta)


def _read_csv(path):
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestError(f"{path}: unreadable CSV ({exc})") from exc
    if "t" not in frame.columns:
        raise IngestError(f"{path}: missing time column 't'")
    for col in frame.columns:
        if not pd.api.types.is_numeric_dtype(frame[col]):
            raise IngestError(f"{path}: column '{col}' is not numeric")
    nan_rows, nan_cols = np.nonzero(frame.isna().to_numpy())
    if len(nan_rows):
        raise IngestError(f"{path}: NaN at row {int(nan_rows[0])}, column '{frame.columns[nan_cols[0]]}'")
    t = frame["t"].to_numpy()
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 1
        raise IngestError(f"{path}: time column not strictly increasing at row {bad}")
    return frame


def _read_sidecar(csv_path):
    side = sidecar_path(csv_path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"{side}: invalid sidecar JSON ({exc})") from exc


def read_dataset(csv_path):
    """Read a dataset written by write_dataset (sidecar optional)."""
    frame = _read_csv(csv_path)
    meta = _read_sidecar(csv_path)
    label = meta.pop("label", NOMINAL)
    onset = meta.pop("onset", None)
    meta.pop("channels", None)
    return TimeSeriesDataset(frame, label, onset, meta)


# =============================================================================
# EXTERNAL DATA
# =============================================================================

def _resample(frames, rate):
    """Linearly interpolate every frame onto one grid over the common span."""
    start = max(f["t"].iloc[0] for f in frames)
    stop = min(f["t"].iloc[-1] for f in frames)
    if stop <= start:
        raise IngestError("sources share no common time span")
    n = int(np.floor((stop - start) * rate + 1e-9)) + 1
    grid = start + np.arange(n) / rate
    merged = {"t": grid}
    for frame in frames:
        t = frame["t"].to_numpy()
        for col in frame.columns:
            if col == "t":
                continue
            if col in merged:
                raise IngestError(f"channel '{col}' appears in more than one source")
            merged[col] = np.interp(grid, t, frame[col].to_numpy())
    return pd.DataFrame(merged)


def ingest_external(sources, channels, sample_rate=None):
    """
    Load externally logged CSV data as validated datasets.

    Args:
        sources: List whose entries are a CSV path (one dataset) or a list of
                 CSV paths logged at possibly different rates, merged into one
                 dataset on a common grid
        channels: Channel names every dataset must provide
        sample_rate: Target rate in Hz; sources at another rate are linearly
                     interpolated onto it (None = keep single sources as
                     they are, merge at the fastest source rate)

    Returns:
        list of TimeSeriesDataset, one per entry of `sources`
    """
    datasets = []
    for entry in sources:
        paths = [entry] if isinstance(entry, (str, os.PathLike)) else list(entry)
        if not paths:
            raise IngestError("empty source group")
        frames = [_read_csv(p) for p in paths]
        metas = [_read_sidecar(p) for p in paths]
        rates = [float(m["sample_rate"]) if m.get("sample_rate") else infer_sample_rate(f["t"].to_numpy())
                 for f, m in zip(frames, metas)]

        if len(frames) == 1 and (sample_rate is None or np.isclose(rates[0], sample_rate, rtol=1e-9)):
            frame = frames[0]
            rate = rates[0]
        else:
            rate = float(sample_rate) if sample_rate is not None else max(rates)
            frame = _resample(frames, rate)
            logger.info(f"resampled {[str(p) for p in paths]} onto {len(frame)} samples at {rate:g} Hz")

        missing = [c for c in channels if c not in frame.columns]
        if missing:
            raise IngestError(f"{paths[0]}: missing channels {missing}")
        meta = {k: v for k, v in metas[0].items() if k not in ("label", "onset", "channels")}
        meta["sample_rate"] = rate
        meta.setdefault("system", "external_csv")
        datasets.append(TimeSeriesDataset(frame, metas[0].get("label", NOMINAL), metas[0].get("onset"), meta))
    return datasets
