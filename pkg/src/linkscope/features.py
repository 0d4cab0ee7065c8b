"""Trace representations and feature scaling.

Every lossless 300-sample trace can be viewed four manual ways:

  TIME_VALUE  the raw 300 samples in packet order
  AGGREGATED  7 summary statistics [mean, std, min, q25, median, q75, max]
  HISTOGRAM   10 equal-width occupancy fractions over a dataset-global range
  FFT         151 one-sided DFT magnitudes (DC through Nyquist)

plus a learnt 4-dim ENCODED view produced elsewhere by the autoencoder.
Scalers are fit on training rows only and applied everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .traces import TRACE_LEN, RssiTrace

HIST_BINS = 10
FFT_BINS = TRACE_LEN // 2 + 1  # one-sided spectrum of a real signal
ENCODED_DIM = 4
AGG_DIM = 7


class Representation(Enum):
    TIME_VALUE = "time_value"
    AGGREGATED = "aggregated"
    HISTOGRAM = "histogram"
    FFT = "fft"
    ENCODED = "encoded"

    @property
    def token(self) -> str:
        return self.value

    @classmethod
    def from_token(cls, token: str) -> "Representation":
        for r in cls:
            if r.value == token:
                return r
        raise ValueError(f"unknown representation: {token!r}")


MANUAL_REPRESENTATIONS = (
    Representation.TIME_VALUE,
    Representation.AGGREGATED,
    Representation.HISTOGRAM,
    Representation.FFT,
)


def _as_values(t) -> np.ndarray:
    if isinstance(t, RssiTrace):
        return t.values()
    x = np.asarray(t, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d sample vector, got shape {x.shape}")
    return x


def time_value(t) -> np.ndarray:
    """The identity representation: the samples themselves."""
    return _as_values(t).copy()


def aggregated(t) -> np.ndarray:
    """[mean, population std, min, q25, median, q75, max], linear-interp quantiles."""
    x = _as_values(t)
    q25, q50, q75 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return np.array([x.mean(), x.std(), x.min(), q25, q50, q75, x.max()], dtype=np.float64)


def histogram(t, lo: float, hi: float) -> np.ndarray:
    """10 equal-width bin fractions over [lo, hi].

    The last bin is right-closed; samples outside the range count toward the
    nearest edge bin.  Fractions sum to 1.
    """
    if not (hi > lo):
        raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
    x = np.clip(_as_values(t), lo, hi)
    counts, _edges = np.histogram(x, bins=HIST_BINS, range=(lo, hi))
    return counts.astype(np.float64) / x.size


def fft_magnitude(t, drop_dc: bool = False) -> np.ndarray:
    """One-sided DFT magnitude spectrum: 151 bins from DC to Nyquist.

    drop_dc removes bin 0 for detectors that should ignore the mean level.
    """
    x = _as_values(t)
    mags = np.abs(np.fft.rfft(x))
    return mags[1:] if drop_dc else mags


def global_range(rows) -> tuple:
    """Dataset-global (min, max) over every sample; feeds the histogram bins."""
    lo = np.inf
    hi = -np.inf
    for r in rows:
        vals = r.trace.values() if hasattr(r, "trace") else _as_values(r)
        lo = min(lo, float(vals.min()))
        hi = max(hi, float(vals.max()))
    if not (hi > lo):
        # a perfectly constant corpus still needs a non-degenerate range
        hi = lo + 1.0
    return lo, hi


def representation_matrix(rows, representation: Representation, hist_range=None, drop_dc: bool = False):
    """Stack one manual representation for every row (LabeledTrace or RssiTrace)."""
    traces = [r.trace if hasattr(r, "trace") else r for r in rows]
    if representation is Representation.TIME_VALUE:
        mat = [time_value(t) for t in traces]
    elif representation is Representation.AGGREGATED:
        mat = [aggregated(t) for t in traces]
    elif representation is Representation.HISTOGRAM:
        if hist_range is None:
            hist_range = global_range(traces)
        mat = [histogram(t, hist_range[0], hist_range[1]) for t in traces]
    elif representation is Representation.FFT:
        mat = [fft_magnitude(t, drop_dc=drop_dc) for t in traces]
    else:
        raise ValueError(f"{representation} is not a manual representation")
    return np.vstack(mat)


# -- scalers -----------------------------------------------------------------


class ScalerKind(Enum):
    NONE = "none"
    MEAN_STD_CENTER_ONLY = "std_center"
    MEAN_STD_FULL = "std_full"
    ROBUST_CENTER_ONLY = "robust_center"
    ROBUST_FULL = "robust_full"
    MIN_MAX = "minmax"

    @property
    def token(self) -> str:
        return self.value

    @classmethod
    def from_token(cls, token: str) -> "ScalerKind":
        for k in cls:
            if k.value == token:
                return k
        raise ValueError(f"unknown scaler: {token!r}")


class Scaler:
    """Per-feature affine scaler: transform(x) = (x - center) / scale.

    Zero-spread features fall back to scale 1 so constants map to 0 instead
    of dividing by zero.  Must be fit before use; fit only on training rows.
    """

    def __init__(self, kind: ScalerKind):
        self.kind = kind
        self.center = None
        self.scale = None

    def fit(self, X) -> "Scaler":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"scaler needs a non-empty 2-d matrix, got shape {X.shape}")
        k = self.kind
        if k is ScalerKind.NONE:
            center = np.zeros(X.shape[1])
            scale = np.ones(X.shape[1])
        elif k in (ScalerKind.MEAN_STD_CENTER_ONLY, ScalerKind.MEAN_STD_FULL):
            center = X.mean(axis=0)
            scale = X.std(axis=0) if k is ScalerKind.MEAN_STD_FULL else np.ones(X.shape[1])
        elif k in (ScalerKind.ROBUST_CENTER_ONLY, ScalerKind.ROBUST_FULL):
            center = np.quantile(X, 0.5, axis=0)
            if k is ScalerKind.ROBUST_FULL:
                scale = np.quantile(X, 0.75, axis=0) - np.quantile(X, 0.25, axis=0)
            else:
                scale = np.ones(X.shape[1])
        elif k is ScalerKind.MIN_MAX:
            center = X.min(axis=0)
            scale = X.max(axis=0) - X.min(axis=0)
        else:  # pragma: no cover
            raise ValueError(f"unhandled scaler kind {k}")
        scale = np.where(scale == 0.0, 1.0, scale)
        self.center = center
        self.scale = scale
        return self

    def transform(self, X) -> np.ndarray:
        if self.center is None:
            raise RuntimeError("scaler used before fit")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.center) / self.scale


def fit_scaler(X, kind: ScalerKind) -> Scaler:
    return Scaler(kind).fit(X)


# -- feature matrix io -------------------------------------------------------


@dataclass(frozen=True)
class FeatureMatrix:
    """One representation of a whole dataset, rows aligned with link_ids."""

    representation: Representation
    encoded: bool
    link_ids: tuple
    X: np.ndarray
    labels: tuple | None = None  # "NORMAL"/"ANOMALOUS" per row when known

    def __post_init__(self):
        if self.X.shape[0] != len(self.link_ids):
            raise ValueError("row count does not match link_ids")
        if self.labels is not None and len(self.labels) != len(self.link_ids):
            raise ValueError("label count does not match link_ids")


def write_features(fm: FeatureMatrix, path: str, meta: dict | None = None) -> None:
    """Write a `link_id,label,f000,...` CSV plus a JSON sidecar describing it."""
    d = fm.X.shape[1]
    header = ["link_id", "label"] + [f"f{i:03d}" for i in range(d)]
    labels = fm.labels if fm.labels is not None else [""] * len(fm.link_ids)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for link_id, label, row in zip(fm.link_ids, labels, fm.X):
            fh.write(link_id + "," + label + "," + ",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {
        "representation": fm.representation.token,
        "encoded": fm.encoded,
        "rows": int(fm.X.shape[0]),
        "dims": int(d),
    }
    if meta:
        sidecar.update(meta)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_features(path: str) -> FeatureMatrix:
    with open(path + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    link_ids = []
    labels = []
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        cells = line.split(",")
        link_ids.append(cells[0])
        labels.append(cells[1])
        rows.append([float(c) for c in cells[2:]])
    X = np.asarray(rows, dtype=np.float64)
    if X.shape != (sidecar["rows"], sidecar["dims"]):
        raise ValueError(f"{path}: shape {X.shape} does not match sidecar")
    return FeatureMatrix(
        representation=Representation.from_token(sidecar["representation"]),
        encoded=bool(sidecar["encoded"]),
        link_ids=tuple(link_ids),
        X=X,
        labels=None if all(lb == "" for lb in labels) else tuple(labels),
    )
