"""Synthetic link-fault injection.

Four fault shapes are written into lossless RSSI traces:

  SUDDEN_D  permanent step down to the floor level, onset in samples
            [199, 279] (packets 200..280, converted to 0-based), lasting to
            the end of the window.
  SUDDEN_R  step down to the floor with recovery: onset in [24, 274]
            (packets 25..275), duration uniform in [5, 20] samples.
  INSTA_D   independent single-sample floor spikes, each sample hit with
            probability 0.01; a trace that draws zero spikes gets one forced
            spike at a uniform position.
  SLOW_D    linear drift: from an onset in [0, 19] (packets 1..20) the level
            falls by a per-link slope drawn once from [0.5, 1.5] dB/sample
            over a window of uniform [150, 180] samples, clipped at the
            floor; after the window every sample keeps the final in-window
            drop.

Mutated samples never rise above the original and are kept on the canonical
0.01 dB grid.  All draws come from per-link RNG streams derived from
(seed, link_id), so injecting disjoint subsets commutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .traces import LOSS, TRACE_LEN, Dataset, RssiTrace, derive_rng

DEFAULT_FRACTION = 0.33
DEFAULT_FLOOR_DBM = -95.0
DEFAULT_SPIKE_PROB = 0.01
DEFAULT_SLOPE_RANGE = (0.5, 1.5)

SUDDEN_D_ONSET = (199, 279)  # inclusive, 0-based
SUDDEN_R_ONSET = (24, 274)
SUDDEN_R_DURATION = (5, 20)
SLOW_D_ONSET = (0, 19)
SLOW_D_DURATION = (150, 180)


class AnomalyKind(Enum):
    SUDDEN_D = "suddend"
    SUDDEN_R = "suddenr"
    INSTA_D = "instad"
    SLOW_D = "slowd"

    @property
    def token(self) -> str:
        return self.value

    @classmethod
    def from_token(cls, token: str) -> "AnomalyKind":
        for k in cls:
            if k.value == token:
                return k
        raise ValueError(f"unknown anomaly kind: {token!r}")


class Label(Enum):
    NORMAL = "NORMAL"
    ANOMALOUS = "ANOMALOUS"


@dataclass(frozen=True)
class AnomalySpec:
    """Injection scenario: what to inject, into what share of links, and how."""

    kind: AnomalyKind
    seed: int
    affected_fraction: float = DEFAULT_FRACTION
    floor_dbm: float = DEFAULT_FLOOR_DBM
    spike_prob: float = DEFAULT_SPIKE_PROB
    slope_range: tuple = DEFAULT_SLOPE_RANGE

    def __post_init__(self):
        if not (0.0 <= self.affected_fraction <= 1.0):
            raise ValueError(f"affected_fraction must be in [0, 1], got {self.affected_fraction}")
        if not (0.0 <= self.spike_prob <= 1.0):
            raise ValueError(f"spike_prob must be in [0, 1], got {self.spike_prob}")
        lo, hi = self.slope_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad slope_range {self.slope_range}")


@dataclass(frozen=True)
class InjectionReport:
    link_id: str
    kind: AnomalyKind
    onset: int
    duration: int
    slope: Optional[float] = None
    spike_indices: Optional[tuple] = None


@dataclass(frozen=True)
class LabeledTrace:
    trace: RssiTrace
    label: Label
    kind: Optional[AnomalyKind] = None
    report: Optional[InjectionReport] = None

    def __post_init__(self):
        anomalous = self.label is Label.ANOMALOUS
        if anomalous != (self.kind is not None) or anomalous != (self.report is not None):
            raise ValueError("kind/report must be present exactly when label is ANOMALOUS")


def _mutate(trace: RssiTrace, new_samples) -> RssiTrace:
    return RssiTrace(
        link_id=trace.link_id,
        tx_node=trace.tx_node,
        rx_node=trace.rx_node,
        noise_dbm=trace.noise_dbm,
        samples=tuple(float(v) for v in new_samples),
    )


def inject_sudden_d(t: RssiTrace, rng, floor_dbm: float = DEFAULT_FLOOR_DBM):
    """Step drop to the floor from a uniform onset in [199, 279], no recovery."""
    onset = int(rng.integers(SUDDEN_D_ONSET[0], SUDDEN_D_ONSET[1] + 1))
    vals = list(t.samples)
    for i in range(onset, TRACE_LEN):
        vals[i] = min(vals[i], floor_dbm)
    report = InjectionReport(t.link_id, AnomalyKind.SUDDEN_D, onset=onset, duration=TRACE_LEN - onset)
    return _mutate(t, vals), report


def inject_sudden_r(t: RssiTrace, rng, floor_dbm: float = DEFAULT_FLOOR_DBM):
    """Step drop to the floor with recovery after a uniform [5, 20] sample hold."""
    onset = int(rng.integers(SUDDEN_R_ONSET[0], SUDDEN_R_ONSET[1] + 1))
    duration = int(rng.integers(SUDDEN_R_DURATION[0], SUDDEN_R_DURATION[1] + 1))
    vals = list(t.samples)
    for i in range(onset, min(onset + duration, TRACE_LEN)):
        vals[i] = min(vals[i], floor_dbm)
    report = InjectionReport(t.link_id, AnomalyKind.SUDDEN_R, onset=onset, duration=duration)
    return _mutate(t, vals), report


def inject_insta_d(
    t: RssiTrace,
    rng,
    floor_dbm: float = DEFAULT_FLOOR_DBM,
    spike_prob: float = DEFAULT_SPIKE_PROB,
):
    """Independent per-sample floor spikes; at least one spike is guaranteed."""
    mask = rng.random(TRACE_LEN) < spike_prob
    idx = [int(i) for i in np.flatnonzero(mask)]
    if not idx:
        idx = [int(rng.integers(0, TRACE_LEN))]
    vals = list(t.samples)
    for i in idx:
        vals[i] = min(vals[i], floor_dbm)
    report = InjectionReport(
        t.link_id,
        AnomalyKind.INSTA_D,
        onset=idx[0],
        duration=1,
        spike_indices=tuple(idx),
    )
    return _mutate(t, vals), report


def inject_slow_d(
    t: RssiTrace,
    rng,
    floor_dbm: float = DEFAULT_FLOOR_DBM,
    slope_range: tuple = DEFAULT_SLOPE_RANGE,
):
    """Linear ramp down from a uniform onset in [0, 19] at a per-link slope."""
    onset = int(rng.integers(SLOW_D_ONSET[0], SLOW_D_ONSET[1] + 1))
    slope = float(rng.uniform(slope_range[0], slope_range[1]))
    duration = int(rng.integers(SLOW_D_DURATION[0], SLOW_D_DURATION[1] + 1))
    vals = list(t.samples)
    end = min(onset + duration, TRACE_LEN)
    for i in range(onset, TRACE_LEN):
        drop = slope * ((i if i < end else end - 1) - onset)
        vals[i] = min(vals[i], round(max(floor_dbm, vals[i] - drop), 2))
    report = InjectionReport(t.link_id, AnomalyKind.SLOW_D, onset=onset, duration=duration, slope=slope)
    return _mutate(t, vals), report


_KERNELS = {
    AnomalyKind.SUDDEN_D: lambda t, rng, spec: inject_sudden_d(t, rng, spec.floor_dbm),
    AnomalyKind.SUDDEN_R: lambda t, rng, spec: inject_sudden_r(t, rng, spec.floor_dbm),
    AnomalyKind.INSTA_D: lambda t, rng, spec: inject_insta_d(t, rng, spec.floor_dbm, spec.spike_prob),
    AnomalyKind.SLOW_D: lambda t, rng, spec: inject_slow_d(t, rng, spec.floor_dbm, spec.slope_range),
}


def affected_count(n_traces: int, fraction: float) -> int:
    # 0.33 of 2123 links must give exactly 700, so truncate rather than round
    return int(math.floor(fraction * n_traces))


def inject(d: Dataset, spec: AnomalySpec) -> tuple:
    """Inject one anomaly kind into a fixed share of links.

    Returns a tuple of LabeledTrace in link_id order.  Affected links are
    drawn without replacement from the id-sorted dataset using a stream
    derived from ``spec.seed``; each affected trace is then mutated with its
    own (seed, link_id) stream.
    """
    for t in d.traces:
        if t.loss_count:
            raise ValueError(f"trace {t.link_id} has LOSS samples; inject requires a lossless dataset")
    n_anom = affected_count(len(d), spec.affected_fraction)
    selector = derive_rng(spec.seed, "selection", spec.kind.token)
    chosen = set()
    if n_anom:
        idx = selector.choice(len(d), size=n_anom, replace=False)
        chosen = {d.traces[i].link_id for i in idx}
    rows = []
    for t in d.traces:
        if t.link_id in chosen:
            rng = derive_rng(spec.seed, spec.kind.token, t.link_id)
            mutated, report = _KERNELS[spec.kind](t, rng, spec)
            rows.append(LabeledTrace(mutated, Label.ANOMALOUS, spec.kind, report))
        else:
            rows.append(LabeledTrace(t, Label.NORMAL))
    return tuple(rows)


def census(rows) -> dict:
    """Count labels in an injected collection."""
    n_anom = sum(1 for r in rows if r.label is Label.ANOMALOUS)
    return {"total": len(rows), "anomalous": n_anom, "normal": len(rows) - n_anom}


# -- labels sidecar ----------------------------------------------------------

_LABELS_HEADER = ["link_id", "label", "kind", "onset", "duration", "slope"]


def write_labels(rows, path: str) -> None:
    """Write the label sidecar CSV next to an injected trace file."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_LABELS_HEADER) + "\n")
        for r in rows:
            if r.label is Label.ANOMALOUS:
                rep = r.report
                cells = [
                    r.trace.link_id,
                    r.label.value,
                    r.kind.token,
                    str(rep.onset),
                    str(rep.duration),
                    "" if rep.slope is None else repr(rep.slope),
                ]
            else:
                cells = [r.trace.link_id, r.label.value, "", "", "", ""]
            fh.write(",".join(cells) + "\n")


def read_labels(path: str) -> dict:
    """Read a label sidecar; returns link_id -> (Label, kind, onset, duration, slope)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split(",") != _LABELS_HEADER:
        raise ValueError(f"{path}: bad labels header")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(_LABELS_HEADER):
            raise ValueError(f"{path}, line {lineno}: expected {len(_LABELS_HEADER)} fields")
        link_id, label, kind, onset, duration, slope = cells
        out[link_id] = (
            Label(label),
            AnomalyKind.from_token(kind) if kind else None,
            int(onset) if onset else None,
            int(duration) if duration else None,
            float(slope) if slope else None,
        )
    return out


def join_labels(d: Dataset, labels: dict) -> tuple:
    """Rebuild LabeledTrace rows from a dataset and a label sidecar mapping."""
    rows = []
    for t in d.traces:
        if t.link_id not in labels:
            raise ValueError(f"no label for link {t.link_id}")
        label, kind, onset, duration, slope = labels[t.link_id]
        if label is Label.ANOMALOUS:
            report = InjectionReport(t.link_id, kind, onset=onset, duration=duration, slope=slope)
            rows.append(LabeledTrace(t, label, kind, report))
        else:
            rows.append(LabeledTrace(t, label))
    return tuple(rows)
