"""Core RSSI trace types plus ingestion, filtering, synthesis and canonical CSV io.

A trace is one directed radio link observed for a fixed window of 300
packets.  Each sample is either a received-signal level in dBm or the LOSS
marker (packet never arrived).  Raw corpus values are integers in [0, 128]
where 128 means loss; everything downstream works in dBm via a fixed offset.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

TRACE_LEN = 300
LOSS = None  # sample marker for a packet that never arrived

RAW_LOSS = 128
DEFAULT_DBM_OFFSET = -95.0

# canonical CSV layout
_CSV_HEADER = ["link_id", "tx", "rx", "noise_dbm"] + [f"s{i:03d}" for i in range(TRACE_LEN)]

# dBm sanity bounds for non-LOSS samples
RSSI_MIN_DBM = -110.0
RSSI_MAX_DBM = 0.0


class IngestError(ValueError):
    """Raised when a corpus file cannot be parsed; message names the file."""


class CsvFormatError(ValueError):
    """Raised on malformed canonical CSV; message carries the line number."""


class ProvenanceKind(Enum):
    RUTGERS_RAW = "rutgers_raw"
    CANONICAL_CSV = "canonical_csv"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Provenance:
    kind: ProvenanceKind
    seed: Optional[int] = None  # set only for SYNTHETIC


@dataclass(frozen=True)
class RssiTrace:
    """One link's 300-sample RSSI window; samples are dBm floats or LOSS."""

    link_id: str
    tx_node: int
    rx_node: int
    noise_dbm: float
    samples: tuple

    def __post_init__(self):
        if len(self.samples) != TRACE_LEN:
            raise ValueError(f"trace {self.link_id}: expected {TRACE_LEN} samples, got {len(self.samples)}")
        for v in self.samples:
            if v is LOSS:
                continue
            if not (RSSI_MIN_DBM <= v <= RSSI_MAX_DBM):
                raise ValueError(f"trace {self.link_id}: sample {v} outside [{RSSI_MIN_DBM}, {RSSI_MAX_DBM}] dBm")

    @property
    def loss_count(self) -> int:
        return sum(1 for v in self.samples if v is LOSS)

    def values(self) -> np.ndarray:
        """Samples as a float array; only valid for lossless traces."""
        if self.loss_count:
            raise ValueError(f"trace {self.link_id} has LOSS samples")
        return np.asarray(self.samples, dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    """Immutable trace collection, iterated in link_id order."""

    traces: tuple
    provenance: Provenance

    def __post_init__(self):
        ids = [t.link_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate link_id in dataset")
        if ids != sorted(ids):
            object.__setattr__(self, "traces", tuple(sorted(self.traces, key=lambda t: t.link_id)))

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def by_id(self, link_id: str) -> RssiTrace:
        for t in self.traces:
            if t.link_id == link_id:
                return t
        raise KeyError(link_id)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Deterministic per-entity RNG stream from a base seed and string/int keys.

    String keys are hashed with sha256 so streams do not depend on dict or
    iteration order anywhere in the pipeline.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            digest = hashlib.sha256(k.encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "big"))
            words.append(int.from_bytes(digest[4:8], "big"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def stable_seed(seed: int, *keys) -> int:
    """Collapse (seed, keys) into one reproducible integer seed."""
    h = hashlib.sha256(str(int(seed)).encode("utf-8"))
    for k in keys:
        h.update(b"/")
        h.update(str(k).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


# -- ingestion ---------------------------------------------------------------

_RX_RE = re.compile(r"rdec(\d+)", re.IGNORECASE)
_TX_RE = re.compile(r"sdec(\d+)", re.IGNORECASE)
_NOISE_RE = re.compile(r"(?:dbm|noise_?)(-?\d+)", re.IGNORECASE)


def _parse_link_identity(path: str, root: str):
    """Extract (tx, rx, noise) from a corpus file path, or None if not a trace file.

    Accepted layout: the file name carries ``rdec<rx>``; ``sdec<tx>`` appears in
    the file name or an ancestor directory; the noise level appears as
    ``dbm<lvl>`` or ``noise<lvl>`` in an ancestor directory (default 0).
    """
    rel = os.path.relpath(path, root)
    name = os.path.basename(rel)
    m_rx = _RX_RE.search(name)
    if not m_rx:
        return None
    m_tx = _TX_RE.search(name)
    if not m_tx:
        for part in reversed(rel.split(os.sep)[:-1]):
            m_tx = _TX_RE.search(part)
            if m_tx:
                break
    if not m_tx:
        return None
    noise = 0
    for part in rel.split(os.sep)[:-1]:
        m_n = _NOISE_RE.search(part)
        if m_n:
            noise = int(m_n.group(1))
    return int(m_tx.group(1)), int(m_rx.group(1)), noise


def _read_raw_file(path: str, dbm_offset: float) -> tuple:
    samples = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read corpus file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            raw = int(text)
        except ValueError:
            raise IngestError(f"corpus file {path}, line {lineno}: not an integer: {text!r}")
        if not (0 <= raw <= RAW_LOSS):
            raise IngestError(f"corpus file {path}, line {lineno}: raw value {raw} outside [0, {RAW_LOSS}]")
        samples.append(LOSS if raw == RAW_LOSS else float(raw) + dbm_offset)
    if len(samples) > TRACE_LEN:
        raise IngestError(f"corpus file {path}: {len(samples)} samples exceed window of {TRACE_LEN}")
    # short file: the remaining sequence numbers were never received
    samples.extend([LOSS] * (TRACE_LEN - len(samples)))
    return tuple(samples)


def ingest_rutgers(root: str, dbm_offset: float = DEFAULT_DBM_OFFSET) -> Dataset:
    """Walk a raw corpus directory and return every parsable link trace.

    Files that do not match the link naming convention are skipped; matching
    files that fail to parse raise IngestError naming the offender.
    """
    if not os.path.isdir(root):
        raise IngestError(f"corpus root is not a directory: {root}")
    traces = []
    for dirpath, _dirnames, filenames in os.walk(root):
        for fname in sorted(filenames):
            path = os.path.join(dirpath, fname)
            identity = _parse_link_identity(path, root)
            if identity is None:
                continue
            tx, rx, noise = identity
            link_id = f"dbm{noise}_sdec{tx}_rdec{rx}"
            traces.append(
                RssiTrace(
                    link_id=link_id,
                    tx_node=tx,
                    rx_node=rx,
                    noise_dbm=float(noise),
                    samples=_read_raw_file(path, dbm_offset),
                )
            )
    return Dataset(tuple(traces), Provenance(ProvenanceKind.RUTGERS_RAW))


def filter_lossless(d: Dataset) -> Dataset:
    """Keep only traces with zero LOSS samples.  Idempotent."""
    kept = tuple(t for t in d.traces if t.loss_count == 0)
    return Dataset(kept, d.provenance)


# -- synthetic corpus --------------------------------------------------------

SYNTH_BASE_RANGE = (-80.0, -55.0)
SYNTH_JITTER_STD = 1.5
SYNTH_CLIP = (-95.0, -40.0)


def generate_synthetic(n_links: int, seed: int) -> Dataset:
    """Generate a stable-link corpus: per link a uniform base level in
    [-80, -55] dBm plus iid Gaussian jitter (sigma 1.5 dB), clipped to
    [-95, -40].  Pure function of (n_links, seed); samples are quantized to
    the canonical CSV resolution of 0.01 dB so file round-trips are exact.
    """
    if n_links <= 0:
        raise ValueError(f"n_links must be positive, got {n_links}")
    traces = []
    for i in range(n_links):
        link_id = f"syn{i:05d}"
        rng = derive_rng(seed, link_id)
        base = rng.uniform(*SYNTH_BASE_RANGE)
        vals = base + rng.normal(0.0, SYNTH_JITTER_STD, size=TRACE_LEN)
        vals = np.clip(vals, *SYNTH_CLIP)
        vals = np.round(vals, 2)
        traces.append(
            RssiTrace(
                link_id=link_id,
                tx_node=i + 1,
                rx_node=0,
                noise_dbm=0.0,
                samples=tuple(float(v) for v in vals),
            )
        )
    return Dataset(tuple(traces), Provenance(ProvenanceKind.SYNTHETIC, seed=seed))


# -- canonical CSV -----------------------------------------------------------


def write_csv(d: Dataset, path: str) -> None:
    """Write the canonical CSV: one row per link, LOSS as an empty field,
    values with two fractional digits, UTF-8 with LF line endings.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_CSV_HEADER) + "\n")
        for t in d.traces:
            cells = [t.link_id, str(t.tx_node), str(t.rx_node), _fmt_num(t.noise_dbm)]
            cells += ["" if v is LOSS else f"{v:.2f}" for v in t.samples]
            fh.write(",".join(cells) + "\n")


def _fmt_num(x: float) -> str:
    return f"{x:g}"


def read_csv(path: str) -> Dataset:
    """Read a canonical CSV back into a Dataset."""
    if not os.path.isfile(path):
        raise CsvFormatError(f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CsvFormatError(f"{path}: empty file, expected header")
    header = lines[0].split(",")
    if header != _CSV_HEADER:
        raise CsvFormatError(f"{path}, line 1: bad header")
    traces = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(_CSV_HEADER):
            raise CsvFormatError(f"{path}, line {lineno}: expected {len(_CSV_HEADER)} fields, got {len(cells)}")
        try:
            samples = tuple(LOSS if c == "" else float(c) for c in cells[4:])
            traces.append(
                RssiTrace(
                    link_id=cells[0],
                    tx_node=int(cells[1]),
                    rx_node=int(cells[2]),
                    noise_dbm=float(cells[3]),
                    samples=samples,
                )
            )
        except ValueError as exc:
            raise CsvFormatError(f"{path}, line {lineno}: {exc}") from exc
    return Dataset(tuple(traces), Provenance(ProvenanceKind.CANONICAL_CSV))


def dataset_checksum(d: Dataset) -> str:
    """Stable sha256 over the canonical row encoding; used by stage manifests."""
    h = hashlib.sha256()
    for t in d.traces:
        row = [t.link_id, str(t.tx_node), str(t.rx_node), _fmt_num(t.noise_dbm)]
        row += ["" if v is LOSS else f"{v:.2f}" for v in t.samples]
        h.update((",".join(row) + "\n").encode("utf-8"))
    return h.hexdigest()
