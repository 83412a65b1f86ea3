"""Synthetic workload generation and request-trace ingestion.

Traces are time-ordered (timestamp, file, router) triples.  Synthetic file
lengths are Pareto-distributed seconds of video rounded up to whole chunks;
synthetic arrivals are independent Poisson streams per (file, router).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UnknownFileId
from .model import SystemTopology


@dataclass(frozen=True)
class RequestTrace:
    """Time-ordered request stream plus the catalog it refers to."""

    times: np.ndarray     # (n,) seconds, non-decreasing
    files: np.ndarray     # (n,) int file ids
    routers: np.ndarray   # (n,) int router ids
    segments: np.ndarray  # (r,) chunks per file

    def __post_init__(self):
        for name in ("times", "files", "routers", "segments"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if len(self.times) and (np.diff(self.times) < 0).any():
            raise ParseError("timestamps must be non-decreasing")
        if len(self.files) and (
            self.files.min() < 0 or self.files.max() >= len(self.segments)
        ):
            raise UnknownFileId("file id outside catalog range")

    def __len__(self):
        return len(self.times)


def gen_catalog(num_files, shape, scale, tau, seed, max_length=3600.0) -> np.ndarray:
    """Chunk counts for ``num_files`` Pareto(shape, scale) video lengths.

    Lengths are redrawn until below ``max_length`` seconds, then rounded up
    to a whole number of tau-second chunks.
    """
    if shape <= 1 or scale <= 0:
        raise ValueError("need shape > 1 and scale > 0")
    rng = np.random.default_rng(seed)
    lengths = np.empty(num_files)
    filled = 0
    while filled < num_files:
        draw = scale / rng.random(num_files - filled) ** (1.0 / shape)
        keep = draw[draw < max_length]
        lengths[filled : filled + len(keep)] = keep
        filled += len(keep)
    return np.ceil(lengths / tau).astype(int)


def save_catalog(segments, tau, path) -> None:
    """Write the catalog as ``file_id,length_s`` CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file_id", "length_s"])
        for i, segs in enumerate(np.asarray(segments)):
            w.writerow([i, f"{segs * tau:g}"])


def load_catalog(path, tau) -> np.ndarray:
    """Read a ``file_id,length_s`` CSV back into chunk counts."""
    lengths = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["file_id", "length_s"]:
            raise ParseError(f"{path}: expected header file_id,length_s", line=1)
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                lengths[int(row[0])] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad catalog record {row}: {exc}", line=ln) from exc
    if sorted(lengths) != list(range(len(lengths))):
        raise ParseError(f"{path}: file ids must be 0..{len(lengths) - 1}")
    return np.array([int(np.ceil(lengths[i] / tau)) for i in range(len(lengths))])


def gen_poisson_trace(topo: SystemTopology, horizon, seed) -> RequestTrace:
    """Superposition of independent Poisson streams per (file, router)."""
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    rng = np.random.default_rng(seed)
    times, files, routers = [], [], []
    for i in range(topo.num_files):
        for l in range(topo.num_edge_routers):
            lam = float(topo.arrival_rate[i, l])
            if lam <= 0:
                continue
            n_est = int(lam * horizon + 6.0 * np.sqrt(lam * horizon) + 16)
            t = np.cumsum(rng.exponential(1.0 / lam, size=n_est))
            while t[-1] < horizon:  # top up the rare short draw
                extra = np.cumsum(rng.exponential(1.0 / lam, size=n_est)) + t[-1]
                t = np.concatenate([t, extra])
            t = t[t < horizon]
            times.append(t)
            files.append(np.full(len(t), i, dtype=np.int64))
            routers.append(np.full(len(t), l, dtype=np.int64))
    if not times:
        empty = np.array([])
        return RequestTrace(empty, empty.astype(int), empty.astype(int), topo.segments)
    times = np.concatenate(times)
    order = np.argsort(times, kind="stable")
    return RequestTrace(
        times[order],
        np.concatenate(files)[order],
        np.concatenate(routers)[order],
        topo.segments,
    )


def load_trace(path, segments, tau=None) -> RequestTrace:
    """Read a CSV trace ``time_s,file_id,router_id[,length_s]``.

    An optional length column overrides the catalog entry for that file
    (requires ``tau`` to convert seconds to chunks).  Rejects unsorted
    timestamps and unknown file ids with the offending line number.
    """
    segments = np.array(segments, dtype=int)
    times, files, routers = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty trace file")
        cols = [c.strip() for c in header]
        if cols[:3] != ["time_s", "file_id", "router_id"]:
            raise ParseError(f"unexpected header {cols}", line=1)
        has_len = len(cols) > 3 and cols[3] == "length_s"
        if has_len and tau is None:
            raise ParseError("length_s column requires tau", line=1)
        prev = -np.inf
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, fid, rid = float(row[0]), int(row[1]), int(row[2])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad record {row}: {exc}", line=ln) from exc
            if t < prev:
                raise ParseError(f"timestamp {t} precedes {prev}", line=ln)
            prev = t
            if fid < 0 or fid >= len(segments):
                raise UnknownFileId(f"line {ln}: file id {fid} not in catalog")
            if has_len and len(row) > 3 and row[3] != "":
                segments[fid] = int(np.ceil(float(row[3]) / tau))
            times.append(t)
            files.append(fid)
            routers.append(rid)
    return RequestTrace(
        np.array(times), np.array(files, dtype=np.int64),
        np.array(routers, dtype=np.int64), segments,
    )
