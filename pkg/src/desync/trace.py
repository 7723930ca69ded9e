"""Per-rank timelines produced by the simulators, plus their file formats.

The trace file is tab separated. Header lines start with ``#``; every other
line is one segment with the fixed column order

    rank  kind  t_start  t_end  iteration  detail  contended

Times are written with ``repr`` so a reloaded trace is bit-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

EXEC = "exec"
WAIT = "wait"
TRANSFER = "transfer"
KINDS = (EXEC, WAIT, TRANSFER)

FORMAT_TAG = "desync-trace/v1"


@dataclass(frozen=True)
class Segment:
    kind: str
    t_start: float
    t_end: float
    iteration: int
    detail: str = ""
    # exec segments only: True while the rank draws on its memory domain
    contended: bool = False


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    nbytes: int
    protocol: str  # "eager" | "rendezvous"
    t_send: float  # Isend posted
    t_recv: float  # Irecv posted
    t_start: float  # data starts moving
    t_end: float  # data available at the receiver


@dataclass
class Trace:
    ranks: List[List[Segment]]
    end_time: float
    seed: int
    scenario_digest: str
    n_iters: int
    domains: Tuple[Tuple[int, int], ...] = ()
    messages: List[Message] = field(default_factory=list)

    @property
    def n_ranks(self) -> int:
        return len(self.ranks)

    def check_coverage(self, tol: float = 0.0) -> None:
        """Raise AssertionError unless every rank tiles [0, end_time] exactly."""
        for r, segs in enumerate(self.ranks):
            t = 0.0
            for s in segs:
                if s.kind not in KINDS:
                    raise AssertionError(f"rank {r}: bad kind {s.kind}")
                if abs(s.t_start - t) > tol:
                    raise AssertionError(f"rank {r}: gap/overlap at {t} vs {s.t_start}")
                if s.t_end < s.t_start:
                    raise AssertionError(f"rank {r}: negative segment at {s.t_start}")
                t = s.t_end
            if abs(t - self.end_time) > tol:
                raise AssertionError(f"rank {r}: ends at {t}, trace at {self.end_time}")

    def exec_segments(self, rank: int) -> List[Segment]:
        return [s for s in self.ranks[rank] if s.kind == EXEC]


def scenario_digest(scenario) -> str:
    """Stable checksum of a scenario's full content."""
    h = hashlib.sha256(repr(scenario).encode())
    return h.hexdigest()[:16]


def dumps(trace: Trace) -> str:
    buf = io.StringIO()
    header = {
        "format": FORMAT_TAG,
        "n_ranks": trace.n_ranks,
        "n_iters": trace.n_iters,
        "end_time": repr(trace.end_time),
        "seed": trace.seed,
        "scenario_digest": trace.scenario_digest,
        "domains": [list(d) for d in trace.domains],
    }
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    buf.write("# rank\tkind\tt_start\tt_end\titeration\tdetail\tcontended\n")
    for r, segs in enumerate(trace.ranks):
        for s in segs:
            buf.write(f"{r}\t{s.kind}\t{s.t_start!r}\t{s.t_end!r}\t{s.iteration}\t"
                      f"{s.detail}\t{int(s.contended)}\n")
    return buf.getvalue()


def loads(text: str) -> Trace:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# {"):
        raise ValueError("not a trace file: missing header")
    header = json.loads(lines[0][2:])
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported trace format {header.get('format')!r}")
    ranks: List[List[Segment]] = [[] for _ in range(header["n_ranks"])]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(f)}")
        ranks[int(f[0])].append(Segment(f[1], float(f[2]), float(f[3]), int(f[4]), f[5],
                                        f[6] == "1"))
    return Trace(ranks, float(header["end_time"]), header["seed"], header["scenario_digest"],
                 header["n_iters"], tuple(tuple(d) for d in header["domains"]))


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: Trace, path: str) -> None:
    atomic_write(path, dumps(trace))


def read_trace(path: str) -> Trace:
    with open(path) as fh:
        return loads(fh.read())


def to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "kind", "t_start", "t_end", "duration", "iteration", "detail",
                "contended"])
    for r, segs in enumerate(trace.ranks):
        for s in segs:
            w.writerow([r, s.kind, repr(s.t_start), repr(s.t_end), repr(s.t_end - s.t_start),
                        s.iteration, s.detail, int(s.contended)])
    return buf.getvalue()


def messages_to_csv(messages: Sequence[Message]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["src", "dst", "nbytes", "protocol", "t_send", "t_recv", "t_start", "t_end"])
    for m in messages:
        w.writerow([m.src, m.dst, m.nbytes, m.protocol, repr(m.t_send), repr(m.t_recv),
                    repr(m.t_start), repr(m.t_end)])
    return buf.getvalue()


class SegmentBuilder:
    """Accumulates one rank's segments, merging nothing and dropping empties."""

    def __init__(self):
        self.segments: List[Segment] = []
        self.kind: Optional[str] = None
        self.t0 = 0.0
        self.iteration = 0
        self.detail = ""
        self.contended = False

    def open(self, kind: str, t: float, iteration: int, detail: str = "",
             contended: bool = False) -> None:
        self.kind, self.t0, self.iteration = kind, t, iteration
        self.detail, self.contended = detail, contended

    def close(self, t: float, detail: Optional[str] = None) -> None:
        if self.kind is None:
            return
        if t > self.t0:
            self.segments.append(Segment(self.kind, self.t0, t, self.iteration,
                                         self.detail if detail is None else detail,
                                         self.contended))
        self.kind = None

    def switch(self, kind: str, t: float, iteration: int, detail: str = "",
               contended: bool = False, closing_detail: Optional[str] = None) -> None:
        self.close(t, closing_detail)
        self.open(kind, t, iteration, detail, contended)


def domain_ranges(system) -> Tuple[Tuple[int, int], ...]:
    return tuple((d.start, d.stop) for d in system.memory_domains)


def summarize(trace: Trace) -> Dict[str, float]:
    tot = {k: 0.0 for k in KINDS}
    for segs in trace.ranks:
        for s in segs:
            tot[s.kind] += s.t_end - s.t_start
    return tot
