"""Metrics computed from traces.

Covers idle-wave velocity, wavefront slope/amplitude/lagger, the
time-weighted count of concurrently executing ranks, the
communication-to-execution ratio, barrier cost and the desynchronization
speedup ``P_D``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (Barrier, InjectionSpec, Scenario, SystemSpec, dissemination_barrier,
                    total_flops)
from .trace import EXEC, Trace

LOCKSTEP = math.inf  # slope sentinel for a wavefront with zero extent


class AnalysisError(ValueError):
    pass


class NoWaveDetected(AnalysisError):
    pass


class WindowTooShort(AnalysisError):
    pass


class ZeroExecTime(AnalysisError):
    pass


class ZeroDuration(AnalysisError):
    pass


class DivisionByZero(AnalysisError, ZeroDivisionError):
    pass


# -- per-iteration tables ----------------------------------------------------

def blocked_table(trace: Trace, include_barrier: bool = True) -> np.ndarray:
    """Seconds each rank spends in wait/transfer segments, per iteration.

    Trailing ``idle`` time after a rank finished is never counted.
    """
    out = np.zeros((trace.n_ranks, trace.n_iters))
    for r, segs in enumerate(trace.ranks):
        for s in segs:
            if s.kind == EXEC or s.iteration >= trace.n_iters:
                continue
            if not include_barrier and s.detail == "barrier":
                continue
            out[r, s.iteration] += s.t_end - s.t_start
    return out


def exec_table(trace: Trace) -> np.ndarray:
    out = np.zeros((trace.n_ranks, trace.n_iters))
    for r, segs in enumerate(trace.ranks):
        for s in segs:
            if s.kind == EXEC:
                out[r, s.iteration] += s.t_end - s.t_start
    return out


def exec_starts(trace: Trace) -> np.ndarray:
    """Start of the first exec segment of every (rank, iteration); NaN if none."""
    out = np.full((trace.n_ranks, trace.n_iters), np.nan)
    for r, segs in enumerate(trace.ranks):
        for s in segs:
            if s.kind == EXEC and math.isnan(out[r, s.iteration]):
                out[r, s.iteration] = s.t_start
    return out


def iteration_window(trace: Trace, first: int, stop: int) -> Tuple[float, float]:
    """Time window holding every exec start of iterations ``first <= k < stop``."""
    starts = exec_starts(trace)
    first, stop = max(first, 0), min(stop, trace.n_iters)
    if stop <= first:
        raise WindowTooShort(f"empty iteration range [{first}, {stop})")
    block = starts[:, first:stop]
    if not np.any(np.isfinite(block)):
        raise WindowTooShort(f"no exec phases in iterations [{first}, {stop})")
    return float(np.nanmin(block)), float(np.nanmax(block))


# -- idle waves --------------------------------------------------------------

@dataclass
class IdleWave:
    velocity: float  # ranks/s
    extinction_rank: int
    onsets: Dict[int, float]  # rank -> onset time
    origin: int = 0

    @property
    def reach(self) -> int:
        return max(abs(r - self.origin) for r in self.onsets) if self.onsets else 0


def measure_idle_wave(trace: Trace, inj: InjectionSpec, threshold: float = 0.25) -> IdleWave:
    """Locate the idle wave started by ``inj`` and fit its speed.

    A rank's onset is the start of its first blocked period at or after the
    injection iteration whose length exceeds that rank's median pre-injection
    blocked time by ``threshold * inj.extra_seconds``. The velocity is the
    least-squares slope of distance from the injected rank against onset time.
    """
    if not inj.extra_seconds > 0:
        raise NoWaveDetected("injection carries no delay")
    blocked = blocked_table(trace)
    k0 = inj.iteration
    if k0 >= trace.n_iters:
        raise NoWaveDetected("injection iteration outside the trace")
    base = np.median(blocked[:, :k0], axis=1) if k0 > 0 else np.zeros(trace.n_ranks)
    limit = threshold * inj.extra_seconds
    first_wait = _first_blocked_start(trace)
    hit_iter: Dict[int, int] = {}
    for r in range(trace.n_ranks):
        if r == inj.rank:
            continue
        hits = np.nonzero(blocked[r, k0:] - base[r] > limit)[0]
        if hits.size:
            hit_iter[r] = k0 + int(hits[0])
    # Keep only hits reachable from the wave: a rank may start waiting at
    # most one iteration after the latest hit among ranks closer to the origin.
    onsets: Dict[int, float] = {}
    reached = {0: k0}  # distance -> latest accepted hit iteration
    for r in sorted(hit_iter, key=lambda q: (abs(q - inj.rank), q)):
        x = abs(r - inj.rank)
        k = hit_iter[r]
        if k > max(v for d, v in reached.items() if d < x) + 1:
            continue
        onsets[r] = first_wait[r][k]
        reached[x] = max(reached.get(x, k), k)
    if len(onsets) < 2:
        raise NoWaveDetected(f"only {len(onsets)} rank(s) show excess waiting")
    ranks = np.array(sorted(onsets))
    dist = np.abs(ranks - inj.rank).astype(float)
    times = np.array([onsets[r] for r in ranks])
    velocity = _ls_slope(times, dist)
    far = ranks[np.argmax(dist)] if dist.size else inj.rank
    return IdleWave(velocity, int(far), onsets, origin=inj.rank)


def _first_blocked_start(trace: Trace) -> List[Dict[int, float]]:
    out: List[Dict[int, float]] = []
    for segs in trace.ranks:
        d: Dict[int, float] = {}
        for s in segs:
            if s.kind != EXEC and s.iteration not in d:
                d[s.iteration] = s.t_start
        out.append(d)
    return out


def _ls_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of y against x; inf when x has no spread."""
    xc = x - x.mean()
    var = float(np.dot(xc, xc))
    if var <= 1e-30 * max(1.0, float(np.dot(x, x))):
        return LOCKSTEP
    return float(np.dot(xc, y - y.mean()) / var)


# -- wavefronts ----------------------------------------------------------------

@dataclass
class Wavefront:
    slope: float  # ranks/s, LOCKSTEP if the iteration start times coincide
    amplitude: float  # s
    lagger_rank: int
    lagger_domain: int
    n_iterations: int

    @property
    def lockstep(self) -> bool:
        return math.isinf(self.slope)


def _window_iterations(starts: np.ndarray, window: Tuple[float, float]) -> List[int]:
    t0, t1 = window
    keep = []
    for k in range(starts.shape[1]):
        col = starts[:, k]
        if np.all(np.isfinite(col)) and col.min() >= t0 and col.max() <= t1:
            keep.append(k)
    return keep


def _monotone_sections(v: np.ndarray, tol: float) -> List[Tuple[int, int]]:
    """Maximal index runs [a, b) that are non-decreasing or non-increasing.

    Steps within ``tol`` are flat and never end a run; plateaus at either end
    of a run are trimmed to a single rank so that a neighbouring lockstep
    region does not dilute the fit.
    """
    n = len(v)
    d = np.diff(v)
    sign = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    runs = []
    a, direction = 0, 0
    for i, sg in enumerate(sign):
        if sg == 0 or direction in (0, sg):
            direction = direction or sg
            continue
        runs.append((a, i + 1))
        # the new run starts at the turning point, after any plateau before it
        j = i
        while j > a and sign[j - 1] == 0:
            j -= 1
        a, direction = j, sg
    runs.append((a, n))
    out = []
    for a, b in runs:
        while a < b - 1 and sign[a] == 0:
            a += 1
        while b - 1 > a and sign[b - 2] == 0:
            b -= 1
        out.append((a, b))
    return out


def measure_wavefront(trace: Trace, window: Tuple[float, float],
                      tol: Optional[float] = None) -> Wavefront:
    """Shape of the steady pattern of exec-phase start times inside ``window``.

    Each iteration whose first exec segments all start inside the window is
    split into runs of ranks with monotone start times; each run contributes
    the fitted |d rank / d time|. The result is the median over all runs,
    weighted by the time span each run covers, so flat (lockstep) stretches
    do not mask a wavefront elsewhere. If no run spans any time the pattern
    is lockstep and the slope is ``LOCKSTEP``.
    """
    starts = exec_starts(trace)
    its = _window_iterations(starts, window)
    if len(its) < 3:
        raise WindowTooShort(f"{len(its)} complete iteration(s) in window {window}")
    if tol is None:
        tol = 1e-9 * max(1.0, abs(window[1]))
    slopes: List[float] = []
    weights: List[float] = []
    amps: List[float] = []
    rel = []
    ranks = np.arange(trace.n_ranks, dtype=float)
    for k in its:
        col = starts[:, k]
        amps.append(float(col.max() - col.min()))
        rel.append(col - col.min())
        for a, b in _monotone_sections(col, tol):
            if b - a < 2:
                continue
            t = col[a:b]
            span = float(t.max() - t.min())
            if span > tol:
                slopes.append(abs(_ls_slope(t, ranks[a:b])))
                weights.append(span)
    amplitude = float(np.median(amps))
    slope = _weighted_median(slopes, weights) if slopes and amplitude > tol else LOCKSTEP
    med_rel = np.median(np.array(rel), axis=0)
    lagger = _latest_rank(trace, med_rel, tol)
    return Wavefront(slope, amplitude, lagger, _domain_index(trace, lagger), len(its))


def _latest_rank(trace: Trace, med_rel: np.ndarray, tol: float) -> int:
    """Rank with the latest median start; ties go to the domain that lags most.

    A lockstep domain sitting at the top of a wavefront ties with the last rank
    of the neighbouring domain; the domain whose ranks start latest on
    average is taken as the lagging one.
    """
    top = med_rel.max()
    tied = np.nonzero(med_rel >= top - tol)[0]
    if len(tied) == 1:
        return int(tied[0])
    dom_mean = {}
    for i, (a, b) in enumerate(trace.domains or ((0, trace.n_ranks),)):
        dom_mean[i] = float(med_rel[a:b].mean())
    return int(min(tied, key=lambda r: (-dom_mean.get(_domain_index(trace, r), 0.0), r)))


def _weighted_median(values: Sequence[float], weights: Sequence[float]) -> float:
    order = sorted(range(len(values)), key=lambda i: values[i])
    total = float(sum(weights))
    acc = 0.0
    for i in order:
        acc += weights[i]
        if acc >= 0.5 * total:
            return values[i]
    return values[order[-1]]


def _domain_index(trace: Trace, rank: int) -> int:
    for i, (a, b) in enumerate(trace.domains):
        if a <= rank < b:
            return i
    return 0


# -- concurrency ---------------------------------------------------------------

@dataclass
class ActiveHistogram:
    domain: Tuple[int, int]
    seconds: np.ndarray  # index m -> time with exactly m executing ranks
    window: Tuple[float, float]

    @property
    def fractions(self) -> np.ndarray:
        tot = self.seconds.sum()
        if tot <= 0:
            out = np.zeros_like(self.seconds)
            out[0] = 1.0
            return out
        return self.seconds / tot

    @property
    def mode(self) -> int:
        return int(np.argmax(self.fractions))

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.seconds)), self.fractions))


def active_histogram(trace: Trace, domain, window: Optional[Tuple[float, float]] = None
                     ) -> ActiveHistogram:
    """Time-weighted distribution of how many ranks of ``domain`` are executing.

    ``domain`` is a domain index into ``trace.domains`` or a (start, stop)
    rank range. An empty window puts all mass at zero.
    """
    lo, hi = trace.domains[domain] if isinstance(domain, (int, np.integer)) else domain
    t0, t1 = window if window is not None else (0.0, trace.end_time)
    events: List[Tuple[float, int]] = []
    for r in range(lo, hi):
        for s in trace.ranks[r]:
            if s.kind != EXEC:
                continue
            a, b = max(s.t_start, t0), min(s.t_end, t1)
            if b > a:
                events.append((a, 1))
                events.append((b, -1))
    events.sort()
    seconds = np.zeros(hi - lo + 1)
    m, prev = 0, t0
    for t, step in events:
        seconds[m] += t - prev
        m += step
        prev = t
    if t1 > prev:
        seconds[m] += t1 - prev
    return ActiveHistogram((lo, hi), seconds, (t0, t1))


# -- communication-to-execution ratio -----------------------------------------

@dataclass
class CerProfile:
    cer_median: float
    exec_min: float
    exec_max: float
    exec_median: float
    comm_min: float
    comm_max: float
    comm_median: float
    per_rank_exec: np.ndarray = field(repr=False, default=None)
    per_rank_comm: np.ndarray = field(repr=False, default=None)

    def row(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if not k.startswith("per_rank")}


def cer_from_times(exec_times: Sequence[float], comm_times: Sequence[float]) -> CerProfile:
    """Ratio of median communication time to median execution time over ranks."""
    e = np.asarray(exec_times, dtype=float)
    c = np.asarray(comm_times, dtype=float)
    e_med = float(np.median(e))
    if e_med <= 0:
        raise ZeroExecTime("median execution time is zero")
    c_med = float(np.median(c))
    return CerProfile(c_med / e_med, float(e.min()), float(e.max()), e_med,
                      float(c.min()), float(c.max()), c_med, e, c)


def compute_cer(trace: Trace, skip: int = 0) -> CerProfile:
    """Per-rank mean exec and comm time per iteration, summarized over ranks.

    Barrier waits are synchronization, not communication, and are excluded;
    ``skip`` drops leading transient iterations.
    """
    if trace.n_iters - skip < 1:
        raise ZeroExecTime("no complete iteration to analyze")
    ex = exec_table(trace)[:, skip:].mean(axis=1)
    cm = blocked_table(trace, include_barrier=False)[:, skip:].mean(axis=1)
    return cer_from_times(ex, cm)


def cer_csv(profiles: Dict[str, CerProfile]) -> str:
    """Table with one column per labelled profile, rows as in a CER summary."""
    keys = ["exec_min", "exec_max", "exec_median", "comm_min", "comm_max", "comm_median",
            "cer_median"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric"] + list(profiles))
    for k in keys:
        w.writerow([k] + [repr(getattr(p, k)) for p in profiles.values()])
    return buf.getvalue()


# -- barrier cost and P_D ------------------------------------------------------

def barrier_cost(system: SystemSpec, n_ranks: Optional[int] = None, measure: bool = True
                 ) -> float:
    """Seconds one barrier adds beyond the latest entry.

    With ``measure`` the value is obtained by simulating a barrier-only
    program; otherwise the model formula is returned directly.
    """
    n = system.n_ranks if n_ranks is None else n_ranks
    if not measure:
        if system.barrier_cost is not None:
            return system.barrier_cost
        return dissemination_barrier(system.network.latency, n)
    from .engine import run

    sysm = system if n == system.n_ranks else SystemSpec.uniform(
        n, n, 1.0, 1.0, network=system.network, barrier_cost=system.barrier_cost)
    s = Scenario(sysm, 1, ((Barrier(),),), name="barrier-only")
    return run(s).end_time


def compute_pd(perf_barrier_free: float, perf_barrier_adjusted: float) -> float:
    """Relative gain of the barrier-free run over the barrier run."""
    if perf_barrier_adjusted == 0:
        raise DivisionByZero("barrier performance is zero")
    return (perf_barrier_free - perf_barrier_adjusted) / abs(perf_barrier_adjusted)


def scenario_performance(trace: Trace, flops: float) -> float:
    if not trace.end_time > 0:
        raise ZeroDuration("trace has zero duration")
    return flops / trace.end_time


@dataclass
class PdReport:
    t_barrier_free: float
    t_barrier: float
    t_barrier_only: float
    n_barriers: int
    flops: float
    perf_barrier_free: float
    perf_barrier_adjusted: float
    p_d: float

    @property
    def correction(self) -> float:
        return self.t_barrier_only


def pd_from_runs(t_free: float, t_barrier: float, t_barrier_only: float, flops: float,
                 n_barriers: int) -> PdReport:
    """Combine three measured runtimes into a P_D report.

    ``t_barrier_only`` is the runtime of the same number of barriers with no
    work; it is removed from the barrier run before computing performance.
    """
    adj = t_barrier - t_barrier_only
    if adj <= 0:
        raise ZeroDuration("barrier run is not longer than its barrier overhead")
    p_free = flops / t_free
    p_adj = flops / adj
    return PdReport(t_free, t_barrier, t_barrier_only, n_barriers, flops, p_free, p_adj,
                    compute_pd(p_free, p_adj))


def barrier_only_scenario(s: Scenario) -> Scenario:
    """The barriers of ``s`` with all work removed, for measuring their overhead."""
    nbar = sum(isinstance(p, Barrier) for p in s.program_of(0))
    return Scenario(s.system, s.n_iters, ((Barrier(),) * max(nbar, 1),), name="barrier-only")


def measure_pd(free: Scenario, barred: Scenario, seed: int = 0, simulate=None) -> PdReport:
    """Run the barrier-free, barrier and barrier-only variants and combine them.

    ``simulate(scenario, seed)`` defaults to the event engine.
    """
    if simulate is None:
        from .engine import run as simulate
    t_free = simulate(free, seed).end_time
    t_bar = simulate(barred, seed).end_time
    t_only = simulate(barrier_only_scenario(barred), seed).end_time
    n_bar = barred.n_iters * sum(isinstance(p, Barrier) for p in barred.program_of(0))
    return pd_from_runs(t_free, t_bar, t_only, total_flops(free), n_bar)


# -- reports -------------------------------------------------------------------

@dataclass
class MetricsReport:
    end_time: float
    perf: Optional[float] = None
    cer_median: Optional[float] = None
    active_mode: Tuple[int, ...] = ()
    active_mean: Tuple[float, ...] = ()
    wavefront_slope: Optional[float] = None
    wavefront_amplitude: Optional[float] = None
    lagger_domain: Optional[int] = None
    idle_wave_velocity: Optional[float] = None
    extinction_rank: Optional[int] = None
    p_d: Optional[float] = None
    notes: Tuple[str, ...] = ()

    def flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                if k == "notes":
                    out[k] = "; ".join(v)
                else:
                    for i, x in enumerate(v):
                        out[f"{k}_{i}"] = x
            elif isinstance(v, float) and math.isinf(v):
                out[k] = "lockstep" if k == "wavefront_slope" else repr(v)
            else:
                out[k] = v
        return out


def summarize_trace(trace: Trace, window: Optional[Tuple[float, float]] = None,
                    flops: Optional[float] = None, inj: Optional[InjectionSpec] = None,
                    skip: int = 0) -> MetricsReport:
    """Every metric that applies to this trace; failures become notes."""
    if window is None:
        window = (0.5 * trace.end_time, trace.end_time)
    rep = MetricsReport(trace.end_time)
    notes: List[str] = []
    if flops is not None and trace.end_time > 0:
        rep.perf = scenario_performance(trace, flops)
    try:
        rep.cer_median = compute_cer(trace, skip).cer_median
    except ZeroExecTime as e:
        notes.append(str(e))
    hs = [active_histogram(trace, i, window) for i in range(len(trace.domains))]
    rep.active_mode = tuple(h.mode for h in hs)
    rep.active_mean = tuple(h.mean for h in hs)
    try:
        wf = measure_wavefront(trace, window)
        rep.wavefront_slope, rep.wavefront_amplitude = wf.slope, wf.amplitude
        rep.lagger_domain = wf.lagger_domain
    except WindowTooShort as e:
        notes.append(str(e))
    if inj is not None:
        try:
            w = measure_idle_wave(trace, inj)
            rep.idle_wave_velocity, rep.extinction_rank = w.velocity, w.extinction_rank
        except NoWaveDetected as e:
            notes.append(f"no idle wave: {e}")
    rep.notes = tuple(notes)
    return rep


def performance_of(s: Scenario, trace: Trace) -> float:
    return scenario_performance(trace, total_flops(s))
