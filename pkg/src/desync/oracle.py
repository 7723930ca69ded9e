"""Fixed-timestep reference integrator for the simulator's semantics.

This is an independent interpreter of the same program semantics as
:mod:`desync.engine`, built for verification rather than speed. Every piece
of pending work (contended traffic, timers, network transfers) is a job with
a remaining amount. Each step of length ``dt`` recomputes every job's rate
from the current number of contending jobs and subtracts ``rate * dt``.

Within the step in which some job runs out, the exact crossing instant is
interpolated; program transitions happen at that instant, and work started
there is credited with the rest of the step. Errors are therefore of order
``dt`` per transition and do not accumulate as a systematic lag.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from . import stepper
from .engine import Deadlock
from .model import (Barrier, Compute, InjectionKind, Irecv, Isend, ValidatedScenario,
                    WaitAll, contention_rate, noise_table, validate_scenario)
from .trace import (EXEC, TRANSFER, WAIT, Message, SegmentBuilder, Trace, domain_ranges,
                    scenario_digest)

TIMER = -1
_BATCH = 1 << 20  # whole steps per call into the stepping loop


@dataclass(eq=False)
class _Job:
    pool: int
    rem: float
    callback: Tuple
    rank: int
    order: int
    amount: float


@dataclass(eq=False)
class _Req:
    owner: int
    is_send: bool
    peer: int
    nbytes: int
    done: bool = False
    moving: bool = False

    def label(self) -> str:
        return f"{'send->' if self.is_send else 'recv<-'}{self.peer} {self.nbytes}B"


@dataclass(eq=False)
class _Xfer:
    src: int
    dst: int
    nbytes: int
    eager: bool
    t_send: float
    send: _Req
    recv: Optional[_Req] = None
    t_recv: float = math.nan
    t_start: float = math.nan
    t_end: float = math.nan
    arrived: bool = False
    started: bool = False


@dataclass
class _RankState:
    program: tuple
    pc: int = 0
    it: int = 0
    ncomp: int = 0
    stages: Deque = field(default_factory=deque)
    reqs: List[_Req] = field(default_factory=list)
    blocked: str = ""  # "", "wait", "barrier", "done"
    label: str = "waitall"
    finish: float = 0.0
    seg: SegmentBuilder = field(default_factory=SegmentBuilder)


class Oracle:
    def __init__(self, s: ValidatedScenario, seed: int, dt: float,
                 law: Callable[[float, float, int], float] = contention_rate,
                 backend: Optional[str] = None):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.s, self.seed, self.dt, self.law = s, seed, dt, law
        sysm = s.system
        self.n = sysm.n_ranks
        mem, nic = sysm.memory_domains, sysm.network_domains
        self.pool_bs = np.array([d.b_single for d in mem] + [d.b_single for d in nic])
        self.pool_bc = np.array([d.b_cap for d in mem] + [d.b_cap for d in nic])
        self.mem_pool = [sysm.memory_domain_of(r) for r in range(self.n)]
        self.nic_pool = [None if sysm.network_domain_of(r) is None
                         else len(mem) + sysm.network_domain_of(r) for r in range(self.n)]
        if backend is None:
            backend = stepper.DEFAULT if law is contention_rate else "python"
        if backend == "compiled" and law is not contention_rate:
            raise ValueError("the compiled stepper only implements the default law")
        self._advance = stepper.get(backend)
        self.backend = backend
        self.noise = noise_table(s, seed)
        self.inject = {(i.rank, i.iteration): i for i in s.injections}
        self.ranks = [_RankState(s.program_of(r)) for r in range(self.n)]
        self.jobs: List[_Job] = []
        self.sends: Dict[Tuple[int, int], Deque[_Xfer]] = {}
        self.recvs: Dict[Tuple[int, int], Deque[_Req]] = {}
        self.barrier_in: Dict[int, int] = {}
        self.barrier_seen = [0] * self.n
        self.xfers: List[_Xfer] = []
        # instants handled inside the current step: (time, order, rank, seq, callback)
        self.pending: list = []
        self.seq = 0

    # -- job plumbing ---------------------------------------------------------
    def _start_job(self, t: float, pool: int, amount: float, rank: int, callback: Tuple,
                   order: int = 0) -> None:
        if amount <= 0:
            self._at(t, order, rank, callback)
        else:
            self.jobs.append(_Job(pool, amount, callback, rank, order, amount))

    def _at(self, t: float, order: int, rank: int, callback: Tuple) -> None:
        heapq.heappush(self.pending, (t, order, rank, self.seq, callback))
        self.seq += 1

    def _rates(self) -> List[float]:
        count: Dict[int, int] = {}
        for j in self.jobs:
            count[j.pool] = count.get(j.pool, 0) + 1
        return [1.0 if j.pool == TIMER else
                self.law(float(self.pool_bs[j.pool]), float(self.pool_bc[j.pool]),
                         count[j.pool]) for j in self.jobs]

    def _settle_step(self, t: float) -> None:
        """Integrate the step [t, t + dt] that contains at least one transition.

        The step is split at every completion inside it; rates are
        recomputed after each split because membership changed.
        """
        end = t + self.dt
        while True:
            self._drain(t)
            if not self.jobs:
                return
            rates = self._rates()
            k = min(range(len(self.jobs)), key=lambda i: self.jobs[i].rem / rates[i])
            t_next = t + self.jobs[k].rem / rates[k]
            if t_next > end:
                for j, r in zip(self.jobs, rates):
                    j.rem -= r * (end - t)
                return
            live = []
            for i, (j, r) in enumerate(zip(self.jobs, rates)):
                j.rem -= r * (t_next - t)
                if i == k or j.rem <= 1e-12 * max(j.amount, 1.0):
                    self._at(t_next, j.order, j.rank, j.callback)
                else:
                    live.append(j)
            self.jobs = live
            t = t_next

    # -- main loop --------------------------------------------------------------
    def run(self) -> Trace:
        dt = self.dt
        step = 0
        for r in range(self.n):
            self._progress(r, 0.0)
        self._drain(0.0)
        while self.jobs:
            n = len(self.jobs)
            rem = np.fromiter((j.rem for j in self.jobs), float, n)
            pool = np.fromiter((j.pool for j in self.jobs), np.int32, n)
            rate = np.zeros(n)
            count = np.zeros(len(self.pool_bs), dtype=np.int64)
            if self.backend == "python":
                taken = self._advance(rem, pool, self.pool_bs, self.pool_bc, dt, _BATCH, rate,
                                      count, law=self.law)
            else:
                taken = self._advance(rem, pool, self.pool_bs, self.pool_bc, dt, _BATCH, rate,
                                      count)
            for j, x in zip(self.jobs, rem):
                j.rem = float(x)
            step += taken
            if taken < _BATCH:
                self._settle_step(step * dt)
                step += 1
        stuck = [r for r, st in enumerate(self.ranks) if st.blocked != "done"]
        if stuck:
            snap = [{"rank": r, "state": self.ranks[r].blocked or "advancing",
                     "iteration": self.ranks[r].it, "pc": self.ranks[r].pc} for r in stuck]
            raise Deadlock(f"deadlock: ranks {stuck[:8]} cannot progress", snap)
        return self._trace()

    def _drain(self, now: float) -> None:
        while self.pending and self.pending[0][0] <= now:
            t, _, _, _, cb = heapq.heappop(self.pending)
            kind = cb[0]
            if kind == "stage":
                self._stage_done(cb[1], t)
            elif kind == "wire":
                self._on_wire(cb[1], t)
            elif kind == "arrive":
                self._on_arrival(cb[1], t)
            elif kind == "handshake":
                self._send_data(cb[1], t)
            elif kind == "barrier_exit":
                for r in range(self.n):
                    self._at(t, 2, r, ("release", r))
            elif kind == "release":
                self._release(cb[1], t)
            else:  # pragma: no cover
                raise AssertionError(kind)

    # -- program interpretation -------------------------------------------------
    def _progress(self, r: int, t: float) -> None:
        st = self.ranks[r]
        st.blocked = ""
        while True:
            if st.pc == len(st.program):
                st.pc, st.ncomp = 0, 0
                st.it += 1
                if st.it == self.s.n_iters:
                    st.blocked, st.finish = "done", t
                    return
            ph = st.program[st.pc]
            if isinstance(ph, Compute):
                self._compute(r, ph, t)
                return
            if isinstance(ph, Isend):
                self._isend(r, ph, t)
            elif isinstance(ph, Irecv):
                self._irecv(r, ph, t)
            elif isinstance(ph, WaitAll):
                if all(q.done for q in st.reqs):
                    st.reqs = []
                else:
                    st.blocked = "wait"
                    st.seg.open(self._blocked_kind(st), t, st.it, "waitall")
                    return
            elif isinstance(ph, Barrier):
                self._barrier(r, t)
                return
            st.pc += 1

    def _compute(self, r: int, ph: Compute, t: float) -> None:
        st = self.ranks[r]
        k = ph.kernel
        todo = deque()
        if st.ncomp == 0 and (r, st.it) in self.inject:
            inj = self.inject[(r, st.it)]
            if inj.kind is InjectionKind.MEMORY:
                b = float(self.pool_bs[self.mem_pool[r]])
                todo.append((self.mem_pool[r], inj.extra_seconds * b, "inject"))
            else:
                todo.append((TIMER, inj.extra_seconds, "inject"))
        if k.traffic_bytes > 0:
            todo.append((self.mem_pool[r], float(k.traffic_bytes), k.name))
        tail = k.scalable_seconds + float(self.noise[r, st.it, st.ncomp])
        if tail > 0:
            todo.append((TIMER, tail, k.name))
        st.ncomp += 1
        st.stages = todo
        self._begin_stage(r, t)

    def _begin_stage(self, r: int, t: float) -> None:
        st = self.ranks[r]
        pool, amount, label = st.stages[0]
        st.seg.switch(EXEC, t, st.it, label, contended=pool != TIMER)
        self._start_job(t, pool, amount, r, ("stage", r))

    def _stage_done(self, r: int, t: float) -> None:
        st = self.ranks[r]
        st.stages.popleft()
        if st.stages:
            self._begin_stage(r, t)
        else:
            st.seg.close(t)
            st.pc += 1
            self._progress(r, t)

    def _isend(self, r: int, ph: Isend, t: float) -> None:
        eager = ph.nbytes <= self.s.system.eager_limit_bytes
        req = _Req(r, True, ph.peer, ph.nbytes, done=eager)
        x = _Xfer(r, ph.peer, ph.nbytes, eager, t, req)
        self.xfers.append(x)
        if not eager:
            self.ranks[r].reqs.append(req)
        q = self.recvs.get((r, ph.peer))
        if q:
            self._pair(x, q.popleft(), t)
            return
        self.sends.setdefault((r, ph.peer), deque()).append(x)
        if eager:
            self._send_data(x, t)

    def _irecv(self, r: int, ph: Irecv, t: float) -> None:
        req = _Req(r, False, ph.peer, ph.nbytes)
        self.ranks[r].reqs.append(req)
        q = self.sends.get((ph.peer, r))
        if q:
            self._pair(q.popleft(), req, t)
        else:
            self.recvs.setdefault((ph.peer, r), deque()).append(req)

    def _pair(self, x: _Xfer, req: _Req, t: float) -> None:
        x.recv, x.t_recv = req, t
        if x.eager:
            if x.arrived:
                self._complete(req, t)
                return
            self._mark_moving(req, t)
            if not x.started:
                self._send_data(x, t)
            return
        self._mark_moving(req, t)
        self._mark_moving(x.send, t)
        hs = self.s.system.network.rendezvous_handshake
        if hs > 0:
            self._start_job(t, TIMER, hs, x.src, ("handshake", x))
        else:
            self._send_data(x, t)

    def _send_data(self, x: _Xfer, t: float) -> None:
        x.started, x.t_start = True, t
        net = self.s.system.network
        nic = self.nic_pool[x.src]
        if nic is not None and x.nbytes > 0:
            self._start_job(t, nic, float(x.nbytes), x.src, ("wire", x))
        else:
            delay = net.latency + x.nbytes / net.bandwidth
            self._start_job(t, TIMER, delay, x.dst, ("arrive", x), order=1)

    def _on_wire(self, x: _Xfer, t: float) -> None:
        self._start_job(t, TIMER, self.s.system.network.latency, x.dst, ("arrive", x), order=1)

    def _on_arrival(self, x: _Xfer, t: float) -> None:
        x.arrived, x.t_end = True, t
        if x.recv is not None:
            self._complete(x.recv, t)
        if not x.eager:
            self._complete(x.send, t)

    def _mark_moving(self, req: _Req, t: float) -> None:
        req.moving = True
        self._requests_changed(req, t)

    def _complete(self, req: _Req, t: float) -> None:
        req.done = True
        self._requests_changed(req, t)

    def _requests_changed(self, req: _Req, t: float) -> None:
        st = self.ranks[req.owner]
        st.label = req.label()
        if st.blocked != "wait" or req not in st.reqs:
            return
        if all(q.done for q in st.reqs):
            self._at(t, 2, req.owner, ("release", req.owner))
            st.blocked = "releasing"
            return
        kind = self._blocked_kind(st)
        if kind != st.seg.kind:
            st.seg.switch(kind, t, st.it, "waitall", closing_detail=req.label())

    @staticmethod
    def _blocked_kind(st: _RankState) -> str:
        live = [q for q in st.reqs if not q.done]
        return TRANSFER if live and all(q.moving for q in live) else WAIT

    def _barrier(self, r: int, t: float) -> None:
        st = self.ranks[r]
        st.blocked = "barrier"
        st.seg.open(WAIT, t, st.it, "barrier")
        k = self.barrier_seen[r]
        self.barrier_seen[r] += 1
        self.barrier_in[k] = self.barrier_in.get(k, 0) + 1
        if self.barrier_in[k] == self.n:
            del self.barrier_in[k]
            cost = self.s.system.barrier_seconds()
            if cost > 0:
                self._start_job(t, TIMER, cost, r, ("barrier_exit",), order=2)
            else:
                self._at(t, 2, r, ("barrier_exit",))

    def _release(self, r: int, t: float) -> None:
        st = self.ranks[r]
        if st.blocked == "releasing":
            st.seg.close(t, st.label)
            st.reqs = []
        else:
            st.seg.close(t)
        st.pc += 1
        self._progress(r, t)

    def _trace(self) -> Trace:
        end = max(st.finish for st in self.ranks)
        for st in self.ranks:
            if st.finish < end:
                st.seg.open(WAIT, st.finish, self.s.n_iters, "idle")
                st.seg.close(end)
        msgs = [Message(x.src, x.dst, x.nbytes, "eager" if x.eager else "rendezvous",
                        x.t_send, x.t_recv, x.t_start, x.t_end) for x in self.xfers]
        return Trace([st.seg.segments for st in self.ranks], end, self.seed,
                     scenario_digest(self.s), self.s.n_iters, domain_ranges(self.s.system),
                     msgs)


def oracle_run(s, seed: int = 0, dt: float = 1e-6, law=contention_rate,
               backend: Optional[str] = None) -> Trace:
    """Integrate ``s`` with fixed steps of ``dt`` seconds; used to check :func:`run`."""
    return Oracle(validate_scenario(s), seed, dt, law, backend).run()
