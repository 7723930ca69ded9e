"""Deterministic discrete-event simulation of bulk-synchronous MPI programs.

Contended work (kernel traffic, memory-bound injections, transfers through a
declared network-injection domain) is served by processor sharing: every job
in a domain progresses at ``contention_rate(b_single, b_cap, m)``. Domains
track a cumulative per-job service clock, so remaining work is carried across
membership changes without per-job updates.

Events that fall on the same instant run in the order
completion < message arrival < unblock, then by rank id, then by creation.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

from .model import (Barrier, Compute, InjectionKind, Irecv, Isend, ModelError,
                    ValidatedScenario, WaitAll, contention_rate, noise_table,
                    validate_scenario)
from .trace import (EXEC, TRANSFER, WAIT, Message, SegmentBuilder, Trace,
                    domain_ranges, scenario_digest)

COMPLETION, ARRIVAL, UNBLOCK = 0, 1, 2

# rank states
ADVANCING, COMPUTING, WAITING, IN_BARRIER, DONE = range(5)
_STATE_NAMES = ("advancing", "computing", "blocked-in-wait", "blocked-in-barrier", "done")

Law = Callable[[float, float, int], float]


class Deadlock(RuntimeError):
    def __init__(self, message: str, snapshot: List[dict]):
        super().__init__(message)
        self.snapshot = snapshot


class _Shared:
    """Processor-sharing server for one contention domain."""

    __slots__ = ("b_single", "b_cap", "law", "v", "t", "tags", "owner", "version")

    def __init__(self, b_single: float, b_cap: float, law: Law):
        self.b_single, self.b_cap, self.law = b_single, b_cap, law
        self.v = 0.0
        self.t = 0.0
        self.tags: Dict[int, float] = {}
        self.owner: Dict[int, int] = {}
        self.version = 0

    def rate(self) -> float:
        return self.law(self.b_single, self.b_cap, len(self.tags))

    def sync(self, t: float) -> None:
        if self.tags:
            self.v += self.rate() * (t - self.t)
        self.t = t

    def add(self, t: float, job: int, rank: int, work: float) -> None:
        self.sync(t)
        self.tags[job] = self.v + work
        self.owner[job] = rank

    def pop_done(self, t: float, due: int) -> List[int]:
        """Remove and return finished jobs ordered by (owner rank, job id).

        ``due`` is the job whose predicted completion fired; it is finished
        even if rounding left a sliver of work, otherwise the event would
        re-fire at the same instant forever.
        """
        self.sync(t)
        v = self.v
        done = sorted((self.owner[j], j) for j, f in self.tags.items()
                      if j == due or f - v <= 1e-12 * max(f, 1.0))
        for _, j in done:
            del self.tags[j]
            del self.owner[j]
        if not self.tags:
            self.v = 0.0
        return [j for _, j in done]

    def next_completion(self) -> Optional[Tuple[float, int, int]]:
        if not self.tags:
            return None
        job = min(self.tags, key=lambda j: (self.tags[j], self.owner[j], j))
        left = max(self.tags[job] - self.v, 0.0)
        return self.t + left / self.rate(), self.owner[job], job


@dataclass(eq=False)
class _Request:
    owner: int
    is_send: bool
    peer: int
    nbytes: int
    state: str = "pending"  # pending -> inflight -> done

    def label(self) -> str:
        arrow = "send->" if self.is_send else "recv<-"
        return f"{arrow}{self.peer} {self.nbytes}B"


@dataclass(eq=False)
class _Msg:
    src: int
    dst: int
    nbytes: int
    eager: bool
    t_send: float
    send_req: Optional[_Request]
    recv_req: Optional[_Request] = None
    t_recv: float = float("nan")
    t_start: float = float("nan")
    t_end: float = float("nan")
    started: bool = False
    arrived: bool = False


@dataclass
class _Rank:
    program: tuple
    pc: int = 0
    it: int = 0
    state: int = ADVANCING
    ncomp: int = 0  # compute phases started in this iteration
    stages: Deque = field(default_factory=deque)
    outstanding: List[_Request] = field(default_factory=list)
    unblock_pending: bool = False
    last_label: str = "waitall"
    finish: float = 0.0
    seg: SegmentBuilder = field(default_factory=SegmentBuilder)


class Engine:
    def __init__(self, s: ValidatedScenario, seed: int, law: Law = contention_rate):
        self.s = s
        self.seed = seed
        self.law = law
        sysm = s.system
        self.n = sysm.n_ranks
        self.net = sysm.network
        self.eager_limit = sysm.eager_limit_bytes
        self.barrier_cost = sysm.barrier_seconds()
        self.mem = [_Shared(d.b_single, d.b_cap, law) for d in sysm.memory_domains]
        self.mem_of = [sysm.memory_domain_of(r) for r in range(self.n)]
        self.nic = [_Shared(d.b_single, d.b_cap, law) for d in sysm.network_domains]
        self.nic_of = [sysm.network_domain_of(r) for r in range(self.n)]
        self.b_single = [sysm.memory_domains[self.mem_of[r]].b_single for r in range(self.n)]
        self.noise = noise_table(s, seed)
        self.inject = {(i.rank, i.iteration): i for i in s.injections}
        self.ranks = [_Rank(s.program_of(r)) for r in range(self.n)]
        self.queue: list = []
        self.seq = 0
        self.jobs: Dict[int, tuple] = {}
        self.next_job = 0
        self.unmatched_sends: Dict[Tuple[int, int], Deque[_Msg]] = {}
        self.unmatched_recvs: Dict[Tuple[int, int], Deque[_Request]] = {}
        self.barrier_entries: Dict[int, List[float]] = {}
        self.barrier_count = [0] * self.n
        self.messages: List[_Msg] = []

    # -- event plumbing -------------------------------------------------
    def _push(self, t: float, kind: int, rank: int, action: tuple) -> None:
        heapq.heappush(self.queue, (t, kind, rank, self.seq, action))
        self.seq += 1

    def _reschedule(self, pool: str, d: int) -> None:
        dom = (self.mem if pool == "mem" else self.nic)[d]
        dom.version += 1
        nxt = dom.next_completion()
        if nxt is not None:
            self._push(nxt[0], COMPLETION, nxt[1], ("shared", pool, d, dom.version, nxt[2]))

    def _submit(self, t: float, rank: int, pool: str, d: int, work: float, on_done: tuple):
        dom = (self.mem if pool == "mem" else self.nic)[d]
        job = self.next_job
        self.next_job += 1
        self.jobs[job] = on_done
        dom.add(t, job, rank, work)
        self._reschedule(pool, d)

    def run(self) -> Trace:
        for r in range(self.n):
            self._advance(r, 0.0)
        while self.queue:
            t, kind, rank, _, action = heapq.heappop(self.queue)
            tag = action[0]
            if tag == "shared":
                _, pool, d, version, due = action
                dom = (self.mem if pool == "mem" else self.nic)[d]
                if version != dom.version:
                    continue
                done = dom.pop_done(t, due)
                self._reschedule(pool, d)
                for j in done:
                    self._dispatch(t, self.jobs.pop(j))
            else:
                self._dispatch(t, action)
        stuck = [r for r, st in enumerate(self.ranks) if st.state != DONE]
        if stuck:
            snap = [{"rank": r, "state": _STATE_NAMES[self.ranks[r].state],
                     "iteration": self.ranks[r].it, "pc": self.ranks[r].pc,
                     "pending": [q.label() for q in self.ranks[r].outstanding
                                 if q.state != "done"]} for r in stuck]
            raise Deadlock(f"deadlock: ranks {stuck[:8]} cannot progress", snap)
        return self._finish()

    def _dispatch(self, t: float, action: tuple) -> None:
        tag = action[0]
        if tag == "stage":
            self._stage_done(t, action[1])
        elif tag == "arrive":
            self._arrive(t, action[1])
        elif tag == "wire":
            self._wire_done(t, action[1])
        elif tag == "start_msg":
            self._start_data(t, action[1])
        elif tag == "unblock":
            self._unblock(t, action[1])
        else:  # pragma: no cover
            raise AssertionError(tag)

    # -- rank program -----------------------------------------------------
    def _advance(self, r: int, t: float) -> None:
        st = self.ranks[r]
        st.state = ADVANCING
        prog = st.program
        while True:
            if st.pc == len(prog):
                st.it += 1
                st.pc = 0
                st.ncomp = 0
                if st.it == self.s.n_iters:
                    st.state = DONE
                    st.finish = t
                    return
            ph = prog[st.pc]
            if isinstance(ph, Isend):
                self._post_send(r, ph, t)
                st.pc += 1
            elif isinstance(ph, Irecv):
                self._post_recv(r, ph, t)
                st.pc += 1
            elif isinstance(ph, Compute):
                self._start_compute(r, ph, t)
                return
            elif isinstance(ph, WaitAll):
                if all(q.state == "done" for q in st.outstanding):
                    st.outstanding.clear()
                    st.pc += 1
                    continue
                st.state = WAITING
                st.unblock_pending = False
                st.seg.open(self._wait_kind(st), t, st.it, "waitall")
                return
            elif isinstance(ph, Barrier):
                self._enter_barrier(r, t)
                return
            else:  # pragma: no cover
                raise ModelError(f"unknown phase {ph!r}")

    def _start_compute(self, r: int, ph: Compute, t: float) -> None:
        st = self.ranks[r]
        k = ph.kernel
        stages = deque()
        inj = self.inject.get((r, st.it)) if st.ncomp == 0 else None
        if inj is not None:
            if inj.kind is InjectionKind.MEMORY:
                stages.append(("contended", inj.extra_seconds * self.b_single[r], "inject"))
            else:
                stages.append(("timer", inj.extra_seconds, "inject"))
        if k.traffic_bytes > 0:
            stages.append(("contended", k.traffic_bytes, k.name))
        extra = float(self.noise[r, st.it, st.ncomp])
        if k.scalable_seconds + extra > 0:
            stages.append(("timer", k.scalable_seconds + extra, k.name))
        st.ncomp += 1
        st.stages = stages
        st.state = COMPUTING
        self._next_stage(r, t)

    def _next_stage(self, r: int, t: float) -> None:
        st = self.ranks[r]
        kind, amount, label = st.stages[0]
        st.seg.switch(EXEC, t, st.it, label, contended=(kind == "contended"))
        if kind == "contended":
            self._submit(t, r, "mem", self.mem_of[r], amount, ("stage", r))
        else:
            self._push(t + amount, COMPLETION, r, ("stage", r))

    def _stage_done(self, t: float, r: int) -> None:
        st = self.ranks[r]
        st.stages.popleft()
        if st.stages:
            self._next_stage(r, t)
            return
        st.seg.close(t)
        st.pc += 1
        self._advance(r, t)

    # -- point-to-point ---------------------------------------------------
    def _post_send(self, r: int, ph: Isend, t: float) -> None:
        st = self.ranks[r]
        eager = ph.nbytes <= self.eager_limit
        req = _Request(r, True, ph.peer, ph.nbytes)
        msg = _Msg(r, ph.peer, ph.nbytes, eager, t, req)
        self.messages.append(msg)
        if eager:
            req.state = "done"
        else:
            st.outstanding.append(req)
        waiting = self.unmatched_recvs.get((r, ph.peer))
        if waiting:
            self._match(msg, waiting.popleft(), t)
        else:
            self.unmatched_sends.setdefault((r, ph.peer), deque()).append(msg)
            if eager:
                self._start_data(t, msg)

    def _post_recv(self, r: int, ph: Irecv, t: float) -> None:
        st = self.ranks[r]
        req = _Request(r, False, ph.peer, ph.nbytes)
        st.outstanding.append(req)
        pending = self.unmatched_sends.get((ph.peer, r))
        if pending:
            msg = pending.popleft()
            self._match(msg, req, t)
        else:
            self.unmatched_recvs.setdefault((ph.peer, r), deque()).append(req)

    def _match(self, msg: _Msg, req: _Request, t: float) -> None:
        msg.recv_req = req
        msg.t_recv = t
        if msg.eager:
            if msg.arrived:
                self._set_req(req, "done", t)
            else:
                self._set_req(req, "inflight", t)
                if not msg.started:
                    self._start_data(t, msg)
        else:
            self._set_req(req, "inflight", t)
            self._set_req(msg.send_req, "inflight", t)
            hs = self.net.rendezvous_handshake
            if hs > 0:
                self._push(t + hs, COMPLETION, msg.src, ("start_msg", msg))
            else:
                self._start_data(t, msg)

    def _start_data(self, t: float, msg: _Msg) -> None:
        msg.started = True
        msg.t_start = t
        d = self.nic_of[msg.src]
        if d is not None and msg.nbytes > 0:
            self._submit(t, msg.src, "nic", d, float(msg.nbytes), ("wire", msg))
        else:
            self._push(t + (self.net.latency + msg.nbytes / self.net.bandwidth), ARRIVAL,
                       msg.dst, ("arrive", msg))

    def _wire_done(self, t: float, msg: _Msg) -> None:
        self._push(t + self.net.latency, ARRIVAL, msg.dst, ("arrive", msg))

    def _arrive(self, t: float, msg: _Msg) -> None:
        msg.arrived = True
        msg.t_end = t
        if msg.recv_req is not None:
            self._set_req(msg.recv_req, "done", t)
        if not msg.eager:
            self._set_req(msg.send_req, "done", t)

    def _set_req(self, req: _Request, state: str, t: float) -> None:
        req.state = state
        st = self.ranks[req.owner]
        st.last_label = req.label()
        if st.state != WAITING or req not in st.outstanding:
            return
        if all(q.state == "done" for q in st.outstanding):
            if not st.unblock_pending:
                st.unblock_pending = True
                self._push(t, UNBLOCK, req.owner, ("unblock", req.owner))
            return
        kind = self._wait_kind(st)
        if kind != st.seg.kind:
            st.seg.switch(kind, t, st.it, "waitall", closing_detail=req.label())

    @staticmethod
    def _wait_kind(st: _Rank) -> str:
        live = [q for q in st.outstanding if q.state != "done"]
        if live and all(q.state == "inflight" for q in live):
            return TRANSFER
        return WAIT

    # -- blocking ---------------------------------------------------------
    def _enter_barrier(self, r: int, t: float) -> None:
        st = self.ranks[r]
        st.state = IN_BARRIER
        st.seg.open(WAIT, t, st.it, "barrier")
        k = self.barrier_count[r]
        self.barrier_count[r] += 1
        entries = self.barrier_entries.setdefault(k, [])
        entries.append(t)
        if len(entries) == self.n:
            t_exit = max(entries) + self.barrier_cost
            del self.barrier_entries[k]
            for q in range(self.n):
                self._push(t_exit, UNBLOCK, q, ("unblock", q))

    def _unblock(self, t: float, r: int) -> None:
        st = self.ranks[r]
        if st.state == WAITING:
            st.seg.close(t, st.last_label)
            st.outstanding.clear()
        else:
            st.seg.close(t)
        st.pc += 1
        self._advance(r, t)

    def _finish(self) -> Trace:
        end = max(st.finish for st in self.ranks)
        for st in self.ranks:
            if st.finish < end:
                st.seg.open(WAIT, st.finish, self.s.n_iters, "idle")
                st.seg.close(end)
        msgs = [Message(m.src, m.dst, m.nbytes, "eager" if m.eager else "rendezvous",
                        m.t_send, m.t_recv, m.t_start, m.t_end) for m in self.messages]
        return Trace([st.seg.segments for st in self.ranks], end, self.seed,
                     scenario_digest(self.s), self.s.n_iters,
                     domain_ranges(self.s.system), msgs)


def run(s, seed: int = 0, law: Law = contention_rate) -> Trace:
    """Simulate ``s`` and return its trace; same inputs give identical traces."""
    return Engine(validate_scenario(s), seed, law).run()
