"""Declarative scenario files (YAML, schema tag ``desync/scenario/v1``).

Every mapping is checked against a closed key set, so a typo is an error
rather than a silently ignored setting. Paths inside a file are resolved
relative to the file's directory.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import yaml

from .. import matrixio
from ..model import (Barrier, Compute, ContentionDomain, InjectionSpec, Irecv, Isend,
                     KernelSpec, ModelError, NetworkSpec, NoiseSpec, Scenario, SystemSpec,
                     WaitAll, substream_seed, validate_scenario)
from ..workloads import chebfd, decomp, spmvm, triad

SCHEMA = "desync/scenario/v1"


class ScenarioFileError(ValueError):
    pass


class ScenarioIOError(OSError):
    pass


def _check_keys(where: str, d: Any, required=(), optional=()) -> Dict[str, Any]:
    if not isinstance(d, dict):
        raise ScenarioFileError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ScenarioFileError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ScenarioFileError(f"{where}: missing key(s) {missing}")
    return d


def _num(where: str, v: Any) -> float:
    # YAML 1.1 reads "1e9" as a string; accept it as a number
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ScenarioFileError(f"{where}: expected a number, got {v!r}") from None


def _int(where: str, v: Any) -> int:
    x = _num(where, v)
    if x != int(x):
        raise ScenarioFileError(f"{where}: expected an integer, got {v!r}")
    return int(x)


@dataclass
class Analysis:
    window: Optional[Tuple[float, float]] = None
    window_iterations: Optional[Tuple[int, int]] = None
    skip: int = 0
    threshold: float = 0.25


@dataclass
class ScenarioFile:
    scenario: Any  # ValidatedScenario
    seed: int
    analysis: Analysis
    raw: Dict[str, Any]
    base_dir: str = "."
    barrier_variant: Optional[Any] = None  # same scenario with a barrier per iteration
    free_variant: Optional[Any] = None  # same scenario without barriers

    @property
    def name(self) -> str:
        return self.scenario.name


def parse_system(d: Dict[str, Any]) -> SystemSpec:
    d = _check_keys("system", d, ("n_ranks",),
                    ("ranks_per_domain", "b_single", "b_cap", "domains", "network",
                     "eager_limit_bytes", "nic_ranks", "nic_bandwidth", "barrier_cost"))
    net = _check_keys("system.network", d.get("network", {}), (),
                      ("latency", "bandwidth", "rendezvous_handshake"))
    network = NetworkSpec(**{k: _num(f"system.network.{k}", v) for k, v in net.items()})
    n = _int("system.n_ranks", d["n_ranks"])
    eager = _int("system.eager_limit_bytes", d.get("eager_limit_bytes", 16384))
    bc = d.get("barrier_cost")
    bc = None if bc is None else _num("system.barrier_cost", bc)
    if "domains" in d:
        if any(k in d for k in ("ranks_per_domain", "b_single", "b_cap", "nic_ranks")):
            raise ScenarioFileError("system: give either 'domains' or the uniform keys")
        doms = []
        for i, dd in enumerate(d["domains"]):
            dd = _check_keys(f"system.domains[{i}]", dd, ("start", "stop", "b_single", "b_cap"),
                             ("kind",))
            doms.append(ContentionDomain(_int("start", dd["start"]), _int("stop", dd["stop"]),
                                         _num("b_single", dd["b_single"]),
                                         _num("b_cap", dd["b_cap"]), dd.get("kind", "memory")))
        return SystemSpec(n, tuple(doms), network, eager, bc)
    for k in ("ranks_per_domain", "b_single", "b_cap"):
        if k not in d:
            raise ScenarioFileError(f"system: missing key {k!r}")
    nic = d.get("nic_ranks")
    nic_bw = d.get("nic_bandwidth")
    return SystemSpec.uniform(n, _int("system.ranks_per_domain", d["ranks_per_domain"]),
                              _num("system.b_single", d["b_single"]),
                              _num("system.b_cap", d["b_cap"]), network, eager,
                              None if nic is None else _int("system.nic_ranks", nic),
                              None if nic_bw is None else _num("system.nic_bandwidth", nic_bw),
                              bc)


def _phase(where: str, d: Any):
    if not isinstance(d, dict) or len(d) != 1:
        raise ScenarioFileError(f"{where}: a phase is a one-key mapping")
    (kind, body), = d.items()
    body = body or {}
    if kind == "compute":
        b = _check_keys(where, body, ("name",), ("traffic_bytes", "flops", "scalable_seconds",
                                                  "code_balance"))
        kw = {k: _num(f"{where}.{k}", v) for k, v in b.items() if k != "name"}
        return Compute(KernelSpec(str(b["name"]), **kw))
    if kind in ("isend", "irecv"):
        b = _check_keys(where, body, ("peer", "nbytes"), ("relative",))
        cls = Isend if kind == "isend" else Irecv
        return cls(_int(f"{where}.peer", b["peer"]), _int(f"{where}.nbytes", b["nbytes"]),
                   bool(b.get("relative", False)))
    if kind == "waitall":
        _check_keys(where, body)
        return WaitAll()
    if kind == "barrier":
        _check_keys(where, body)
        return Barrier()
    raise ScenarioFileError(f"{where}: unknown phase {kind!r}")


def _matrix(where: str, d: Dict[str, Any], seed: int, base: str) -> matrixio.SparseMatrix:
    d = _check_keys(where, d, (), ("file", "generate", "n", "half_bandwidth", "nzr", "spread"))
    if "file" in d:
        if len(d) != 1:
            raise ScenarioFileError(f"{where}: 'file' excludes generator keys")
        path = os.path.join(base, d["file"])
        try:
            return matrixio.load_matrix_market(path)
        except OSError as e:
            raise ScenarioIOError(f"{where}: cannot read {path}: {e}") from e
    kind = d.get("generate")
    mseed = substream_seed(seed, "matrix")
    if kind == "banded":
        return matrixio.gen_banded(_int("n", d["n"]), _int("half_bandwidth", d["half_bandwidth"]),
                                   _int("nzr", d["nzr"]), mseed)
    if kind == "scattered":
        return matrixio.gen_scattered(_int("n", d["n"]), _int("nzr", d["nzr"]),
                                      _int("spread", d.get("spread", d["n"])), mseed)
    raise ScenarioFileError(f"{where}: need 'file' or generate: banded|scattered")


def _comm_source(where: str, d: Dict[str, Any], n_ranks: int, seed: int, base: str,
                 element_bytes: int):
    """(CommMatrix, RankLoad) from a matrix, a preset or a recorded file."""
    d = _check_keys(where, d, (), ("matrix", "preset", "periodic", "comm_file", "rows_per_rank",
                                   "nnz_per_row"))
    if "matrix" in d:
        m = _matrix(f"{where}.matrix", d["matrix"], seed, base)
        part = matrixio.partition_rows(m, n_ranks)
        return (matrixio.build_comm_matrix(m, part, element_bytes),
                matrixio.rank_loads(m, part))
    if "preset" in d:
        cm = decomp.preset_comm_matrix(d["preset"], n_ranks, bool(d.get("periodic", False)))
    elif "comm_file" in d:
        path = os.path.join(base, d["comm_file"])
        try:
            cm = matrixio.read_comm_matrix(path)
        except OSError as e:
            raise ScenarioIOError(f"{where}: cannot read {path}: {e}") from e
        if cm.n_ranks != n_ranks:
            raise ScenarioFileError(f"{where}: comm file has {cm.n_ranks} ranks, system "
                                    f"{n_ranks}")
    else:
        raise ScenarioFileError(f"{where}: need one of matrix, preset, comm_file")
    rows = _int("rows_per_rank", d.get("rows_per_rank", 1000))
    nzr = _int("nnz_per_row", d.get("nnz_per_row", 13))
    return cm, chebfd.profile_loads(cm, rows, nzr)


def _workload(d: Dict[str, Any], system: SystemSpec, seed: int, base: str):
    """Return (programs, n_iters, boundary, barrier_variant_fn)."""
    kind = d.get("kind")
    n = system.n_ranks
    if kind == "triad":
        w = _check_keys("workload", d, ("kind",), ("distances", "boundary", "total_bytes",
                                                   "msg_bytes", "n_iters"))
        cfg = triad.TriadConfig(n, 1, tuple(_int("distance", x)
                                            for x in w.get("distances", [1, -1])),
                                w.get("boundary", "open"),
                                _num("total_bytes", w.get("total_bytes", 2.4e9)),
                                _int("msg_bytes", w.get("msg_bytes", 16384)),
                                _int("n_iters", w.get("n_iters", 500)))
        s = triad.make_triad_scenario(cfg, system)
        return s.programs, cfg.n_iters, cfg.boundary
    if kind == "spmvm":
        w = _check_keys("workload", d, ("kind", "comm"), ("mode", "barrier", "n_iters",
                                                          "element_bytes"))
        cm, loads = _comm_source("workload.comm", w["comm"], n, seed, base,
                                 _int("element_bytes", w.get("element_bytes", 8)))
        cfg = spmvm.SpmvmConfig(cm, loads, w.get("mode", "non-split"),
                                bool(w.get("barrier", False)), _int("n_iters",
                                                                    w.get("n_iters", 20)))
        return spmvm.make_spmvm_scenario(cfg, system).programs, cfg.n_iters, "open"
    if kind == "chebfd":
        w = _check_keys("workload", d, ("kind", "comm"),
                        ("mode", "n_b", "n_p", "n_search", "n_sub", "barrier_each_p",
                         "value_kind"))
        vk = chebfd.ValueKind(w.get("value_kind", "complex-double"))
        cm, loads = _comm_source("workload.comm", w["comm"], n, seed, base,
                                 16 if vk is chebfd.ValueKind.COMPLEX else 8)
        n_sub = w.get("n_sub")
        cfg = chebfd.ChebfdConfig(cm, loads, w.get("mode", "non-split"),
                                  _int("n_b", w.get("n_b", 2)), _int("n_p", w.get("n_p", 10)),
                                  _int("n_search", w.get("n_search", 8)),
                                  None if n_sub is None else _int("n_sub", n_sub),
                                  bool(w.get("barrier_each_p", False)), vk)
        return chebfd.make_chebfd_scenario(cfg, system).programs, cfg.n_p, "open"
    if kind == "custom":
        w = _check_keys("workload", d, ("kind", "programs", "n_iters"), ("boundary",))
        progs = w["programs"]
        if not isinstance(progs, list) or not progs:
            raise ScenarioFileError("workload.programs: expected a non-empty list")
        out = []
        for i, p in enumerate(progs):
            if not isinstance(p, list):
                raise ScenarioFileError(f"workload.programs[{i}]: expected a phase list")
            out.append(tuple(_phase(f"workload.programs[{i}][{j}]", ph)
                             for j, ph in enumerate(p)))
        return tuple(out), _int("n_iters", w["n_iters"]), w.get("boundary", "open")
    raise ScenarioFileError(f"workload.kind must be triad|spmvm|chebfd|custom, got {kind!r}")


def _with_barrier(programs, present: bool):
    """Programs with exactly one trailing barrier per iteration, or none."""
    out = []
    for p in programs:
        q = tuple(ph for ph in p if not isinstance(ph, Barrier))
        out.append(q + (Barrier(),) if present else q)
    return tuple(out)


def build(raw: Dict[str, Any], base_dir: str = ".") -> ScenarioFile:
    raw = copy.deepcopy(raw)
    top = _check_keys("scenario file", raw, ("schema", "system", "workload"),
                      ("name", "seed", "noise", "injections", "analysis"))
    if top["schema"] != SCHEMA:
        raise ScenarioFileError(f"schema must be {SCHEMA!r}, got {top['schema']!r}")
    seed = _int("seed", top.get("seed", 0))
    try:
        system = parse_system(top["system"])
        progs, n_iters, boundary = _workload(top["workload"], system, seed, base_dir)
        nz = _check_keys("noise", top.get("noise", {}), (), ("kind", "intensity", "seed"))
        noise = NoiseSpec(nz.get("kind", "none"), _num("noise.intensity", nz.get("intensity", 0)),
                          _int("noise.seed", nz.get("seed", 0)))
        injs = []
        for i, dd in enumerate(top.get("injections") or []):
            dd = _check_keys(f"injections[{i}]", dd, ("rank", "iteration", "extra_seconds"),
                             ("kind",))
            injs.append(InjectionSpec(_int("rank", dd["rank"]), _int("iteration", dd["iteration"]),
                                      _num("extra_seconds", dd["extra_seconds"]),
                                      dd.get("kind", "core-bound")))
        an = _check_keys("analysis", top.get("analysis", {}), (),
                         ("window", "window_iterations", "skip", "threshold"))
        analysis = Analysis(
            tuple(_num("analysis.window", x) for x in an["window"]) if "window" in an else None,
            tuple(_int("analysis.window_iterations", x) for x in an["window_iterations"])
            if "window_iterations" in an else None,
            _int("analysis.skip", an.get("skip", 0)),
            _num("analysis.threshold", an.get("threshold", 0.25)))
        name = str(top.get("name", "scenario"))
        mk = lambda p: validate_scenario(Scenario(system, n_iters, p, noise, tuple(injs),
                                                  boundary, name))
        s = mk(progs)
        return ScenarioFile(s, seed, analysis, raw, base_dir,
                            barrier_variant=mk(_with_barrier(s.programs, True)),
                            free_variant=mk(_with_barrier(s.programs, False)))
    except (ScenarioFileError, ScenarioIOError):
        raise
    except (ModelError, matrixio.MatrixError, chebfd.InvalidBlocking, decomp.IndivisibleGrid,
            ValueError, KeyError, TypeError) as e:
        raise ScenarioFileError(f"{type(e).__name__}: {e}") from e


def load(path: str) -> ScenarioFile:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ScenarioIOError(f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ScenarioFileError(f"{path}: invalid YAML: {e}") from e
    return build(raw, os.path.dirname(os.path.abspath(path)))


def set_path(raw: Dict[str, Any], dotted: str, value: Any) -> Dict[str, Any]:
    """Copy of ``raw`` with ``a.b.c`` replaced by ``value`` (for sweeps)."""
    out = copy.deepcopy(raw)
    cur = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(cur, dict) or k not in cur:
            raise ScenarioFileError(f"sweep axis {dotted!r}: no key {k!r}")
        cur = cur[k]
    if not isinstance(cur, dict):
        raise ScenarioFileError(f"sweep axis {dotted!r} does not name a mapping entry")
    cur[keys[-1]] = value
    return out


def dump(raw: Dict[str, Any]) -> str:
    return yaml.safe_dump(raw, sort_keys=False)
