"""``desync`` command line.

Exit codes (stable): 0 success, 1 invalid input, 2 simulated deadlock,
3 file-system error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence

import yaml

from .. import analysis, trace as trace_io
from ..engine import Deadlock, run
from ..model import InjectionSpec, ModelError, total_flops, with_injections
from . import scenario_file as sf

EXIT_OK, EXIT_INVALID, EXIT_DEADLOCK, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("desync")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------------

def _load(path: str) -> sf.ScenarioFile:
    try:
        return sf.load(path)
    except sf.ScenarioIOError as e:
        raise CliError(str(e), EXIT_IO) from e
    except sf.ScenarioFileError as e:
        raise CliError(str(e), EXIT_INVALID) from e


def _simulate(s, seed: int):
    try:
        return run(s, seed)
    except Deadlock as e:
        ranks = ", ".join(f"{d['rank']}:{d['state']}@{d['iteration']}" for d in e.snapshot[:8])
        raise CliError(f"{e} ({ranks})", EXIT_DEADLOCK) from e
    except ModelError as e:
        raise CliError(str(e), EXIT_INVALID) from e


def _outdir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {path}: {e}", EXIT_IO) from e
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable", EXIT_IO)
    return path


def _write(path: str, text: str) -> None:
    try:
        trace_io.atomic_write(path, text)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_IO) from e


def _doc(d: Dict) -> str:
    return yaml.safe_dump(d, sort_keys=False, default_flow_style=False)


def _window(tr, args, spec: Optional[sf.ScenarioFile]):
    if getattr(args, "window", None):
        return tuple(args.window)
    if spec is not None and spec.analysis.window is not None:
        return spec.analysis.window
    if spec is not None and spec.analysis.window_iterations is not None:
        return analysis.iteration_window(tr, *spec.analysis.window_iterations)
    return None


def _metrics(tr, s, window, skip: int = 0, inj=None) -> analysis.MetricsReport:
    return analysis.summarize_trace(tr, window, total_flops(s), inj, skip)


def _run_one(spec: sf.ScenarioFile, seed: int, out: str, stem: str, window=None) -> Dict:
    tr = _simulate(spec.scenario, seed)
    w = window or _window(tr, argparse.Namespace(), spec)
    injs = spec.scenario.injections
    rep = _metrics(tr, spec.scenario, w, spec.analysis.skip, injs[0] if len(injs) == 1 else None)
    flat = rep.flat()
    _write(os.path.join(out, f"{stem}.trace"), trace_io.dumps(tr))
    _write(os.path.join(out, f"{stem}.metrics.yaml"), _doc(flat))
    return flat


# -- subcommands --------------------------------------------------------------------

def cmd_run(args) -> int:
    spec = _load(args.scenario)
    seed = spec.seed if args.seed is None else args.seed
    out = _outdir(args.out)
    flat = _run_one(spec, seed, out, args.name or spec.name,
                    tuple(args.window) if args.window else None)
    print(f"{spec.name}: end_time={flat['end_time']!r} s, written to {out}")
    return EXIT_OK


def cmd_pd(args) -> int:
    spec = _load(args.scenario)
    seed = spec.seed if args.seed is None else args.seed
    try:
        rep = analysis.measure_pd(spec.free_variant, spec.barrier_variant, seed, _simulate)
    except analysis.AnalysisError as e:
        raise CliError(str(e), EXIT_INVALID) from e
    doc = {
        "scenario": spec.name,
        "seed": seed,
        "t_barrier_free": rep.t_barrier_free,
        "t_barrier": rep.t_barrier,
        "t_barrier_only": rep.t_barrier_only,
        "barrier_correction": rep.correction,
        "n_barriers": rep.n_barriers,
        "flops": rep.flops,
        "perf_barrier_free": rep.perf_barrier_free,
        "perf_barrier_adjusted": rep.perf_barrier_adjusted,
        "p_d": rep.p_d,
    }
    text = _doc(doc)
    if args.out:
        out = _outdir(args.out)
        _write(os.path.join(out, f"{spec.name}.pd.yaml"), text)
    sys.stdout.write(text)
    return EXIT_OK


def inject_report(spec: sf.ScenarioFile, inj: InjectionSpec, seed: int,
                  threshold: float = 0.25) -> Dict:
    """Idle-wave and lagger comparison for one injection; no exception for absent waves."""
    base = spec.scenario
    tr0 = _simulate(base, seed)
    doc: Dict = {"scenario": spec.name, "seed": seed, "rank": inj.rank,
                 "iteration": inj.iteration, "extra_seconds": inj.extra_seconds,
                 "kind": inj.kind.value}
    lo = max(spec.analysis.skip, 0)
    if inj.extra_seconds <= 0:
        doc.update(wave_detected=False, note="zero injection")
        tr1 = tr0
    else:
        try:
            s1 = with_injections(base, tuple(base.injections) + (inj,))
        except ModelError as e:
            raise CliError(str(e), EXIT_INVALID) from e
        tr1 = _simulate(s1, seed)
        try:
            w = analysis.measure_idle_wave(tr1, inj, threshold)
            doc.update(wave_detected=True, velocity=w.velocity,
                       extinction_rank=w.extinction_rank, reach=w.reach)
        except analysis.NoWaveDetected as e:
            doc.update(wave_detected=False, note=str(e))
    tail = (inj.iteration + base.n_iters) // 2
    for label, t, a, b in (("before", tr0, lo, inj.iteration),
                           ("after", tr1, max(tail, inj.iteration + 1), base.n_iters)):
        try:
            wf = analysis.measure_wavefront(t, analysis.iteration_window(t, a, b))
            doc[f"lagger_{label}"] = wf.lagger_domain
            doc[f"slope_{label}"] = "lockstep" if wf.lockstep else wf.slope
            doc[f"amplitude_{label}"] = wf.amplitude
        except analysis.AnalysisError as e:
            doc[f"lagger_{label}"] = None
            doc[f"note_{label}"] = str(e)
    return doc


def cmd_inject(args) -> int:
    spec = _load(args.scenario)
    seed = spec.seed if args.seed is None else args.seed
    if args.extra < 0:
        raise CliError("--extra must be >= 0", EXIT_INVALID)
    inj = InjectionSpec(args.rank, args.iteration, args.extra, args.kind)
    doc = inject_report(spec, inj, seed, spec.analysis.threshold)
    text = _doc(doc)
    if args.out:
        out = _outdir(args.out)
        _write(os.path.join(out, f"{spec.name}.inject.yaml"), text)
    sys.stdout.write(text)
    return EXIT_OK


def _sweep_point(job):
    raw, base_dir, seed, out, stem = job
    try:
        spec = sf.build(raw, base_dir)
        flat = _run_one(spec, seed, out, stem)
        return stem, flat, None
    except sf.ScenarioFileError as e:
        return stem, None, (EXIT_INVALID, str(e))
    except sf.ScenarioIOError as e:
        return stem, None, (EXIT_IO, str(e))
    except CliError as e:
        return stem, None, (e.code, str(e))


def cmd_sweep(args) -> int:
    spec = _load(args.scenario)
    seed = spec.seed if args.seed is None else args.seed
    try:
        values = [yaml.safe_load(v) for v in args.values]
    except yaml.YAMLError as e:
        raise CliError(f"--values: {e}", EXIT_INVALID) from e
    if not values:
        raise CliError("sweep needs at least one value", EXIT_INVALID)
    out = _outdir(args.out)
    jobs = []
    for i, v in enumerate(values):
        try:
            raw = sf.set_path(spec.raw, args.axis, v)
        except sf.ScenarioFileError as e:
            raise CliError(str(e), EXIT_INVALID) from e
        jobs.append((raw, spec.base_dir, seed, out, f"{spec.name}-{i:03d}"))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    failed = [(stem, err) for stem, _, err in results if err]
    if failed:
        stem, (code, msg) = failed[0]
        raise CliError(f"sweep point {stem}: {msg}", code)
    keys: List[str] = []
    for _, flat, _ in results:
        keys += [k for k in flat if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", args.axis] + keys)
    for (stem, flat, _), v in zip(results, values):
        w.writerow([stem, yaml.safe_dump(v, default_flow_style=True).strip()]
                   + [flat.get(k, "") for k in keys])
    _write(os.path.join(out, f"{spec.name}-sweep.csv"), buf.getvalue())
    print(f"{len(results)} sweep points written to {out}")
    return EXIT_OK


def _read_trace(path: str):
    try:
        return trace_io.read_trace(path)
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from e
    except ValueError as e:
        raise CliError(f"{path}: {e}", EXIT_INVALID) from e


def cmd_analyze(args) -> int:
    tr = _read_trace(args.trace)
    spec = _load(args.scenario) if args.scenario else None
    if spec is not None and trace_io.scenario_digest(spec.scenario) != tr.scenario_digest:
        log.warning("trace digest does not match %s", args.scenario)
    flops = total_flops(spec.scenario) if spec is not None else None
    rep = analysis.summarize_trace(tr, _window(tr, args, spec), flops, None,
                                   spec.analysis.skip if spec else 0)
    text = _doc(rep.flat())
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    if args.cer_csv:
        _write(args.cer_csv, analysis.cer_csv({os.path.basename(args.trace):
                                               analysis.compute_cer(tr)}))
    return EXIT_OK


def cmd_export_csv(args) -> int:
    tr = _read_trace(args.trace)
    text = trace_io.to_csv(tr)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the invalid-input code, not argparse's 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="desync", description=__doc__.splitlines()[0],
                                epilog="exit codes: 0 ok, 1 invalid input, 2 deadlock, "
                                       "3 I/O error")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(q, out_default: Optional[str] = "out"):
        q.add_argument("scenario", help="scenario file (YAML, desync/scenario/v1)")
        q.add_argument("--seed", type=int, default=None,
                       help="override the file's seed (default: the file's, else 0)")
        q.add_argument("--out", default=out_default,
                       help=f"output directory (default: {out_default})")

    q = sub.add_parser("run", help="simulate a scenario, write its trace and metrics")
    common(q)
    q.add_argument("--name", help="file stem for outputs (default: scenario name)")
    q.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"),
                   help="analysis window in seconds (default: from file, else second half)")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("pd", help="barrier-free vs barrier-adjusted speedup")
    common(q, None)
    q.set_defaults(func=cmd_pd)

    q = sub.add_parser("inject", help="idle-wave and lagger report for one injected delay")
    common(q, None)
    q.add_argument("--rank", type=int, required=True)
    q.add_argument("--iteration", type=int, required=True)
    q.add_argument("--extra", type=float, required=True, help="extra seconds (0 allowed)")
    q.add_argument("--kind", default="core-bound", choices=["core-bound", "memory-bound"])
    q.set_defaults(func=cmd_inject)

    q = sub.add_parser("sweep", help="run one scenario over values of a single parameter")
    common(q)
    q.add_argument("--axis", required=True,
                   help="dotted key path in the scenario file, e.g. workload.distances")
    q.add_argument("--values", nargs="+", required=True,
                   help="values, each parsed as YAML, e.g. '[1,-1]' '[1,-1,2,-2]'")
    q.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("analyze", help="recompute metrics from a trace file")
    q.add_argument("trace")
    q.add_argument("--scenario", help="scenario file, for flops and the analysis window")
    q.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"))
    q.add_argument("--out", help="write the metrics document here (default: stdout only)")
    q.add_argument("--cer-csv", help="also write a per-rank timing summary as CSV")
    q.set_defaults(func=cmd_analyze)

    q = sub.add_parser("export-csv", help="segment table as CSV for plotting")
    q.add_argument("trace")
    q.add_argument("--out", help="output file (default: stdout)")
    q.set_defaults(func=cmd_export_csv)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"desync: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
