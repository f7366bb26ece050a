"""Command-line surface: loss computation, gradient checking, benchmarking,
calibration reports, and entropy-floor sweeps.

Exit codes: 0 success, 1 data or verification failure, 2 usage error.
Every flag can also be supplied through `--config FILE` (one `key=value`
per line, hyphen or underscore keys); command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .blocked import (FilterConfig, aux_bound_bytes, blocked_backward,
                      blocked_forward, loss_and_grad)
from .calibration import (RecordError, ace, bin_records, ece, ingest_records,
                          reliability_data, rms_ce, sce)
from .entropy import (BoundParams, effective_params, entropy_lower_bound,
                      normalized_gap, numeric_min_entropy)
from .memtrack import SingleAllocationLimitError
from .reference import finite_diff_grad, naive_backward, naive_forward
from .tensors import (InvalidPlanError, MatrixFileError, load_matrix,
                      load_tokens, plan_blocks, random_instance)

__all__ = ["main", "entry", "BenchReport"]


@dataclass(frozen=True)
class BenchReport:
    """One timed benchmark row; wall time is the median over repetitions."""

    method: str
    phase: str
    n: int
    v: int
    d: int
    beta: float
    repetitions: int
    wall_time_ms: float | None
    peak_auxiliary_bytes: int


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    # repr of a float is its shortest exact round-trip form
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _beta_arg(text: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"beta must be a number, got {text!r}")
    if not 0.0 <= val <= 1.0:
        raise argparse.ArgumentTypeError(f"beta must lie in [0, 1], got {text}")
    return val


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def _reps_arg(text: str) -> int:
    val = int(text)
    if val < 3:
        raise argparse.ArgumentTypeError(f"repetitions must be >= 3, got {text}")
    return val


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _resolve_threads(args) -> int | None:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SCE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"SCE_THREADS must be an integer, got {env!r}")
    return None


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _write_csv(path, header, rows) -> None:
    fh, close = _open_out(path)
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])
    finally:
        if close:
            fh.close()


def _rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / max(denom, 1e-300)


def _grad_error(got, want) -> float:
    return max(
        _rel_frobenius(got.grad_e.data, want.grad_e.data),
        _rel_frobenius(got.grad_c.data, want.grad_c.data),
    )


# ---------------------------------------------------------------------------
# subcommands

def _make_plan(args, n, v, d):
    return plan_blocks(
        n, v, d,
        n_block=getattr(args, "n_block", None),
        v_block=getattr(args, "v_block", None),
        d_block=getattr(args, "d_block", None),
        deterministic=args.deterministic,
    )


def cmd_loss(args) -> int:
    try:
        emb = load_matrix(args.embeddings)
        cls = load_matrix(args.classifier)
        tgt = load_tokens(args.targets)
    except MatrixFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    threads = _resolve_threads(args)
    try:
        if args.engine == "blocked":
            plan = _make_plan(args, emb.cols, cls.cols, emb.rows)
            out, _ = blocked_forward(emb, cls, tgt, args.beta, plan,
                                     reduction=args.reduction, workers=threads)
        else:
            out = naive_forward(emb, cls, tgt, args.beta, reduction=args.reduction)
    except (ValueError, InvalidPlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"total {_fmt(out.total)}")
    if args.per_token_csv:
        rows = [(i, out.lse[i], out.o[i], out.per_token_loss[i])
                for i in range(len(out.per_token_loss))]
        _write_csv(args.per_token_csv, ("token", "lse", "o", "loss"), rows)
    return 0


def cmd_gradcheck(args) -> int:
    emb, cls, tgt = random_instance(args.seed, args.n, args.v, args.d, args.scale)
    plan = _make_plan(args, args.n, args.v, args.d)
    threads = _resolve_threads(args)
    filt = FilterConfig(enabled=args.filter_eps > 0, epsilon=args.filter_eps or 0.0)
    tol_analytic = args.tol_analytic
    if tol_analytic is None:
        tol_analytic = 1e-3 if args.filter_eps > 0 else 1e-9

    analytic = naive_backward(emb, cls, tgt, args.beta, reduction=args.reduction)
    out, _ = blocked_forward(emb, cls, tgt, args.beta, plan,
                             reduction=args.reduction, workers=threads)
    grads, stats = blocked_backward(emb, cls, tgt, args.beta, plan, out.lse,
                                    filter_config=filt, reduction=args.reduction,
                                    workers=threads)
    if args.corrupt:
        bad = grads.grad_e.data.copy()
        bad *= 1.001
        bad += 1e-6
        from .reference import Gradients
        from .tensors import DenseMatrix
        grads = Gradients(DenseMatrix._wrap(bad), grads.grad_c)

    err_analytic = _grad_error(grads, analytic)
    print(f"blocked vs analytic relative error: {err_analytic:.3e} (tol {tol_analytic:g})")
    if filt.enabled:
        print(f"tiles skipped by filter: {stats.tiles_skipped_by_filter}")
    ok = err_analytic <= tol_analytic

    if not args.skip_fd:
        fd = finite_diff_grad(emb, cls, tgt, args.beta, args.h,
                              reduction=args.reduction)
        err_fd = _grad_error(analytic, fd)
        print(f"analytic vs finite-difference relative error: {err_fd:.3e} "
              f"(tol {args.tol_fd:g})")
        ok = ok and err_fd <= args.tol_fd

    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _time_runs(fn, repetitions: int, warmups: int) -> float:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(samples)


def _tracemalloc_peak(fn) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    before, _ = tracemalloc.get_traced_memory()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return max(0, peak - before)


def cmd_bench(args) -> int:
    n, v, d = args.n, args.v, args.d
    threads = _resolve_threads(args)
    plan = _make_plan(args, n, v, d)
    phases = [p.strip() for p in args.phases.split(",") if p.strip()]
    for p in phases:
        if p not in ("fwd", "bwd", "fwd_bwd"):
            print(f"error: unknown phase {p!r}", file=sys.stderr)
            return 1

    emb, cls, tgt = random_instance(args.seed, n, v, d, args.scale)
    reports: list[BenchReport] = []
    ceiling = aux_bound_bytes(plan, n, v, d)

    for beta in args.betas:
        lse_out, fstats = blocked_forward(emb, cls, tgt, beta, plan, workers=threads)

        def run_fwd():
            blocked_forward(emb, cls, tgt, beta, plan, workers=threads)

        def run_bwd():
            blocked_backward(emb, cls, tgt, beta, plan, lse_out.lse, workers=threads)

        def run_both():
            loss_and_grad(emb, cls, tgt, beta, plan, workers=threads)

        _, bstats = blocked_backward(emb, cls, tgt, beta, plan, lse_out.lse,
                                     workers=threads)
        peaks = {"fwd": fstats.peak_auxiliary_bytes,
                 "bwd": bstats.peak_auxiliary_bytes,
                 "fwd_bwd": max(fstats.peak_auxiliary_bytes,
                                bstats.peak_auxiliary_bytes)}
        runners = {"fwd": run_fwd, "bwd": run_bwd, "fwd_bwd": run_both}
        for phase in phases:
            if args.deterministic:
                wall = None
            else:
                wall = _time_runs(runners[phase], args.repetitions, args.warmups)
            reports.append(BenchReport("blocked", phase, n, v, d, beta,
                                       args.repetitions, wall, peaks[phase]))
            if peaks[phase] > ceiling:
                print(f"error: blocked {phase} peak {peaks[phase]} bytes exceeds "
                      f"the {ceiling}-byte ceiling", file=sys.stderr)
                return 1

        if not args.skip_naive:
            def naive_fwd():
                naive_forward(emb, cls, tgt, beta)

            def naive_bwd():
                naive_backward(emb, cls, tgt, beta)

            def naive_both():
                naive_forward(emb, cls, tgt, beta)
                naive_backward(emb, cls, tgt, beta)

            nrunners = {"fwd": naive_fwd, "bwd": naive_bwd, "fwd_bwd": naive_both}
            for phase in phases:
                peak = _tracemalloc_peak(nrunners[phase])
                if args.deterministic:
                    wall = None
                else:
                    wall = _time_runs(nrunners[phase], args.repetitions, args.warmups)
                reports.append(BenchReport("naive", phase, n, v, d, beta,
                                           args.repetitions, wall, peak))

    header = ("method", "phase", "n", "v", "d", "beta", "repetitions",
              "wall_time_ms", "peak_auxiliary_bytes")
    rows = [(r.method, r.phase, r.n, r.v, r.d, r.beta, r.repetitions,
             r.wall_time_ms, r.peak_auxiliary_bytes) for r in reports]
    _write_csv(args.out, header, rows)
    return 0


def cmd_calibrate(args) -> int:
    try:
        records = ingest_records(args.records)
    except (RecordError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not records:
        print(f"error: {args.records} holds no records", file=sys.stderr)
        return 1

    have_probs = all(r.probs is not None for r in records)
    if args.metrics:
        wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    else:
        wanted = ["ece", "rms_ce"] + (["sce", "ace"] if have_probs else [])

    n = len(records)
    m = args.bins
    rows = []
    try:
        for name in wanted:
            if name == "ece":
                for scheme in ("equal_width", "equal_mass"):
                    rows.append(("ece", m, scheme, ece(bin_records(records, m, scheme), n)))
            elif name == "rms_ce":
                for scheme in ("equal_width", "equal_mass"):
                    rows.append(("rms_ce", m, scheme, rms_ce(bin_records(records, m, scheme), n)))
            elif name == "sce":
                rows.append(("sce", m, "equal_width", sce(records, m)))
            elif name == "ace":
                rows.append(("ace", m, "equal_mass", ace(records, m, args.ace_empty)))
            else:
                print(f"error: unknown metric {name!r}", file=sys.stderr)
                return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    _write_csv(args.out, ("metric", "bins", "scheme", "value"), rows)
    if args.reliability_csv:
        bins = bin_records(records, m, args.reliability_scheme)
        _write_csv(args.reliability_csv,
                   ("lo", "hi", "count", "mean_confidence", "accuracy", "gap"),
                   reliability_data(bins))
    return 0


def cmd_entropy(args) -> int:
    rows = []
    checks = []
    for d in args.d:
        for v in args.v:
            if v < 2:
                print(f"error: vocabulary sizes must be >= 2, got {v}", file=sys.stderr)
                return 1
            for rho in args.rho:
                if rho < 0:
                    print(f"error: rho must be nonnegative, got {rho}", file=sys.stderr)
                    return 1
                base = BoundParams(sigma_c=rho, sigma_h=1.0, d=d, v=v)
                p = effective_params(base, args.temperature, args.softcap)
                bound = entropy_lower_bound(p)
                rows.append((d, v, rho, args.temperature, args.softcap,
                             p.r, bound, normalized_gap(p)))
                checks.append((p.r, v, bound))
    _write_csv(args.out,
               ("d", "v", "rho", "temperature", "softcap", "r_effective",
                "bound", "normalized_gap"),
               rows)
    if args.verify:
        seen = set()
        for r_eff, v, bound in checks:
            key = (round(r_eff, 12), v)
            if r_eff <= 0 or key in seen:
                continue
            seen.add(key)
            numeric = numeric_min_entropy(r_eff, v, restarts=args.restarts,
                                          iterations=args.iterations,
                                          seed=args.oracle_seed)
            if numeric < bound - 1e-6:
                print(f"error: oracle entropy {numeric!r} undercuts the closed-form "
                      f"bound {bound!r} at r={r_eff}, v={v}", file=sys.stderr)
                return 1
    return 0


# ---------------------------------------------------------------------------
# parser and config plumbing

_BOOL = argparse.BooleanOptionalAction


def _add_common(sub):
    sub.add_argument("--config", help="key=value file mirroring every flag")
    sub.add_argument("--threads", type=_positive_int, default=None,
                     help="worker cap for non-deterministic engine runs "
                          "(falls back to SCE_THREADS)")
    sub.add_argument("--deterministic", action=_BOOL, default=True,
                     help="strictly serial, bit-reproducible execution")


def _add_tiles(sub):
    sub.add_argument("--n-block", type=_positive_int, default=None)
    sub.add_argument("--v-block", type=_positive_int, default=None)
    sub.add_argument("--d-block", type=_positive_int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothce",
        description="Smoothed cross-entropy engines, calibration metrics, "
                    "and entropy-floor analysis.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("loss", help="compute a smoothed cross-entropy loss")
    p.add_argument("--embeddings", required=True, help="SCE1 matrix, D x N")
    p.add_argument("--classifier", required=True, help="SCE1 matrix, D x |V|")
    p.add_argument("--targets", required=True, help="SCE1 token sequence")
    p.add_argument("--beta", type=_beta_arg, default=0.0)
    p.add_argument("--engine", choices=("blocked", "naive"), default="blocked")
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    p.add_argument("--per-token-csv", default=None)
    _add_tiles(p)
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    p = subs.add_parser("gradcheck", help="cross-check gradients against oracles")
    p.add_argument("--n", type=_positive_int, default=8)
    p.add_argument("--v", type=_positive_int, default=64)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--beta", type=_beta_arg, default=0.1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    p.add_argument("--h", type=float, default=1e-3, help="finite-difference step")
    p.add_argument("--tol-analytic", type=float, default=None,
                   help="blocked-vs-analytic tolerance (default 1e-9, or 1e-3 "
                        "when filtering)")
    p.add_argument("--tol-fd", type=float, default=1e-4)
    p.add_argument("--filter-eps", type=float, default=0.0)
    p.add_argument("--skip-fd", action=_BOOL, default=False)
    p.add_argument("--corrupt", action=_BOOL, default=False, help=argparse.SUPPRESS)
    _add_tiles(p)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("bench", help="time and meter both engines")
    p.add_argument("--n", type=_positive_int, default=1024)
    p.add_argument("--v", type=_positive_int, default=16384)
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--betas", type=_float_list, default=[0.0, 0.1])
    p.add_argument("--phases", default="fwd,bwd,fwd_bwd")
    p.add_argument("--repetitions", type=_reps_arg, default=10)
    p.add_argument("--warmups", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.02)
    p.add_argument("--skip-naive", action=_BOOL, default=False)
    p.add_argument("--out", default="-")
    _add_tiles(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("calibrate", help="calibration metrics from JSONL records")
    p.add_argument("--records", required=True)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--metrics", default=None,
                   help="comma list from ece,rms_ce,sce,ace (default: all applicable)")
    p.add_argument("--ace-empty", choices=("skip", "zero"), default="skip")
    p.add_argument("--out", default="-")
    p.add_argument("--reliability-csv", default=None)
    p.add_argument("--reliability-scheme", choices=("equal_width", "equal_mass"),
                   default="equal_width")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("entropy", help="entropy-floor sweeps over (d, v, rho)")
    p.add_argument("--d", type=_int_list, default=[1, 64])
    p.add_argument("--v", type=_int_list, default=[2, 16, 256])
    p.add_argument("--rho", type=_float_list, default=[0.0, 0.5, 2.0])
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--softcap", type=float, default=None)
    p.add_argument("--out", default="-")
    p.add_argument("--verify", action=_BOOL, default=False,
                   help="run the projected-gradient oracle and fail if it "
                        "undercuts the bound")
    p.add_argument("--restarts", type=_positive_int, default=16)
    p.add_argument("--iterations", type=_positive_int, default=1500)
    p.add_argument("--oracle-seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_entropy)

    return parser


def _expand_config(argv: list[str]) -> list[str]:
    """Turn `--config FILE` into synthesized flags ahead of the user's, so
    explicit flags override file values."""
    if not argv:
        return argv
    sub, rest = argv[0], argv[1:]
    cfg_path = None
    for i, tok in enumerate(rest):
        if tok == "--config" and i + 1 < len(rest):
            cfg_path = rest[i + 1]
            break
        if tok.startswith("--config="):
            cfg_path = tok.split("=", 1)[1]
            break
    if cfg_path is None:
        return argv
    injected: list[str] = []
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise UsageError(
                        f"{cfg_path}:{lineno}: expected key=value, got {line!r}")
                key = key.strip().replace("_", "-")
                value = value.strip()
                if value.lower() in ("true", "false"):
                    injected.append(f"--{key}" if value.lower() == "true"
                                    else f"--no-{key}")
                else:
                    injected.append(f"--{key}={value}")
    except OSError as exc:
        raise UsageError(f"cannot read config {cfg_path}: {exc}")
    return [sub] + injected + rest


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        argv = _expand_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (MatrixFileError, RecordError, InvalidPlanError, ValueError,
            SingleAllocationLimitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
