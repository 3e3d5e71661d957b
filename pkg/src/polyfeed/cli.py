"""Command-line entry point: ``polyfeed <command> [flags]``.

Exit codes: 0 success, 1 I/O or unexpected error, 2 usage, 3 validation or
provenance, 4 numerical failure, 5 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys as _sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError, NumericalError, PolyfeedError, ValidationError
from .feedback import eval_Vd, hjb_check
from .genlyap import load_chain, save_chain, synthesize
from .model import BurgersConfig, load_system, make_burgers, make_scalar, save_system
from .oracle import default_bands, taylor_order_study, write_study
from .sim import cost_J, cost_Jd, dp_identity_check, integrate_closed_loop, write_csv
from .symtensor import write_manifest

log = logging.getLogger("polyfeed")

EXIT_USAGE = 2


class UsageError(PolyfeedError):
    exit_code = EXIT_USAGE


# ---------------------------------------------------------------- helpers


def parse_patches(text: str) -> tuple:
    """'0.1:0.3,0.6:0.8' -> ((0.1, 0.3), (0.6, 0.8))."""
    patches = []
    for item in (text or "").split(","):
        item = item.strip()
        if not item:
            continue
        lo, sep, hi = item.partition(":")
        try:
            patches.append((float(lo), float(hi)))
        except ValueError:
            raise UsageError(f"bad patch {item!r}, expected lo:hi") from None
        if not sep:
            raise UsageError(f"bad patch {item!r}, expected lo:hi")
    if not patches:
        raise UsageError("at least one control patch is required (--patches lo:hi,...)")
    return tuple(patches)


def parse_vector(text: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """A state from a file, 'random:<norm>' or a comma/space separated list."""
    text = str(text).strip()
    if text.startswith("random"):
        _, _, norm = text.partition(":")
        v = rng.standard_normal(n)
        return float(norm or 1.0) * v / np.linalg.norm(v)
    if Path(text).is_file():
        vec = np.loadtxt(text, dtype=np.float64, ndmin=1).ravel()
    else:
        try:
            vec = np.array([float(x) for x in text.replace(",", " ").split()])
        except ValueError:
            raise UsageError(f"cannot parse vector {text!r}") from None
    if vec.shape != (n,):
        raise ValidationError(f"vector must have {n} entries, got {vec.size}")
    return vec


def resolve_threads(flag) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("POLYFEED_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"POLYFEED_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _config_record(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run_manifest(args, started: float, **fields) -> dict:
    """Resolved config, tool version and timing; the only place timestamps live."""
    out = {
        "tool": "polyfeed",
        "version": __version__,
        "command": args.command,
        "config": json.dumps(_config_record(args), sort_keys=True, default=str),
        "seed": args.seed,
    }
    out.update({k: v for k, v in fields.items()})
    out["started"] = time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started))
    out["wall_clock_seconds"] = f"{time.time() - started:.3f}"
    return out


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.txt")


# ---------------------------------------------------------------- commands


def cmd_model_gen(args, started) -> int:
    if args.kind == "burgers":
        cfg = BurgersConfig(args.n, args.nu, args.mu, parse_patches(args.patches))
        sys = make_burgers(cfg, alpha=args.alpha)
    else:
        sys = make_scalar(args.a, args.b, args.n1, args.alpha)
    save_system(sys, args.output)
    eig = np.linalg.eigvals(sys.A).real
    write_manifest(_sidecar(args.output), run_manifest(
        args, started, system_hash=sys.hash(), n=sys.n, m=sys.m,
        unstable_modes=int(np.sum(eig >= 0))))
    print(f"wrote {args.output}: n={sys.n} m={sys.m} hash={sys.hash()} "
          f"unstable modes={int(np.sum(eig >= 0))}")
    return 0


def cmd_synth(args, started) -> int:
    sys = load_system(args.system)
    result = synthesize(sys, args.degree, tol=args.tol)
    extra = run_manifest(args, started, system_file=str(args.system))
    save_chain(args.output, result, {k: v for k, v in extra.items() if k != "system_hash"})
    print(f"Riccati residual {result.riccati.residual_norm:.3e}, "
          f"spectral abscissa {result.riccati.spectral_abscissa:.6g}")
    for k, r in sorted(result.residuals.items()):
        print(f"order {k}: residual {r:.3e}")
    print(f"wrote chain archive {args.output} (degree {args.degree}, system {sys.hash()})")
    return 0


def cmd_hjb_check(args, started) -> int:
    sys = load_system(args.system)
    exp = load_chain(args.chain, sys)
    worst = hjb_check(exp, sys, samples=args.samples, radius=args.radius, seed=args.seed)
    ok = worst <= args.threshold
    print(f"max normalized HJB residual over {args.samples} probes (radius {args.radius}): "
          f"{worst:.3e} [{'PASS' if ok else 'FAIL'} at {args.threshold:.1e}]")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hjb.txt").write_text(f"max_normalized_residual={worst!r}\n")
        write_manifest(out / "manifest.txt", run_manifest(
            args, started, system_hash=sys.hash(), max_normalized_residual=repr(worst)))
    return 0 if ok else NumericalError.exit_code


def cmd_simulate(args, started) -> int:
    sys = load_system(args.system)
    exp = load_chain(args.chain, sys)
    rng = np.random.default_rng(args.seed)
    y0 = parse_vector(args.y0, sys.n, rng)
    T = None if args.horizon == "auto" else float(args.horizon)
    controller = (lambda y: np.zeros(sys.m)) if args.open_loop else None
    traj = integrate_closed_loop(sys, exp, y0, T=T, tol=args.tol, controller=controller)
    if args.output:
        write_csv(traj, args.output)
    if traj.diverged:
        log.error("trajectory diverged at t=%.6g; last finite state %s",
                  traj.times[-1], np.array2string(traj.yT, precision=6))
        if args.output:
            write_manifest(_sidecar(args.output), run_manifest(
                args, started, system_hash=sys.hash(), diverged=True,
                t_last=repr(float(traj.times[-1]))))
        raise DivergenceError("closed loop diverged")
    J, Jd = cost_J(traj, sys), cost_Jd(traj, sys, exp)
    dp = dp_identity_check(traj, exp) if not args.open_loop else float("nan")
    print(f"J = {J:.12g}")
    print(f"J_d = {Jd:.12g}")
    print(f"V_d(y0) = {eval_Vd(exp, y0):.12g}")
    print(f"dp identity |V_d(y(T)) - V_d(y0) + int l_d| = {dp:.3e}")
    if args.output:
        write_manifest(_sidecar(args.output), run_manifest(
            args, started, system_hash=sys.hash(), horizon=repr(float(traj.times[-1])),
            J=repr(J), J_d=repr(Jd), dp_identity=repr(dp), y0=",".join(repr(float(v)) for v in y0)))
    return 0


def _parse_bands(raw, dmax: int) -> dict:
    """Config bands {"V2": [lo, hi], "u2": [lo, hi]} over the defaults."""
    bands = default_bands(dmax)
    for key, val in (raw or {}).items():
        q, d = key[0], key[1:]
        if q not in ("V", "u") or not d.isdigit() or len(val) != 2:
            raise UsageError(f"bad band entry {key!r}: {val!r}")
        bands[(q, int(d))] = (float(val[0]), float(val[1]))
    return bands


def cmd_taylor_study(args, started) -> int:
    sys = load_system(args.system)
    rng = np.random.default_rng(args.seed)
    if args.chain:
        full = load_chain(args.chain, sys)
        if full.d < args.dmax:
            raise ValidationError(f"chain has degree {full.d} < dmax {args.dmax}")
    else:
        full = synthesize(sys, args.dmax).expansion
    expansions = {d: full.truncate(d) for d in range(2, args.dmax + 1)}
    v = rng.standard_normal(sys.n) if args.direction == "random" else parse_vector(
        args.direction, sys.n, rng)
    if not args.smin > 0 or not args.smax > args.smin or args.points < 4:
        raise UsageError("need 0 < smin < smax and points >= 4")
    s_grid = np.geomspace(args.smin, args.smax, args.points)
    T = None if args.horizon == "auto" else float(args.horizon)
    bands = _parse_bands(args.bands, args.dmax)
    workers = min(resolve_threads(args.threads), args.points)
    report = taylor_order_study(sys, expansions, v, s_grid, T=T, n_steps=args.n_steps,
                                tol=args.tol, bands=bands, workers=workers)
    out = Path(args.output)
    write_study(report, out)
    print((out / "orders.txt").read_text(), end="")
    missed = [f for f in report.fitted_orders if f.in_band is False]
    ordering = all(r.ordering_ok for r in report.rows)
    print(f"ordering V_hat <= J(y_d, u_d) + slack on all rows: {'PASS' if ordering else 'FAIL'}")
    write_manifest(out / "manifest.txt", run_manifest(
        args, started, system_hash=sys.hash(), workers=workers,
        direction=",".join(repr(float(x)) for x in report.direction),
        rows=len(report.rows), excluded=len(report.flagged), ordering_ok=ordering,
        bands_missed=",".join(f"{f.quantity}{f.d}" for f in missed)))
    return 0 if not missed and ordering else NumericalError.exit_code


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyfeed",
                                description="Polynomial feedback synthesis and verification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults (flags win)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on parallel workers (env POLYFEED_THREADS, default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="system generation")
    msub = model.add_subparsers(dest="model_command", required=True)
    gen = msub.add_parser("gen", parents=[common], help="write a system file")
    gen.add_argument("--kind", choices=("burgers", "scalar"), required=True)
    gen.add_argument("--n", type=int, default=6)
    gen.add_argument("--nu", type=float, default=0.05)
    gen.add_argument("--mu", type=float, default=1.0)
    gen.add_argument("--patches", default="")
    gen.add_argument("--a", type=float, default=-1.0)
    gen.add_argument("--b", type=float, default=1.0)
    gen.add_argument("--n1", type=float, default=1.0)
    gen.add_argument("--alpha", type=float, default=1.0)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_model_gen)

    syn = sub.add_parser("synth", parents=[common], help="solve the Riccati/chain equations")
    syn.add_argument("--system", required=True)
    syn.add_argument("--degree", type=int, default=3)
    syn.add_argument("--tol", type=float, default=1e-10)
    syn.add_argument("-o", "--output", required=True)
    syn.set_defaults(func=cmd_synth)

    hjb = sub.add_parser("hjb-check", parents=[common], help="perturbed HJB identity on probes")
    hjb.add_argument("--system", required=True)
    hjb.add_argument("--chain", required=True)
    hjb.add_argument("--samples", type=int, default=100)
    hjb.add_argument("--radius", type=float, default=1.0)
    hjb.add_argument("--threshold", type=float, default=1e-8)
    hjb.add_argument("-o", "--output", default=None, help="optional report directory")
    hjb.set_defaults(func=cmd_hjb_check)

    sim = sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    sim.add_argument("--system", required=True)
    sim.add_argument("--chain", required=True)
    sim.add_argument("--y0", required=True, help="file, 'random:<norm>' or 'v1,v2,...'")
    sim.add_argument("--horizon", default="auto")
    sim.add_argument("--tol", type=float, default=1e-9)
    sim.add_argument("--open-loop", action="store_true", help="apply u = 0 instead of u_d")
    sim.add_argument("-o", "--output", default=None)
    sim.set_defaults(func=cmd_simulate)

    ts = sub.add_parser("taylor-study", parents=[common], help="order study against the oracle")
    ts.add_argument("--system", required=True)
    ts.add_argument("--chain", default=None, help="archive of degree >= dmax (else synthesized)")
    ts.add_argument("--dmax", type=int, default=3)
    ts.add_argument("--direction", default="random", help="'random', a file or 'v1,v2,...'")
    ts.add_argument("--smin", type=float, default=1e-3)
    ts.add_argument("--smax", type=float, default=1e-1)
    ts.add_argument("--points", type=int, default=8)
    ts.add_argument("--n-steps", type=int, default=800)
    ts.add_argument("--tol", type=float, default=1e-8)
    ts.add_argument("--horizon", default="auto")
    ts.add_argument("-o", "--output", default="study")
    ts.set_defaults(func=cmd_taylor_study, bands=None)
    return p


def _subparser(parser, argv):
    """The leaf parser selected by argv (for applying config defaults)."""
    node = parser
    for tok in argv:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions or tok not in actions[0].choices:
            continue
        node = actions[0].choices[tok]
    return node


def parse_args(argv=None):
    argv = list(_sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        leaf = _subparser(parser, argv)
        known = {a.dest for a in leaf._actions} | {"bands"}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        leaf.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    if args.command == "model":
        args.command = "model gen"
    return args


def main(argv=None) -> int:
    started = time.time()
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"polyfeed: usage error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, started)
    except PolyfeedError as exc:
        print(f"polyfeed: {type(exc).__name__}: {exc}", file=_sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"polyfeed: I/O error: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
