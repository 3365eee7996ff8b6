"""Command-line frontend: datasets, training, sampling, verification and sweeps.

Every command writes ``manifest.json`` into ``--out-dir`` before any other
output. ``--dry-run`` prints the resolved configuration and writes nothing.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import make_dataset, read_dataset, write_dataset
from .errors import ConfigError, DomainError, NumericalError
from .flows import Coupling, FlowSpec, LinearFlow, SqrtFlow, flow_sample
from .mlp import Adam, Mlp, load_checkpoint, save_checkpoint
from .oracle import ExactDenoiser
from .rng import RngStream
from .samplers import METHODS, SamplerConfig, sample
from .schedule import Schedule
from .train import MODES, LearnedDenoiser, LearnedVelocity, LossSpec, train, write_curve

FLOW_METHODS = ("flow-linear", "flow-ddim-sqrt")
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def fmt(v: float) -> str:
    return format(float(v), ".17g")


# ------------------------------------------------------------------ writers

def write_trajectory_csv(path, times, states, meta: dict) -> None:
    """``states`` is ``(len(times), d)`` for a single sample."""
    d = states.shape[-1]
    with open(path, "w") as fh:
        for key in ("seed", "method", "schedule"):
            value = meta.get(key)
            fh.write(f"#{key}: {json.dumps(value, sort_keys=True) if isinstance(value, dict) else value}\n")
        fh.write(",".join(["t"] + [f"x{j}" for j in range(d)]) + "\n")
        for t, row in zip(times, states):
            fh.write(",".join([fmt(t)] + [fmt(v) for v in row]) + "\n")


def write_points_ndjson(path, points, key="x") -> None:
    with open(path, "w") as fh:
        for p in np.atleast_2d(points):
            fh.write(json.dumps({key: [float(v) for v in p]}) + "\n")


def write_pairs_ndjson(path, x1, x0) -> None:
    with open(path, "w") as fh:
        for a, b in zip(x1, x0):
            fh.write(json.dumps({"x1": [float(v) for v in a], "x0": [float(v) for v in b]}) + "\n")


def svg_plot(points, paths=(), times=None, size=480, pad=24) -> str:
    """Minimal SVG: axes, one ``<circle>`` per point and one polyline per path.

    Two-dimensional data is drawn in the plane (first two coordinates). For
    one-dimensional data the vertical axis is time: points sit at ``t = 0`` and
    paths are drawn as ``(x(t), t)`` using ``times``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    paths = [np.asarray(p, dtype=float) for p in paths]
    if pts.shape[1] == 1:
        pts = np.concatenate([pts, np.zeros_like(pts)], axis=1)
        if paths and times is None:
            raise ValueError("one-dimensional paths need their times")
        paths = [np.stack([p[:, 0], np.asarray(times, dtype=float)], axis=1) for p in paths]
    allpts = [pts[:, :2]] + [p[:, :2] for p in paths]
    stacked = np.concatenate(allpts)
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    span = float(max((hi - lo).max(), 1e-9))
    scale = (size - 2 * pad) / span

    def px(p):
        return pad + (p[0] - lo[0]) * scale, size - pad - (p[1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    ox, oy = px(np.zeros(2))
    if 0 <= ox <= size:
        out.append(f'<line x1="{ox:.2f}" y1="0" x2="{ox:.2f}" y2="{size}" stroke="#bbb"/>')
    if 0 <= oy <= size:
        out.append(f'<line x1="0" y1="{oy:.2f}" x2="{size}" y2="{oy:.2f}" stroke="#bbb"/>')
    for path in allpts[1:]:
        coords = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in path)
        out.append(f'<polyline points="{coords}" fill="none" stroke="#4477aa" stroke-width="0.8"/>')
    for p in pts:
        x, y = px(p[:2])
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="#cc3311"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- manifest

def threads_setting(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DLAB_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"DLAB_THREADS must be an integer, got {env!r}") from None


def write_manifest(out_dir: Path, argv, config: dict, artifacts: list) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command_line": list(argv),
        "config": config,
        "seeds": {"seed": config.get("seed")},
        "artifacts": [str(out_dir / a) for a in artifacts],
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ helpers

def schedule_from_args(args) -> Schedule:
    return Schedule(args.schedule, sigma_q=args.sigma_q, steps=args.steps,
                    beta_min=args.beta_min, beta_max=args.beta_max)


def schedule_from_meta(meta: dict) -> Schedule:
    s = meta["schedule"]
    return Schedule(s["kind"], sigma_q=s["sigma_q"], steps=s["steps"],
                    beta_min=s.get("beta_min", 0.1), beta_max=s.get("beta_max", 20.0))


def load_data(path):
    if path is None:
        raise ConfigError("--data is required (an atoms NDJSON file)")
    if not Path(path).exists():
        raise ConfigError(f"data file {path} not found")
    return read_dataset(path)


def load_model(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# ----------------------------------------------------------------- commands

def cmd_dataset(args, argv):
    config = {"command": "dataset", "kind": args.kind, "n": args.n, "seed": args.seed, "a": args.a, "b": args.b}
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out_dir)
    write_manifest(out, argv, config, [args.output])
    mix = make_dataset(args.kind, args.n, args.seed, a=args.a, b=args.b)
    write_dataset(out / args.output, mix)
    return EXIT_OK


def _flow_spec(args, sched, mix, model_meta):
    flow = LinearFlow() if args.method == "flow-linear" else SqrtFlow()
    coupling = args.coupling or ("independent" if args.method == "flow-linear" else "diffusion")
    cp = Coupling(coupling, mix, sigma_q=sched.sigma_q)
    if model_meta is None:
        return FlowSpec(flow, cp)
    model, meta = model_meta
    if meta.get("mode") != "flow-linear":
        raise ConfigError(f"{args.method} needs a flow-linear checkpoint, got mode {meta.get('mode')!r}")
    return FlowSpec(flow, cp, LearnedVelocity(model))


def cmd_sample(args, argv):
    if args.denoiser == "oracle":
        sched = schedule_from_args(args)
        model_meta = None
        mix = load_data(args.data)
        dim = mix.dim
    else:
        model_meta = load_model(args.denoiser)
        model, meta = model_meta
        sched = schedule_from_meta(meta)
        if args.steps_given:
            sched = sched.with_steps(args.steps)
        mix = read_dataset(args.data) if args.data else None
        dim = model.dim
    n_trace = min(args.trace, args.n)
    files = ["endpoints.ndjson"] + [f"trajectory_{i}.csv" for i in range(n_trace)]
    if args.svg:
        files.append(args.svg)
    if args.pairs:
        files.append("pairs.ndjson")
    config = {"command": "sample", "method": args.method, "denoiser": args.denoiser, "data": args.data,
              "n": args.n, "seed": args.seed, "schedule": sched.describe(), "trace": n_trace,
              "coupling": args.coupling, "threads": threads_setting(args)}
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out_dir)
    write_manifest(out, argv, config, files)
    rng = RngStream(args.seed)

    if args.method in FLOW_METHODS:
        if mix is None:
            raise ConfigError("flow sampling needs --data for the coupling's target")
        spec = _flow_spec(args, sched, mix, model_meta)
        if args.pairs:
            pair_rng = rng.spawn(1)[0]
            x1, x0 = spec.coupling.sample(args.n, pair_rng)
            write_pairs_ndjson(out / "pairs.ndjson", x1, x0)
        traj = flow_sample(spec, sched.steps, rng, n=args.n)
        meta = {"seed": args.seed, "method": args.method, "schedule": sched.describe()}
    else:
        if model_meta is None:
            den = ExactDenoiser(mix, sched)
        else:
            model, meta = model_meta
            spec = LossSpec(meta["mode"], sched)
            den = LearnedDenoiser(model, spec)
        keep = None if n_trace or args.svg else []
        traj = sample(SamplerConfig(args.method, sched, den, n=args.n, dim=dim, keep=keep), rng)
        meta = {"seed": args.seed, "method": args.method, "schedule": sched.describe()}

    write_points_ndjson(out / "endpoints.ndjson", traj.endpoints)
    for i in range(n_trace):
        write_trajectory_csv(out / f"trajectory_{i}.csv", traj.times, traj.states[:, i, :], meta)
    if args.svg:
        paths = [traj.states[:, i, :] for i in range(n_trace)]
        (out / args.svg).write_text(svg_plot(traj.endpoints, paths, traj.times))
    return EXIT_OK


def cmd_train(args, argv):
    mix = load_data(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(","))
    sched = schedule_from_args(args)
    if args.resume:
        model, meta = load_model(args.resume)
        if args.mode != meta.get("mode"):
            raise ConfigError(f"checkpoint was trained with mode {meta.get('mode')!r}")
        sched = schedule_from_meta(meta)
        start = int(meta.get("start_batch", 0)) + int(meta.get("batches", 0))
    else:
        model, meta, start = None, None, 0
    spec = LossSpec(args.mode, sched)
    config = {"command": "train", "mode": args.mode, "data": args.data, "seed": args.seed, "lr": args.lr,
              "batches": args.batches, "batch_size": args.batch_size, "hidden": hidden, "fourier": args.fourier,
              "schedule": sched.describe(), "resume": args.resume, "threads": threads_setting(args)}
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out_dir)
    write_manifest(out, argv, config, ["model.dlab", "curve.ndjson", "adam.npz"])
    optimizer = None
    if model is None:
        model = Mlp.for_dim(mix.dim, hidden=hidden, seed=args.seed, fourier=args.fourier)
    else:
        adam_path = Path(args.resume).with_name("adam.npz")
        if adam_path.exists():
            optimizer = Adam.load(adam_path)
    # the batch stream for a resumed run is keyed by its first batch index
    seed = args.seed if start == 0 else args.seed * 1_000_003 + start
    result = train(model, spec, mix, lr=args.lr, batches=args.batches, batch_size=args.batch_size,
                   seed=seed, optimizer=optimizer, start_batch=start)
    save_checkpoint(out / "model.dlab", model, result.config)
    write_curve(out / "curve.ndjson", result.curve)
    result.optimizer.save(out / "adam.npz")
    print(f"final loss {result.curve[-1]['loss']:.6g} after {start + args.batches} batches")
    return EXIT_OK


def cmd_verify(args, argv):
    from . import verify

    names = list(verify.CHECKS) if args.checks == ["all"] else args.checks
    unknown = [n for n in names if n not in verify.CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; known: {sorted(verify.CHECKS)}")
    config = {"command": "verify", "checks": names, "seed": args.seed, "threads": threads_setting(args)}
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out_dir)
    write_manifest(out, argv, config, ["reports.ndjson"])
    table = verify.load_thresholds(args.thresholds)
    reports = []
    with open(out / "reports.ndjson", "w") as fh:
        for name in names:
            report = verify.CHECKS[name](table=table)
            fh.write(report.to_json() + "\n")
            fh.flush()
            reports.append(report)
    print(verify.format_table(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def cmd_sweep(args, argv):
    from .verify import _pf_endpoint
    from .core import DiracMixture

    methods = args.methods.split(",")
    for m in methods:
        if m not in ("euler", "heun"):
            raise ConfigError(f"sweep methods are euler and heun, got {m!r}")
    steps = [int(s) for s in args.steps_list.split(",")]
    if any(T < 1 for T in steps):
        raise ConfigError("step counts must be positive")
    stop = args.stop_time
    bad = [T for T in steps if abs(round(stop * T) - stop * T) > 1e-9]
    if bad:
        raise ConfigError(f"stop time {stop} is not on the grid for T={bad}")
    config = {"command": "sweep", "methods": methods, "steps": steps, "x1": args.x1, "stop_time": stop,
              "sigma_q": args.sigma_q, "seed": args.seed}
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out_dir)
    write_manifest(out, argv, config, [args.output])
    sched = Schedule("ve", sigma_q=args.sigma_q)
    delta = DiracMixture(np.zeros((1, 1)), np.ones(1))
    exact = args.x1 * np.sqrt(stop)
    with open(out / args.output, "w") as fh:
        fh.write("method,T,error\n")
        for m in methods:
            for T in steps:
                err = abs(float(_pf_endpoint(delta, sched, args.x1, T, stop, m)[0, 0]) - exact)
                fh.write(f"{m},{T},{fmt(err)}\n")
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["command_line"])


# ------------------------------------------------------------------- parser

def _add_schedule(p):
    p.add_argument("--schedule", choices=("ve", "vp", "karras"), default="ve")
    p.add_argument("--sigma-q", type=float, default=1.0)
    p.add_argument("--beta-min", type=float, default=0.1)
    p.add_argument("--beta-max", type=float, default=20.0)
    p.add_argument("--steps", type=int, default=None, help="number of steps T (default 1000)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--threads", type=int, default=None,
                        help="recorded in the manifest; falls back to DLAB_THREADS")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and write nothing")

    parser = argparse.ArgumentParser(prog="difflab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="write a toy atoms file")
    p.add_argument("--kind", choices=("spiral", "two-point", "annulus-atoms"), default="two-point")
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--a", type=float, default=-1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--output", default="atoms.ndjson")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("sample", parents=[common], help="run a reverse sampler or flow")
    p.add_argument("--method", choices=METHODS + FLOW_METHODS, required=True)
    p.add_argument("--denoiser", default="oracle", help="'oracle' or a checkpoint path")
    p.add_argument("--data", help="atoms NDJSON (required for the oracle and for flows)")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--trace", type=int, default=8, help="number of per-sample trajectory CSVs")
    p.add_argument("--coupling", choices=("independent", "diffusion"))
    p.add_argument("--pairs", action="store_true", help="also export coupling draws (flows only)")
    p.add_argument("--svg", help="file name for a scatter/trajectory plot")
    _add_schedule(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", parents=[common], help="train the MLP regressor")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batches", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hidden", default="128,128,128")
    p.add_argument("--fourier", action="store_true", help="append 8-frequency time features")
    p.add_argument("--resume", help="checkpoint to continue from (reads adam.npz beside it)")
    _add_schedule(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="run named checks (or 'all')")
    p.add_argument("checks", nargs="+")
    p.add_argument("--thresholds", help="alternative thresholds JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", parents=[common], help="PF-ODE error vs step count on the delta target")
    p.add_argument("--methods", default="euler,heun")
    p.add_argument("--steps-list", default="100,200,400,800,1600")
    p.add_argument("--x1", type=float, default=1.3)
    p.add_argument("--stop-time", type=float, default=0.01)
    p.add_argument("--sigma-q", type=float, default=1.0)
    p.add_argument("--output", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if hasattr(args, "steps"):
        args.steps_given = args.steps is not None
        if args.steps is None:
            args.steps = 1000
    try:
        return args.func(args, argv)
    except (ConfigError, DomainError, FileNotFoundError, KeyError) as exc:
        print(f"difflab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"difflab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
