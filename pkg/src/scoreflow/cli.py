"""Command-line entry point: ``scoreflow <subcommand> [flags]``.

Every subcommand writes its outputs plus a ``run.json`` manifest into
``--out-dir``. Exit status is 0 on success, 1 on usage errors and 2 when
the run itself fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, data_io, metrics, plotting, samplers, scores
from .schedules import DiscreteSchedule, VeSchedule, linear_beta_schedule, ve_sigma
from .training import TrainConfig, train
from .uncertainty import mc_ensemble

log = logging.getLogger("scoreflow")

# default spread of the Gaussian skip, per dataset kind
DATA_STD = {"gmm2d": 0.5, "phantom": 0.05}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([data_io.fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _int_list(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return vals


def _methods(text):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in samplers.METHODS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {samplers.METHODS}")
    return vals


# ---------------------------------------------------------------------------
# model loading

def _schedules(meta):
    ddpm = linear_beta_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
    ve = VeSchedule(sigma_base=meta["sigma_base"], t_max=meta["t_max"])
    return ddpm, ve


def _load_field(path, method):
    model, meta = data_io.load_checkpoint(path)
    ddpm, ve = _schedules(meta)
    if model.head == "eps":
        if method != "ddpm":
            raise UsageError(f"checkpoint {path} holds a ddpm model; use --method ddpm")
        return model, scores.eps_model_field(model, ddpm), ddpm
    if method == "ddpm":
        raise UsageError(f"checkpoint {path} holds a VE score model; use em, pc or ode")
    return model, scores.ve_score_field(model, ve), ve


def _sampler_config(args, schedule, record_every=0):
    steps = args.steps
    if isinstance(schedule, DiscreteSchedule):
        if steps not in (None, schedule.T):
            raise UsageError(f"ddpm runs exactly T={schedule.T} steps; got --steps {steps}")
        steps = schedule.T
    steps = steps or 1000
    M = args.corrector_steps
    return samplers.SamplerConfig(
        n_steps=steps, pc_prediction_steps=max(1, steps // (1 + M)), pc_corrector_steps=M,
        snr=args.snr, ode_rtol=args.rtol, ode_atol=args.atol, record_every=record_every)


def _condition(model, args):
    """Return (y, n, side) for a --cond image or a --label class."""
    if args.cond is not None:
        img = data_io.read_pgm(args.cond)
        if img.size != model.y_dim:
            raise UsageError(f"condition has {img.size} pixels, model expects {model.y_dim}")
        return img.reshape(1, -1), 1, img.shape[0]
    if args.label is not None:
        if model.y_dim != 2 or args.label not in (0, 1):
            raise UsageError("--label needs a two-class point model and a label in {0, 1}")
        return np.eye(2)[[args.label]], args.n, 0
    raise UsageError("give --cond IMAGE or --label K")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    if args.kind == "gmm2d":
        ds = data_io.gen_conditional_gmm2d(args.n, args.seed)
    else:
        ds = data_io.gen_phantom_dataset(args.n, args.seed, args.size)
    log.info("writing %d %s rows", len(ds), args.kind)
    return data_io.write_dataset(args.out_dir, ds)


def cmd_train(args):
    ds = data_io.load_dataset(args.data_dir)
    data_std = args.data_std if args.data_std is not None else DATA_STD[ds.kind]
    head = "eps" if args.loss == "ddpm" else "sigma_score"
    model = scores.MlpDenoiser(ds.x0.shape[1], ds.y.shape[1], args.hidden, args.time_embed_dim,
                               head, seed=args.seed, data_std=data_std)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                      min_epochs=args.min_epochs, max_epochs=args.max_epochs, seed=args.seed)
    meta = dict(T=args.T, beta_start=args.beta_start, beta_end=args.beta_end,
                sigma_base=args.sigma_base, t_max=args.t_max)
    ddpm, ve = _schedules(meta)
    model, curve = train(model, args.loss, ds.x0, ds.y, cfg, ddpm if args.loss == "ddpm" else ve)
    out = args.out_dir
    ckpt = os.path.join(out, "model.ckpt")
    data_io.save_checkpoint(ckpt, model, meta)
    rows = [(k + 1, l, s) for k, (l, s) in enumerate(zip(curve.losses, curve.seconds))]
    return [ckpt,
            _csv_rows(os.path.join(out, "loss_curve.csv"), ("epoch", "loss", "seconds"), rows),
            plotting.loss_curve_figure(os.path.join(out, "loss_curve.png"), curve.losses)]


def cmd_sample(args):
    model, field, schedule = _load_field(args.ckpt, args.method)
    y, n, side = _condition(model, args)
    cfg = _sampler_config(args, schedule, args.dump_every)
    x, tr = samplers.run_sampler(args.method, field, schedule, y, samplers.NoiseSource(args.seed),
                                 cfg, shape=(n, model.x_dim))
    log.info("%s: %d score evaluations", args.method, tr.n_evals)
    out = args.out_dir
    paths = []
    if side:
        paths.append(os.path.join(out, "sample.pgm"))
        data_io.write_pgm(paths[-1], np.clip(x[0], 0, 1).reshape(side, side))
        for i, st in zip(tr.indices, tr.states):
            paths.append(os.path.join(out, f"frame_{i:04d}.pgm"))
            data_io.write_pgm(paths[-1], np.clip(st[0], 0, 1).reshape(side, side))
    else:
        lab = int(args.label)
        paths.append(_csv_rows(os.path.join(out, "samples.csv"), ("x0", "x1", "y"),
                               [(float(a), float(b), lab) for a, b in x]))
        for i, st in zip(tr.indices, tr.states):
            paths.append(_csv_rows(os.path.join(out, f"frame_{i:04d}.csv"), ("x0", "x1", "y"),
                                   [(float(a), float(b), lab) for a, b in st]))
    if tr.states:
        frames = [st[0] if side else st for st in tr.states]
        paths.append(plotting.trajectory_figure(
            os.path.join(out, "trajectory.png"), frames, tr.indices, side,
            condition=y[0] if side else None))
    return paths


def cmd_mc(args):
    model, field, schedule = _load_field(args.ckpt, args.method)
    if args.cond is None:
        raise UsageError("mc needs --cond IMAGE")
    y, _, side = _condition(model, args)
    cfg = _sampler_config(args, schedule)

    def invoke(seed):
        x, _ = samplers.run_sampler(args.method, field, schedule, y, samplers.NoiseSource(seed),
                                    cfg, shape=(1, model.x_dim))
        return x[0].reshape(side, side)

    e = mc_ensemble(invoke, args.K, args.seed)
    log.info("mean uncertainty %.6g over %d replicates", e.mean_uncertainty, e.K)
    out = args.out_dir
    paths = [os.path.join(out, "mean.pgm"), os.path.join(out, "std.pgm")]
    data_io.write_pgm(paths[0], np.clip(e.mean, 0, 1))
    data_io.write_pgm(paths[1], np.clip(e.std / args.std_max, 0, 1))
    for k, r in enumerate(e.replicates):
        paths.append(os.path.join(out, f"replicate_{k}.pgm"))
        data_io.write_pgm(paths[-1], np.clip(r, 0, 1))
    paths.append(_csv_rows(os.path.join(out, "uncertainty.csv"),
                           ("method", "K", "mean_uncertainty", "seconds_per_sample"),
                           [(args.method, e.K, e.mean_uncertainty, e.seconds / e.K)]))
    target = None
    if args.target is not None:
        target = data_io.read_pgm(args.target)
        rows = [("mean", metrics.ssim(e.mean, target), metrics.psnr(e.mean, target))]
        rows += [(f"replicate_{k}", metrics.ssim(r, target), metrics.psnr(r, target))
                 for k, r in enumerate(e.replicates)]
        paths.append(_csv_rows(os.path.join(out, "metrics.csv"), ("name", "ssim", "psnr"), rows))
    paths.append(plotting.mc_figure(os.path.join(out, "mc_panel.png"), e.replicates, e.mean, e.std,
                                    y.reshape(side, side), target, args.std_max))
    return paths


def _pairs(a, b):
    if os.path.isdir(a) != os.path.isdir(b):
        raise UsageError("compare two files or two directories")
    if not os.path.isdir(a):
        return [(os.path.basename(a), a, b)]
    names = sorted(set(os.listdir(a)) & set(os.listdir(b)))
    names = [n for n in names if n.endswith(".pgm")]
    if not names:
        raise UsageError(f"no matching .pgm names in {a} and {b}")
    return [(n, os.path.join(a, n), os.path.join(b, n)) for n in names]


def cmd_eval(args):
    rows = []
    for name, pa, pb in _pairs(args.a, args.b):
        ia, ib = data_io.read_pgm(pa), data_io.read_pgm(pb)
        r = metrics.report(ia, ib)
        rows.append((name, r.ssim, r.psnr_db))
    out = args.out_dir
    return [_csv_rows(os.path.join(out, "metrics.csv"), ("name", "ssim", "psnr"), rows),
            plotting.metrics_figure(os.path.join(out, "metrics.png"), [r[0] for r in rows],
                                    [r[1] for r in rows], [r[2] for r in rows])]


def cmd_schedule_dump(args):
    out = args.out_dir
    csv_path = os.path.join(out, "schedule.csv")
    if args.kind == "ddpm":
        s = linear_beta_schedule(args.T, args.beta_start, args.beta_end)
        t = np.arange(1, s.T + 1)
        cols = {"beta": s.betas, "alpha": s.alphas, "alpha_bar": s.alpha_bars,
                "beta_tilde": s.posterior_betas}
        rows = [(int(i), *(float(c[i - 1]) for c in cols.values())) for i in t]
        _csv_rows(csv_path, ("t", *cols), rows)
        fig_cols = {"beta": s.betas, "alpha_bar": s.alpha_bars}
    else:
        v = VeSchedule(sigma_base=args.sigma_base, t_max=args.t_max)
        t = v.grid(args.T)
        sig = ve_sigma(v, t)
        _csv_rows(csv_path, ("t", "sigma"), [(float(a), float(b)) for a, b in zip(t, sig)])
        t, fig_cols = t[1:], {"sigma": sig[1:]}
    return [csv_path, plotting.schedule_figure(os.path.join(out, "schedule.png"), t, fig_cols,
                                               f"{args.kind} schedule")]


def bench_oracle2d(methods, n=10000, seed=0, repeats=3):
    """Time each sampler on the analytic standard-normal task.

    Returns rows (method, best seconds, evals, mean, var) at the 1000-evaluation budget.
    """
    ddpm = linear_beta_schedule()
    ve = VeSchedule()
    fields = {"ddpm": (scores.ddpm_standard_normal_eps(ddpm), ddpm)}
    for m in ("em", "pc", "ode"):
        fields[m] = (scores.ve_standard_normal_field(ve), ve)
    cfg = samplers.SamplerConfig()
    rows = []
    for m in methods:
        field, sched = fields[m]
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            x, tr = samplers.run_sampler(m, field, sched, None, samplers.NoiseSource(seed), cfg,
                                         shape=(n, 2))
            best = min(best, time.perf_counter() - t0)
        log.info("%s: %.3f s, %d evals", m, best, tr.n_evals)
        rows.append((m, best, tr.n_evals, x.mean(axis=0), x.var(axis=0)))
    return rows


def cmd_bench(args):
    rows = bench_oracle2d(args.methods, args.n, args.seed, args.repeats)
    out = args.out_dir
    table = [(m, s, e, float(mu[0]), float(mu[1]), float(var[0]), float(var[1]))
             for m, s, e, mu, var in rows]
    return [_csv_rows(os.path.join(out, "bench.csv"),
                      ("method", "seconds", "evals", "mean_x0", "mean_x1", "var_x0", "var_x1"),
                      table),
            plotting.bench_figure(os.path.join(out, "bench.png"), [r[0] for r in rows],
                                  [r[1] for r in rows], [r[2] for r in rows])]


# ---------------------------------------------------------------------------
# parser

def _sampling_flags(p):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--method", choices=samplers.METHODS, required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="score-evaluation budget (default 1000; ddpm uses the trained T)")
    p.add_argument("--corrector-steps", type=int, default=1)
    p.add_argument("--snr", type=float, default=0.16)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cond", default=None, help="condition image (PGM)")


def build_parser():
    top = _Parser(prog="scoreflow", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = top.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthetic paired datasets")
    p.add_argument("--kind", choices=("gmm2d", "phantom"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="fit a conditional score model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--loss", choices=("ddpm", "dsm_ve"), required=True)
    p.add_argument("--hidden", type=_int_list, default=(256, 256, 256))
    p.add_argument("--time-embed-dim", type=int, default=32)
    p.add_argument("--data-std", type=float, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--min-epochs", type=int, default=100)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--sigma-base", type=float, default=25.0)
    p.add_argument("--t-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("sample", help="draw conditional samples")
    _sampling_flags(p)
    p.add_argument("--label", type=int, default=None, help="class label for point models")
    p.add_argument("--n", type=int, default=1, help="number of points (point models)")
    p.add_argument("--dump-every", type=int, default=0)
    p.set_defaults(run=cmd_sample)

    p = sub.add_parser("mc", help="Monte-Carlo ensemble for one condition")
    _sampling_flags(p)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--target", default=None, help="reference image (PGM) for metrics")
    p.add_argument("--std-max", type=float, default=0.5, help="std value mapped to white")
    p.set_defaults(run=cmd_mc, label=None, n=1)

    p = sub.add_parser("eval", help="SSIM and PSNR of image pairs")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("schedule-dump", help="tabulate a noise schedule")
    p.add_argument("--kind", choices=("ddpm", "ve"), required=True)
    p.add_argument("--T", type=int, default=1000, help="steps (ddpm) or grid intervals (ve)")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--sigma-base", type=float, default=25.0)
    p.add_argument("--t-max", type=float, default=1.0)
    p.set_defaults(run=cmd_schedule_dump)

    p = sub.add_parser("bench", help="sampler wall-clock comparison")
    p.add_argument("--task", choices=("oracle2d",), default="oracle2d")
    p.add_argument("--methods", type=_methods, default=list(samplers.METHODS))
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_bench)

    for p in sub.choices.values():
        p.add_argument("--out-dir", default=".")
        p.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")
    return top


def _manifest(args, argv, outputs, seconds):
    flags = {k: (list(v) if isinstance(v, tuple) else v)
             for k, v in vars(args).items() if k != "run"}
    return {"subcommand": args.subcommand, "argv": list(argv), "flags": flags,
            "seed": getattr(args, "seed", None), "version": __version__,
            "wall_clock_seconds": seconds, "outputs": [os.path.basename(p) for p in outputs]}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if args.quiet else logging.INFO, force=True)
    t0 = time.perf_counter()
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        outputs = args.run(args)
        man = _manifest(args, argv, outputs, time.perf_counter() - t0)
        with open(os.path.join(args.out_dir, "run.json"), "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except UsageError as exc:
        print(f"scoreflow {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not traced
        print(f"scoreflow {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    return 0
