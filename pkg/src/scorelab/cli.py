"""``scorelab`` command line: train, sample, eval, bench, validate.

Every RunConfig field is also a flag (``--n-samples``, ``--langevin-eps``,
...).  ``--config FILE`` loads a ``key = value`` file first; flags given on
the command line override it.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 runtime error.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import config as cfgmod
from . import eval as ev
from . import nets, plotting, training, validate
from . import rng as rngs
from .datasets import Checkerboard, GaussianMixture, write_samples_csv
from .errors import ContractError, ParameterError, ScoreLabError
from .sde import SdeSchedule, langevin, reverse_em

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
BOUNDS = ((-4.0, 4.0), (-4.0, 4.0))
SAMPLE_CHUNK = 50_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value file; flags override it")
    for f in fields(cfgmod.RunConfig):
        kind = _bool if f.type is bool else f.type
        kw = {"type": kind, "default": None, "dest": f.name}
        if f.name in cfgmod.CHOICES:
            kw["choices"] = cfgmod.CHOICES[f.name]
        common.add_argument("--" + f.name.replace("_", "-"), **kw)
    parser = _Parser(prog="scorelab", description="Score-matching laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a score model, write checkpoint and loss curve")
    sub.add_parser("sample", parents=[common], help="sample from a checkpoint, write CSV, PGM and PNG")
    sub.add_parser("eval", parents=[common], help="score a checkpoint against the dataset")
    sub.add_parser("bench", parents=[common], help="time one optimisation step per method")
    sub.add_parser("validate", parents=[common], help="run the built-in invariant checks")
    return parser


def resolve_config(args):
    base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    return base.updated(**{f.name: getattr(args, f.name) for f in fields(cfgmod.RunConfig)})


# ---------------------------------------------------------------- helpers

def make_dataset(name):
    return Checkerboard() if name == "checkerboard" else GaussianMixture.ring()


def make_sde(name):
    return None if name == "none" else SdeSchedule(name)


def net_config(cfg):
    tc = cfg.sde != "none"
    return nets.MlpConfig(input_dim=2, hidden=cfg.hidden_sizes(), activation=cfg.activation,
                          time_conditional=tc, mode=cfg.net_mode, scale_by_sigma=cfg.scale_by_sigma and tc)


def _out(cfg, name):
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _meta(cfg, steps):
    return {"generator": rngs.GENERATOR_NAME, "seed": cfg.seed, "method": cfg.method, "sde": cfg.sde,
            "dataset": cfg.dataset, "sigma": cfg.sigma, "epsilon": cfg.epsilon, "gamma": cfg.gamma,
            "steps": steps}


def load_model(cfg):
    """Net and SDE for the configured checkpoint; the JSON sidecar, when present, fixes the architecture."""
    path = cfg.checkpoint or os.path.join(cfg.out, "checkpoint.smlb")
    net_cfg, sde = net_config(cfg), make_sde(cfg.sde)
    side = path + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
        net_cfg = nets.MlpConfig(**meta["config"])
        sde = make_sde(meta.get("sde", cfg.sde))
    return nets.load_checkpoint(path, net_cfg, sde), sde


def write_loss_csv(losses, path):
    with open(path, "w", newline="") as fh:
        fh.write("step,loss\n")
        for k, v in enumerate(losses):
            fh.write(f"{k},{v:.17g}\n")


def draw_samples(net, sde, cfg, n, seed):
    """Langevin from the bounding box (no SDE) or reverse-time EM from the prior."""
    rng = rngs.stream(seed, rngs.SAMPLER)
    parts = []
    for lo in range(0, n, SAMPLE_CHUNK):
        m = min(SAMPLE_CHUNK, n - lo)
        if sde is None:
            x0 = np.column_stack([rng.uniform(a, b, m) for a, b in BOUNDS])
            parts.append(langevin(net.score, x0, cfg.langevin_eps, cfg.steps, rng,
                                  final_noise=cfg.final_noise))
        else:
            parts.append(reverse_em(sde, net.score, sde.prior_sample(m, 2, rng), cfg.steps, rng))
    return np.concatenate(parts) if parts else np.empty((0, 2))


# --------------------------------------------------------------- commands

def cmd_train(cfg):
    sde = make_sde(cfg.sde)
    if cfg.method in ("sm", "lcs") and sde is not None:
        raise ParameterError(f"{cfg.method} has no time-conditional form; use --sde none")
    net = nets.init(net_config(cfg), cfg.seed, sde)
    spec = training.make_spec(cfg.method, cfg.sigma, cfg.epsilon, cfg.gamma)
    opt = nets.make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
    ckpt = _out(cfg, "checkpoint.smlb")
    nets.save_checkpoint(net, ckpt, _meta(cfg, 0))
    losses, good = [], [0]

    def on_step(step, loss, net):
        losses.append(loss)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            nets.save_checkpoint(net, ckpt, _meta(cfg, step + 1))
            good[0] = step + 1

    dataset = make_dataset(cfg.dataset)
    try:
        training.train(net, spec, dataset, cfg.iters, cfg.batch, opt, cfg.seed, sde, on_step)
    except FloatingPointError as exc:
        write_loss_csv(losses, _out(cfg, "loss.csv"))
        print(f"error: {exc}; last good checkpoint {ckpt} (step {good[0]})", file=sys.stderr)
        return EXIT_RUNTIME
    nets.save_checkpoint(net, ckpt, _meta(cfg, cfg.iters))
    write_loss_csv(losses, _out(cfg, "loss.csv"))
    if losses:
        plotting.plot_loss(losses, _out(cfg, "loss.png"), title=f"{cfg.method} on {cfg.dataset}")
        k = max(1, min(100, len(losses) // 10))
        print(f"loss: first {np.mean(losses[:k]):.6g} last {np.mean(losses[-k:]):.6g} "
              f"(mean of {k} steps)")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _support_report(dataset, x):
    on = float(np.mean(dataset.on_support(x))) if len(x) else 0.0
    occ = dataset.occupancy(x) * len(dataset.on_squares()) if len(x) else np.zeros(1)
    return on, float(occ.min()), float(occ.max())


def cmd_sample(cfg):
    net, sde = load_model(cfg)
    x = draw_samples(net, sde, cfg, cfg.n_samples, cfg.seed)
    write_samples_csv(x, _out(cfg, "samples.csv"))
    counts = ev.density_grid(x, BOUNDS, cfg.bins)
    ev.write_pgm(counts, _out(cfg, "density.pgm"))
    ev.write_counts_csv(counts, _out(cfg, "density_counts.csv"))
    plotting.plot_density(counts, BOUNDS, _out(cfg, "density.png"), title=f"{len(x)} samples")
    print(f"samples: {len(x)} -> {_out(cfg, 'samples.csv')}")
    if cfg.dataset == "checkerboard" and len(x):
        on, lo, hi = _support_report(Checkerboard(), x)
        print(f"on_support,{on:.6f}\noccupancy_min,{lo:.6f}\noccupancy_max,{hi:.6f}")
    return EXIT_OK


def cmd_eval(cfg):
    net, sde = load_model(cfg)
    dataset = make_dataset(cfg.dataset)
    rows = []
    if cfg.dataset == "checkerboard":
        x = draw_samples(net, sde, cfg, cfg.n_samples, cfg.seed)
        on, lo, hi = _support_report(dataset, x)
        rows += [("on_support", on), ("occupancy_min", lo), ("occupancy_max", hi)]
    else:
        rng = rngs.stream(cfg.seed, rngs.EVAL)
        x0 = dataset.sample(max(cfg.n_samples, 1), rng)
        if sde is None:
            pts, t, oracle = x0, None, dataset.score
        else:
            t = sde.t_min
            pts = sde.perturb(x0, t, rng)
            oracle = lambda p: dataset.time_score(p, sde, t)  # noqa: E731
        err = ev.score_error(net, oracle, pts, t)
        base = ev.score_error(lambda p, _t: np.zeros_like(p), oracle, pts, t)
        rows += [("score_error", err), ("zero_net_error", base), ("relative_error", err / base)]
    with open(_out(cfg, "eval.csv"), "w", newline="") as fh:
        fh.write("metric,value\n")
        for k, v in rows:
            fh.write(f"{k},{v:.10g}\n")
            print(f"{k},{v:.10g}")
    return EXIT_OK


def cmd_bench(cfg):
    sde = make_sde(cfg.sde)
    dataset = make_dataset(cfg.dataset)
    reports = []
    for method in cfg.method_list():
        rep = ev.bench(method, net_config(cfg), dataset, steps=cfg.bench_steps, batch=cfg.bench_batch,
                       seed=cfg.seed, lr=cfg.lr, sde=sde, sigma=cfg.sigma, epsilon=cfg.epsilon)
        reports.append(rep)
    print(f"{'method':<8}{'mean_ms':>12}{'std_ms':>10}{'steps':>8}")
    for r in reports:
        print(f"{r.method:<8}{r.mean_ms:>12.2f}{r.std_ms:>10.2f}{r.steps:>8d}")
    ev.write_bench_csv(reports, _out(cfg, "bench.csv"))
    plotting.plot_bench(reports, _out(cfg, "bench.png"))
    ok, lines = ev.ordering_verdict(reports)
    print("\n".join(lines))
    print(f"ordering: {'pass' if ok else 'FAIL'} (timings are machine-dependent)")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_validate(cfg):
    return EXIT_OK if validate.run_all(cfg.seed, sys.stdout) else EXIT_CHECK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "bench": cmd_bench, "validate": cmd_validate}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"usage error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg)
    except (ParameterError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScoreLabError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
