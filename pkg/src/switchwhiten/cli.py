"""Command-line entry point: ``switchwhiten <command> [flags]``.

Machine-readable output (JSON lines, CSV, tensor files) goes to stdout or
to the named files; human-readable summaries go to stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys

import numpy as np

from . import bench as benchmod
from . import gradcheck
from .errors import ConfigError, FileError, SwitchWhiteningError
from .fileio import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .sw_layer import SwConfig, forward_eval, forward_train, importance_weights, init_state, parse_omega
from .tensor_core import resolve_dtype
from .trainer_demo import SyntheticSpec, generate_dataset, train
from .whitening import WhiteningPath

DEFAULTS = {
    "common": {"seed": 0, "dtype": "f32", "threads": None},
    "gradcheck": {"omega": ["bw,iw", "all"], "path": "eigen,newton", "tol": gradcheck.DEFAULT_TOL,
                  "seeds": 5, "shape": "4,8,3,3", "G": 4, "T": 5},
    "whiten": {"omega": "bw,iw", "mode": "train", "G": 16, "eps": 1e-5, "alpha": 0.1,
               "path": "eigen", "T": 5},
    "bench": {"shape": "8,256,8,8", "G": 16, "paths": "eigen,newton", "reps": 10, "warmup": 2,
              "omega": "bw,iw", "sweep_base": "8,64,16,16", "no_sweep": False},
    "train-demo": {"omega": "bw,iw", "G": 4, "path": "newton", "T": 5, "steps": 300, "lr": 0.1,
                   "batch_size": 64, "classes": 2, "samples_per_class": 256, "channels": 4,
                   "size": 6, "style": 1.0},
    "inspect": {},
}


def _ints(text: str, n: int = None) -> tuple:
    try:
        vals = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated integers, got {text!r}")
    return vals


def _effective(args, command: str) -> dict:
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except OSError as exc:
            raise FileError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        cfg[key] = value
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str), file=sys.stderr)
    return cfg


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _layer_config(cfg) -> SwConfig:
    path = WhiteningPath.eigen() if cfg["path"] == "eigen" else WhiteningPath.newton(int(cfg["T"]))
    return SwConfig(omega=parse_omega(cfg["omega"]), group_size=int(cfg["G"]), eps=float(cfg.get("eps", 1e-5)),
                    momentum=float(cfg.get("alpha", 0.1)), path=path)


def cmd_gradcheck(cfg) -> int:
    omegas = cfg["omega"] if isinstance(cfg["omega"], list) else [cfg["omega"]]
    paths = [p for p in str(cfg["path"]).split(",") if p]
    for p in paths:
        if p not in ("eigen", "newton"):
            raise ConfigError(f"unknown whitening path {p!r}")
    shape = _ints(cfg["shape"], 4)
    seeds = range(int(cfg["seed"]), int(cfg["seed"]) + int(cfg["seeds"]))
    ok = True
    count = 0
    for config in gradcheck.suite_configs(omegas, paths, int(cfg["G"]), int(cfg["T"])):
        for seed in seeds:
            for report in gradcheck.check_sw_layer(config, shape, seed, float(cfg["tol"])):
                print(report.to_json(), flush=True)
                ok = ok and report.passed
                count += 1
    print(f"gradcheck: {count} reports, {'all passed' if ok else 'FAILURES'}", file=sys.stderr)
    return 0 if ok else 1


def cmd_whiten(cfg) -> int:
    if not cfg.get("input") or not cfg.get("output"):
        raise ConfigError("whiten needs --input and --output")
    x = read_tensor(cfg["input"])
    if x.ndim != 4:
        raise ConfigError(f"input tensor must be rank 4 (N, C, H, W), got shape {x.shape}")
    dtype = resolve_dtype(cfg["dtype"])
    if cfg.get("checkpoint"):
        state, config = load_checkpoint(cfg["checkpoint"])
        state = _cast_state(state, dtype)
    else:
        config = _layer_config(cfg)
        state = init_state(config, x.shape[1], dtype)
    if cfg["mode"] == "train":
        y, _ = forward_train(x, state, config)
    elif cfg["mode"] == "eval":
        y = forward_eval(x, state, config)
    else:
        raise ConfigError(f"mode must be train or eval, got {cfg['mode']!r}")
    write_tensor(cfg["output"], y.astype(dtype))
    if cfg.get("stats"):
        g = config.group_size
        n, c, h, w = y.shape
        yg = y.reshape(n, c // g, g, h * w).transpose(1, 2, 0, 3).reshape(c // g, g, n * h * w)
        yc = yg - yg.mean(axis=-1, keepdims=True)
        write_tensor(cfg["stats"], (yc @ yc.transpose(0, 2, 1) / yc.shape[-1]).astype(dtype))
    if cfg.get("save_checkpoint"):
        save_checkpoint(cfg["save_checkpoint"], state, config)
    print(f"whiten: wrote {cfg['output']} shape {y.shape}", file=sys.stderr)
    return 0


def _cast_state(state, dtype):
    for name in ("lambda_mean", "lambda_cov", "gamma", "beta", "running_mean", "running_cov"):
        setattr(state, name, getattr(state, name).astype(dtype))
    return state


def cmd_bench(cfg) -> int:
    reps = int(cfg["reps"])
    if reps < benchmod.MIN_REPS:
        raise ConfigError(f"--reps must be >= {benchmod.MIN_REPS}, got {reps}")
    shape = _ints(cfg["shape"], 4)
    writer = csv.writer(sys.stdout)
    writer.writerow(benchmod.CSV_FIELDS)
    common = dict(reps=reps, warmup=int(cfg["warmup"]), omega=cfg["omega"], dtype=cfg["dtype"], seed=int(cfg["seed"]))
    for p in str(cfg["paths"]).split(","):
        res = benchmod.time_forward(shape, int(cfg["G"]), p, **common)
        writer.writerow(res.csv_row())
        print(f"bench {p}: {res.mean_s * 1e3:.3f} ms +- {res.std_s * 1e3:.3f}", file=sys.stderr)
    if not cfg["no_sweep"]:
        base = _ints(cfg["sweep_base"], 4)
        for p in str(cfg["paths"]).split(","):
            results = benchmod.scaling_sweep(base, int(cfg["G"]), p, **common)
            for res in results:
                writer.writerow(res.csv_row())
            print(f"scaling {p}: worst fit factor {benchmod.fit_ratio(results):.3f}", file=sys.stderr)
    return 0


def cmd_train_demo(cfg) -> int:
    spec = SyntheticSpec(classes=int(cfg["classes"]), samples_per_class=int(cfg["samples_per_class"]),
                         channels=int(cfg["channels"]), height=int(cfg["size"]), width=int(cfg["size"]),
                         style_strength=float(cfg["style"]), seed=int(cfg["seed"]))
    config = _layer_config(cfg)
    trace, net = train(generate_dataset(spec), config, steps=int(cfg["steps"]), lr=float(cfg["lr"]),
                       batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]), return_model=True)
    if cfg.get("log"):
        trace.write_csv(cfg["log"])
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(trace.columns())
        writer.writerows(trace.rows())
    prefix = cfg.get("checkpoint_prefix")
    if prefix:
        for i, sw in enumerate(net.sw_layers, start=1):
            save_checkpoint(f"{prefix}.sw{i}.ckpt", sw.state, sw.config)
    print(f"train-demo: loss {trace.loss[0]:.4f} -> {trace.loss[-1]:.4f}, "
          f"train accuracy {trace.final_accuracy:.4f}", file=sys.stderr)
    return 0


def inspect_checkpoint(path) -> dict:
    state, config = load_checkpoint(path)
    return {
        "omega_methods": [t.value for t in config.omega],
        "omega": importance_weights(state.lambda_mean).tolist(),
        "omega_prime": importance_weights(state.lambda_cov).tolist(),
        "running_mean_norm": [float(np.linalg.norm(m)) for m in state.running_mean],
        "running_cov_norm": [float(np.linalg.norm(m)) for m in state.running_cov],
        "step_count": state.step_count,
        "config": config.to_dict(),
    }


def cmd_inspect(cfg) -> int:
    if not cfg.get("checkpoint"):
        raise ConfigError("inspect needs --checkpoint")
    print(json.dumps(inspect_checkpoint(cfg["checkpoint"]), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--dtype", choices=("f32", "f64"))
    common.add_argument("--config", help="JSON file of defaults; flags take precedence")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")

    parser = argparse.ArgumentParser(prog="switchwhiten", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the backward pass")
    p.add_argument("--omega", action="append", help="method set or preset (bw,iw | all); repeatable")
    p.add_argument("--path", help="comma list of eigen,newton")
    p.add_argument("--tol", type=float)
    p.add_argument("--seeds", type=int, help="number of seeds starting at --seed")
    p.add_argument("--shape", help="N,C,H,W")
    p.add_argument("--G", type=int)
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("whiten", parents=[common], help="run the layer on a tensor file")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--omega")
    p.add_argument("--mode", choices=("train", "eval"))
    p.add_argument("--checkpoint")
    p.add_argument("--save-checkpoint", dest="save_checkpoint")
    p.add_argument("--stats", help="also write per-group output covariance to this tensor file")
    p.add_argument("--G", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--path", choices=("eigen", "newton"))
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_whiten)

    p = sub.add_parser("bench", parents=[common], help="time eigen vs Newton whitening")
    p.add_argument("--shape", help="N,C,H,W")
    p.add_argument("--G", type=int)
    p.add_argument("--paths")
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--omega")
    p.add_argument("--sweep-base", dest="sweep_base", help="N,C,H,W base of the scaling sweep")
    p.add_argument("--no-sweep", dest="no_sweep", action="store_const", const=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-demo", parents=[common], help="toy training run logging importance weights")
    p.add_argument("--omega")
    p.add_argument("--G", type=int)
    p.add_argument("--path", choices=("eigen", "newton"))
    p.add_argument("--T", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--style", type=float)
    p.add_argument("--log", help="write the training log CSV here instead of stdout")
    p.add_argument("--checkpoint-prefix", dest="checkpoint_prefix")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("inspect", parents=[common], help="print importance weights and buffers of a checkpoint")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective(args, args.command)
        with _threads(cfg.get("threads")):
            return args.func(cfg)
    except SwitchWhiteningError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
