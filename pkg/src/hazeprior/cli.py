"""Command-line entry point.

One binary, subcommand style; every flag is long-form and can also be given
in a key=value config file (--config FILE), with explicit flags winning.
Report commands write their CSV and render a PNG sibling next to it.

Exit codes: 0 success, 1 contract/runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .errors import (ConfigError, DegenerateInputError, NonFiniteError,
                     ParameterError, ShapeError)

COMMANDS = ("synth", "train", "eval", "analyze", "gradcheck", "bench", "ablate")

# flag -> (kind, default, required, choices, help); kind drives both the
# argparse wiring and the config-file coercion
_NET_OPTS = {
    "--base-channels": ("int", 16, False, None, "stem width C"),
    "--blocks-per-stage": ("int", 2, False, None, "residual blocks per scale"),
    "--window": ("int", 8, False, None, "query window side M"),
    "--overlap-ratio": ("float", 0.5, False, None, "kv window overlap ratio r"),
    "--heads": ("int", 2, False, None, "attention heads"),
    "--dgam": ("bool", True, False, None, "depth-gated stem"),
    "--dgam-gate": ("bool", True, False, None,
                    "gate the stem (off = plain concat)"),
    "--dpfm": ("bool", True, False, None, "per-stage depth fusion blocks"),
    "--dpfm-in-decoder": ("bool", False, False, None,
                          "place fusion blocks decoder-side"),
    "--attention-kind": ("str", "SCA", False, ("SCA", "CCA"), "fusion attention"),
    "--query-side": ("str", "dual", False, ("dual", "depth", "rgb"),
                     "which branch queries"),
    "--depth-source": ("str", "file", False, ("file", "constant_gray"),
                       "depth input source"),
    "--net-seed": ("int", 0, False, None, "weight init seed"),
}

_TRAIN_OPTS = {
    "--epochs": ("int", None, True, None, "training epochs"),
    "--batch-size": ("int", 4, False, None, "pairs per step"),
    "--lr-init": ("float", 1e-4, False, None, "initial learning rate"),
    "--lr-final": ("float", 1e-6, False, None, "cosine floor"),
    "--adam-beta1": ("float", 0.9, False, None, "Adam beta1"),
    "--adam-beta2": ("float", 0.999, False, None, "Adam beta2"),
    "--adam-eps": ("float", 1e-8, False, None, "Adam epsilon"),
    "--seed": ("int", 0, False, None, "shuffle/augment seed"),
    "--flip-prob": ("float", 0.5, False, None, "horizontal flip probability"),
    "--checkpoint-every": ("int", 0, False, None,
                           "periodic checkpoint interval (0 = final only)"),
    "--val-fraction": ("float", 0.1, False, None, "held-out fraction by index"),
    "--val-every": ("int", 1, False, None, "validate every k-th epoch"),
    "--clip-norm": ("float", 1.0, False, None, "global grad-norm cap (0 off)"),
    "--lambda-freq": ("float", 0.1, False, None, "frequency loss weight"),
}

_SPECS = {
    "synth": {
        "--out": ("path", None, True, None, "output dataset directory"),
        "--count": ("int", 10, False, None, "number of pairs"),
        "--size": ("int2", (64, 64), False, None, "H W"),
        "--beta": ("float2", (0.5, 1.5), False, None, "scattering range LO HI"),
        "--airlight": ("float2", (0.8, 1.0), False, None, "airlight range LO HI"),
        "--style": ("str", "mixed", False,
                    ("mixed", "outdoor_ramp", "indoor_boxes"), "scene style"),
        "--seed": ("int", 0, False, None, "corpus seed"),
    },
    "train": {
        "--data": ("path", None, True, None, "dataset directory"),
        "--out": ("path", None, True, None, "run output directory"),
        "--resume": ("path", None, False, None, "checkpoint to resume from"),
        **_TRAIN_OPTS, **_NET_OPTS,
    },
    "eval": {
        "--data": ("path", None, True, None, "dataset directory"),
        "--out": ("path", None, True, None, "metrics CSV path"),
        "--ckpt": ("path", None, False, None,
                   "checkpoint (omit for a fresh identity-init net)"),
        "--lambda-freq": ("float", 0.1, False, None, "frequency loss weight"),
        **_NET_OPTS,
    },
    "analyze": {
        "--data": ("path", None, False, None,
                   "directory holding hazy/clear/depth rasters"),
        "--hazy-dir": ("path", None, False, None, "override hazy directory"),
        "--clear-dir": ("path", None, False, None, "override clear directory"),
        "--depth-dir": ("path", None, False, None, "override depth directory"),
        "--bins": ("int", 3, False, None, "depth bins"),
        "--out": ("path", None, True, None, "summary CSV path"),
    },
    "gradcheck": {
        "--module": ("str", "all", False, ("dgam", "dpfm", "net", "all"),
                     "which analytic gradients to verify"),
        "--seed": ("int", 3, False, None, "check-point seed"),
    },
    "bench": {
        "--sizes": ("str", "32,64,128", False, None,
                    "comma-separated square sizes"),
        "--window": ("int", 8, False, None, "query window side M"),
        "--overlap": ("float", 0.5, False, None, "kv overlap ratio r"),
        "--heads": ("int", 2, False, None, "attention heads"),
        "--channels": ("int", 8, False, None, "token width C"),
        "--reps": ("int", 3, False, None, "timed repetitions (best kept)"),
        "--warmup": ("int", 1, False, None, "untimed warmup passes"),
        "--out": ("path", "bench.csv", False, None, "timing CSV path"),
    },
    "ablate": {
        "--suite": ("str", None, True,
                    ("table4", "table5", "table5_depth_source", "heads"),
                    "which comparison to run"),
        "--data": ("path", None, True, None, "dataset directory"),
        "--out-dir": ("path", None, True, None, "directory for runs and CSV"),
        **_TRAIN_OPTS, **_NET_OPTS,
    },
}

_CONTRACT_ERRORS = (ShapeError, ParameterError, ConfigError,
                    DegenerateInputError, NonFiniteError, OSError)


def _add_option(parser: argparse.ArgumentParser, flag: str, spec) -> None:
    kind, default, required, choices, help_ = spec
    kw: dict = {"default": default, "required": required, "help": help_}
    if choices:
        kw["choices"] = list(choices)
    if kind == "int":
        parser.add_argument(flag, type=int, **kw)
    elif kind == "float":
        parser.add_argument(flag, type=float, **kw)
    elif kind in ("str", "path"):
        parser.add_argument(flag, type=str, **kw)
    elif kind == "int2":
        parser.add_argument(flag, type=int, nargs=2, metavar=("A", "B"), **kw)
    elif kind == "float2":
        parser.add_argument(flag, type=float, nargs=2, metavar=("LO", "HI"), **kw)
    elif kind == "bool":
        parser.add_argument(flag, action=argparse.BooleanOptionalAction,
                            default=default, help=help_)
    else:
        raise AssertionError(f"bad option kind {kind}")


def _coerce_config_value(kind: str, raw: str, flag: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind in ("str", "path"):
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int2", "float2"):
            parts = raw.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(raw)
            conv = int if kind == "int2" else float
            return [conv(p) for p in parts]
    except ValueError:
        raise ConfigError(f"config: bad value {raw!r} for {flag}")
    raise AssertionError(kind)


def _load_config_defaults(path: str, command: str) -> dict:
    spec = _SPECS[command]
    by_key = {flag.lstrip("-").replace("-", "_"): (flag, s)
              for flag, s in spec.items()}
    defaults = {}
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config {path}:{ln}: expected key=value")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in by_key:
            raise ConfigError(f"config {path}:{ln}: unknown key {key!r} "
                              f"for {command}")
        flag, s = by_key[key]
        defaults[key] = _coerce_config_value(s[0], raw, flag)
    return defaults


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="hazeprior",
        description="depth-guided dehazing toolkit: synthesis, training, "
                    "evaluation, analysis, gradient checks, benchmarks",
        epilog="UDP_THREADS caps internal parallelism "
               "(default: hardware parallelism)")
    subs = top.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate a synthetic hazy/clear/depth dataset",
        "train": "train a restoration model",
        "eval": "score a checkpoint over a dataset",
        "analyze": "residual-haze statistics over depth bins",
        "gradcheck": "verify analytic gradients against finite differences",
        "bench": "time windowed attention over a size sweep",
        "ablate": "train and compare architecture variants",
    }
    for cmd in COMMANDS:
        p = subs.add_parser(cmd, help=helps[cmd])
        p.add_argument("--config", type=str, default=None,
                       help="key=value file; explicit flags override it")
        for flag, spec in _SPECS[cmd].items():
            _add_option(p, flag, spec)
    return top


def _requested_command(argv: list) -> str | None:
    for a in argv:
        if a in COMMANDS:
            return a
    return None


def _config_path(argv: list) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config":
            return argv[i + 1] if i + 1 < len(argv) else None
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _net_cfg(args):
    from .network import NetConfig
    return NetConfig(
        base_channels=args.base_channels, blocks_per_stage=args.blocks_per_stage,
        window=args.window, overlap_ratio=args.overlap_ratio, heads=args.heads,
        use_dgam=args.dgam, dgam_gate=args.dgam_gate, use_dpfm=args.dpfm,
        dpfm_in_decoder=args.dpfm_in_decoder, attention_kind=args.attention_kind,
        query_side=args.query_side, depth_source=args.depth_source,
        seed=args.net_seed)


def _train_cfg(args):
    from .objectives import LossWeights
    from .trainer import TrainConfig
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_init=args.lr_init,
        lr_final=args.lr_final, adam_beta1=args.adam_beta1,
        adam_beta2=args.adam_beta2, adam_eps=args.adam_eps, seed=args.seed,
        flip_prob=args.flip_prob, checkpoint_every=args.checkpoint_every,
        loss_weights=LossWeights(lambda_freq=args.lambda_freq),
        val_fraction=args.val_fraction, val_every=args.val_every,
        clip_norm=args.clip_norm)


def _cmd_synth(args) -> int:
    from .haze import synth_dataset
    synth_dataset(args.out, count=args.count, seed=args.seed, style=args.style,
                  size=tuple(args.size), beta_range=tuple(args.beta),
                  airlight_range=tuple(args.airlight))
    print(f"synth: {args.count} pairs, seed {args.seed}")
    return 0


def _cmd_train(args) -> int:
    from .figures import plot_train_curves
    from .trainer import train
    res = train(_train_cfg(args), _net_cfg(args), args.data, args.out,
                resume=args.resume)
    rows = list(csv.DictReader(res.log_path.open()))
    if rows:
        plot_train_curves(rows, res.log_path.with_suffix(".png"))
    print(f"train: {res.epochs_run} epochs, checkpoint {res.checkpoint_path}")
    print(f"val_psnr={res.val_psnr:.6f} val_ssim={res.val_ssim:.6f}")
    return 0


def _cmd_eval(args) -> int:
    from .figures import plot_eval
    from .haze import load_dataset
    from .network import build_variant
    from .objectives import EVAL_COLUMNS, LossWeights
    from .trainer import evaluate_pairs
    pairs = load_dataset(args.data)
    if args.ckpt is not None:
        from .checkpoint import load_checkpoint
        weights, _ = load_checkpoint(args.ckpt)
        net_cfg = weights.cfg
    else:
        net_cfg = _net_cfg(args)
        weights = build_variant(net_cfg)
    rows = evaluate_pairs(pairs, net_cfg, weights,
                          LossWeights(lambda_freq=args.lambda_freq))
    out = Path(args.out)
    with open(out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(EVAL_COLUMNS)
        for i, p, s, sp, fr in rows:
            wr.writerow([i, repr(p), repr(s), repr(sp), repr(fr)])
    plot_eval(rows, out.with_suffix(".png"))
    mp = sum(r[1] for r in rows) / len(rows)
    ms = sum(r[2] for r in rows) / len(rows)
    print(f"eval: {len(rows)} pairs")
    print(f"mean_psnr={mp:.6f} mean_ssim={ms:.6f}")
    return 0


def _cmd_analyze(args) -> int:
    from .analysis import analyze_corpus
    from .figures import plot_depth_bins
    hazy = args.hazy_dir or args.data
    clear = args.clear_dir or args.data
    depth = args.depth_dir or args.data
    if not (hazy and clear and depth):
        raise ConfigError("analyze: give --data or all three *-dir flags")
    out = Path(args.out)
    summary = analyze_corpus(hazy, clear, depth, bins=args.bins, out_csv=out)
    plot_depth_bins(summary, out.with_suffix(".png"))
    means = " ".join(f"{m:.6f}" for m in summary.mean_residual)
    print(f"analyze: {len(summary.per_image)} pairs, "
          f"{summary.skipped} skipped, bin means {means}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import DEFAULT_TOL, MODULE_CHECKS, check_module
    modules = MODULE_CHECKS if args.module == "all" else (args.module,)
    worst = 0.0
    for m in modules:
        err = check_module(m, seed=args.seed)
        worst = max(worst, err)
        print(f"{m}: max_rel_err={err:.3e}")
    return 0 if worst < DEFAULT_TOL else 1


def _cmd_bench(args) -> int:
    from .bench import loglog_slope, run_bench
    from .figures import plot_bench
    try:
        sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    except ValueError:
        raise ParameterError(f"bench: bad --sizes {args.sizes!r}")
    out = Path(args.out)
    points = run_bench(sizes=sizes, window=args.window, overlap=args.overlap,
                       heads=args.heads, channels=args.channels, out_csv=out,
                       warmup=args.warmup, reps=args.reps)
    slope = loglog_slope(points)
    plot_bench(points, out.with_suffix(".png"), slope=slope)
    print(f"slope={slope:.3f}")
    return 0


def _cmd_ablate(args) -> int:
    from .figures import plot_ablation
    from .trainer import run_ablation
    suite = {"table5": "table5_depth_source"}.get(args.suite, args.suite)
    out_dir = Path(args.out_dir)
    rows = run_ablation(suite, _train_cfg(args), _net_cfg(args), args.data,
                        out_dir)
    csv_path = out_dir / f"{suite}.csv"
    plot_ablation(rows, csv_path.with_suffix(".png"))
    for name, n, p, s in rows:
        print(f"{name}: params={n} psnr={p:.3f} ssim={s:.4f}")
    return 0


_DISPATCH = {
    "synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval,
    "analyze": _cmd_analyze, "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench, "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    cmd = _requested_command(argv)
    cfg_path = _config_path(argv)
    if cmd is not None and cfg_path is not None:
        try:
            defaults = _load_config_defaults(cfg_path, cmd)
        except _CONTRACT_ERRORS as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        sub = next(a for a in parser._subparsers._group_actions
                   if isinstance(a, argparse._SubParsersAction))
        sub.choices[cmd].set_defaults(**defaults)
        # a config value satisfies a required flag
        for action in sub.choices[cmd]._actions:
            if action.dest in defaults:
                action.required = False
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except _CONTRACT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
