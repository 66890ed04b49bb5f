"""Command-line entry point: ``puregaze <command> [flags]``.

Training flags are named after the TrainConfig fields (``--sigma_sq`` and
``--sigma-sq`` are both accepted). With ``--config FILE`` the file is read
first and any flag given on the command line overrides it. Outputs go to
``--out``, which defaults to ``$PUREGAZE_OUT/<command>`` (or
``./puregaze_out/<command>``).
"""
import argparse
import dataclasses
import logging
import os
import sys
import typing
from pathlib import Path

from .errors import PureGazeError
from .evaluation import (ablation_sweep, evaluate, illumination_buckets, state_checksum,
                         visualize_purification)
from .synthdata import DomainSpec, generate_domain, source_domain_spec, target_domain_spec
from .training import TrainConfig, finetune, load_config, train

OUT_ENV = "PUREGAZE_OUT"


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _default_out(command):
    return Path(os.environ.get(OUT_ENV, "puregaze_out")) / command


def _add_train_flags(p):
    hints = typing.get_type_hints(TrainConfig)
    group = p.add_argument_group("training configuration")
    group.add_argument("--config", type=Path, help="flat 'key = value' config file; flags override it")
    for f in dataclasses.fields(TrainConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        tp = hints[f.name]
        default = "off" if f.default is None else f.default
        if tp is bool:
            group.add_argument(*names, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                               help=f"(default: {default})")
        else:
            group.add_argument(*names, dest=f.name, type=str, default=None, metavar="VALUE",
                               help=f"(default: {default})")


def _train_config(args, **fixed) -> TrainConfig:
    from .training import parse_config_value

    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        overrides[f.name] = value if isinstance(value, bool) else parse_config_value(f.name, value)
    overrides.update(fixed)
    if args.config is not None:
        return load_config(args.config, **overrides)
    return TrainConfig.from_dict(overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="puregaze", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic domain")
    p.add_argument("--out", type=Path)
    p.add_argument("--preset", choices=("source", "target"), help="benchmark domain to start from")
    p.add_argument("--illumination", type=_floats, help="LO,HI brightness factors")
    p.add_argument("--identity_pool", "--identity-pool", type=_ints, help="comma-separated identity seeds")
    p.add_argument("--distractor", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--noise_sigma", "--noise-sigma", type=float)
    p.add_argument("--pitch_range", "--pitch-range", type=_floats)
    p.add_argument("--yaw_range", "--yaw-range", type=_floats)
    p.add_argument("--resolution", type=int)
    p.add_argument("--sample_count", "--sample-count", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train PureGaze (or the baseline with --baseline)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="adapt a checkpoint with a few target samples per identity")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--per_identity", "--per-identity", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval", help="angular error of a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("buckets", help="per-illumination comparison of two checkpoints")
    p.add_argument("--checkpoint_a", "--checkpoint-a", type=Path, required=True, help="reference, e.g. baseline")
    p.add_argument("--checkpoint_b", "--checkpoint-b", type=Path, required=True, help="e.g. PureGaze")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--buckets", type=int, default=51)
    p.add_argument("--min_count", "--min-count", type=int, default=7)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("visualize", help="reconstruction grids and leakage scores")
    p.add_argument("--purified", type=Path, required=True)
    p.add_argument("--baseline", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--fit_manifest", "--fit-manifest", type=Path,
                   help="images the probe is trained on (default: --manifest)")
    p.add_argument("--probe_steps", "--probe-steps", type=int, default=500)
    p.add_argument("--probe_purified", "--probe-purified", action="store_true",
                   help="also train a fresh probe on the purified backbone")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep", help="ablation over sigma_sq or k")
    p.add_argument("--param", choices=("sigma_sq", "k"), required=True)
    p.add_argument("--values", required=True, help="comma-separated; 'off' disables sigma_sq")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.add_argument("--out", type=Path)
    _add_train_flags(p)
    return parser


def _gen_data(args):
    if args.preset == "target":
        spec = target_domain_spec()
    elif args.preset == "source":
        spec = source_domain_spec()
    else:
        spec = DomainSpec()
    nuisance = {k: getattr(args, k) for k in ("illumination", "identity_pool", "distractor", "noise_sigma")
                if getattr(args, k) is not None}
    domain = {k: getattr(args, k) for k in ("pitch_range", "yaw_range", "resolution", "sample_count", "seed")
              if getattr(args, k) is not None}
    spec = dataclasses.replace(spec, nuisance=dataclasses.replace(spec.nuisance, **nuisance), **domain)
    out = args.out or _default_out("gen-data")
    manifest = generate_domain(spec, out)
    return f"wrote {spec.sample_count} samples to {manifest}"


def _train(args):
    config = _train_config(args)
    out = args.out or _default_out("train")
    result = train(config, args.manifest, out)
    last = result.reports[-1].gaze_loss if result.reports else float("nan")
    return (f"trained {config.steps} steps ({'baseline' if config.baseline else 'puregaze'}): "
            f"gaze loss {last:.4f}, backbone sha256 {state_checksum(result.bundle.backbone)[:16]}, "
            f"checkpoint {result.checkpoint}")


def _finetune(args):
    out = args.out or _default_out("finetune")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.npz"
    _, _, reports = finetune(args.checkpoint, args.manifest, args.steps, path, args.per_identity, args.seed)
    last = f", gaze loss {reports[-1].gaze_loss:.4f}" if reports else ""
    return f"fine-tuned {args.steps} steps{last}, checkpoint {path}"


def _eval(args):
    report = evaluate(args.checkpoint, args.manifest)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        report.write(args.out / "eval.jsonl")
    return f"mean angular error {report.mean_error:.3f} deg over {len(report.errors)} samples"


def _buckets(args):
    a = evaluate(args.checkpoint_a, args.manifest)
    b = evaluate(args.checkpoint_b, args.manifest)
    table = illumination_buckets(a, b, args.manifest, args.buckets, args.min_count)
    out = args.out or _default_out("buckets")
    out.mkdir(parents=True, exist_ok=True)
    table.write(out / "buckets.jsonl")
    (out / "buckets.txt").write_text(table.summary() + "\n")
    if not table.rows:
        return f"no bucket has {args.min_count} or more images"
    best = max(table.rows, key=lambda r: r.improvement)
    return (f"{len(table.rows)} buckets ({table.dropped} images dropped); largest improvement "
            f"{best.improvement:.3f} deg at intensity {best.intensity:.3f}")


def _visualize(args):
    out = args.out or _default_out("visualize")
    result = visualize_purification(args.purified, args.baseline, args.manifest, args.probe_steps, out,
                                    args.seed, args.probe_purified, fit_manifest=args.fit_manifest)
    p, b = result.purified, result.baseline_probe
    return (f"leakage illumination {p['illumination']:.3f} vs baseline {b['illumination']:.3f}, "
            f"identity {p['identity']:.3f} vs baseline {b['identity']:.3f}; grid {result.grid}")


def _sweep(args):
    values = [v for v in args.values.split(",") if v.strip()]
    base = _train_config(args)
    out = args.out or _default_out("sweep")
    result = ablation_sweep(args.param, values, base, args.source, args.target, args.seeds, out)
    (Path(out) / "sweep.txt").write_text(result.summary() + "\n")
    best = min(result.rows, key=lambda r: r.mean_error)
    best_value = "off" if best.value is None else f"{best.value:g}"
    return (f"sweep {args.param}: {len(result.rows)} rows, best {best_value} "
            f"({best.mean_error:.3f} deg), table {Path(out) / 'sweep.tsv'}")


COMMANDS = {"gen-data": _gen_data, "train": _train, "finetune": _finetune, "eval": _eval,
            "buckets": _buckets, "visualize": _visualize, "sweep": _sweep}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except (PureGazeError, OSError) as exc:
        print(f"puregaze {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
