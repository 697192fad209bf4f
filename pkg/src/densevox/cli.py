"""Command-line entry points: synth, train, predict, evaluate, rf-check.

Configs are plain-text key=value files; keys match the dataclass fields of
PhantomSpec (synth) and TrainConfig plus ``variant`` (train). Lines starting
with '#' are ignored.
"""

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np


def parse_kv_file(path):
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce_into(cls, kv, extra_keys=()):
    """Convert string values to the field types of dataclass ``cls``."""
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    leftovers = {}
    for key, value in kv.items():
        if key in extra_keys:
            leftovers[key] = value
            continue
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}; valid keys: "
                             f"{sorted(by_name)}")
        default = by_name[key].default
        if isinstance(default, bool):
            kwargs[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kwargs[key] = int(value)
        elif isinstance(default, float):
            kwargs[key] = float(value)
        elif isinstance(default, tuple):
            parts = [p for p in value.replace(",", " ").split() if p]
            conv = float if any("." in p for p in parts) else int
            kwargs[key] = tuple(conv(p) for p in parts)
        else:
            kwargs[key] = value
    return kwargs, leftovers


def _cmd_synth(args):
    from .data import PhantomSpec, generate_phantom, write_volume

    kv = parse_kv_file(args.config) if args.config else {}
    kwargs, _ = coerce_into(PhantomSpec, kv)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    spec = PhantomSpec(**kwargs)
    vol = generate_phantom(spec)
    write_volume(args.out, vol)
    frac = float(np.mean(vol.labels != 0))
    print(f"wrote {args.out}: extents {vol.extents}, lesion fraction {frac:.4f}")
    return 0


def _cmd_train(args):
    from .data import read_volume
    from .model import NetworkSpec
    from .train import TrainConfig, run_training

    spec_keys = ("variant", "growth", "init_kernels", "layers_per_block",
                 "output_extent")
    kv = parse_kv_file(args.config) if args.config else {}
    kwargs, leftovers = coerce_into(TrainConfig, kv, extra_keys=spec_keys)
    config = TrainConfig(**kwargs)
    spec_kwargs = {k: (v if k == "variant" else int(v))
                   for k, v in leftovers.items()}
    spec = NetworkSpec(**spec_kwargs)
    paths = sorted(Path(args.data).glob("*.mvol"))
    if not paths:
        raise FileNotFoundError(f"no .mvol volumes under {args.data}")
    volumes = [read_volume(p, volume_id=p.stem) for p in paths]
    print(f"training {spec.variant} on {len(volumes)} volumes "
          f"({config.epochs} epochs x {config.patches_per_epoch} patches)")
    run_training(volumes, config, spec=spec, out_dir=args.out,
                 log_fn=lambda line: print(line))
    print(f"checkpoints and metrics.log written to {args.out}")
    return 0


def _cmd_predict(args):
    from .data import Volume, read_volume, write_volume
    from .infer import predict_volume
    from .model import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    vol = read_volume(args.infile)
    labels = predict_volume(vol, ck["params"], ck["spec"], workers=args.workers)
    out = Volume(modalities=None, labels=labels, spacing=vol.spacing,
                 volume_id=vol.volume_id)
    write_volume(args.out, out, labels_only=True)
    print(f"wrote {args.out} (labels only)")
    return 0


def _cmd_evaluate(args):
    from .data import read_volume
    from .metrics import evaluate, report_line, write_report

    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    scores = evaluate(pred.labels, truth.labels)
    line = report_line(truth.volume_id, scores)
    print(line)
    if args.report:
        write_report(args.report, [(truth.volume_id, scores)])
        print(f"report written to {args.report}")
    return 0


def _cmd_rf_check(args):
    from .model import load_checkpoint, receptive_field_probe

    ck = load_checkpoint(args.checkpoint)
    rep = receptive_field_probe(ck["params"], ck["spec"], seed=args.seed,
                                n_voxels=args.voxels)
    ok = (rep["out_of_window_changed"] == 0
          and rep["in_window_changed_fraction"] > 0.99)
    print(f"receptive field:       {rep['receptive_field']}^3 "
          f"(stage 1: {rep['stage1_receptive_field']}^3)")
    print(f"out-of-window changes: {rep['out_of_window_changed']} / "
          f"{rep['out_of_window_total']} (must be 0)")
    print(f"in-window changed:     {rep['in_window_changed_fraction']:.4f} "
          f"(must exceed 0.99)")
    print(f"stage-1 contribution:  {rep['stage1_changed_fraction']:.4f}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="densevox",
        description="hierarchical dense 3D CNN segmentation on synthetic volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom volume as MVOL")
    p.add_argument("--config", help="key=value PhantomSpec overrides")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train on a directory of MVOL volumes")
    p.add_argument("--config", help="key=value TrainConfig overrides (+variant)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="run sliding-window inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="Dice of predicted vs truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("rf-check", help="receptive-field perturbation probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--voxels", type=int, default=5)
    p.set_defaults(fn=_cmd_rf_check)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
