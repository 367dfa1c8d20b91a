"""Command-line entry point: ``geocolor <command> ...``.

Exit codes: 0 success, 1 numeric failure (non-finite loss, failed gradcheck),
2 bad user input (missing files, malformed configs or clouds).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import trainer
from .evaluate import evaluate_dataset, format_metrics, metrics_csv, reconstruct_export
from .model import load_checkpoint
from .scene import CloudFormatError, SceneSpec, generate_scene, list_cloud_files, load_cloud, save_cloud

log = logging.getLogger("geocolor")


class UserError(Exception):
    """Bad input from the command line; reported with exit code 2."""


SPEC_KEYS = ("num_objects", "num_classes", "points_per_object", "geometry_noise_sd", "color_noise_sd",
             "room_size")


def parse_spec_text(text: str) -> SceneSpec:
    """Flat ``key = value`` scene spec; palette and shapes always use their defaults."""
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"spec line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise ValueError(f"spec line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(val) if types[key] == "int" else float(val)
        except ValueError:
            raise ValueError(f"spec line {lineno}: bad value for {key}: {val!r}") from None
    spec = SceneSpec(**values)
    spec.validate()
    return spec


def print_config(title: str, items: dict) -> None:
    print(f"# {title}")
    for k, v in items.items():
        print(f"{k} = {v}")
    sys.stdout.flush()


def _load_clouds(data_dir):
    if not os.path.isdir(data_dir):
        raise UserError(f"data directory {data_dir} does not exist")
    files = list_cloud_files(data_dir)
    if not files:
        raise UserError(f"no cloud files in {data_dir}")
    return [load_cloud(f) for f in files]


def _load_ckpt(path):
    if not os.path.isfile(path):
        raise UserError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SceneSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = parse_spec_text(fh.read())
    spec.validate()
    if args.scenes < 0:
        raise UserError("--scenes must be nonnegative")
    print_config("synth", {**{k: getattr(spec, k) for k in SPEC_KEYS},
                           "scenes": args.scenes, "seed": args.seed, "out": args.out})
    os.makedirs(args.out, exist_ok=True)
    if args.scenes == 0:
        log.warning("--scenes 0: wrote no clouds to %s", args.out)
    width = max(4, len(str(args.scenes - 1)))
    for i in range(args.scenes):
        cloud = generate_scene(spec, args.seed + i)
        save_cloud(cloud, os.path.join(args.out, f"scene_{i:0{width}d}.pgcc"))
    return 0


def _train_config(args) -> trainer.TrainConfig:
    config = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "epochs") if getattr(args, k, None) is not None}
    if overrides:
        config = trainer.parse_config_text("".join(f"{k} = {v}\n" for k, v in overrides.items()), config)
    return config


def cmd_pretrain(args) -> int:
    config = _train_config(args)
    print_config("pretrain", {**asdict(config), "data": args.data, "out": args.out})
    trainer.pretrain(config, args.data, args.out)
    with open(trainer.log_path_for(args.out)) as fh:
        trainlog = trainer.TrainLog.from_csv(fh.read())
    if trainlog.records:
        last = trainlog.records[-1]
        print(f"final total = {last.total:.6f} entropy = {last.entropy:.4f}")
    print(f"checkpoint = {args.out}")
    print(f"log = {trainer.log_path_for(args.out)}")
    return 0


def metrics_csv_path(out) -> str:
    root, ext = os.path.splitext(os.fspath(out))
    return root + ".csv" if ext != ".csv" else root + ".metrics.csv"


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    print_config("eval-unsup", {"ckpt": args.ckpt, "data": args.data, "out": args.out,
                                "num_classes": args.num_classes, "tau": args.tau,
                                "num_prototypes": ckpt.params.num_prototypes})
    clouds = _load_clouds(args.data)
    unlabeled = [c.scene_id for c in clouds if c.labels is None]
    for sid in unlabeled:
        log.warning("scene %s has no labels; omitted from metrics", sid)
    metrics, _ = evaluate_dataset(ckpt.params, clouds, args.num_classes, tau=args.tau)
    if metrics is None:
        raise UserError("no labeled clouds to score")
    text = format_metrics(metrics, {"params_sha256": ckpt.params.digest()[:16],
                                    "scenes": len(clouds) - len(unlabeled)})
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(text)
    with open(metrics_csv_path(args.out), "w") as fh:
        fh.write(metrics_csv(metrics))
    print(f"miou = {metrics.miou:.6f}")
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    print_config("reconstruct", {"ckpt": args.ckpt, "data": args.data, "out": args.out})
    clouds = _load_clouds(args.data)
    geo, color = [], []
    for cloud in clouds:
        res = reconstruct_export(ckpt.params, cloud, args.out)
        geo.append(res["mse_geo"])
        color.append(res["mse_color"])
    print(f"mean mse_geo = {np.mean(geo):.9g}")
    print(f"mean mse_color = {np.mean(color):.9g}")
    return 0


def cmd_gradcheck(args) -> int:
    config = trainer.gradcheck_config(args.num_prototypes)
    print_config("gradcheck", {**asdict(config), "seed": args.seed})
    report = trainer.gradcheck(config, seed=args.seed)
    print(report.format())
    return 0 if report.passed else 1


def summarize_log(trainlog: trainer.TrainLog, points: int = 11) -> str:
    """Min and final value of every logged term plus an entropy trajectory."""
    recs = trainlog.records
    if not recs:
        raise ValueError("log has no rows")
    lines = ["term,min,min_step,final"]
    for term in trainer.TERMS + ("total", "entropy"):
        vals = [getattr(r, term) for r in recs]
        i = int(np.argmin(vals))
        lines.append(f"{term},{vals[i]!r},{recs[i].step},{vals[-1]!r}")
    lines.append("")
    lines.append("step,entropy")
    picks = sorted(set(np.linspace(0, len(recs) - 1, min(points, len(recs))).round().astype(int)))
    for i in picks:
        lines.append(f"{recs[i].step},{recs[i].entropy!r}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    print_config("report", {"log": args.log, "out": args.out})
    if not os.path.isfile(args.log):
        raise UserError(f"log {args.log} does not exist")
    with open(args.log) as fh:
        text = fh.read()
    try:
        summary = summarize_log(trainer.TrainLog.from_csv(text))
    except ValueError as err:
        raise UserError(f"{args.log}: {err}") from None
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(summary)
    else:
        sys.stdout.write(summary)
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geocolor", description="Geometry/colour self-supervised point features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic labeled scenes")
    s.add_argument("--spec", help="key = value scene spec file")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="train and write a checkpoint plus its log")
    s.add_argument("--config", help="key = value training config file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval-unsup", help="unsupervised segmentation mIoU")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="metrics text file; a .csv twin is written beside it")
    s.add_argument("--num-classes", type=int, help="ground-truth class count (default: inferred)")
    s.add_argument("--tau", type=float, default=0.1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("reconstruct", help="export swapped reconstructions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-prototypes", type=int, default=4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="summarize a training log")
    s.add_argument("--log", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, FileNotFoundError, CloudFormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (trainer.NonFiniteLossError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
