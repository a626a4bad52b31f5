"""Command line harness: synth | augment | train | eval | metrics."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .data import (
    ConfigError,
    ParseError,
    SplitConfig,
    apply_split,
    load_dataset,
    load_split_config,
    parse_labeled_points,
    save_dataset,
    save_split_config,
    serialize_labeled_points,
    synth_scenes,
    synth_shapes,
)
from .geometry import PointCloud
from .metrics import ScoreDump, open_set_metrics
from .network import BackboneConfig, OpenSetNet
from .plotting import histogram_svg
from .training import SCORE_FNS, TrainConfig, TrainingError, evaluate, format_log, train
from .ups import UpsParams, generate_variant, ups_segmentation

log = logging.getLogger("openset3d")

GENERATOR_FLAGS = {"cutmix": "cut_and_mix", "rotation": "rotation", "translation": "translation",
                   "scaling": "scaling", "noise": "noise"}

DEFAULT_SYNTH = {
    "task": "classification",
    "classes": ["sphere", "cube", "cylinder", "torus"],
    "known": ["sphere", "cube", "cylinder"],
    "unknown": ["torus"],
    "n_points": 512,
    "samples_per_class": 50,
    "rotation": "z",
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunConfig:
    dataset: str
    split: str
    seed: int
    out: str = "run"
    task: str = "classification"
    holdout: float = 0.3
    use_ups: bool = True
    upe: bool = True
    backbone: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def load(cls, path, seed=None, out=None, generator=None) -> "RunConfig":
        d = _read_json(path)
        base = Path(path).resolve().parent
        unknown_keys = set(d) - {"dataset", "split", "seed", "out", "task", "holdout", "use_ups",
                                 "upe", "backbone", "ups", "alpha", "lr", "epochs", "batch_size",
                                 "n_points"}
        if unknown_keys:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown_keys)}")
        if seed is not None:
            d["seed"] = seed
        if "seed" not in d:
            raise ConfigError(f"{path}: a seed is required (config 'seed' or --seed)")
        for key in ("dataset", "split"):
            if key not in d:
                raise ConfigError(f"{path}: missing '{key}'")
            p = Path(d[key])
            d[key] = str(p if p.is_absolute() else (base / p).resolve())
            if not Path(d[key]).exists():
                raise ConfigError(f"{path}: {key} path {d[key]} does not exist")
        ups = dict(d.get("ups", {}))
        if generator is not None:
            ups["generator"] = GENERATOR_FLAGS[generator]
        if "scale_range" in ups:
            ups["scale_range"] = tuple(ups["scale_range"])
        use_ups = bool(d.get("use_ups", True))
        tc = TrainConfig(
            n_points=int(d.get("n_points", 512)),
            epochs=int(d.get("epochs", 30)),
            batch_size=int(d.get("batch_size", 16)),
            lr=float(d.get("lr", 1e-3)),
            alpha=float(d.get("alpha", 1.0)),
            seed=int(d["seed"]),
            use_ups=use_ups,
            ups=UpsParams(**ups) if ups else UpsParams(0.4, 0.6),
        )
        if out is None:
            o = Path(d.get("out", "run"))
            out = str(o if o.is_absolute() else base / o)
        return cls(dataset=d["dataset"], split=d["split"], seed=int(d["seed"]), out=str(out),
                   task=d.get("task", "classification"), holdout=float(d.get("holdout", 0.3)),
                   use_ups=use_ups, upe=bool(d.get("upe", True)),
                   backbone=dict(d.get("backbone", {})), train=tc)

    def backbone_config(self, num_known: int) -> BackboneConfig:
        kw = dict(self.backbone)
        kw.update(num_known=num_known, head=self.task, unknown_class=self.use_ups, upe=self.upe)
        return BackboneConfig(**kw)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "split": self.split, "seed": self.seed, "task": self.task,
                "holdout": self.holdout, "use_ups": self.use_ups, "upe": self.upe,
                "backbone": self.backbone, "train": self.train.to_dict()}


def _load_split_sets(dataset_path, split_path, holdout, seed, n_points):
    split = load_split_config(split_path)
    ds = load_dataset(dataset_path, points_per_mesh=n_points, seed=seed)
    if split.task != ds.task:
        raise ConfigError(f"split task {split.task!r} does not match dataset task {ds.task!r}")
    train_set, eval_set = apply_split(ds, split, holdout=holdout, seed=seed)
    return split, train_set, eval_set


def write_scores_csv(path, dump: ScoreDump) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["unit_id", "score", "is_unknown"])
        for uid, s, u in zip(dump.unit_ids, dump.scores, dump.is_unknown):
            w.writerow([uid, repr(float(s)), int(bool(u))])


def read_scores_csv(path) -> ScoreDump:
    ids, scores, unknown = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["unit_id", "score", "is_unknown"]:
            raise ParseError(f"expected header unit_id,score,is_unknown, got {header}", 1, path)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", row_no, path)
            try:
                scores.append(float(row[1]))
                flag = int(row[2])
            except ValueError:
                raise ParseError(f"malformed row {row}", row_no, path) from None
            if flag not in (0, 1):
                raise ParseError(f"is_unknown must be 0 or 1, got {row[2]}", row_no, path)
            ids.append(row[0])
            unknown.append(bool(flag))
    return ScoreDump(ids, np.array(scores), np.array(unknown, dtype=bool))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    shape_cfg = dict(DEFAULT_SYNTH)
    if args.config:
        shape_cfg.update(_read_json(args.config))
    out = _prepare_out(args.out, args.force)
    rng = np.random.default_rng(args.seed)
    if shape_cfg["task"] == "segmentation":
        ds = synth_scenes(shape_cfg["classes"], int(shape_cfg.get("shapes_per_scene", 3)),
                          int(shape_cfg["n_points"]), int(shape_cfg.get("n_scenes", 40)), rng)
    else:
        ds = synth_shapes(shape_cfg["classes"], int(shape_cfg["n_points"]), int(shape_cfg["samples_per_class"]),
                          rng, rotation=shape_cfg.get("rotation", "z"))
    split = SplitConfig("synthetic", shape_cfg["known"], shape_cfg["unknown"], task=shape_cfg["task"])
    save_dataset(ds, out)
    save_split_config(split, out / "split.json")
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def cmd_augment(args) -> int:
    params = _read_json(args.config) if args.config else {}
    if args.beta_min is not None:
        params["beta_min"] = args.beta_min
    if args.beta_max is not None:
        params["beta_max"] = args.beta_max
    if args.generator:
        params["generator"] = GENERATOR_FLAGS[args.generator]
    if "scale_range" in params:
        params["scale_range"] = tuple(params["scale_range"])
    ups = UpsParams(**params)
    src = Path(args.input)
    try:
        text = src.read_text()
    except FileNotFoundError:
        raise CliError(f"{src}: no such file") from None
    cloud = parse_labeled_points(text, labels_required=False, source=str(src))
    if cloud.labels is None:
        cloud.labels = np.zeros(len(cloud), dtype=np.int64)
    unknown = args.unknown_label if args.unknown_label is not None else int(cloud.labels.max()) + 1
    rng = np.random.default_rng(args.seed)
    if ups.generator == "cut_and_mix":
        aug = ups_segmentation(cloud, ups, rng, unknown)
    else:
        aug = generate_variant(cloud, ups, rng, unknown)
    out = _prepare_out(args.out, args.force)
    (out / "augmented.txt").write_text(serialize_labeled_points(
        PointCloud(aug.coords, aug.task_labels)))
    (out / "mask.txt").write_text("".join(f"{i}\n" for i in aug.selected))
    print(f"augmented {len(cloud)} points, {aug.k} simulated unknowns (beta={aug.beta:.4f})")
    return 0


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config, seed=args.seed, out=args.out, generator=args.generator)
    out = _prepare_out(rc.out, args.force)
    split, train_set, _ = _load_split_sets(rc.dataset, rc.split, rc.holdout, rc.seed,
                                           rc.train.n_points)
    bcfg = rc.backbone_config(split.num_known)
    model = OpenSetNet(bcfg, seed=rc.seed)
    started = time.time()
    rows = train(model, train_set, rc.train)
    meta = {"run_config": rc.to_dict(), "backbone": bcfg.to_dict(), "known": split.known,
            "unknown": split.unknown}
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), meta)
    (out / "train_log.csv").write_text(format_log(rows))
    _write_json(out / "config.json", meta)
    # wall-clock data lives only in this sidecar so the other artifacts stay reproducible
    _write_json(out / "run_meta.json", {"started": started, "finished": time.time()})
    print(f"trained {rc.train.epochs} epochs; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    if "run_config" not in meta or "backbone" not in meta:
        raise CliError(f"{args.checkpoint}: checkpoint lacks run metadata")
    rc = meta["run_config"]
    bcfg = BackboneConfig.from_dict(meta["backbone"])
    model = OpenSetNet(bcfg, seed=0)
    model.load_state_dict(params)
    dataset = args.dataset or rc["dataset"]
    split_path = args.split or rc["split"]
    n_points = rc["train"]["n_points"]
    _, _, eval_set = _load_split_sets(dataset, split_path, rc["holdout"], rc["seed"], n_points)
    result = evaluate(model, eval_set, args.score_fn, n_points=n_points, seed=rc["seed"])
    out = _prepare_out(args.out, args.force)
    write_scores_csv(out / "scores.csv", result.dump)
    _write_json(out / "metrics.json", result.report.to_dict())
    d = result.dump
    (out / "histogram.svg").write_text(histogram_svg(
        d.scores[~d.is_unknown], d.scores[d.is_unknown],
        title=f"unknown-class score ({args.score_fn})"))
    print(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_metrics(args) -> int:
    dump = read_scores_csv(args.scores)
    if not dump.has_both_classes():
        raise CliError(f"{args.scores}: needs at least one known and one unknown row")
    report = open_set_metrics(dump)
    if args.out:
        out = Path(args.out)
        target = out / "metrics.json" if out.is_dir() else out
        _write_json(target, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="openset3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset and split file")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("augment", help="simulate unknown points in one labelled cloud")
    a.add_argument("input")
    a.add_argument("--config", help="JSON with simulator parameters")
    a.add_argument("--beta-min", type=float)
    a.add_argument("--beta-max", type=float)
    a.add_argument("--generator", choices=sorted(GENERATOR_FLAGS))
    a.add_argument("--unknown-label", type=int)
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--generator", choices=sorted(GENERATOR_FLAGS))
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score the evaluation split with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--score-fn", choices=SCORE_FNS, default="upe")
    e.add_argument("--dataset")
    e.add_argument("--split")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="open-set metrics from a scores.csv")
    m.add_argument("--scores", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, TrainingError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
