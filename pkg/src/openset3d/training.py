"""Training and evaluation loops shared by the CLI and the experiments."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Sample
from .geometry import PointCloud, knn, normalize_cloud
from .metrics import MetricsReport, ScoreDump, accuracy, miou, open_set_metrics
from .network import BackboneConfig, OpenSetNet, msp_score, maxlogit_score, total_loss
from .ups import UpsParams, generate_variant, ups_segmentation, uss_classification

log = logging.getLogger(__name__)

SCORE_FNS = ("msp", "maxlogit", "upe")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_points: int = 512
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    alpha: float = 1.0
    seed: int = 0
    use_ups: bool = True
    ups: UpsParams = field(default_factory=lambda: UpsParams(0.4, 0.6))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ups"]["scale_range"] = list(d["ups"]["scale_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        ups = d.pop("ups", None)
        cfg = cls(**d)
        if ups is not None:
            cfg.ups = UpsParams(**ups)
        return cfg


def fit_points(coords: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices giving exactly ``n`` rows: a random subset, or all rows plus
    random repeats when the cloud is too small."""
    m = len(coords)
    if m == n:
        return np.arange(n)
    if m > n:
        return np.sort(rng.choice(m, size=n, replace=False))
    return np.concatenate([np.arange(m), rng.choice(m, size=n - m, replace=True)])


def crop(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Fixed-size crop: the ``n`` nearest points to a random seed point."""
    if len(cloud) <= n:
        idx = fit_points(cloud.coords, n, rng)
    else:
        idx = np.sort(knn(int(rng.integers(len(cloud))), cloud.coords, n))
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(cloud.coords[idx], labels, cloud.id)


def prepare_classification(samples: list[Sample], n: int, seed: int) -> list[Sample]:
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, 7919, i])
        idx = fit_points(s.cloud.coords, n, rng)
        coords = normalize_cloud(s.cloud.coords[idx])
        out.append(Sample(PointCloud(coords, np.full(n, s.label), s.cloud.id), s.label, s.name))
    return out


def _epoch_batch_classification(train, cfg: TrainConfig, num_known: int, epoch: int):
    """Per-sample derived RNG streams; returns coords, labels, ref scores, mixed flags."""
    n_samples = len(train)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_samples)
    labels_all = np.array([s.label for s in train])
    coords, labels, refs, mixed = [], [], [], []
    for i in order:
        s = train[i]
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        if cfg.use_ups and rng.random() < cfg.ups.aug_ratio:
            others = np.flatnonzero(labels_all != s.label)
            if len(others) == 0:
                raise TrainingError("mixing needs samples from at least two known classes")
            partner = train[int(others[rng.integers(len(others))])]
            aug = uss_classification(s.cloud, partner.cloud, cfg.ups, rng, num_known,
                                     s.label, partner.label)
            coords.append(aug.coords)
            labels.append(num_known)
            refs.append(aug.ref_scores)
            mixed.append(True)
        else:
            coords.append(s.cloud.coords)
            labels.append(s.label)
            refs.append(np.zeros(len(s.cloud)))
            mixed.append(False)
    return np.stack(coords), np.array(labels), np.stack(refs), np.array(mixed)


def _epoch_batch_segmentation(train, cfg: TrainConfig, num_known: int, epoch: int):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
    coords, labels, refs, mixed = [], [], [], []
    for i in order:
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        c = crop(train[i].cloud, cfg.n_points, rng)
        c = PointCloud(normalize_cloud(c.coords), c.labels, c.id)
        if cfg.use_ups:
            if cfg.ups.generator == "cut_and_mix":
                aug = ups_segmentation(c, cfg.ups, rng, num_known)
            else:
                aug = generate_variant(c, cfg.ups, rng, num_known)
            coords.append(aug.coords)
            labels.append(aug.task_labels)
            refs.append(aug.ref_scores)
        else:
            coords.append(c.coords)
            labels.append(c.labels)
            refs.append(np.zeros(len(c)))
        mixed.append(False)
    return np.stack(coords), np.stack(labels), np.stack(refs), np.array(mixed)


def _check_finite(model, loss, epoch, batch):
    if np.isfinite(loss):
        return
    for name in sorted(model.params):
        p = model.params[name]
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}; parameter {name}")
    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}")


def train(model: OpenSetNet, train_set: list[Sample], cfg: TrainConfig, on_epoch=None) -> list[dict]:
    """Train ``model`` in place and return one log row per epoch.

    The ``loss_upe`` column holds the weighted term ``alpha * l_upe``.

    Each epoch draws fresh simulated unknowns with RNG streams derived from
    ``(seed, epoch, sample index)``.
    """
    mcfg = model.cfg
    num_known = mcfg.num_known
    if cfg.use_ups and not mcfg.unknown_class:
        raise ValueError("unknown-point simulation needs a model with the extra unknown logit")
    seg = mcfg.head == "segmentation"
    for s in train_set:
        if s.label >= num_known or (s.cloud.labels is not None and np.any(s.cloud.labels >= num_known)):
            raise ValueError(f"training sample {s.name!r} carries a label outside the known classes")
    if not seg:
        train_set = prepare_classification(train_set, cfg.n_points, cfg.seed)
    params = model.parameters()
    opt = ad.Adam(params, lr=cfg.lr)
    rows = []
    for epoch in range(cfg.epochs):
        make = _epoch_batch_segmentation if seg else _epoch_batch_classification
        coords, labels, refs, mixed = make(train_set, cfg, num_known, epoch)
        sums = {"task": 0.0, "upe": 0.0}
        correct = total = 0
        n = len(coords)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            sl = slice(start, start + cfg.batch_size)
            out = model(coords[sl])
            loss, l_task, l_upe = total_loss(out, labels[sl], refs[sl] if mcfg.upe else None,
                                             cfg.alpha)
            opt.zero_grad()
            ad.backward(loss, params)
            _check_finite(model, loss.item(), epoch, b)
            opt.step()
            w = len(coords[sl])
            sums["task"] += l_task.item() * w
            sums["upe"] += cfg.alpha * l_upe.item() * w
            known_logits = out.logits.data[..., :num_known]
            pred = known_logits.argmax(axis=-1)
            if seg:
                keep = labels[sl] < num_known
                correct += int((pred[keep] == labels[sl][keep]).sum())
                total += int(keep.sum())
            else:
                keep = ~mixed[sl]
                correct += int((pred[keep] == labels[sl][keep]).sum())
                total += int(keep.sum())
        row = {"epoch": epoch + 1, "loss_task": sums["task"] / n, "loss_upe": sums["upe"] / n,
               "train_accuracy": correct / total if total else 0.0}
        rows.append(row)
        log.info("epoch %d task %.4f upe %.4f acc %.3f", row["epoch"], row["loss_task"],
                 row["loss_upe"], row["train_accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    return rows


def format_log(rows: list[dict]) -> str:
    lines = ["epoch,loss_task,loss_upe,train_accuracy"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['loss_task']!r},{r['loss_upe']!r},{r['train_accuracy']!r}")
    return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    dump: ScoreDump
    report: MetricsReport
    predictions: np.ndarray
    targets: np.ndarray


def _scores(out, score_fn, seg):
    logits = out.logits.data
    if score_fn == "msp":
        return msp_score(logits)
    if score_fn == "maxlogit":
        return maxlogit_score(logits)
    if score_fn == "upe":
        if out.upe_scores is None:
            raise ValueError("score function 'upe' needs a model with the unknown-point estimator")
        x = out.upe_scores.data
        return x if seg else x.mean(axis=-1)
    raise ValueError(f"unknown score function {score_fn!r}; expected one of {SCORE_FNS}")


def evaluate(model: OpenSetNet, eval_set: list[Sample], score_fn: str = "upe",
             n_points: int = 512, batch_size: int = 32, seed: int = 0) -> EvalResult:
    """Score every evaluation unit (sample or point) and compute the metrics.

    Closed-set predictions use the known-class logits only. Open-set metrics
    are left out, with a warning, when the set lacks knowns or unknowns.
    """
    cfg = model.cfg
    num_known = cfg.num_known
    seg = cfg.head == "segmentation"
    ids, scores, unknown, preds, targets = [], [], [], [], []
    if seg:
        for s in eval_set:
            coords = normalize_cloud(s.cloud.coords)
            out = model(coords[None])
            sc = _scores(out, score_fn, True)[0]
            pred = out.logits.data[0, :, :num_known].argmax(axis=-1)
            ids += [f"{s.name}:{i}" for i in range(len(coords))]
            scores.append(sc)
            unknown.append(s.cloud.labels == num_known)
            preds.append(pred)
            targets.append(s.cloud.labels)
    else:
        prepared = prepare_classification(eval_set, n_points, seed + 1)
        for start in range(0, len(prepared), batch_size):
            chunk = prepared[start:start + batch_size]
            out = model(np.stack([s.cloud.coords for s in chunk]))
            scores.append(_scores(out, score_fn, False))
            preds.append(out.logits.data[:, :num_known].argmax(axis=-1))
            targets.append(np.array([s.label for s in chunk]))
            unknown.append(np.array([s.label == num_known for s in chunk]))
            ids += [s.name for s in chunk]
    scores = np.concatenate(scores)
    unknown = np.concatenate(unknown)
    preds = np.concatenate(preds)
    targets = np.concatenate(targets)
    dump = ScoreDump(ids, scores, unknown)
    report = MetricsReport()
    if dump.has_both_classes():
        for k, v in open_set_metrics(dump).items():
            setattr(report, k, v)
    else:
        log.warning("evaluation set lacks known or unknown units; open-set metrics omitted")
    known = targets < num_known
    if known.any():
        report.accuracy_sample = accuracy(preds[known], targets[known], "per_sample")
        report.accuracy_class = accuracy(preds[known], targets[known], "per_class_mean")
        if seg:
            report.miou = miou(preds[known], targets[known], range(num_known))
    return EvalResult(dump, report, preds, targets)

