"""PointNet-lite backbone, task heads, and the multi-level unknown-point estimator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import farthest_point_sample_batch, nearest_index

HEADS = ("classification", "segmentation")


@dataclass
class BackboneConfig:
    num_known: int = 3
    head: str = "classification"
    widths: tuple = (64, 128, 256)
    fractions: tuple = (1.0, 0.5, 0.25)
    head_hidden: int = 128
    # extra logit for simulated unknowns
    unknown_class: bool = True
    upe: bool = True
    upe_hidden: int = 64
    point_guided: bool = True
    # what the fusion-weight MLP sees: "coords" or "coords+features" (level-1 features appended)
    psi_input: str = "coords"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.widths) < 1 or len(self.widths) != len(self.fractions):
            raise ValueError(
                f"need one width per level, got widths={self.widths} fractions={self.fractions}"
            )
        if any(b > a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError(f"level fractions must be non-increasing: {self.fractions}")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError(f"level fractions must lie in (0, 1]: {self.fractions}")
        if self.num_known < 1:
            raise ValueError("num_known must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.psi_input not in ("coords", "coords+features"):
            raise ValueError(f"unknown psi_input {self.psi_input!r}")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def num_outputs(self) -> int:
        return self.num_known + (1 if self.unknown_class else 0)

    def level_sizes(self, n: int) -> list[int]:
        sizes = [int(round(n * f)) for f in self.fractions]
        if any(s < 1 for s in sizes):
            raise ValueError(f"{n} points is too few for level fractions {self.fractions}")
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class Encoded:
    features: list  # H_j tensors, (B, N_j, C_j)
    coords: list  # retained coordinates per level, (B, N_j, 3)


@dataclass
class ForwardOutput:
    logits: Tensor
    upe_scores: Tensor | None = None  # X, (B, N)
    weights: Tensor | None = None  # W, (B, N, M)
    level_scores: Tensor | None = None  # A_j stacked, (B, N, M)
    extra: dict = field(default_factory=dict)


def _dense(params, name, x, relu=True):
    y = ad.matmul(x, params[name + ".weight"]) + params[name + ".bias"]
    return ad.relu(y) if relu else y


def upsample_features(h_j, coords_j, coords_full) -> Tensor:
    """Nearest-neighbour upsampling: every full-resolution point takes the
    feature row of its closest retained point (ties -> lower index)."""
    h_j = ad.as_tensor(h_j)
    coords_j = np.asarray(coords_j)
    if h_j.shape[-2] == 0 or coords_j.shape[-2] == 0:
        raise ValueError("cannot upsample an empty feature map")
    if coords_j.shape[:-1] != h_j.shape[:-1]:
        raise ValueError(f"coords {coords_j.shape} do not match features {h_j.shape}")
    idx = nearest_index(np.asarray(coords_full), coords_j)
    return ad.gather_rows(h_j, idx)


def fuse_scores(level_scores: Tensor, weights: Tensor) -> Tensor:
    """X = sum_j w_j * A_j, row by row."""
    return ad.sum(ad.mul(weights, level_scores), axis=-1)


class OpenSetNet:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c_in = 3
        for j, w in enumerate(cfg.widths, start=1):
            self._linear(rng, f"level{j}", c_in, w)
            c_in = w
        top = cfg.widths[-1]
        if cfg.head == "classification":
            self._linear(rng, "head.fc1", top, cfg.head_hidden)
        else:
            self._linear(rng, "head.fc1", int(np.sum(cfg.widths)) + top, cfg.head_hidden)
        self._linear(rng, "head.fc2", cfg.head_hidden, cfg.num_outputs)
        if cfg.upe:
            for j, w in enumerate(cfg.widths, start=1):
                self._linear(rng, f"upe.phi{j}.fc1", w, cfg.upe_hidden)
                self._linear(rng, f"upe.phi{j}.fc2", cfg.upe_hidden, 1)
            psi_in = 3 + (cfg.widths[0] if cfg.psi_input == "coords+features" else 0)
            self._linear(rng, "upe.psi.fc1", psi_in, cfg.upe_hidden)
            self._linear(rng, "upe.psi.fc2", cfg.upe_hidden, cfg.levels)

    def _linear(self, rng, name, fan_in, fan_out):
        self.params[name + ".weight"] = ad.glorot_uniform(rng, fan_in, fan_out, name + ".weight")
        self.params[name + ".bias"] = ad.zeros_param((fan_out,), name + ".bias")

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ValueError(
                f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # ------------------------------------------------------------ forward pieces

    def encode(self, coords) -> Encoded:
        """Multi-level features H_1..H_M and the coordinates each level keeps.

        Level j applies a shared per-point layer to level j-1 and keeps a
        farthest-point subset. The layer is per-point, so it is evaluated on the
        subset directly; the result is identical.
        """
        q, batched = _batch(coords)
        sizes = self.cfg.level_sizes(q.shape[1])
        feats, kept = [], []
        cur, cur_xyz = Tensor(q), q
        for j, m in enumerate(sizes, start=1):
            if m < cur_xyz.shape[1]:
                idx = farthest_point_sample_batch(cur_xyz, m)
                cur = ad.gather_rows(cur, idx)
                cur_xyz = np.take_along_axis(cur_xyz, idx[..., None], axis=1)
            h = _dense(self.params, f"level{j}", cur)
            feats.append(h)
            kept.append(cur_xyz)
            cur = h
        if not batched:
            return Encoded([ad.reshape(f, f.shape[1:]) for f in feats], [k[0] for k in kept])
        return Encoded(feats, kept)

    def _level_score(self, j: int, f) -> Tensor:
        hid = _dense(self.params, f"upe.phi{j}.fc1", f)
        return ad.sigmoid(_dense(self.params, f"upe.phi{j}.fc2", hid, relu=False))

    def _fusion_weights(self, q: np.ndarray, first_level, shape) -> Tensor:
        if not self.cfg.point_guided:
            return Tensor(np.full(shape, 1.0 / self.cfg.levels))
        psi_in = Tensor(q)
        if self.cfg.psi_input == "coords+features":
            psi_in = ad.concat([psi_in, first_level], axis=-1)
        hid = _dense(self.params, "upe.psi.fc1", psi_in)
        return ad.row_softmax(_dense(self.params, "upe.psi.fc2", hid, relu=False))

    def upe_forward(self, coords, full_feats) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (X, W, A) for full-resolution feature maps F_1..F_M.

        A_j = sigmoid(Phi_j(F_j)), W = softmax(Psi(Q)) row-wise (or 1/M without
        point guidance), X = sum_j w_j * A_j.
        """
        cfg = self.cfg
        if not cfg.upe:
            raise ValueError("model was built without the unknown-point estimator")
        if len(full_feats) != cfg.levels:
            raise ValueError(f"expected {cfg.levels} feature maps, got {len(full_feats)}")
        q = np.asarray(coords, dtype=np.float64)
        for j, f in enumerate(full_feats, start=1):
            if f.shape[:-1] != q.shape[:-1]:
                raise ValueError(f"feature map {j} has shape {f.shape}, coords {q.shape}")
        a = ad.concat([self._level_score(j, f) for j, f in enumerate(full_feats, start=1)], axis=-1)
        w = self._fusion_weights(q, full_feats[0], a.shape)
        return fuse_scores(a, w), w, a

    def forward(self, coords) -> ForwardOutput:
        """Forward pass on (N, 3) or (B, N, 3) coordinates.

        Classification logits are (B, K); segmentation logits (B, N, K).
        UPE scores are (B, N). Unbatched input drops the leading axis.
        """
        q, batched = _batch(coords)
        enc = self.encode(q)
        b, n, _ = q.shape
        up = [None if h.shape[1] == n else nearest_index(q, xyz)
              for h, xyz in zip(enc.features, enc.coords)]
        seg = self.cfg.head == "segmentation"
        full = None
        if seg or self.cfg.psi_input == "coords+features":
            full = [h if i is None else ad.gather_rows(h, i) for h, i in zip(enc.features, up)]
        g = ad.max_over_rows(enc.features[-1])
        if not seg:
            hid = _dense(self.params, "head.fc1", g)
        else:
            gb = ad.broadcast_to(ad.reshape(g, (b, 1, g.shape[-1])), (b, n, g.shape[-1]))
            hid = _dense(self.params, "head.fc1", ad.concat(full + [gb], axis=-1))
        logits = _dense(self.params, "head.fc2", hid, relu=False)
        out = ForwardOutput(logits)
        if self.cfg.upe:
            # Phi_j is per-point, so scoring H_j and then upsampling the score
            # gives the same rows as scoring the upsampled F_j, at lower cost
            scores = []
            for j, (h, i) in enumerate(zip(enc.features, up), start=1):
                a_j = self._level_score(j, h)
                scores.append(a_j if i is None else ad.gather_rows(a_j, i))
            a = ad.concat(scores, axis=-1)
            first = None if full is None else full[0]
            w = self._fusion_weights(q, first, a.shape)
            out.upe_scores, out.weights, out.level_scores = fuse_scores(a, w), w, a
        out.extra["encoded"] = enc
        out.extra["upsample_index"] = up
        if not batched:
            out.logits = ad.reshape(out.logits, out.logits.shape[1:])
            if self.cfg.upe:
                out.upe_scores = ad.reshape(out.upe_scores, (n,))
                out.weights = ad.reshape(out.weights, (n, self.cfg.levels))
                out.level_scores = ad.reshape(out.level_scores, (n, self.cfg.levels))
        return out

    __call__ = forward


def _batch(coords):
    q = np.asarray(coords, dtype=np.float64)
    if q.ndim == 2:
        return q[None], False
    if q.ndim != 3 or q.shape[-1] != 3:
        raise ValueError(f"coordinates must be (N, 3) or (B, N, 3), got {q.shape}")
    return q, True


# ---------------------------------------------------------------- losses and scores

def total_loss(output: ForwardOutput, task_labels, ref_scores=None, alpha: float = 1.0):
    """Task cross-entropy plus ``alpha`` times the MSE between UPE scores and
    the simulated-unknown mask. Returns (total, task, upe) tensors."""
    labels = np.asarray(task_labels, dtype=np.int64)
    k = output.logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"task label {bad} outside [0, {k - 1}]")
    task = ad.cross_entropy(output.logits, labels)
    if output.upe_scores is None or ref_scores is None:
        return task, task, Tensor(0.0)
    upe = ad.mse(output.upe_scores, np.asarray(ref_scores, dtype=np.float64))
    return ad.add(task, ad.mul(upe, float(alpha))), task, upe


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def msp_score(logits) -> np.ndarray:
    """1 - maximum softmax probability; higher means more likely unknown."""
    return 1.0 - softmax(logits).max(axis=-1)


def maxlogit_score(logits) -> np.ndarray:
    """Negated maximum logit; higher means more likely unknown."""
    return -np.asarray(logits, dtype=np.float64).max(axis=-1)


def sample_unknown_score(scores) -> float:
    return float(np.mean(np.asarray(scores, dtype=np.float64)))
