"""Dataset ingestion, known/unknown splits and synthetic shapes."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, axis_angle_matrix, random_rotation


class ParseError(ValueError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- meshes

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self) -> "TriangleMesh":
        """Copy without zero-area faces."""
        return TriangleMesh(self.vertices.copy(), self.faces[self.face_areas() > 0])


_OFF_HEADER = re.compile(r"^(?:ST)?C?N?4?OFF(.*)$")


def _content_lines(text):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line


def parse_off(text: str, source=None) -> TriangleMesh:
    """Parse an ASCII OFF mesh.

    Accepts counts glued to the keyword (``OFF490 518 0``, as found in
    ModelNet files) and fan-triangulates polygons with more than three
    vertices. Errors carry the 1-based line number.
    """
    lines = _content_lines(text)
    try:
        no, head = next(lines)
    except StopIteration:
        raise ParseError("empty OFF file", source=source) from None
    m = _OFF_HEADER.match(head)
    if not m:
        raise ParseError(f"expected OFF header, got {head[:20]!r}", no, source)
    rest = m.group(1).strip()
    if not rest:
        try:
            no, rest = next(lines)
        except StopIteration:
            raise ParseError("missing vertex/face counts after header", no + 1, source) from None
    parts = rest.split()
    try:
        if len(parts) < 2:
            raise ValueError
        nv, nf = int(parts[0]), int(parts[1])
        if nv < 0 or nf < 0:
            raise ValueError
    except ValueError:
        raise ParseError(f"malformed counts line {rest!r}", no, source) from None

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            no, line = next(lines)
        except StopIteration:
            raise ParseError(f"file ends after {i} of {nv} vertices", no + 1, source) from None
        tok = line.split()
        try:
            if len(tok) < 3:
                raise ValueError
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError:
            raise ParseError(f"malformed vertex {line!r}", no, source) from None
        if not np.all(np.isfinite(verts[i])):
            raise ParseError(f"non-finite vertex coordinate in {line!r}", no, source)

    tris = []
    for i in range(nf):
        try:
            no, line = next(lines)
        except StopIteration:
            raise ParseError(f"file ends after {i} of {nf} faces", no + 1, source) from None
        tok = line.split()
        try:
            k = int(tok[0])
            if k < 3 or len(tok) < k + 1:
                raise ValueError
            idx = [int(t) for t in tok[1:k + 1]]
        except (ValueError, IndexError):
            raise ParseError(f"malformed face {line!r}", no, source) from None
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"face index out of range [0, {nv - 1}]: {line!r}", no, source)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def serialize_off(mesh: TriangleMesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(format(v, ".17g") for v in row) for row in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    return "\n".join(out) + "\n"


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator,
                        return_faces: bool = False):
    """``n`` points uniform over the surface: faces by area, then barycentric."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    if n == 0:
        cloud = PointCloud(np.zeros((0, 3)))
        return (cloud, np.zeros(0, dtype=np.int64)) if return_faces else cloud
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    pts = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
    cloud = PointCloud(pts)
    return (cloud, face) if return_faces else cloud


# ---------------------------------------------------------------- labelled point files

def parse_labeled_points(text: str, labels_required: bool = True, source=None) -> PointCloud:
    """Parse ``x y z [r g b] label`` rows.

    Four or seven columns carry a label; three or six columns do not and are
    rejected when ``labels_required``. Every row must have the same width.
    """
    rows, width, first = [], None, None
    for no, line in _content_lines(text):
        tok = line.split()
        if width is None:
            width, first = len(tok), no
            if width not in (3, 4, 6, 7):
                raise ParseError(f"expected 3, 4, 6 or 7 columns, got {width}", no, source)
        elif len(tok) != width:
            raise ParseError(
                f"row has {len(tok)} columns but line {first} has {width}", no, source
            )
        if labels_required and width in (3, 6):
            raise ParseError(f"row has {width} columns and no label", no, source)
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise ParseError(f"non-numeric value in {line!r}", no, source) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite value", no, source)
        if width in (4, 7) and vals[-1] != int(vals[-1]):
            raise ParseError(f"label {tok[-1]!r} is not an integer", no, source)
        rows.append(vals)
    if not rows:
        raise ParseError("no point rows", source=source)
    arr = np.asarray(rows)
    labels = arr[:, -1].astype(np.int64) if width in (4, 7) else None
    return PointCloud(arr[:, :3], labels)


def serialize_labeled_points(cloud: PointCloud) -> str:
    lines = []
    for i, p in enumerate(cloud.coords):
        row = " ".join(format(float(v), ".17g") for v in p)
        if cloud.labels is not None:
            row += f" {int(cloud.labels[i])}"
        lines.append(row)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- synthetic shapes

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone")
TORUS_MAJOR, TORUS_MINOR = 0.7, 0.3


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disc(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    t = 2 * np.pi * rng.random(n)
    return r * np.cos(t), r * np.sin(t)


def canonical_surface(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the canonical surface of a primitive.

    sphere: radius 1; cube: side 1 centred at the origin; cylinder: radius
    0.5 and height 1 with caps; cone: base radius 0.5, height 1, with base;
    torus: radii 0.7 / 0.3 about the z axis.
    """
    if name == "sphere":
        return _unit(rng.normal(size=(n, 3)))
    if name == "cube":
        face = rng.integers(6, size=n)
        pts = rng.uniform(-0.5, 0.5, size=(n, 3))
        axis = face % 3
        pts[np.arange(n), axis] = np.where(face < 3, -0.5, 0.5)
        return pts
    if name == "cylinder":
        r, h = 0.5, 1.0
        lateral = 2 * np.pi * r * h
        cap = np.pi * r * r
        kind = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        t = 2 * np.pi * rng.random(n)
        pts = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h / 2, h / 2, n)], axis=1)
        caps = kind > 0
        x, y = _disc(rng, int(caps.sum()), r)
        pts[caps, 0], pts[caps, 1] = x, y
        pts[caps, 2] = np.where(kind[caps] == 1, -h / 2, h / 2)
        return pts
    if name == "cone":
        r, h = 0.5, 1.0
        lateral = np.pi * r * np.hypot(r, h)
        base = np.pi * r * r
        on_base = rng.random(n) < base / (lateral + base)
        s = np.sqrt(rng.random(n))  # fraction of the way from apex to base
        t = 2 * np.pi * rng.random(n)
        pts = np.stack([r * s * np.cos(t), r * s * np.sin(t), h / 2 - h * s], axis=1)
        x, y = _disc(rng, int(on_base.sum()), r)
        pts[on_base, 0], pts[on_base, 1] = x, y
        pts[on_base, 2] = -h / 2
        return pts
    if name == "torus":
        R, r = TORUS_MAJOR, TORUS_MINOR
        out = np.empty((0, 2))
        # rejection on the tube angle: surface density is proportional to R + r cos(v)
        while len(out) < n:
            m = 2 * (n - len(out)) + 8
            v = 2 * np.pi * rng.random(m)
            keep = rng.random(m) * (R + r) <= R + r * np.cos(v)
            u = 2 * np.pi * rng.random(m)
            out = np.concatenate([out, np.stack([u, v], axis=1)[keep]])
        u, v = out[:n, 0], out[:n, 1]
        return np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u),
                         r * np.sin(v)], axis=1)
    raise ValueError(f"unknown shape {name!r}; expected one of {SHAPES}")


@dataclass
class Sample:
    cloud: PointCloud
    label: int
    name: str = ""


@dataclass
class Dataset:
    class_names: list
    samples: list = field(default_factory=list)
    name: str = "dataset"
    task: str = "classification"

    def __len__(self):
        return len(self.samples)


def synth_shapes(classes, n_per_sample: int, samples_per_class: int, rng: np.random.Generator,
                 rotation: str = "z", scale_range=(0.8, 1.2), noise: float = 0.005) -> Dataset:
    """Labelled clouds sampled from analytic primitives with per-sample jitter:
    a random rotation (about z, or over SO(3) with ``rotation="so3"``), an
    isotropic scale, and Gaussian point noise."""
    classes = list(classes)
    for c in classes:
        if c not in SHAPES:
            raise ValueError(f"unknown shape {c!r}; expected one of {SHAPES}")
    if n_per_sample < 8:
        raise ValueError("n_per_sample must be at least 8")
    ds = Dataset(class_names=classes, name="synthetic")
    for label, c in enumerate(classes):
        for i in range(samples_per_class):
            pts = canonical_surface(c, n_per_sample, rng)
            if rotation == "so3":
                R = random_rotation(rng)
            elif rotation == "z":
                R = axis_angle_matrix((0.0, 0.0, 1.0), rng.uniform(0, 2 * np.pi))
            else:
                R = np.eye(3)
            pts = rng.uniform(*scale_range) * pts @ R.T
            if noise:
                pts = pts + rng.normal(0.0, noise, size=pts.shape)
            ds.samples.append(Sample(PointCloud(pts, np.full(n_per_sample, label), f"{c}_{i:03d}"),
                                     label, f"{c}_{i:03d}"))
    return ds


def synth_scenes(classes, shapes_per_scene: int, n_points: int, n_scenes: int,
                 rng: np.random.Generator) -> Dataset:
    """Segmentation scenes: several primitives on a row, per-point class labels."""
    classes = list(classes)
    ds = Dataset(class_names=classes, name="synthetic-scenes", task="segmentation")
    for s in range(n_scenes):
        counts = np.full(shapes_per_scene, n_points // shapes_per_scene)
        counts[: n_points - counts.sum()] += 1
        pts, labels = [], []
        for j, cnt in enumerate(counts):
            c = int(rng.integers(len(classes)))
            p = canonical_surface(classes[c], int(cnt), rng)
            p = p @ axis_angle_matrix((0, 0, 1), rng.uniform(0, 2 * np.pi)).T
            pts.append(p * rng.uniform(0.6, 1.0) + np.array([2.0 * j, rng.uniform(-0.5, 0.5), 0]))
            labels.append(np.full(cnt, c))
        ds.samples.append(Sample(PointCloud(np.concatenate(pts), np.concatenate(labels)), -1,
                                 f"scene_{s:03d}"))
    return ds


# ---------------------------------------------------------------- splits

S3DIS_CLASSES = ["ceiling", "floor", "wall", "beam", "column", "window", "door", "table",
                 "chair", "sofa", "bookcase", "board", "clutter"]
MODELNET40_CLASSES = [
    "airplane", "bathtub", "bed", "bench", "bookshelf", "bottle", "bowl", "car", "chair", "cone",
    "cup", "curtain", "desk", "door", "dresser", "flower_pot", "glass_box", "guitar", "keyboard",
    "lamp", "laptop", "mantel", "monitor", "night_stand", "person", "piano", "plant", "radio",
    "range_hood", "sink", "sofa", "stairs", "stool", "table", "tent", "toilet", "tv_stand", "vase",
    "wardrobe", "xbox",
]
SCANOBJECTNN_CLASSES = ["bag", "bed", "bin", "box", "cabinet", "chair", "desk", "display", "door",
                        "pillow", "shelf", "sink", "sofa", "table", "toilet"]


@dataclass
class SplitConfig:
    dataset: str
    known: list
    unknown: list
    task: str = "classification"
    note: str = ""

    def __post_init__(self):
        self.known, self.unknown = list(self.known), list(self.unknown)
        if not self.known or not self.unknown:
            raise ConfigError("split needs at least one known and one unknown class")
        overlap = sorted(set(self.known) & set(self.unknown))
        if overlap:
            raise ConfigError(f"classes listed as both known and unknown: {overlap}")
        if len(set(self.known)) != len(self.known) or len(set(self.unknown)) != len(self.unknown):
            raise ConfigError("duplicate class names in split")
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown task {self.task!r}")

    @property
    def num_known(self) -> int:
        return len(self.known)

    def to_dict(self) -> dict:
        d = {"dataset": self.dataset, "task": self.task, "known": self.known,
             "unknown": self.unknown}
        if self.note:
            d["note"] = self.note
        return d


def manual_split(name: str) -> SplitConfig:
    """The two S3DIS splits that hold out 'thing' classes."""
    if name == "Manual-10-3":
        unknown = ["table", "chair", "sofa"]
    elif name == "Manual-12-1":
        unknown = ["sofa"]
    else:
        raise ConfigError(f"unknown manual split {name!r}")
    known = [c for c in S3DIS_CLASSES if c not in unknown]
    return SplitConfig("s3dis", known, unknown, task="segmentation")


def alphabetical_split(dataset: str, classes) -> SplitConfig:
    """First half of the sorted class list known, second half unknown.

    A documented default only; it is not the published class split.
    """
    names = sorted(classes)
    half = (len(names) + 1) // 2
    return SplitConfig(dataset, names[:half], names[half:],
                       note="alphabetical halves; not the published split")


def load_split_config(path) -> SplitConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    missing = [k for k in ("dataset", "known", "unknown") if k not in d]
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")
    return SplitConfig(d["dataset"], d["known"], d["unknown"], d.get("task", "classification"),
                       d.get("note", ""))


def save_split_config(cfg: SplitConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def apply_split(dataset: Dataset, cfg: SplitConfig, holdout: float = 0.3, seed: int = 0):
    """Split into a known-only training set and a known+unknown evaluation set.

    Labels are remapped: the i-th known class becomes ``i`` and every unknown
    class becomes ``cfg.num_known``. For classification, a ``holdout`` share of
    each known class goes to evaluation and every unknown sample does too. For
    segmentation, whole scenes are held out and unknown points are removed
    from training scenes.
    """
    names = list(dataset.class_names)
    listed = set(cfg.known) | set(cfg.unknown)
    absent = sorted(listed - set(names))
    if absent:
        raise ConfigError(f"split names classes missing from the dataset: {absent}")
    unlisted = sorted(set(names) - listed)
    if unlisted:
        raise ConfigError(f"dataset classes not assigned to known or unknown: {unlisted}")
    unk = cfg.num_known
    remap = np.array([cfg.known.index(c) if c in cfg.known else unk for c in names], dtype=np.int64)
    rng = np.random.default_rng(seed)
    train, evals = [], []

    def relabel(s: Sample) -> Sample:
        labels = None if s.cloud.labels is None else remap[s.cloud.labels]
        label = int(remap[s.label]) if s.label >= 0 else -1
        return Sample(PointCloud(s.cloud.coords, labels, s.cloud.id), label, s.name)

    if cfg.task == "classification":
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            by_class.setdefault(int(s.label), []).append(i)
        to_eval = set()
        for c in sorted(by_class):
            idx = by_class[c]
            if remap[c] == unk:
                to_eval.update(idx)
                continue
            n_hold = int(round(holdout * len(idx)))
            to_eval.update(int(i) for i in rng.permutation(idx)[:n_hold])
        for i, s in enumerate(dataset.samples):
            (evals if i in to_eval else train).append(relabel(s))
    else:
        order = rng.permutation(len(dataset.samples))
        n_hold = int(round(holdout * len(order)))
        held = set(int(i) for i in order[:n_hold])
        for i, s in enumerate(dataset.samples):
            r = relabel(s)
            if i in held:
                evals.append(r)
                continue
            keep = r.cloud.labels != unk
            if keep.any():
                train.append(Sample(PointCloud(r.cloud.coords[keep], r.cloud.labels[keep],
                                               r.cloud.id), -1, r.name))
    return train, evals


# ---------------------------------------------------------------- on-disk datasets

def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        rel = f"samples/{s.name}.txt"
        (out / rel).write_text(serialize_labeled_points(s.cloud))
        entries.append({"file": rel, "label": int(s.label), "name": s.name})
    manifest = {"name": ds.name, "task": ds.task, "classes": list(ds.class_names),
                "samples": entries}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(path, points_per_mesh: int = 1024, seed: int = 0) -> Dataset:
    """Read a ``dataset.json`` manifest. Entries may point at labelled point
    files or OFF meshes; meshes are surface-sampled with a seed derived from
    the entry index."""
    root = Path(path)
    manifest_path = root / "dataset.json" if root.is_dir() else root
    root = manifest_path.parent
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{manifest_path}: invalid JSON ({e})") from None
    ds = Dataset(list(m["classes"]), name=m.get("name", "dataset"),
                 task=m.get("task", "classification"))
    for i, e in enumerate(m["samples"]):
        f = root / e["file"]
        label = int(e.get("label", -1))
        name = e.get("name", Path(e["file"]).stem)
        if f.suffix.lower() == ".off":
            mesh = parse_off(f.read_text(), source=str(f))
            cloud = sample_mesh_surface(mesh, points_per_mesh, np.random.default_rng([seed, i]))
            cloud.labels = np.full(points_per_mesh, label)
        else:
            cloud = parse_labeled_points(f.read_text(), labels_required=False, source=str(f))
            if cloud.labels is None:
                cloud.labels = np.full(len(cloud), label)
        cloud.id = name
        ds.samples.append(Sample(cloud, label, name))
    return ds
