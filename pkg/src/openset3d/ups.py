"""Unknown-point simulation by cutting a local patch, moving it, and mixing it back.

Every generator shares the same selection step: draw a ratio ``beta``, take
``k = round(beta * N)`` nearest neighbours of a random seed point, transform
that patch and write it back into the same rows. The rows that moved become
the simulated unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, RigidTransform, aabb, apply_rigid, knn, random_rotation

GENERATORS = ("cut_and_mix", "rotation", "translation", "scaling", "noise")


@dataclass
class UpsParams:
    beta_min: float = 0.0
    beta_max: float = 0.6
    generator: str = "cut_and_mix"
    aug_ratio: float = 0.1
    # cut_and_mix / rotation
    max_angle: float = np.pi
    # translation: fraction of the bounding box, centred on the patch centroid
    range_fraction: float = 1.0
    scale_range: tuple[float, float] = (0.5, 1.5)
    sigma_fraction: float = 0.05
    # classification donor patch: "knn" (seed + neighbours) or "uniform"
    donor_selection: str = "knn"

    def __post_init__(self):
        if not 0.0 <= self.beta_min <= self.beta_max < 1.0:
            raise ValueError(
                f"need 0 <= beta_min <= beta_max < 1, got [{self.beta_min}, {self.beta_max}]"
            )
        if not 0.0 <= self.aug_ratio <= 1.0:
            raise ValueError(f"aug_ratio must be in [0, 1], got {self.aug_ratio}")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if not 0.0 <= self.max_angle <= np.pi:
            raise ValueError(f"max_angle must be in [0, pi], got {self.max_angle}")
        if self.donor_selection not in ("knn", "uniform"):
            raise ValueError(f"unknown donor_selection {self.donor_selection!r}")
        lo, hi = self.scale_range
        self.scale_range = (float(lo), float(hi))
        if lo > hi:
            raise ValueError(f"scale_range must be ordered, got {self.scale_range}")


@dataclass
class AugmentedCloud:
    coords: np.ndarray
    task_labels: np.ndarray
    ref_scores: np.ndarray
    selected: np.ndarray
    transform: RigidTransform | None = None
    sample_label: int | None = None
    beta: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.selected)


def selection_size(beta: float, n: int) -> int:
    """``round(beta * n)`` with halves rounded up."""
    return int(np.floor(beta * n + 0.5))


def draw_beta(params: UpsParams, rng: np.random.Generator) -> float:
    return float(rng.uniform(params.beta_min, params.beta_max))


def _cut_and_mix_transform(
    patch: np.ndarray, host_box, rng: np.random.Generator, max_angle: float
) -> RigidTransform:
    R = random_rotation(rng, max_angle)
    target = rng.uniform(host_box.min, host_box.max)
    # the moved patch's centroid lands exactly on a uniform point of the host box
    T = target - (patch @ R.T).mean(axis=0)
    return RigidTransform(R, T)


def _transform_patch(patch, box, params: UpsParams, rng, generator: str):
    """Returns (new_patch, RigidTransform or None)."""
    if generator == "cut_and_mix":
        xf = _cut_and_mix_transform(patch, box, rng, params.max_angle)
        return apply_rigid(patch, xf), xf
    if generator == "rotation":
        xf = RigidTransform(random_rotation(rng, params.max_angle), np.zeros(3))
        return apply_rigid(patch, xf), xf
    if generator == "translation":
        centre = patch.mean(axis=0)
        half = 0.5 * params.range_fraction * (box.max - box.min)
        target = rng.uniform(centre - half, centre + half)
        xf = RigidTransform(np.eye(3), target - centre)
        return apply_rigid(patch, xf), xf
    if generator == "scaling":
        centre = patch.mean(axis=0)
        lo, hi = params.scale_range
        s = rng.uniform(lo, hi) if hi > lo else lo
        if s == 1.0:
            return patch.copy(), None
        return centre + s * (patch - centre), None
    if generator == "noise":
        sigma = params.sigma_fraction * box.diagonal
        return patch + rng.normal(0.0, sigma, size=patch.shape), None
    raise ValueError(f"unknown generator {generator!r}")


def _simulate(
    cloud: PointCloud,
    params: UpsParams,
    rng: np.random.Generator,
    unknown_label: int,
    generator: str,
    transform_override: RigidTransform | None = None,
    beta: float | None = None,
) -> AugmentedCloud:
    if cloud.labels is None:
        raise ValueError("cloud needs per-point labels")
    n = len(cloud)
    coords = cloud.coords.copy()
    labels = cloud.labels.copy()
    ref = np.zeros(n)
    beta = draw_beta(params, rng) if beta is None else float(beta)
    k = selection_size(beta, n)
    if k == 0:
        return AugmentedCloud(coords, labels, ref, np.zeros(0, dtype=np.int64), beta=beta)
    seed = int(rng.integers(n))
    sel = knn(seed, coords, k)
    patch = coords[sel]
    if transform_override is not None:
        xf = transform_override
        moved = apply_rigid(patch, xf)
    else:
        moved, xf = _transform_patch(patch, aabb(coords), params, rng, generator)
    coords[sel] = moved
    labels[sel] = unknown_label
    ref[sel] = 1.0
    return AugmentedCloud(coords, labels, ref, np.sort(sel), transform=xf, beta=beta,
                          extra={"seed_index": seed})


def ups_segmentation(
    cloud: PointCloud,
    params: UpsParams,
    rng: np.random.Generator,
    unknown_label: int,
    transform_override: RigidTransform | None = None,
    beta: float | None = None,
) -> AugmentedCloud:
    """Cut a kNN patch, rotate it, translate its centroid to a uniform point of
    the cloud's bounding box, and write it back in place.

    ``unknown_label`` is the 0-based id reserved for simulated unknowns
    (the number of known classes). ``transform_override`` pins the rigid motion
    and ``beta`` pins the selection ratio; both exist for testing.
    """
    return _simulate(cloud, params, rng, unknown_label, "cut_and_mix",
                     transform_override=transform_override, beta=beta)


def generate_variant(
    cloud: PointCloud,
    params: UpsParams,
    rng: np.random.Generator,
    unknown_label: int,
    beta: float | None = None,
) -> AugmentedCloud:
    """Same patch selection as :func:`ups_segmentation` with the transform chosen by
    ``params.generator`` (rotation-only, translation-only, scaling or Gaussian noise)."""
    return _simulate(cloud, params, rng, unknown_label, params.generator, beta=beta)


def uss_classification(
    sample_a: PointCloud,
    sample_b: PointCloud,
    params: UpsParams,
    rng: np.random.Generator,
    unknown_label: int,
    label_a: int,
    label_b: int,
    beta: float | None = None,
) -> AugmentedCloud:
    """Mix a transformed patch of ``sample_b`` into ``sample_a``.

    ``k`` uniformly chosen host rows are evicted and overwritten by the moved
    donor patch, so the mixed sample keeps ``N`` points. The result is labelled
    with ``unknown_label`` as a whole.
    """
    if label_a == label_b:
        raise ValueError(f"samples must come from different classes, both are {label_a}")
    n = len(sample_a)
    if len(sample_b) != n:
        raise ValueError(f"sample sizes differ: {n} vs {len(sample_b)}")
    beta = draw_beta(params, rng) if beta is None else float(beta)
    k = selection_size(beta, n)
    if k == 0:
        raise ValueError("selection ratio yields k = 0; classification mixing needs beta_min > 0")
    if params.donor_selection == "knn":
        donor = knn(int(rng.integers(n)), sample_b.coords, k)
    else:
        donor = np.sort(rng.choice(n, size=k, replace=False))
    patch = sample_b.coords[donor]
    box = aabb(sample_a.coords)
    moved, xf = _transform_patch(patch, box, params, rng, params.generator)
    slots = np.sort(rng.choice(n, size=k, replace=False))
    coords = sample_a.coords.copy()
    coords[slots] = moved
    ref = np.zeros(n)
    ref[slots] = 1.0
    task = np.full(n, unknown_label, dtype=np.int64)
    return AugmentedCloud(coords, task, ref, slots, transform=xf, sample_label=unknown_label,
                          beta=beta, extra={"donor_indices": donor})
