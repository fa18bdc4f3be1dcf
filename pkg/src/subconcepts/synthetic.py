"""Synthetic feature-field scenes with known ground truth.

Each class is a spherical blob of dense samples whose features are noisy
copies of a class centroid, one centroid per feature channel. Free space
around the blobs carries random features and (near) zero density. Scenes can
be emitted as a flat sample cloud or as rays cast from posed viewpoints.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .fieldset import CatalogClass, ClassCatalog, FieldSet, RayIndex, Viewpoint


@dataclass
class GeneratorSpec:
    """Parameters of a synthetic scene.

    ``noise`` is the expected norm of the Gaussian perturbation added to a
    unit centroid (per-coordinate std ``noise / sqrt(d)``).
    """

    n_classes: int = 6
    d_seg: int = 32
    d_q: int = 32
    margin: float = 0.5
    # Separate bound for the query channel; defaults to ``margin``.
    query_margin: Optional[float] = None
    noise: float = 0.05
    n_samples: int = 10_000
    free_fraction: float = 0.2
    blob_radius: float = 0.25
    scene_extent: float = 1.5
    blob_sigma: float = 50.0
    free_sigma: float = 0.0
    seed: int = 0
    seg_centroids: Optional[Sequence[Sequence[float]]] = None
    query_centroids: Optional[Sequence[Sequence[float]]] = None
    class_names: Optional[Sequence[str]] = None
    # Ray mode: n_viewpoints > 0 replaces the flat cloud by rays.
    n_viewpoints: int = 0
    rays_per_view: int = 64
    samples_per_ray: int = 48
    near: float = 1.0
    far: float = 5.0
    camera_distance: float = 3.0
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        if self.d_seg < 1 or self.d_q < 1:
            raise ValidationError("feature dimensions must be >= 1")
        for m in (self.margin, self.effective_query_margin):
            if not -1.0 <= m <= 1.0:
                raise ValidationError("margins must lie in [-1, 1]")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")
        if not 0.0 <= self.free_fraction < 1.0:
            raise ValidationError("free_fraction must lie in [0, 1)")
        if self.n_samples < self.n_classes:
            raise ValidationError("n_samples must be at least n_classes")
        if self.blob_radius <= 0 or self.scene_extent <= self.blob_radius:
            raise ValidationError("blob_radius must be positive and inside the scene")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValidationError("class_names length must equal n_classes")
        if self.n_viewpoints < 0 or (self.n_viewpoints and self.samples_per_ray < 1):
            raise ValidationError("invalid ray configuration")
        if self.n_viewpoints and not 0 < self.near < self.far:
            raise ValidationError("need 0 < near < far")

    @property
    def effective_query_margin(self) -> float:
        return self.margin if self.query_margin is None else self.query_margin

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def pairwise_cosine(centroids: np.ndarray) -> np.ndarray:
    c = _unit(np.asarray(centroids, dtype=np.float64))
    return c @ c.T


def _check_margin(centroids: np.ndarray, margin: float, what: str):
    if centroids.shape[0] < 2:
        return
    cos = pairwise_cosine(centroids)
    off = cos[~np.eye(len(cos), dtype=bool)]
    if off.max() > margin:
        raise ValidationError(
            f"{what} centroid separation below margin: max pairwise cosine "
            f"{off.max():.4f} > {margin}")


def _draw_centroids(rng, n: int, d: int, margin: float, what: str,
                    attempts: int = 1000) -> np.ndarray:
    if margin <= 0.0 and n <= d:
        # Orthonormal rows: every pairwise cosine is 0.
        q, _ = np.linalg.qr(rng.standard_normal((d, n)))
        return q.T.copy()
    for _ in range(attempts):
        c = _unit(rng.standard_normal((n, d)))
        if n < 2 or pairwise_cosine(c)[~np.eye(n, dtype=bool)].max() <= margin:
            return c
    raise ValidationError(f"could not draw {n} {what} centroids in {d} dims "
                          f"with pairwise cosine <= {margin}")


def _place_blobs(rng, n: int, radius: float, extent: float, attempts: int = 10_000):
    lim = extent - radius
    centers = []
    for _ in range(attempts):
        if len(centers) == n:
            break
        c = rng.uniform(-lim, lim, 3)
        if all(np.linalg.norm(c - o) > 2.2 * radius for o in centers):
            centers.append(c)
    if len(centers) < n:
        raise ValidationError("blobs do not fit in the scene; reduce blob_radius")
    return np.array(centers)


def _noisy(rng, centroids: np.ndarray, labels: np.ndarray, noise: float) -> np.ndarray:
    d = centroids.shape[1]
    x = centroids[labels] + rng.standard_normal((labels.size, d)) * (noise / np.sqrt(d))
    return _unit(x)


def _ball(rng, n: int, radius: float) -> np.ndarray:
    v = _unit(rng.standard_normal((n, 3)))
    r = radius * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    return v * r[:, None]


def _classify_positions(pos: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    d = np.linalg.norm(pos[:, None, :] - centers[None, :, :], axis=-1)
    inside = d <= radius
    return np.where(inside.any(axis=1), inside.argmax(axis=1), -1)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def generate_synthetic_scene(spec: GeneratorSpec) -> FieldSet:
    """Generate a deterministic synthetic FieldSet from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.n_classes

    if spec.seg_centroids is not None:
        seg_c = _unit(np.asarray(spec.seg_centroids, dtype=np.float64))
        if seg_c.shape != (C, spec.d_seg):
            raise ValidationError("seg_centroids must have shape (n_classes, d_seg)")
        _check_margin(seg_c, spec.margin + 1e-9, "segmentation")
    else:
        seg_c = _draw_centroids(rng, C, spec.d_seg, spec.margin, "segmentation")
    if spec.query_centroids is not None:
        q_c = _unit(np.asarray(spec.query_centroids, dtype=np.float64))
        if q_c.shape != (C, spec.d_q):
            raise ValidationError("query_centroids must have shape (n_classes, d_q)")
        _check_margin(q_c, spec.effective_query_margin + 1e-9, "query")
    else:
        q_c = _draw_centroids(rng, C, spec.d_q, spec.effective_query_margin, "query")

    centers = _place_blobs(rng, C, spec.blob_radius, spec.scene_extent)
    names = list(spec.class_names) if spec.class_names else [f"class_{i}" for i in range(C)]
    catalog = ClassCatalog(tuple(CatalogClass(i, names[i], q_c[i]) for i in range(C)))
    metadata = {"seed": int(spec.seed), "generator": spec.to_dict()}
    metadata["generator"]["blob_centers"] = centers.tolist()
    metadata["generator"]["seg_centroids"] = seg_c.tolist()
    metadata["generator"]["query_centroids"] = q_c.tolist()

    if spec.n_viewpoints:
        return _ray_scene(spec, rng, seg_c, q_c, centers, catalog, metadata)

    n_free = int(round(spec.n_samples * spec.free_fraction))
    n_in = spec.n_samples - n_free
    labels_in = np.arange(n_in) % C
    pos_in = centers[labels_in] + _ball(rng, n_in, spec.blob_radius)
    ext = spec.scene_extent
    pos_free = np.empty((0, 3))
    while pos_free.shape[0] < n_free:
        cand = rng.uniform(-ext, ext, (2 * (n_free - pos_free.shape[0]) + 8, 3))
        cand = cand[_classify_positions(cand, centers, spec.blob_radius) < 0]
        pos_free = np.concatenate([pos_free, cand])[:n_free]

    labels = np.concatenate([labels_in, np.full(n_free, -1)])
    positions = np.concatenate([pos_in, pos_free])
    seg = np.concatenate([_noisy(rng, seg_c, labels_in, spec.noise),
                          _unit(rng.standard_normal((n_free, spec.d_seg)))])
    query = np.concatenate([_noisy(rng, q_c, labels_in, spec.noise),
                            _unit(rng.standard_normal((n_free, spec.d_q)))])
    sigma = np.where(labels >= 0, spec.blob_sigma, spec.free_sigma)
    order = rng.permutation(spec.n_samples)
    return FieldSet(
        positions=positions[order].astype(np.float32),
        sigma=sigma[order].astype(np.float32),
        seg=seg[order].astype(np.float32),
        query=query[order].astype(np.float32),
        labels=labels[order].astype(np.int32),
        catalog=catalog,
        metadata=metadata,
    )


def _ray_scene(spec, rng, seg_c, q_c, centers, catalog, metadata) -> FieldSet:
    cams = _fibonacci_sphere(spec.n_viewpoints) * spec.camera_distance
    S = spec.samples_per_ray
    edges = np.linspace(spec.near, spec.far, S + 1)
    positions, labels, rays, views = [], [], [], []
    n = 0
    for cam in cams:
        ids = []
        # Aim most rays at blobs so the surfaces are well covered.
        aim_blob = rng.uniform(size=spec.rays_per_view) < 0.8
        targets = np.where(
            aim_blob[:, None],
            centers[rng.integers(0, len(centers), spec.rays_per_view)]
            + _ball(rng, spec.rays_per_view, spec.blob_radius),
            rng.uniform(-spec.scene_extent, spec.scene_extent, (spec.rays_per_view, 3)),
        )
        for t in targets:
            d = _unit(t - cam)
            depth = edges[:-1] + rng.uniform(0.05, 0.95, S) * np.diff(edges)
            deltas = np.diff(np.append(depth, spec.far + (depth[-1] - depth[-2] if S > 1 else 1.0)))
            p = cam + depth[:, None] * d
            positions.append(p)
            labels.append(_classify_positions(p, centers, spec.blob_radius))
            rays.append(RayIndex(cam.astype(np.float32), d.astype(np.float32),
                                 np.arange(n, n + S, dtype=np.int64), deltas.astype(np.float32)))
            ids.append(len(rays) - 1)
            n += S
        views.append(Viewpoint(cam.astype(np.float32), np.asarray(ids, np.int64)))
    positions = np.concatenate(positions)
    labels = np.concatenate(labels)
    inside = labels >= 0
    seg = _unit(rng.standard_normal((n, spec.d_seg)))
    query = _unit(rng.standard_normal((n, spec.d_q)))
    seg[inside] = _noisy(rng, seg_c, labels[inside], spec.noise)
    query[inside] = _noisy(rng, q_c, labels[inside], spec.noise)
    sigma = np.where(inside, spec.blob_sigma, spec.free_sigma)
    return FieldSet(
        positions=positions.astype(np.float32),
        sigma=sigma.astype(np.float32),
        seg=seg.astype(np.float32),
        query=query.astype(np.float32),
        labels=labels.astype(np.int32),
        rays=tuple(rays),
        viewpoints=tuple(views),
        catalog=catalog,
        metadata=metadata,
    )
