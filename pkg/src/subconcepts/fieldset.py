"""In-memory data model for serialized feature fields.

A :class:`FieldSet` is a flat, struct-of-arrays store of 3D samples. Each
sample has a position, a density ``sigma``, a segmentation feature (the
spatially precise channel fed to the projector) and a query feature (the
channel compared against query embeddings). Samples may optionally be
grouped into rays, and rays into posed viewpoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import StructuralError, ValidationError

# Spacing used to turn a bare density into a weight when a sample does not
# belong to any ray.
DEFAULT_DELTA = 1.0


@dataclass(frozen=True)
class FieldSample:
    position: np.ndarray
    sigma: float
    seg_feature: np.ndarray
    query_feature: np.ndarray
    gt_label: Optional[int] = None


@dataclass(frozen=True)
class Ray:
    """A materialized ray: samples ordered by depth with their spacings."""

    origin: np.ndarray
    direction: np.ndarray
    depths: np.ndarray
    sigmas: np.ndarray
    deltas: np.ndarray

    def validate(self):
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.shape != (3,) or abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise StructuralError("ray direction must be a unit 3-vector")
        depths = np.asarray(self.depths, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        deltas = np.asarray(self.deltas, dtype=np.float64)
        if not (depths.shape == sigmas.shape == deltas.shape) or depths.ndim != 1:
            raise StructuralError("depths, sigmas and deltas must be 1-D of equal length")
        if depths.size > 1 and np.any(np.diff(depths) <= 0):
            raise StructuralError("ray sample depths must be strictly increasing")
        if np.any(deltas <= 0):
            raise StructuralError("ray deltas must be positive")
        if np.any(sigmas < 0) or not np.all(np.isfinite(sigmas)):
            raise StructuralError("ray densities must be finite and non-negative")


def transmittance(ray: Ray) -> np.ndarray:
    """Accumulated transmittance ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    ray.validate()
    tau = np.asarray(ray.sigmas, dtype=np.float64) * np.asarray(ray.deltas, dtype=np.float64)
    optical_depth = np.concatenate([[0.0], np.cumsum(tau)[:-1]])
    return np.exp(-optical_depth)


def compute_density_weights(ray: Ray) -> np.ndarray:
    """Volume-rendering weights ``w_i = T_i (1 - exp(-sigma_i delta_i))``."""
    t = transmittance(ray)
    tau = np.asarray(ray.sigmas, dtype=np.float64) * np.asarray(ray.deltas, dtype=np.float64)
    w = t * -np.expm1(-tau)
    # The exact sum is 1 - T_final; rounding can overshoot 1 by an ulp or two.
    total = w.sum()
    while total > 1.0:
        w *= np.nextafter(1.0 / total, 0.0)
        total = w.sum()
    return w


@dataclass(frozen=True)
class RayIndex:
    """A ray stored inside a FieldSet: sample indices plus spacings."""

    origin: np.ndarray
    direction: np.ndarray
    indices: np.ndarray
    deltas: np.ndarray


@dataclass(frozen=True)
class Viewpoint:
    """A posed camera: its center and the rays (pixels) cast from it."""

    position: np.ndarray
    ray_ids: np.ndarray


@dataclass(frozen=True)
class CatalogClass:
    id: int
    name: str
    centroid: np.ndarray


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple = ()

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValidationError("catalog ids must be unique and contiguous from 0")

    def __len__(self):
        return len(self.classes)

    @property
    def centroids(self) -> np.ndarray:
        if not self.classes:
            return np.zeros((0, 0))
        return np.stack([np.asarray(c.centroid, dtype=np.float64) for c in self.classes])

    @property
    def names(self):
        return [c.name for c in self.classes]

    def lookup(self, key) -> CatalogClass:
        if isinstance(key, (int, np.integer)):
            if 0 <= key < len(self.classes):
                return self.classes[key]
        else:
            for c in self.classes:
                if c.name == key:
                    return c
        raise ValidationError(f"unknown catalog class {key!r}")


@dataclass(frozen=True, eq=False)
class FieldSet:
    """Immutable container of field samples.

    Arrays are float32 so that binary round-trips are bit-exact. ``labels``
    uses -1 for samples without ground truth (free space).
    """

    positions: np.ndarray
    sigma: np.ndarray
    seg: np.ndarray
    query: np.ndarray
    labels: Optional[np.ndarray] = None
    rays: Optional[tuple] = None
    viewpoints: Optional[tuple] = None
    catalog: ClassCatalog = field(default_factory=ClassCatalog)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise StructuralError("positions must have shape (n, 3)")
        if self.sigma.shape != (n,):
            raise StructuralError("sigma must have shape (n,)")
        if self.seg.ndim != 2 or self.seg.shape[0] != n:
            raise StructuralError("seg features must have shape (n, d_seg)")
        if self.query.ndim != 2 or self.query.shape[0] != n:
            raise StructuralError("query features must have shape (n, d_q)")
        if np.any(self.sigma < 0):
            raise StructuralError("sigma must be non-negative")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise StructuralError("labels must have shape (n,)")
            valid = self.labels[self.labels >= 0]
            if len(self.catalog) and valid.size and valid.max() >= len(self.catalog):
                raise ValidationError("label id outside the class catalog")
        for ray in self.rays or ():
            if ray.indices.size and (ray.indices.min() < 0 or ray.indices.max() >= n):
                raise StructuralError("ray references an out-of-range sample")
            if ray.indices.shape != ray.deltas.shape:
                raise StructuralError("ray indices and deltas must have equal length")
        n_rays = len(self.rays or ())
        for vp in self.viewpoints or ():
            if vp.ray_ids.size and (vp.ray_ids.min() < 0 or vp.ray_ids.max() >= n_rays):
                raise StructuralError("viewpoint references an out-of-range ray")
        for arr in (self.positions, self.sigma, self.seg, self.query):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, seg, query=None, *, weights=None, positions=None,
                    labels=None, catalog=None, metadata=None):
        """Build a ray-free FieldSet from feature arrays.

        ``weights`` are density weights in [0, 1); they are stored as the
        equivalent density under :data:`DEFAULT_DELTA`.
        """
        seg = np.asarray(seg, dtype=np.float32)
        n = seg.shape[0]
        query = np.zeros((n, 0), np.float32) if query is None else np.asarray(query, np.float32)
        if weights is None:
            sigma = np.full(n, np.inf, np.float32)
        else:
            w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, 1.0)
            with np.errstate(divide="ignore"):
                sigma = (-np.log1p(-w) / DEFAULT_DELTA).astype(np.float32)
        sigma = np.where(np.isinf(sigma), np.float32(1e30), sigma).astype(np.float32)
        if positions is None:
            positions = np.zeros((n, 3), np.float32)
        return cls(
            positions=np.asarray(positions, np.float32),
            sigma=sigma,
            seg=seg,
            query=query,
            labels=None if labels is None else np.asarray(labels, np.int32),
            catalog=catalog or ClassCatalog(),
            metadata=dict(metadata or {}),
        )

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def d_seg(self) -> int:
        return self.seg.shape[1]

    @property
    def d_q(self) -> int:
        return self.query.shape[1]

    @property
    def has_rays(self) -> bool:
        return bool(self.rays)

    def sample(self, i: int) -> FieldSample:
        label = None
        if self.labels is not None and self.labels[i] >= 0:
            label = int(self.labels[i])
        return FieldSample(self.positions[i], float(self.sigma[i]), self.seg[i],
                           self.query[i], label)

    def ray(self, j: int) -> Ray:
        r = self.rays[j]
        pos = self.positions[r.indices].astype(np.float64)
        depths = (pos - np.asarray(r.origin, np.float64)) @ np.asarray(r.direction, np.float64)
        return Ray(
            origin=np.asarray(r.origin, np.float64),
            direction=np.asarray(r.direction, np.float64),
            depths=depths,
            sigmas=self.sigma[r.indices].astype(np.float64),
            deltas=np.asarray(r.deltas, np.float64),
        )

    def ray_weights(self, j: int) -> np.ndarray:
        return compute_density_weights(self.ray(j))

    def sample_weights(self) -> np.ndarray:
        """Per-sample density weights.

        Samples that belong to a ray take their compositing weight along that
        ray; all others use ``1 - exp(-sigma * DEFAULT_DELTA)``.
        """
        cached = self.__dict__.get("_weights")
        if cached is not None:
            return cached
        w = -np.expm1(-self.sigma.astype(np.float64) * DEFAULT_DELTA)
        for j, r in enumerate(self.rays or ()):
            w[r.indices] = self.ray_weights(j)
        w.setflags(write=False)
        object.__setattr__(self, "_weights", w)
        return w

    def equals(self, other: "FieldSet") -> bool:
        """Field-by-field, bit-exact equality."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        if not all(same(getattr(self, k), getattr(other, k))
                   for k in ("positions", "sigma", "seg", "query", "labels")):
            return False
        if len(self.rays or ()) != len(other.rays or ()):
            return False
        for a, b in zip(self.rays or (), other.rays or ()):
            if not all(same(np.asarray(getattr(a, k)), np.asarray(getattr(b, k)))
                       for k in ("origin", "direction", "indices", "deltas")):
                return False
        if len(self.viewpoints or ()) != len(other.viewpoints or ()):
            return False
        for a, b in zip(self.viewpoints or (), other.viewpoints or ()):
            if not (same(a.position, b.position) and same(a.ray_ids, b.ray_ids)):
                return False
        return True
