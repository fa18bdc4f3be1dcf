"""Prototype bank: sharpened cosine-softmax assignment and EMA updates."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, StructuralError, ValidationError


def safe_normalize(x):
    """Row-normalize ``x``; zero rows stay zero. Returns ``(unit, norms)``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return unit, norms


def cosine_matrix(a, b):
    """Cosine similarity between rows of ``a`` and rows of ``b`` (0 for zero rows)."""
    ua, _ = safe_normalize(a)
    ub, _ = safe_normalize(b)
    return ua @ ub.T


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PrototypeBank:
    """``N = n_rel + n_irr`` prototypes in projected space plus query-space twins.

    Indices ``0 .. n_rel-1`` are the relevant prototypes; the rest are the
    irrelevant block.
    """

    protos: np.ndarray
    clip_protos: np.ndarray
    n_rel: int
    n_irr: int = 0
    alpha: float = 0.998
    beta: float = 0.5

    def __post_init__(self):
        self.protos = np.asarray(self.protos, dtype=np.float64)
        self.clip_protos = np.asarray(self.clip_protos, dtype=np.float64)
        if self.n_rel < 0 or self.n_irr < 0 or self.n_rel + self.n_irr < 1:
            raise ValidationError("need n_rel + n_irr >= 1 prototypes")
        n = self.n_rel + self.n_irr
        if self.protos.ndim != 2 or self.protos.shape[0] != n:
            raise StructuralError(f"protos must have {n} rows")
        if self.clip_protos.ndim != 2 or self.clip_protos.shape[0] != n:
            raise StructuralError(f"clip_protos must have {n} rows")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")

    @classmethod
    def from_protos(cls, protos, d_q, n_rel, n_irr=0, alpha=0.998, beta=0.5):
        protos = np.asarray(protos, dtype=np.float64)
        return cls(protos.copy(), np.zeros((protos.shape[0], d_q)), n_rel, n_irr, alpha, beta)

    @property
    def n_prototypes(self):
        return self.n_rel + self.n_irr

    @property
    def dim(self):
        return self.protos.shape[1]

    @property
    def d_q(self):
        return self.clip_protos.shape[1]

    @property
    def clip_populated(self) -> np.ndarray:
        return np.linalg.norm(self.clip_protos, axis=1) > 0

    def copy(self):
        return PrototypeBank(self.protos.copy(), self.clip_protos.copy(), self.n_rel,
                             self.n_irr, self.alpha, self.beta)

    def to_bytes(self) -> bytes:
        head = struct.pack("<IIIIIff", self.n_prototypes, self.n_rel, self.n_irr,
                           self.dim, self.d_q, self.alpha, self.beta)
        return (head + np.ascontiguousarray(self.protos, "<f4").tobytes()
                + np.ascontiguousarray(self.clip_protos, "<f4").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PrototypeBank":
        size = struct.calcsize("<IIIIIff")
        if len(buf) < size:
            raise FormatError("prototype blob shorter than its header", 0)
        n, n_rel, n_irr, dim, d_q, alpha, beta = struct.unpack_from("<IIIIIff", buf, 0)
        if n != n_rel + n_irr:
            raise FormatError("prototype counts are inconsistent", 0)
        if len(buf) != size + 4 * n * (dim + d_q):
            raise FormatError("prototype blob has the wrong length", size)
        protos = np.frombuffer(buf, "<f4", n * dim, size).reshape(n, dim)
        clip = np.frombuffer(buf, "<f4", n * d_q, size + 4 * n * dim).reshape(n, d_q)
        return cls(protos.astype(np.float64), clip.astype(np.float64), n_rel, n_irr,
                   float(alpha), float(beta))


@dataclass
class AssignmentBatch:
    D: np.ndarray
    cos: np.ndarray

    @property
    def confidences(self):
        return self.D.max(axis=1)

    @property
    def hard_labels(self):
        # np.argmax returns the first maximum: ties go to the lowest index.
        return self.D.argmax(axis=1)


def assign(bank: PrototypeBank, f_proj) -> AssignmentBatch:
    """``D_k = softmax(cos(f_proj_k, P_i) / beta)`` over all prototypes."""
    f_proj = np.asarray(f_proj, dtype=np.float64)
    if f_proj.ndim != 2 or f_proj.shape[1] != bank.dim:
        raise StructuralError(f"expected projected features of dim {bank.dim}")
    cos = cosine_matrix(f_proj, bank.protos)
    return AssignmentBatch(softmax(cos / bank.beta), cos)


def assign_backward(bank: PrototypeBank, f_proj, assignment: AssignmentBatch, grad_D):
    """Chain ``dL/dD`` through the softmax and cosine to ``dL/df_proj``.

    Prototypes are constants here; no gradient is produced for them.
    """
    D = assignment.D
    grad_D = np.asarray(grad_D, dtype=np.float64)
    dz = D * (grad_D - np.sum(grad_D * D, axis=1, keepdims=True))
    dcos = dz / bank.beta
    unit_p, _ = safe_normalize(bank.protos)
    unit_f, norms = safe_normalize(f_proj)
    du = dcos @ unit_p
    radial = np.sum(du * unit_f, axis=1, keepdims=True)
    return np.divide(du - radial * unit_f, norms, out=np.zeros_like(du), where=norms > 0)


def contributor_mask(assignment: AssignmentBatch, weights, conf_floor=0.2, weight_floor=0.2):
    """Per-sample flag: does the sample take part in its class's EMA update."""
    D = assignment.D
    labels = assignment.hard_labels
    conf = D[np.arange(D.shape[0]), labels]
    return (conf >= conf_floor) & (np.asarray(weights) >= weight_floor)


def ema_update(bank: PrototypeBank, weights, f_proj, f_clip, assignment: AssignmentBatch,
               conf_floor=0.2, weight_floor=0.2) -> PrototypeBank:
    """Two-fold weighted EMA of both prototype sets; returns a new bank.

    Samples join the mean of their hard-labeled class when their confidence
    and density weight both clear the floors; classes without contributors
    are left untouched.
    """
    weights = np.asarray(weights, dtype=np.float64)
    f_proj = np.asarray(f_proj, dtype=np.float64)
    f_clip = np.asarray(f_clip, dtype=np.float64)
    labels = assignment.hard_labels
    keep = contributor_mask(assignment, weights, conf_floor, weight_floor)
    out = bank.copy()
    n = bank.n_prototypes
    rows = np.nonzero(keep)[0]
    coef = weights[rows] * assignment.D[rows, labels[rows]]
    onehot = np.zeros((rows.size, n))
    onehot[np.arange(rows.size), labels[rows]] = coef
    denom = onehot.sum(axis=0)
    num_p = onehot.T @ f_proj[rows]
    num_c = onehot.T @ f_clip[rows]
    a = bank.alpha
    for i in np.nonzero(denom > 0)[0]:
        out.protos[i] = a * bank.protos[i] + (1 - a) * num_p[i] / denom[i]
        out.clip_protos[i] = a * bank.clip_protos[i] + (1 - a) * num_c[i] / denom[i]
    return out


def schedule_beta(epoch, total_epochs, beta_start=0.5, beta_end=0.1):
    """Linear decay from ``beta_start`` (epoch 0) to ``beta_end`` (last epoch)."""
    if total_epochs < 1:
        raise ValidationError("total_epochs must be >= 1")
    if beta_end <= 0 or beta_start <= 0:
        raise ValidationError("beta endpoints must be positive")
    if total_epochs == 1:
        return float(beta_start)
    t = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    return float(beta_start + (beta_end - beta_start) * t)


@dataclass
class PrototypeMatch:
    prototype: int
    class_id: int | None
    similarity: float
    distribution: np.ndarray | None

    @property
    def unused(self):
        return self.class_id is None


def match_prototypes_to_catalog(bank: PrototypeBank, catalog_centroids, *, relevant_only=True,
                                temperature=100.0):
    """Nearest catalog class per prototype by query-space cosine.

    Also returns ``softmax(temperature * similarity)`` over classes. All-zero
    query-space prototypes are reported as unused.
    """
    centroids = np.asarray(catalog_centroids, dtype=np.float64)
    n = bank.n_rel if relevant_only and bank.n_rel > 0 else bank.n_prototypes
    sim = cosine_matrix(bank.clip_protos[:n], centroids)
    populated = bank.clip_populated[:n]
    out = []
    for i in range(n):
        if not populated[i] or centroids.shape[0] == 0:
            out.append(PrototypeMatch(i, None, 0.0, None))
            continue
        j = int(np.argmax(sim[i]))
        dist = softmax(temperature * sim[i][None, :])[0]
        out.append(PrototypeMatch(i, j, float(sim[i, j]), dist))
    return out
