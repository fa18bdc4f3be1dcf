"""Queries, relevance masks and the three training losses.

Each loss returns ``(value, dL/dD)``; :func:`total_loss` chains the weighted
sum through the assignment softmax to a gradient on the projected features.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import NumericalError, ValidationError
from .prototypes import AssignmentBatch, PrototypeBank, assign_backward, cosine_matrix

# Default relevance thresholds by query-feature family.
TAU_COSINE = 0.5
TAU_DENSE = 0.55


@dataclass
class Query:
    embedding: np.ndarray
    relevant_indices: Sequence[int]
    tau: float = TAU_COSINE
    name: str = ""
    # Catalog ids the query is known to cover (evaluation only).
    targets: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        self.relevant_indices = tuple(int(i) for i in self.relevant_indices)
        if not self.relevant_indices:
            raise ValidationError("a query needs at least one relevant prototype")
        if not -1.0 < self.tau < 1.0:
            raise ValidationError("tau must lie in (-1, 1)")

    def to_dict(self):
        return {"embedding": [float(x) for x in self.embedding],
                "prototypes": list(self.relevant_indices), "tau": float(self.tau),
                "name": self.name,
                "targets": None if self.targets is None else [int(t) for t in self.targets]}


@dataclass
class QuerySet:
    queries: list = field(default_factory=list)

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def validate(self, n_rel: int, d_q: int | None = None):
        for q in self.queries:
            if min(q.relevant_indices) < 0 or max(q.relevant_indices) >= n_rel:
                raise ValidationError(
                    f"query {q.name or ''} owns prototypes {q.relevant_indices} outside "
                    f"the relevant block 0..{n_rel - 1}")
            if d_q is not None and q.embedding.size != d_q:
                raise ValidationError(f"query embedding has dim {q.embedding.size}, "
                                      f"fieldset has {d_q}")

    def stacked_H(self, n_prototypes: int) -> np.ndarray:
        """Row ``i`` is the 0/1 ownership vector of query ``i``."""
        H = np.zeros((len(self.queries), n_prototypes))
        for i, q in enumerate(self.queries):
            H[i, list(q.relevant_indices)] = 1.0
        return H


def relevance_vector(query: Query, n_prototypes: int) -> np.ndarray:
    H = np.zeros(n_prototypes)
    H[list(query.relevant_indices)] = 1.0
    return H


def relevance_mask(query: Query, f_clip) -> np.ndarray:
    """``cos(q, f_clip_k) >= tau`` per sample; zero-norm features give cosine 0."""
    f_clip = np.asarray(f_clip, dtype=np.float64)
    if f_clip.shape[1] != query.embedding.size:
        raise ValidationError("query and query-feature dimensions differ")
    return cosine_matrix(f_clip, query.embedding[None, :])[:, 0] >= query.tau


@dataclass
class LossWeights:
    w_proj: float = 20.0
    w_irr: float = 1.0
    w_proto: float = 0.5
    b: float = 0.5

    def __post_init__(self):
        if min(self.w_proj, self.w_irr, self.w_proto) < 0:
            raise ValidationError("loss weights must be non-negative")


def make_pairs(n: int, rng) -> np.ndarray:
    """Partner index per sample: a random cyclic shift over a permutation.

    Gives ``n`` pairs with no self-pairs when ``n >= 2``.
    """
    rng = np.random.default_rng(rng)
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def pair_cosines(seg, partner) -> np.ndarray:
    """Cosine of raw segmentation features for each ``(k, partner[k])``."""
    seg = np.asarray(seg, dtype=np.float64)
    norms = np.linalg.norm(seg, axis=1)
    dots = np.einsum("ij,ij->i", seg, seg[partner])
    denom = norms * norms[partner]
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def loss_proj(D, partner, cos, b=0.5, rows=None):
    """Correlation loss ``mean (cos_kl - b)(1 - D_k . D_l)`` over the pairs.

    Pair ``k`` is ``(k, partner[k])`` with raw-feature cosine ``cos[k]``;
    ``rows`` restricts the loss to a subset of the pairs.
    """
    D = np.asarray(D, dtype=np.float64)
    cos = np.asarray(cos, dtype=np.float64)
    partner = np.asarray(partner)
    left = np.arange(len(partner)) if rows is None else np.asarray(rows, dtype=np.int64)
    n_pairs = left.size
    grad = np.zeros_like(D)
    if n_pairs == 0:
        return 0.0, grad
    right = partner[left]
    Dk, Dl = D[left], D[right]
    agree = np.einsum("ij,ij->i", Dk, Dl)
    c = cos[left] - b
    loss = float(np.mean(c * (1.0 - agree)))
    coef = (-c / n_pairs)[:, None]
    if np.unique(left).size == n_pairs and np.unique(right).size == n_pairs:
        grad[left] += coef * Dl
        grad[right] += coef * Dk
    else:
        np.add.at(grad, left, coef * Dl)
        np.add.at(grad, right, coef * Dk)
    return loss, grad


def loss_irr(D, mask, H):
    """Guidance loss for one query.

    Mean of ``D_k . H`` over samples outside the mask plus mean of
    ``1 - D_k . H`` over samples inside it; an empty side contributes 0.
    """
    D = np.asarray(D, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    H = np.asarray(H, dtype=np.float64)
    s = D @ H
    n_in = int(mask.sum())
    n_out = mask.size - n_in
    loss = 0.0
    coef = np.zeros(D.shape[0])
    if n_out:
        loss += float(s[~mask].sum() / n_out)
        coef[~mask] = 1.0 / n_out
    if n_in:
        loss += float((1.0 - s[mask]).sum() / n_in)
        coef[mask] = -1.0 / n_in
    return loss, coef[:, None] * H[None, :]


def proto_targets(f_clip, clip_protos) -> np.ndarray | None:
    """Index of the most similar populated query-space prototype per sample.

    Returns ``None`` when no query-space prototype is populated yet.
    """
    clip_protos = np.asarray(clip_protos, dtype=np.float64)
    populated = np.linalg.norm(clip_protos, axis=1) > 0
    if not populated.any():
        return None
    sim = cosine_matrix(f_clip, clip_protos)
    sim[:, ~populated] = -np.inf
    return sim.argmax(axis=1)


def loss_proto(D, f_clip, clip_protos):
    """Query-space regularizer ``mean_k (1 - D_k[h_k])``."""
    D = np.asarray(D, dtype=np.float64)
    grad = np.zeros_like(D)
    h = proto_targets(f_clip, clip_protos)
    if h is None or D.shape[0] == 0:
        return 0.0, grad
    rows = np.arange(D.shape[0])
    loss = float(np.mean(1.0 - D[rows, h]))
    grad[rows, h] = -1.0 / D.shape[0]
    return loss, grad


@dataclass
class LossBreakdown:
    l_proj: float = 0.0
    l_irr: float = 0.0
    l_proto: float = 0.0
    total: float = 0.0
    per_query: list = field(default_factory=list)

    def as_dict(self):
        return {"l_proj": self.l_proj, "l_irr": self.l_irr, "l_proto": self.l_proto,
                "total": self.total}


PROJ_SCOPES = ("all", "relevant")


def total_loss(seg, f_clip, f_proj, assignment: AssignmentBatch, queryset: QuerySet,
               bank: PrototypeBank, weights: LossWeights, partner, masks=None,
               proj_scope="relevant"):
    """Weighted loss and its gradient with respect to ``f_proj``.

    ``partner`` fixes the pairs of the correlation loss; ``masks`` (one
    boolean array per query) default to thresholding ``f_clip``. With
    ``proj_scope="relevant"`` and at least one query, the correlation loss
    only sees pairs whose two samples are relevant to some query.
    Returns ``(LossBreakdown, grad_f_proj)``.
    """
    if proj_scope not in PROJ_SCOPES:
        raise ValidationError(f"proj_scope must be one of {PROJ_SCOPES}")
    D = assignment.D
    grad_D = np.zeros_like(D)
    out = LossBreakdown()
    if len(queryset) and masks is None:
        masks = [relevance_mask(q, f_clip) for q in queryset]

    if weights.w_proj:
        cos = pair_cosines(seg, partner)
        rows = None
        if proj_scope == "relevant" and len(queryset):
            union = np.logical_or.reduce(masks)
            rows = np.nonzero(union & union[partner])[0]
        out.l_proj, g = loss_proj(D, partner, cos, weights.b, rows)
        grad_D += weights.w_proj * g
    if weights.w_irr and len(queryset):
        for i, q in enumerate(queryset):
            li, g = loss_irr(D, masks[i], relevance_vector(q, bank.n_prototypes))
            out.per_query.append(li)
            out.l_irr += li
            grad_D += weights.w_irr * g
    if weights.w_proto:
        out.l_proto, g = loss_proto(D, f_clip, bank.clip_protos)
        grad_D += weights.w_proto * g

    out.total = (weights.w_proj * out.l_proj + weights.w_irr * out.l_irr
                 + weights.w_proto * out.l_proto)
    for name in ("l_proj", "l_irr", "l_proto"):
        if not np.isfinite(getattr(out, name)):
            raise NumericalError(f"non-finite {name}", breakdown=out.as_dict())
    grad = assign_backward(bank, f_proj, assignment, grad_D)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient of the total loss", breakdown=out.as_dict())
    return out, grad
