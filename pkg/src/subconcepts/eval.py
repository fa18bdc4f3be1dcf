"""Point-cloud classification, matching regimes and segmentation metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .exceptions import StructuralError, ValidationError
from .fieldset import FieldSet
from .projector import ProjectorParams, project
from .prototypes import PrototypeBank, assign, cosine_matrix

UNLABELED = -1
# Prediction label for points held by irrelevant prototypes.
IRRELEVANT = -2
# Unmatched relevant prototype ``p`` is labeled ``UNMATCHED_BASE - p``.
UNMATCHED_BASE = -100


@dataclass
class SegmentationResult:
    points: np.ndarray
    D_agg: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    sample_indices: Optional[np.ndarray] = None
    matched_ids: dict = field(default_factory=dict)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_distributions(cls, points, D, sample_indices=None):
        D = np.asarray(D, dtype=np.float64)
        mass = D.sum(axis=1)
        covered = mass > 0
        D_agg = np.zeros_like(D)
        D_agg[covered] = D[covered] / mass[covered, None]
        labels = np.where(covered, D_agg.argmax(axis=1), UNLABELED)
        confidence = np.where(covered, D_agg.max(axis=1), 0.0)
        return cls(np.asarray(points, dtype=np.float64), D_agg, labels, confidence,
                   sample_indices)


def sample_distributions(fieldset: FieldSet, params: ProjectorParams, bank: PrototypeBank,
                         indices=None, chunk=65536) -> np.ndarray:
    """Evaluation-mode class distributions for the given samples."""
    idx = np.arange(fieldset.n_samples) if indices is None else np.asarray(indices)
    out = np.empty((idx.size, bank.n_prototypes))
    for s in range(0, idx.size, chunk):
        sl = idx[s:s + chunk]
        out[s:s + chunk] = assign(bank, project(params, fieldset.seg[sl])).D
    return out


def default_points(fieldset: FieldSet, mode="direct", weight_floor=0.5) -> np.ndarray:
    """Indices of the samples used as the evaluation point cloud.

    Direct mode uses every sample with ground truth (or every sample with
    weight above ``weight_floor`` when no labels exist); render mode uses
    dense surface samples, i.e. labeled samples with ray weight >= floor.
    """
    w = fieldset.sample_weights()
    if fieldset.labels is None:
        return np.nonzero(w >= weight_floor)[0]
    labeled = fieldset.labels >= 0
    if mode == "render":
        return np.nonzero(labeled & (w >= weight_floor))[0]
    return np.nonzero(labeled)[0]


def render_rays(fieldset: FieldSet, ray_ids, sample_D, hit_floor=0.5):
    """Composite per-sample distributions along rays.

    Returns ``(pixel_D, hit_points, hit)`` where ``pixel_D = sum_i w_i D_i``
    and ``hit_points`` are the weight-averaged sample positions; rays whose
    accumulated weight is below ``hit_floor`` are marked as misses.
    """
    n_proto = sample_D.shape[1]
    pixel_D = np.zeros((len(ray_ids), n_proto))
    hit_points = np.zeros((len(ray_ids), 3))
    hit = np.zeros(len(ray_ids), bool)
    for row, j in enumerate(ray_ids):
        r = fieldset.rays[j]
        w = fieldset.ray_weights(j)
        pixel_D[row] = w @ sample_D[r.indices]
        total = w.sum()
        if total >= hit_floor:
            hit[row] = True
            hit_points[row] = w @ fieldset.positions[r.indices].astype(np.float64) / total
    return pixel_D, hit_points, hit


def aggregate_views(n_points, n_proto, per_view):
    """Average back-projected pixel distributions, per view then across views.

    ``per_view`` yields ``(point_ids, pixel_D)`` pairs, one per viewpoint.
    Points never hit keep a zero row.
    """
    total = np.zeros((n_points, n_proto))
    views = np.zeros(n_points)
    for point_ids, pixel_D in per_view:
        point_ids = np.asarray(point_ids, dtype=np.int64)
        if point_ids.size == 0:
            continue
        acc = np.zeros((n_points, n_proto))
        cnt = np.bincount(point_ids, minlength=n_points).astype(np.float64)
        np.add.at(acc, point_ids, pixel_D)
        seen = cnt > 0
        total[seen] += acc[seen] / cnt[seen, None]
        views += seen
    covered = views > 0
    total[covered] /= views[covered, None]
    return total


def classify_points(fieldset: FieldSet, params: ProjectorParams, bank: PrototypeBank,
                    points=None, mode="direct", radius=0.05) -> SegmentationResult:
    """Classify a point cloud.

    ``points`` are sample indices (default: :func:`default_points`). In
    ``direct`` mode each point takes its own sample's distribution. In
    ``render`` mode each viewpoint renders its rays, every hit is
    back-projected to the nearest point within ``radius``, and distributions
    are averaged over views; points no ray reaches stay unlabeled.
    """
    idx = default_points(fieldset, mode) if points is None else np.asarray(points, np.int64)
    positions = fieldset.positions[idx].astype(np.float64)
    if mode == "direct":
        D = sample_distributions(fieldset, params, bank, idx)
        return SegmentationResult.from_distributions(positions, D, idx)
    if mode != "render":
        raise ValidationError(f"unknown classification mode {mode!r}")
    if not fieldset.viewpoints:
        raise StructuralError("render mode needs a fieldset with viewpoints")
    sample_D = sample_distributions(fieldset, params, bank)
    tree = cKDTree(positions)

    def views():
        for vp in fieldset.viewpoints:
            pixel_D, hits, hit = render_rays(fieldset, vp.ray_ids, sample_D)
            if not hit.any():
                yield np.zeros(0, np.int64), np.zeros((0, bank.n_prototypes))
                continue
            dist, nearest = tree.query(hits[hit], distance_upper_bound=radius)
            ok = np.isfinite(dist)
            yield nearest[ok], pixel_D[hit][ok]

    D = aggregate_views(idx.size, bank.n_prototypes, views())
    return SegmentationResult.from_distributions(positions, D, idx)


# -- matching -----------------------------------------------------------------

def iou_matrix(pred, gt, pred_ids, gt_ids) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    out = np.zeros((len(pred_ids), len(gt_ids)))
    for a, p in enumerate(pred_ids):
        pm = pred == p
        for b, g in enumerate(gt_ids):
            gm = gt == g
            union = np.count_nonzero(pm | gm)
            if union:
                out[a, b] = np.count_nonzero(pm & gm) / union
    return out


def match_hungarian(pred, gt, pred_ids, gt_ids):
    """One-to-one prototype->class assignment maximizing total IoU.

    Pairs with zero IoU are left unmatched. Returns ``(mapping, iou)``.
    """
    pred_ids, gt_ids = list(pred_ids), list(gt_ids)
    iou = iou_matrix(pred, gt, pred_ids, gt_ids)
    if iou.size == 0:
        return {}, iou
    rows, cols = linear_sum_assignment(iou, maximize=True)
    mapping = {int(pred_ids[r]): int(gt_ids[c]) for r, c in zip(rows, cols) if iou[r, c] > 0}
    return mapping, iou


def match_clip(bank: PrototypeBank, catalog_centroids, prototypes=None):
    """Nearest catalog class per prototype by query-space cosine (many-to-one).

    Prototypes with an all-zero query-space embedding are skipped.
    """
    centroids = np.asarray(catalog_centroids, dtype=np.float64)
    protos = range(bank.n_rel) if prototypes is None else prototypes
    populated = bank.clip_populated
    mapping = {}
    if centroids.size == 0:
        return mapping
    sim = cosine_matrix(bank.clip_protos, centroids)
    for p in protos:
        if populated[p]:
            mapping[int(p)] = int(np.argmax(sim[p]))
    return mapping


# -- metrics ------------------------------------------------------------------

@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    matched_iou: dict


def panoptic_quality(pred_masks: dict, gt_masks: dict, matching=None) -> PQResult:
    """Panoptic quality with sub-concepts in place of instances.

    ``matching`` lists candidate ``(pred_key, gt_key)`` pairs; by default
    every pair is a candidate. A candidate is a true positive when its IoU
    exceeds 0.5. Unmatched predictions are false positives, unmatched
    ground-truth masks false negatives.
    """
    if matching is None:
        matching = [(p, g) for p in pred_masks for g in gt_masks]
    tp_iou = {}
    used_p, used_g = set(), set()
    for p, g in matching:
        if p in used_p or g in used_g or p not in pred_masks or g not in gt_masks:
            continue
        pm, gm = pred_masks[p], gt_masks[g]
        union = np.count_nonzero(pm | gm)
        iou = np.count_nonzero(pm & gm) / union if union else 0.0
        if iou > 0.5:
            tp_iou[(p, g)] = iou
            used_p.add(p)
            used_g.add(g)
    tp = len(tp_iou)
    fp = len(pred_masks) - tp
    fn = len(gt_masks) - tp
    if tp == 0:
        return PQResult(0.0, 0.0, 0.0, 0, fp, fn, {})
    sq = sum(tp_iou.values()) / tp
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return PQResult(sq * rq, sq, rq, tp, fp, fn, tp_iou)


def segmentation_metrics(pred, gt, classes, include_irrelevant=False, irrelevant=IRRELEVANT):
    """Class-averaged IoU and accuracy over ``classes`` present in ``gt``.

    With ``include_irrelevant`` the ``irrelevant`` label joins the average
    as one more class. Returns ``(mIoU, mAcc, table)``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    classes = list(classes) + ([irrelevant] if include_irrelevant else [])
    table = {}
    for c in classes:
        gm = gt == c
        n_gt = np.count_nonzero(gm)
        if n_gt == 0:
            continue
        pm = pred == c
        inter = np.count_nonzero(pm & gm)
        table[int(c)] = {"iou": inter / np.count_nonzero(pm | gm), "acc": inter / n_gt,
                         "n_gt": int(n_gt)}
    if not table:
        return 0.0, 0.0, table
    miou = float(np.mean([v["iou"] for v in table.values()]))
    macc = float(np.mean([v["acc"] for v in table.values()]))
    return miou, macc, table


@dataclass
class MetricReport:
    PQ: float
    SQ: float
    RQ: float
    mIoU_rel: float
    mAcc_rel: float
    mIoU_all: float
    mAcc_all: float
    TP: int
    FP: int
    FN: int
    per_class: dict
    mapping: dict
    regime: str
    used_prototypes: int

    def to_dict(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["mapping"] = {str(k): v for k, v in self.mapping.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def used_prototypes(labels, n_rel, min_share=0.005):
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        return []
    counts = np.bincount(labels[labels >= 0], minlength=n_rel)[:n_rel]
    return [int(p) for p in range(n_rel) if counts[p] >= min_share * n]


def count_used_prototypes(bank: PrototypeBank, result: SegmentationResult,
                          min_share=0.005) -> int:
    """Relevant prototypes holding at least ``min_share`` of the classified points."""
    return len(used_prototypes(result.labels, bank.n_rel, min_share))


def evaluate(result: SegmentationResult, gt_labels, bank: PrototypeBank, regime="hungarian",
             catalog_centroids=None, targets=None, min_share=0.005) -> MetricReport:
    """Score a segmentation against ground truth.

    ``targets`` are the ground-truth sub-concept ids (default: every class
    present). Relevant prototypes holding at least ``min_share`` of the points
    are matched to classes by ``regime``; irrelevant prototypes predict the
    irrelevant class.
    """
    gt_raw = np.asarray(gt_labels)
    if gt_raw.shape != result.labels.shape:
        raise StructuralError("ground truth must have one label per point")
    keep = gt_raw >= 0
    gt_raw = gt_raw[keep]
    labels = result.labels[keep]
    if targets is None:
        targets = sorted(int(c) for c in np.unique(gt_raw))
    targets = [int(t) for t in targets]
    gt = np.where(np.isin(gt_raw, targets), gt_raw, IRRELEVANT)
    n_rel = bank.n_rel
    used = used_prototypes(labels, n_rel, min_share)

    if regime == "hungarian":
        mapping, _ = match_hungarian(labels, gt, used, targets)
    elif regime == "clip":
        if catalog_centroids is None:
            raise ValidationError("clip matching needs catalog centroids")
        mapping = match_clip(bank, catalog_centroids, used)
    else:
        raise ValidationError(f"unknown matching regime {regime!r}")

    pred = np.full(labels.shape, UNLABELED, dtype=np.int64)
    rel = (labels >= 0) & (labels < n_rel)
    pred[(labels >= n_rel)] = IRRELEVANT
    for p in np.unique(labels[rel]):
        pred[labels == p] = mapping.get(int(p), UNMATCHED_BASE - int(p))

    pred_masks = {}
    for c in sorted(set(mapping.values())):
        pred_masks[("class", c)] = pred == c
    for p in used:
        if p not in mapping:
            pred_masks[("proto", p)] = pred == UNMATCHED_BASE - p
    gt_masks = {("class", c): gt == c for c in targets if np.any(gt == c)}
    pq = panoptic_quality(pred_masks, gt_masks,
                          [(k, k) for k in pred_masks if k in gt_masks])

    miou_rel, macc_rel, table = segmentation_metrics(pred, gt, targets)
    miou_all, macc_all, table_all = segmentation_metrics(pred, gt, targets, True)
    table = {**table_all, **table}
    return MetricReport(pq.pq, pq.sq, pq.rq, miou_rel, macc_rel, miou_all, macc_all,
                        pq.tp, pq.fp, pq.fn, table, mapping, regime, len(used))


# -- export -------------------------------------------------------------------

def export_confidence(result: SegmentationResult, path, fmt=None):
    """Write ``x,y,z,label,confidence`` per point as CSV or ASCII PLY."""
    path = Path(path)
    fmt = fmt or ("ply" if path.suffix.lower() == ".ply" else "csv")
    pts = result.points.astype(np.float32)
    conf = result.confidence.astype(np.float32)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "label", "confidence"])
            for p, lab, c in zip(pts, result.labels, conf):
                w.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", int(lab), f"{c:.9g}"])
    elif fmt == "ply":
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(pts)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property int label\nproperty float confidence\nend_header\n")
            for p, lab, c in zip(pts, result.labels, conf):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {int(lab)} {c:.9g}\n")
    else:
        raise ValidationError(f"unknown export format {fmt!r}")


def read_confidence_csv(path):
    """Inverse of the CSV export: ``(points, labels, confidence)`` as float32/int."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return (data[:, :3].astype(np.float32), data[:, 3].astype(np.int64),
            data[:, 4].astype(np.float32))
