"""Epoch loop: batch sampling, projector optimization and prototype EMA."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import FormatError, NumericalError, StructuralError, ValidationError
from .fieldset import FieldSet
from .io import atomic_write
from .guidance import PROJ_SCOPES, LossWeights, Query, QuerySet, make_pairs, relevance_mask, total_loss
from .projector import OptimizerState, ProjectorParams, adam_step, backward, lr_at, project
from .prototypes import PrototypeBank, assign, ema_update, schedule_beta

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCK1"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    epochs: int = 200
    batch_size: int = 4096
    n_rel: int = 10
    n_irr: int = 3
    alpha: float = 0.998
    beta_start: float = 0.5
    beta_end: float = 0.1
    w_proj: float = 20.0
    w_irr: float = 1.0
    w_proto: float = 0.5
    b: float = 0.5
    conf_floor: float = 0.2
    weight_floor: float = 0.2
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    dropout: float = 0.2
    init: str = "kmeans++"
    init_weight_floor: float = 0.5
    ema_eval_mode: bool = False
    proj_scope: str = "relevant"
    min_share: float = 0.005
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (pairs need two samples)")
        if self.n_rel < 0 or self.n_irr < 0 or self.n_rel + self.n_irr < 1:
            raise ValidationError("need at least one prototype")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if min(self.beta_start, self.beta_end, self.lr_start, self.lr_end) <= 0:
            raise ValidationError("schedule endpoints must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.init not in ("random", "kmeans++"):
            raise ValidationError(f"unknown prototype init {self.init!r}")
        if self.proj_scope not in PROJ_SCOPES:
            raise ValidationError(f"proj_scope must be one of {PROJ_SCOPES}")
        LossWeights(self.w_proj, self.w_irr, self.w_proto, self.b)

    @property
    def loss_weights(self):
        return LossWeights(self.w_proj, self.w_irr, self.w_proto, self.b)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleBatch:
    indices: np.ndarray
    seg: np.ndarray
    query: np.ndarray
    weights: np.ndarray


def sample_batch(fieldset: FieldSet, batch_size: int, rng) -> SampleBatch:
    """Draw a training batch.

    Ray fieldsets pool whole rays (in random order, truncated to
    ``batch_size``) with their compositing weights; ray-free fieldsets draw
    samples uniformly.
    """
    n = fieldset.n_samples
    if n == 0:
        raise ValidationError("cannot sample from an empty fieldset")
    rng = np.random.default_rng(rng)
    weights = fieldset.sample_weights()
    if fieldset.has_rays:
        picked, total = [], 0
        while total < batch_size:
            for j in rng.permutation(len(fieldset.rays)):
                idx = fieldset.rays[j].indices
                picked.append(idx)
                total += idx.size
                if total >= batch_size:
                    break
            else:
                if total == 0:
                    break
        idx = np.concatenate(picked)[:batch_size]
    else:
        idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return SampleBatch(idx, fieldset.seg[idx].astype(np.float64),
                       fieldset.query[idx].astype(np.float64), weights[idx])


@dataclass
class EpochRecord:
    epoch: int
    l_proj: float
    l_irr: float
    l_proto: float
    total: float
    beta: float
    lr: float
    used_prototypes: int
    ms: float = 0.0


@dataclass
class TrainTelemetry:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(EpochRecord)]
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                        else getattr(r, k) for k in names])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def count_used_prototypes(labels, n_rel, min_share=0.005) -> int:
    """Relevant prototypes holding at least ``min_share`` of the labeled points."""
    labels = np.asarray(labels)
    labels = labels[labels >= 0]
    if labels.size == 0 or n_rel == 0:
        return 0
    counts = np.bincount(labels, minlength=n_rel)[:n_rel]
    return int(np.sum(counts >= min_share * labels.size))


def _kmeanspp(rng, feats, k):
    unit = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    chosen = [int(rng.integers(len(unit)))]
    dist = 1.0 - unit @ unit[chosen[0]]
    for _ in range(1, k):
        d2 = np.clip(dist, 0.0, None) ** 2
        if d2.sum() <= 0:
            chosen.append(int(rng.integers(len(unit))))
        else:
            chosen.append(int(rng.choice(len(unit), p=d2 / d2.sum())))
        dist = np.minimum(dist, 1.0 - unit @ unit[chosen[-1]])
    return np.array(chosen)


def _pick(rng, feats, k, method):
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if method == "kmeans++":
        return _kmeanspp(rng, feats, k)
    return rng.choice(len(feats), size=k, replace=k > len(feats))


def init_prototypes(fieldset, params, queryset, config, rng, pool_size=4096) -> PrototypeBank:
    """Seed prototypes from projected features of high-density samples.

    With queries, the relevant block is drawn from samples inside some
    relevance mask and the irrelevant block from the rest (falling back to
    all candidates when a side is empty).
    """
    w = fieldset.sample_weights()
    cand = np.nonzero(w >= config.init_weight_floor)[0]
    n_total = config.n_rel + config.n_irr
    if cand.size < n_total:
        cand = np.argsort(-w, kind="stable")[:max(n_total, 1)]
    if cand.size > pool_size:
        cand = np.sort(rng.choice(cand, size=pool_size, replace=False))
    f_proj = project(params, fieldset.seg[cand])
    if len(queryset) and config.n_irr:
        qf = fieldset.query[cand].astype(np.float64)
        relevant = np.zeros(cand.size, bool)
        for q in queryset:
            relevant |= relevance_mask(q, qf)
        groups = [(np.nonzero(relevant)[0], config.n_rel), (np.nonzero(~relevant)[0], config.n_irr)]
        picks = []
        for members, k in groups:
            members = members if members.size else np.arange(cand.size)
            picks.append(members[_pick(rng, f_proj[members], k, config.init)])
        chosen = np.concatenate(picks)
    else:
        chosen = _pick(rng, f_proj, n_total, config.init)
    return PrototypeBank.from_protos(f_proj[chosen], fieldset.d_q, config.n_rel, config.n_irr,
                                     config.alpha, config.beta_start)


@dataclass
class RunResult:
    params: ProjectorParams
    bank: PrototypeBank
    telemetry: TrainTelemetry
    config: RunConfig
    queryset: QuerySet

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self)


def run(fieldset: FieldSet, queryset: QuerySet | None, config: RunConfig,
        callback=None) -> RunResult:
    """Train the projector and prototypes on ``fieldset``.

    ``callback(epoch, params, bank, record)`` is called after every epoch.
    """
    config.validate()
    if not (np.all(np.isfinite(fieldset.seg)) and np.all(np.isfinite(fieldset.query))):
        raise StructuralError("fieldset features contain NaN or infinite values")
    queryset = queryset or QuerySet()
    queryset.validate(config.n_rel, fieldset.d_q)
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, proto_rng, batch_rng, drop_rng, pair_rng = (np.random.default_rng(s) for s in seeds)

    params = ProjectorParams.init(fieldset.d_seg, dropout_p=config.dropout, rng=init_rng)
    bank = init_prototypes(fieldset, params, queryset, config, proto_rng)
    opt = OptimizerState(config.lr_start, config.lr_end, max(config.epochs, 1))
    telemetry = TrainTelemetry()
    weights = config.loss_weights

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        bank.beta = schedule_beta(epoch, config.epochs, config.beta_start, config.beta_end)
        batch = sample_batch(fieldset, config.batch_size, batch_rng)
        f_proj, cache = project(params, batch.seg, training=True, rng=drop_rng,
                                return_cache=True)
        assignment = assign(bank, f_proj)
        partner = make_pairs(len(batch.indices), pair_rng)
        try:
            losses, grad = total_loss(batch.seg, batch.query, f_proj, assignment, queryset,
                                      bank, weights, partner,
                                      proj_scope=config.proj_scope)
        except NumericalError as e:
            raise NumericalError(f"epoch {epoch}: {e}", epoch=epoch,
                                 breakdown=e.breakdown) from None
        grads, _ = backward(params, cache, grad)
        lr = lr_at(epoch, opt.total_epochs, opt.lr_start, opt.lr_end)
        try:
            params = adam_step(params, grads, opt, epoch=epoch)
        except NumericalError as e:
            raise NumericalError(f"epoch {epoch}: {e}", epoch=epoch,
                                 breakdown=losses.as_dict()) from None

        if config.ema_eval_mode:
            f_ema = project(params, batch.seg)
            a_ema = assign(bank, f_ema)
        else:
            f_ema, a_ema = f_proj, assignment
        bank = ema_update(bank, batch.weights, f_ema, batch.query, a_ema,
                          config.conf_floor, config.weight_floor)

        dense = batch.weights >= config.weight_floor
        used = count_used_prototypes(assignment.hard_labels[dense], config.n_rel or
                                     bank.n_prototypes, config.min_share)
        rec = EpochRecord(epoch, losses.l_proj, losses.l_irr, losses.l_proto, losses.total,
                          bank.beta, lr, used, (time.perf_counter() - t0) * 1e3)
        telemetry.records.append(rec)
        if callback is not None:
            callback(epoch, params, bank, rec)
        log.debug("epoch %d total=%.5f proj=%.5f irr=%.5f proto=%.5f beta=%.3f lr=%.2e",
                  epoch, rec.total, rec.l_proj, rec.l_irr, rec.l_proto, rec.beta, lr)

    return RunResult(params, bank, telemetry, config, queryset)


def _block(data: bytes) -> bytes:
    return struct.pack("<Q", len(data)) + data


def encode_checkpoint(result: RunResult) -> bytes:
    """Versioned checkpoint: header then four length-prefixed blocks.

    Blocks: projector params, prototype bank, JSON run config (with queries),
    JSON telemetry. Wall-clock timings are left out so that identical runs
    give identical bytes.
    """
    cfg = {"config": result.config.to_dict(),
           "queries": [q.to_dict() for q in result.queryset]}
    tel = [{k: v for k, v in asdict(r).items() if k != "ms"} for r in result.telemetry.records]
    return b"".join([
        CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
        _block(result.params.to_bytes()),
        _block(result.bank.to_bytes()),
        _block(json.dumps(cfg, sort_keys=True).encode()),
        _block(json.dumps(tel, sort_keys=True).encode()),
    ])


def decode_checkpoint(buf: bytes) -> RunResult:
    if len(buf) < 8 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 8
    blocks = []
    for what in ("projector", "prototypes", "config", "telemetry"):
        if pos + 8 > len(buf):
            raise FormatError(f"truncated checkpoint before {what} block", pos)
        (n,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + n > len(buf):
            raise FormatError(f"truncated {what} block", pos)
        blocks.append((pos, buf[pos:pos + n]))
        pos += n
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", pos)

    def sub(i, fn):
        start, data = blocks[i]
        try:
            return fn(data)
        except FormatError as e:
            raise FormatError(str(e).split(" (at")[0], start + (e.offset or 0)) from None
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"malformed block: {e}", start) from None

    params = sub(0, ProjectorParams.from_bytes)
    bank = sub(1, PrototypeBank.from_bytes)
    cfg = sub(2, json.loads)
    tel = sub(3, json.loads)
    config = sub(2, lambda _: RunConfig.from_dict(cfg["config"]))
    queries = QuerySet([
        Query(q["embedding"], q["prototypes"], q["tau"], q.get("name", ""), q.get("targets"))
        for q in cfg.get("queries", [])])
    telemetry = TrainTelemetry([EpochRecord(**r) for r in tel])
    return RunResult(params, bank, telemetry, config, queries)


def save_checkpoint(result: RunResult, path):
    atomic_write(Path(path), encode_checkpoint(result))


def load_checkpoint(path) -> RunResult:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
