"""Command-line entry point: ``gen``, ``run``, ``eval`` and ``export``.

Exit codes: 0 on success, 2 for input or validation errors, 3 for numerical
failures. ``DISCO_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .eval import classify_points, evaluate, export_confidence
from .exceptions import NumericalError, SubconceptError, ValidationError
from .fieldset import ClassCatalog
from .guidance import TAU_COSINE, Query, QuerySet
from .io import load_fieldset, save_fieldset, sidecar_path
from .synthetic import GeneratorSpec, generate_synthetic_scene
from .trainer import RunConfig, load_checkpoint, run, save_checkpoint

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("subconcepts")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MODES = ("uss", "ovsd", "ovseg")
MATCHING = ("hungarian", "clip")
RUN_FIELDS = {f.name for f in fields(RunConfig)}


@dataclass
class CliConfig:
    """Merged view of a TOML config file and command-line flags."""

    run: RunConfig = field(default_factory=RunConfig)
    mode: str = "uss"
    match: str = "hungarian"
    queries: str | None = None
    points: str = "direct"
    telemetry: str | None = None
    report: str | None = None
    export: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.match not in MATCHING:
            raise ValidationError(f"matching must be one of {MATCHING}")
        if self.points not in ("direct", "render"):
            raise ValidationError("points must be 'direct' or 'render'")
        if self.mode == "uss" and self.queries:
            raise ValidationError("uss mode takes no query file")
        if self.mode != "uss" and not self.queries:
            raise ValidationError(f"{self.mode} mode needs a query file")
        self.run.validate()


def load_config(path, overrides: dict) -> CliConfig:
    """Defaults, then the TOML file (top-level keys plus a ``[run]`` table), then flags."""
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ValidationError(f"bad config file {path}: {e}") from None
    run_doc = dict(doc.pop("run", {}))
    for k in list(doc):
        if k in RUN_FIELDS:
            run_doc[k] = doc.pop(k)
    cli_keys = {f.name for f in fields(CliConfig)} - {"run"}
    unknown = set(doc) - cli_keys
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in RUN_FIELDS:
            run_doc[k] = v
        else:
            doc[k] = v
    return CliConfig(run=RunConfig.from_dict(run_doc), **doc)


def _resolve_embedding(entry: dict, catalog: ClassCatalog):
    keys = [k for k in ("embedding", "class", "centroid-of") if k in entry]
    if len(keys) != 1:
        raise ValidationError("each query needs exactly one of embedding, class, centroid-of")
    key = keys[0]
    if key == "embedding":
        return np.asarray(entry["embedding"], dtype=np.float64), None
    if not len(catalog):
        raise ValidationError("catalog references need a field file with a catalog sidecar")
    if key == "class":
        c = catalog.lookup(entry["class"])
        return np.asarray(c.centroid, dtype=np.float64), [c.id]
    members = [catalog.lookup(k) for k in entry["centroid-of"]]
    if not members:
        raise ValidationError("centroid-of needs at least one class")
    emb = np.mean([np.asarray(c.centroid, dtype=np.float64) for c in members], axis=0)
    return emb, [c.id for c in members]


def load_queries(path, catalog: ClassCatalog, mode: str) -> tuple[QuerySet, int]:
    """Parse a query file and allocate prototype blocks.

    Each entry has one of ``embedding``, ``class`` (id or name) or
    ``centroid-of`` (list of ids or names), an optional ``tau`` and a
    ``prototypes`` block: an integer size (blocks are laid out one after
    another) or an explicit list of indices for shared blocks. Returns the
    query set and the resulting number of relevant prototypes.
    """
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"query file is not valid JSON: {e}") from None
    if not isinstance(entries, list) or not entries:
        raise ValidationError("query file must hold a non-empty JSON list")
    queries, next_free, n_rel = [], 0, 0
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ValidationError(f"query {i} is not an object")
        emb, targets = _resolve_embedding(entry, catalog)
        block = entry.get("prototypes", 1 if mode == "ovseg" else None)
        if block is None:
            raise ValidationError(f"query {i} needs a prototype block size")
        if isinstance(block, int) and not isinstance(block, bool):
            if block < 1:
                raise ValidationError(f"query {i} block size must be >= 1")
            idx = list(range(next_free, next_free + block))
            next_free += block
        elif isinstance(block, list) and block:
            idx = [int(b) for b in block]
        else:
            raise ValidationError(f"query {i} has a malformed prototype block")
        if mode == "ovseg" and len(idx) != 1:
            raise ValidationError("ovseg mode uses exactly one prototype per query")
        n_rel = max(n_rel, max(idx) + 1)
        tau = float(entry.get("tau", TAU_COSINE))
        if targets is None and len(catalog):
            sims = catalog.centroids @ emb / (
                np.linalg.norm(catalog.centroids, axis=1) * np.linalg.norm(emb) + 1e-300)
            targets = [int(j) for j in np.nonzero(sims >= tau)[0]]
        if "targets" in entry:
            targets = [catalog.lookup(t).id for t in entry["targets"]]
        queries.append(Query(emb, idx, tau, name=str(entry.get("name", f"q{i}")),
                             targets=targets))
    return QuerySet(queries), n_rel


def _targets(queryset: QuerySet):
    out = set()
    for q in queryset:
        if q.targets is None:
            return None
        out.update(q.targets)
    return sorted(out)


# -- commands -------------------------------------------------------------------

def _read_doc(path):
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"bad generator spec: {e}") from None
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"bad generator spec: {e}") from None


def cmd_gen(args) -> int:
    doc = _read_doc(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = GeneratorSpec.from_dict(doc)
    fs = generate_synthetic_scene(spec)
    save_fieldset(fs, args.out)
    print(f"wrote {fs.n_samples} samples to {args.out} and {sidecar_path(args.out)}")
    return EXIT_OK


def _config_from_args(args) -> CliConfig:
    overrides = {k: getattr(args, k, None) for k in
                 ("mode", "match", "queries", "epochs", "seed", "telemetry", "report",
                  "points")}
    overrides["export"] = getattr(args, "export_path", None)
    return load_config(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    fs = load_fieldset(args.field)
    queryset = QuerySet()
    if cfg.queries:
        queryset, n_rel = load_queries(cfg.queries, fs.catalog, cfg.mode)
        cfg.run.n_rel = n_rel
    if cfg.mode == "uss" and cfg.run.n_irr and "n_irr" not in _explicit_run_keys(args.config):
        cfg.run.n_irr = 0
    cfg.run.validate()

    def report(epoch, params, bank, rec):
        print(f"epoch {epoch:4d} total={rec.total:.6f} proj={rec.l_proj:.6f} "
              f"irr={rec.l_irr:.6f} proto={rec.l_proto:.6f} beta={rec.beta:.4f} "
              f"used={rec.used_prototypes}", flush=True)

    result = run(fs, queryset, cfg.run, callback=None if args.quiet else report)
    save_checkpoint(result, args.out)
    telemetry = cfg.telemetry or str(Path(args.out).with_suffix(".telemetry.csv"))
    result.telemetry.to_csv(telemetry)
    print(f"wrote checkpoint {args.out} and telemetry {telemetry}")
    return EXIT_OK


def _explicit_run_keys(path):
    if not path:
        return set()
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return set(doc.get("run", {})) | (set(doc) & RUN_FIELDS)


def _classify(args, cfg):
    result = load_checkpoint(args.checkpoint)
    fs = load_fieldset(args.field)
    seg = classify_points(fs, result.params, result.bank, mode=cfg.points)
    return result, fs, seg


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    result, fs, seg = _classify(args, cfg)
    if fs.labels is None or not np.any(fs.labels >= 0):
        raise ValidationError("evaluation needs ground-truth labels in the field file")
    gt = fs.labels[seg.sample_indices]
    targets = _targets(result.queryset) if len(result.queryset) else None
    if cfg.match == "clip" and not len(fs.catalog):
        raise ValidationError("clip matching needs a catalog sidecar")
    rep = evaluate(seg, gt, result.bank, cfg.match,
                   fs.catalog.centroids if len(fs.catalog) else None, targets,
                   result.config.min_share)
    out = cfg.report or args.out
    text = rep.to_json(out)
    if out is None:
        print(text)
    else:
        print(f"PQ={rep.PQ:.4f} SQ={rep.SQ:.4f} RQ={rep.RQ:.4f} mIoU={rep.mIoU_rel:.4f} "
              f"mAcc={rep.mAcc_rel:.4f}; wrote {out}")
    if cfg.export:
        export_confidence(seg, cfg.export)
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _config_from_args(args)
    _, _, seg = _classify(args, cfg)
    export_confidence(seg, args.out, args.format)
    print(f"wrote {len(seg)} points to {args.out}")
    return EXIT_OK


# -- plumbing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subconcepts",
                                description="Prototype-based sub-concept discovery.")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    g = sub.add_parser("gen", help="generate a synthetic field file")
    g.add_argument("spec", help="generator spec (TOML or JSON)")
    g.add_argument("out", help="output .dff path")
    common(g)

    r = sub.add_parser("run", help="train projector and prototypes")
    r.add_argument("field")
    r.add_argument("-o", "--out", required=True, help="checkpoint path")
    r.add_argument("-q", "--queries", help="query JSON file")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--epochs", type=int)
    r.add_argument("--telemetry", help="telemetry CSV path")
    r.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    common(r)

    e = sub.add_parser("eval", help="score a checkpoint against ground truth")
    e.add_argument("checkpoint")
    e.add_argument("field")
    e.add_argument("-o", "--out", help="MetricReport JSON path (default: stdout)")
    e.add_argument("--match", choices=MATCHING)
    e.add_argument("--points", choices=("direct", "render"))
    e.add_argument("--export", dest="export_path", help="also write a confidence export")
    common(e)

    x = sub.add_parser("export", help="write per-point labels and confidence")
    x.add_argument("checkpoint")
    x.add_argument("field")
    x.add_argument("-o", "--out", required=True, help=".csv or .ply path")
    x.add_argument("--format", choices=("csv", "ply"))
    x.add_argument("--points", choices=("direct", "render"))
    common(x)
    return p


def _setup_logging():
    level = os.environ.get("DISCO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {"gen": cmd_gen, "run": cmd_run, "eval": cmd_eval, "export": cmd_export}
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ValidationError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return commands[args.command](args)
        return commands[args.command](args)
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        if e.breakdown:
            print(f"loss breakdown: {json.dumps(e.breakdown)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SubconceptError, ValueError, OSError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
