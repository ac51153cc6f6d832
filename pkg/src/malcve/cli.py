"""Command-line entry point: ``malcve ingest | analyze | eval | deobfuscate``."""
from __future__ import annotations

import argparse
import difflib
import gzip
import json
import logging
import sys
import zipfile
from pathlib import Path

import httpx

from .clock import clock_from_env, parse_ts
from .config import Config
from .deobf import SourceUnit, fold_strings
from .embeddings import make_embedder
from .errors import ConfigError, MalcveError
from .evalharness import DEFAULT_KS, MissingTruth, build_table, compute_run, emit_table, load_truth, run_model_id
from .index import build_index
from .kb import KnowledgeBase
from .nvd import NvdClient
from .pipeline import (
    Journal,
    ManifestEntry,
    PipelineContext,
    RequestRateLimiter,
    SampleFetcher,
    load_reports,
    parse_manifest,
    run_batch,
)
from .pipeline.analysis import INDEX_DIR

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _emit(args, text: str, data) -> None:
    if args.json:
        sys.stdout.write(json.dumps(data, indent=2, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(text)


def _read_feed(source: str) -> dict:
    if source.startswith(("http://", "https://")):
        try:
            resp = httpx.get(source, timeout=120.0, follow_redirects=True)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise MalcveError(f"cannot fetch feed: {exc}") from None
        raw = resp.content
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"feed not found: {source}")
        raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalcveError(f"feed is not valid JSON: {exc}") from None


def cmd_ingest(args) -> int:
    cfg = Config.load(args.config)
    if args.embedder:
        provider = "remote" if args.embedder == "remote" else "local-deterministic"
        cfg = cfg.with_overrides(embedding={**cfg.raw["embedding"], "provider": provider})
    if not args.refresh and not args.feed:
        raise ConfigError("ingest needs --feed (or --refresh --since)")
    emb_cfg = cfg.embedding
    clock = clock_from_env()
    kb = KnowledgeBase.open(args.kb, emb_cfg.model_id, emb_cfg.dim, clock=clock)
    embedder = make_embedder(emb_cfg)
    if args.refresh:
        if not args.since:
            raise ConfigError("--refresh needs --since")
        client = NvdClient(base_url=args.feed) if args.feed else NvdClient()
        stats = kb.refresh(parse_ts(args.since), client, embedder)
    else:
        stats = kb.ingest_feed(_read_feed(args.feed), embedder)
    build_index(kb.snapshot(), cfg.index_engine, **cfg.index_params).save(Path(args.kb) / INDEX_DIR)
    m = kb.manifest
    text = (f"inserted {stats.inserted}  updated {stats.updated}  skipped {stats.skipped}\n"
            f"records {m.record_count}  model {m.embedding_model_id}  dim {m.embedding_dim}\n")
    _emit(args, text, {"stats": stats.as_dict(), "record_count": m.record_count})
    return EXIT_OK


def _entries(target: Path) -> list[ManifestEntry]:
    if not target.exists():
        raise ConfigError(f"no such file: {target}")
    if zipfile.is_zipfile(target):
        return [ManifestEntry("path", str(target))]
    return parse_manifest(target)


def cmd_analyze(args) -> int:
    cfg = Config.load(args.config)
    workers = args.workers or cfg.workers
    kb_dir = Path(args.kb)
    if not kb_dir.is_dir():
        raise ConfigError(f"knowledge base directory not found: {kb_dir}")
    entries = _entries(Path(args.target))
    out = Path(args.out)
    workdir = Path(args.workdir) if args.workdir else out / ".work"
    ctx = PipelineContext.build(cfg, kb_dir, workdir, clock=clock_from_env())
    fetcher = None
    dl = cfg.raw["download"]
    if dl.get("url_template"):
        fetcher = SampleFetcher(dl["url_template"], out / "downloads",
                                RequestRateLimiter(int(dl["requests_per_interval"]),
                                                   float(dl["interval_seconds"])),
                                auth_header=dl["auth_header"], auth_env=dl["auth_env"],
                                max_retries=int(dl["max_retries"]))
    journal = Journal(args.journal) if args.journal else Journal(None)
    summary = run_batch(entries, ctx, workers, out, fetcher, journal)
    _emit(args, summary.render(), summary.as_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ks = tuple(int(k) for k in args.k.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
    if not ks or any(k not in DEFAULT_KS for k in ks):
        raise ConfigError(f"--k values must come from {DEFAULT_KS}")
    truth = load_truth(args.truth)
    runs = []
    for directory in args.reports:
        if not Path(directory).is_dir():
            raise ConfigError(f"reports directory not found: {directory}")
        reports = load_reports(directory)
        runs.append((run_model_id(reports), compute_run(reports, truth, ks)))
    table = build_table(runs, ks)
    text, data = emit_table(table)
    Path(args.out).write_text(data, "utf-8")
    _emit(args, text, json.loads(data))
    return EXIT_OK


def cmd_deobfuscate(args) -> int:
    root = Path(args.path)
    if not root.exists():
        raise ConfigError(f"no such path: {root}")
    files = [root] if root.is_file() else sorted(root.rglob("*.java"))
    total = 0
    changed = []
    for f in files:
        rel = f.name if root.is_file() else f.relative_to(root).as_posix()
        before = f.read_text("utf-8")
        unit = fold_strings(SourceUnit(rel, before))
        total += unit.folded_count
        if unit.text == before:
            continue
        changed.append(rel)
        if args.dry_run:
            if not args.json:
                sys.stdout.writelines(difflib.unified_diff(
                    before.splitlines(keepends=True), unit.text.splitlines(keepends=True),
                    f"a/{rel}", f"b/{rel}"))
        else:
            f.write_text(unit.text, "utf-8")
    text = "" if args.dry_run else f"folded {total} expression(s) in {len(changed)} file(s)\n"
    if args.json or not args.dry_run:
        _emit(args, text, {"folded": total, "changed_files": changed, "dry_run": args.dry_run})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malcve", description="Map Java malware to known CVEs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help="JSON config file")

    p = sub.add_parser("ingest", parents=[common], help="build or refresh the CVE knowledge base")
    p.add_argument("--feed", help="NVD JSON feed file or URL (API base URL with --refresh)")
    p.add_argument("--kb", required=True, help="knowledge base directory")
    p.add_argument("--embedder", choices=("remote", "local"), help="override the configured embedder")
    p.add_argument("--refresh", action="store_true", help="fetch entries modified since --since")
    p.add_argument("--since", help="ISO timestamp for --refresh")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("analyze", parents=[common], help="analyze a JAR or a manifest of JARs/hashes")
    p.add_argument("target", help="JAR file or manifest (one sha256 or path per line)")
    p.add_argument("--kb", required=True, help="knowledge base directory")
    p.add_argument("--workers", type=int, help="analysis worker count")
    p.add_argument("--out", default="out", help="report directory (default: out)")
    p.add_argument("--workdir", help="scratch directory for decompiler output")
    p.add_argument("--journal", help="resumable batch journal (JSONL)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", parents=[common], help="compute accuracy and recall@k")
    p.add_argument("--reports", action="append", required=True,
                   help="report directory of one run (repeat for several runs)")
    p.add_argument("--truth", required=True, help="CSV: sha256,is_malicious,cve_list")
    p.add_argument("--k", default="1,3,5,10", help="comma-separated k values")
    p.add_argument("--out", default="metrics.json", help="where to write metrics JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("deobfuscate", parents=[common], help="fold constant strings in .java files")
    p.add_argument("path", help=".java file or source directory")
    p.add_argument("--dry-run", action="store_true", help="print a unified diff instead of rewriting")
    p.set_defaults(func=cmd_deobfuscate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"malcve: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingTruth as exc:
        print(f"malcve: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MalcveError, OSError) as exc:
        print(f"malcve: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
