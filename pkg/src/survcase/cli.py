"""Command line surface: build banks, infer folds, evaluate, plot.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes
a manifest (config hash, seed, versions) so results can be traced back
to their exact inputs; no timestamps, so reruns stay byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import stats
from .analyze import (
    BANK_WSI_FILENAME,
    FOLDS_DIRNAME,
    INFERENCES_FILENAME,
    analyze_cohort,
    evaluate_cohort,
    expert_quartiles_for,
    fold_split,
    bank_entries_for,
    load_fold_banks,
    run_fold_inference,
    write_fold_banks,
    write_inferences,
)
from .backend.base import TraceWriter
from .cohort import load_cohort, load_expert_predictions
from .config import RunConfig, load_config, make_backend
from .plotting import write_km_svg
from .retrieval import build_index
from .types import PipelineError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="survcase",
        description="Multimodal survival prediction via case-bank retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config file (TOML)")
        p.add_argument("--backend", choices=("mock", "http"), help="override backend kind")
        p.add_argument("--jobs", type=int, help="per-case parallelism bound")

    p = sub.add_parser("build-bank", help="build one fold's case banks")
    common(p)
    p.add_argument("--fold", type=int, required=True, help="fold index to hold out")

    p = sub.add_parser("infer", help="run inference on one fold's held-out cases")
    common(p)
    p.add_argument("--fold", type=int, required=True, help="fold index to infer")
    p.add_argument("--experts", help="expert prediction CSV (overrides config)")

    p = sub.add_parser("evaluate", help="run all folds and write evaluation tables")
    common(p)

    p = sub.add_parser("plot", help="render a KM CSV as an SVG")
    p.add_argument("--km-csv", required=True, dest="km_csv", help="input KM CSV")
    p.add_argument("--out", required=True, help="output SVG path")
    return parser


# ----------------------------------------------------------------------
# shared run plumbing
# ----------------------------------------------------------------------


def _versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "survcase": __version__,
    }


def _write_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_manifest(cfg: RunConfig, command: str, fold: Optional[int]) -> None:
    name = f"manifest_{command}" + ("" if fold is None else f"_fold{fold}") + ".json"
    _write_manifest(
        Path(cfg.output_dir) / name,
        {
            "command": command,
            "config_sha256": cfg.config_sha256,
            "seed": cfg.seed,
            "backend": cfg.backend,
            "fold": fold,
            "versions": _versions(),
        },
    )


def _load_run(args) -> tuple[RunConfig, object]:
    cfg = load_config(args.config)
    overrides = {}
    if args.backend is not None:
        overrides["backend"] = args.backend
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if getattr(args, "experts", None) is not None:
        overrides["experts"] = Path(args.experts).resolve()
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    trace_name = args.command + (
        f"_fold{args.fold}" if getattr(args, "fold", None) is not None else ""
    )
    trace = TraceWriter(
        Path(cfg.output_dir) / "traces" / f"{trace_name}.jsonl",
        logical_clock=True,
        capture_prompts=cfg.capture_prompts,
    )
    return cfg, make_backend(cfg, trace)


def _analysis_kwargs(cfg: RunConfig) -> dict:
    return dict(
        tau_v=cfg.tau_v,
        tau_t=cfg.tau_t,
        policy=cfg.policy,
        eps=cfg.eps,
        min_pts=cfg.min_pts,
        attention_percentile=cfg.attention_percentile,
        max_key_genes=cfg.max_key_genes,
    )


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def _cmd_build_bank(args) -> int:
    cfg, backend = _load_run(args)
    cases = [c for c in load_cohort(cfg.cohort) if c.label is not None]
    by_id = {c.case_id: c for c in cases}
    train_ids, _ = fold_split([c.case_id for c in cases], cfg.folds, cfg.seed, args.fold)
    analyses = analyze_cohort(
        [by_id[cid] for cid in train_ids], backend, jobs=cfg.jobs, **_analysis_kwargs(cfg)
    )
    entries = {
        cid: bank_entries_for(by_id[cid], analyses[cid], backend, max_rounds=cfg.max_rounds)
        for cid in train_ids
    }
    fold_dir = Path(cfg.output_dir) / FOLDS_DIRNAME / f"fold{args.fold}"
    bank_wsi, bank_gene = write_fold_banks(fold_dir, entries, train_ids)
    _run_manifest(cfg, "build-bank", args.fold)
    print(
        f"fold {args.fold}: stored {len(bank_wsi)} WSI and {len(bank_gene)} Gene "
        f"entries under {fold_dir}"
    )
    return 0


def _cmd_infer(args) -> int:
    cfg, backend = _load_run(args)
    if cfg.experts is None:
        raise PipelineError("inference requires expert predictions (--experts or config)")
    cases = [c for c in load_cohort(cfg.cohort) if c.label is not None]
    by_id = {c.case_id: c for c in cases}
    train_ids, test_ids = fold_split(
        [c.case_id for c in cases], cfg.folds, cfg.seed, args.fold
    )
    fold_dir = Path(cfg.output_dir) / FOLDS_DIRNAME / f"fold{args.fold}"
    if not (fold_dir / BANK_WSI_FILENAME).is_file():
        raise PipelineError(
            f"no banks under {fold_dir}; run `survcase build-bank --fold {args.fold}` first"
        )
    bank_wsi, bank_gene = load_fold_banks(fold_dir)
    index = build_index(bank_wsi, bank_gene, cfg.weights)
    predictions = load_expert_predictions(cfg.experts)
    quartiles = expert_quartiles_for(predictions, train_ids)
    analyses = analyze_cohort(
        [by_id[cid] for cid in test_ids], backend, jobs=cfg.jobs, **_analysis_kwargs(cfg)
    )
    results = run_fold_inference(
        [by_id[cid] for cid in test_ids],
        analyses,
        index,
        predictions,
        quartiles,
        backend,
        k=cfg.k,
        depth=cfg.d,
    )
    write_inferences(fold_dir / INFERENCES_FILENAME, results)
    _run_manifest(cfg, "infer", args.fold)
    for r in results:
        print(
            f"{r.case_id}: {r.predicted_months:.2f} months "
            f"({r.stratum.value} risk, interval {r.final_interval.label()})"
        )
    return 0


def _cmd_evaluate(args) -> int:
    cfg, backend = _load_run(args)
    result = evaluate_cohort(cfg, backend)
    _run_manifest(cfg, "evaluate", None)
    cell = stats.format_cindex_cell(list(result.fold_cindices))
    print(f"C-index over {len(result.fold_cindices)} folds: {cell}")
    print(
        f"log-rank high vs low: chi2={result.logrank.chi2:.3f} "
        f"p={result.logrank.p_value:.3g}"
    )
    print(f"tables under {result.output_dir}")
    return 0


def _cmd_plot(args) -> int:
    out = write_km_svg(args.km_csv, args.out)
    digest = hashlib.sha256(Path(args.km_csv).read_bytes()).hexdigest()
    _write_manifest(
        Path(str(out) + ".manifest.json"),
        {"command": "plot", "km_csv_sha256": digest, "versions": _versions()},
    )
    print(f"wrote {out}")
    return 0


_COMMANDS = {
    "build-bank": _cmd_build_bank,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "plot": _cmd_plot,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # operators get a message, not a traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
