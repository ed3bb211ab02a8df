"""Gene-stratified prognostic analysis.

Expression profiles are split into functional categories, each category
gets summary statistics plus a model-written report grounded in a small
knowledge base, key genes are picked per category, and the per-category
reports are fused into one genomic summary.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .backend.base import Backend, PromptRequest
from .types import (
    GeneCategory,
    GeneCategoryStats,
    GeneRecord,
    PipelineError,
    Report,
    ReportSource,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_KEY_GENES = 10


class GeneError(PipelineError):
    pass


class DuplicateSymbol(GeneError):
    pass


class EmptyCategory(GeneError):
    pass


class AllCategoriesEmpty(GeneError):
    pass


def load_gene_profile(path: str | Path) -> list[GeneRecord]:
    """Read a tab-separated expression profile.

    Three columns per row: symbol, expression (float), mutated (0 or 1).
    A header row is tolerated when its expression cell is non-numeric.
    Duplicate symbols raise DuplicateSymbol.
    """
    path = Path(path)
    records: list[GeneRecord] = []
    seen: set[str] = set()
    lines = path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise GeneError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
        symbol, expr_s, mut_s = (p.strip() for p in parts)
        if lineno == 1:
            try:
                float(expr_s)
            except ValueError:
                continue  # header row
        try:
            expression = float(expr_s)
        except ValueError as exc:
            raise GeneError(f"{path}:{lineno}: bad expression value {expr_s!r}") from exc
        if mut_s not in ("0", "1"):
            raise GeneError(f"{path}:{lineno}: mutated must be 0 or 1, got {mut_s!r}")
        key = symbol.upper()
        if key in seen:
            raise DuplicateSymbol(f"{path}:{lineno}: duplicate gene symbol {symbol!r}")
        seen.add(key)
        records.append(GeneRecord(symbol=symbol, expression=expression, mutated=bool(int(mut_s))))
    if not records:
        raise GeneError(f"{path}: no gene records")
    return records


class CategoryMap:
    """Gene symbol -> functional category lookup."""

    def __init__(self, mapping: dict[str, GeneCategory]):
        self._map = {sym.upper(): cat for sym, cat in mapping.items()}

    def category_of(self, symbol: str) -> Optional[GeneCategory]:
        return self._map.get(symbol.upper())

    def symbols(self, category: GeneCategory) -> list[str]:
        return sorted(s for s, c in self._map.items() if c is category)

    def __len__(self) -> int:
        return len(self._map)


def load_category_map(path: Optional[str | Path] = None) -> CategoryMap:
    """Load the symbol->category map; duplicate keys keep the first entry
    and log a warning."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        ref = resources.files("survcase").joinpath("resources", "gene_categories.json")
        text = ref.read_text(encoding="utf-8")

    def first_wins(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                logger.warning("duplicate category-map entry for %s; keeping first", key)
                continue
            out[key] = value
        return out

    raw = json.loads(text, object_pairs_hook=first_wins)
    mapping = {}
    for sym, cat in raw.items():
        try:
            mapping[sym] = GeneCategory(cat)
        except ValueError as exc:
            raise GeneError(f"unknown gene category {cat!r} for {sym}") from exc
    return CategoryMap(mapping)


class GeneKnowledgeBase:
    """Symbol -> short functional summary, used to ground category reports."""

    def __init__(self, entries: dict[str, dict]):
        self._entries = {sym.upper(): e for sym, e in entries.items()}

    def lookup(self, symbol: str) -> Optional[str]:
        entry = self._entries.get(symbol.upper())
        if entry is None:
            return None
        return str(entry.get("function_summary", ""))

    def __len__(self) -> int:
        return len(self._entries)


def load_knowledge_base(path: Optional[str | Path] = None) -> GeneKnowledgeBase:
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    else:
        ref = resources.files("survcase").joinpath("resources", "gene_knowledge.json")
        data = json.loads(ref.read_text(encoding="utf-8"))
    return GeneKnowledgeBase(data)


def stratify(
    records: Sequence[GeneRecord], category_map: CategoryMap
) -> tuple[dict[GeneCategory, list[GeneRecord]], list[GeneRecord]]:
    """Split a profile into per-category record lists plus the spillover
    of unmapped genes."""
    buckets: dict[GeneCategory, list[GeneRecord]] = {c: [] for c in GeneCategory}
    spillover: list[GeneRecord] = []
    for rec in records:
        cat = category_map.category_of(rec.symbol)
        if cat is None:
            spillover.append(rec)
        else:
            buckets[cat].append(rec)
    return buckets, spillover


def category_stats(category: GeneCategory, records: Sequence[GeneRecord]) -> GeneCategoryStats:
    """Mean/median expression and mutation ratio for one category.

    Median of an even count is the average of the two middle values.
    """
    if not records:
        raise EmptyCategory(f"no genes in category {category.value}")
    exprs = sorted(r.expression for r in records)
    n = len(exprs)
    mid = n // 2
    median = exprs[mid] if n % 2 else (exprs[mid - 1] + exprs[mid]) / 2.0
    return GeneCategoryStats(
        category=category,
        n_genes=n,
        mean=sum(exprs) / n,
        median=median,
        mutation_ratio=sum(1 for r in records if r.mutated) / n,
    )


def _zscore_rank(records: Sequence[GeneRecord]) -> list[GeneRecord]:
    """Deterministic fallback ranking: descending |z-score| of
    expression, ties broken lexicographically by symbol."""
    n = len(records)
    mean = sum(r.expression for r in records) / n
    var = sum((r.expression - mean) ** 2 for r in records) / n
    sd = math.sqrt(var)

    def key(r: GeneRecord) -> tuple[float, str]:
        z = 0.0 if sd == 0 else abs(r.expression - mean) / sd
        return (-z, r.symbol.upper())

    return sorted(records, key=key)


_GENE_LIST_RE = re.compile(r"[A-Za-z][A-Za-z0-9._-]*")


def select_key_genes(
    category: GeneCategory,
    records: Sequence[GeneRecord],
    stats: GeneCategoryStats,
    knowledge: GeneKnowledgeBase,
    backend: Backend,
    max_k: int = DEFAULT_MAX_KEY_GENES,
) -> tuple[list[GeneRecord], bool]:
    """Ask the model for the category's most prognostically loaded genes.

    The answer is parsed as a comma/whitespace separated symbol list and
    filtered to symbols actually present; one re-prompt, then a
    deterministic |z-score| fallback (flagged by the second return
    value). At most max_k genes are returned.
    """
    if max_k < 1:
        raise GeneError(f"max_k must be >= 1, got {max_k}")
    by_symbol = {r.symbol.upper(): r for r in records}
    table = "\n".join(
        f"{r.symbol}: expression {r.expression:.2f}, "
        f"{'mutated' if r.mutated else 'not mutated'}"
        for r in records
    )
    notes = []
    for r in records:
        summary = knowledge.lookup(r.symbol)
        if summary:
            notes.append(f"{r.symbol}: {summary}")
    req = PromptRequest(
        template_id="gene.select_genes.v1",
        variables={
            "category": category.value,
            "mean": f"{stats.mean:.2f}",
            "median": f"{stats.median:.2f}",
            "mutation_ratio": f"{stats.mutation_ratio:.2f}",
            "n_genes": str(stats.n_genes),
            "gene_table": table,
            "knowledge": "\n".join(notes) or "(none)",
            "max_k": str(max_k),
        },
        temperature=0.0,
        tag="select_key_genes",
    )
    for _ in range(2):
        answer = backend.chat_complete(req)
        chosen: list[GeneRecord] = []
        seen: set[str] = set()
        for token in _GENE_LIST_RE.findall(answer):
            rec = by_symbol.get(token.upper())
            if rec is not None and rec.symbol.upper() not in seen:
                seen.add(rec.symbol.upper())
                chosen.append(rec)
            if len(chosen) == max_k:
                break
        if chosen:
            return chosen, False
    logger.warning(
        "no valid gene symbols parsed for %s; using expression-outlier fallback",
        category.value,
    )
    return _zscore_rank(records)[:max_k], True


def category_report(
    category: GeneCategory,
    key_genes: Sequence[GeneRecord],
    stats: GeneCategoryStats,
    knowledge: GeneKnowledgeBase,
    backend: Backend,
) -> Report:
    """Model-written prognostic read of one gene category."""
    details = []
    for r in key_genes:
        note = knowledge.lookup(r.symbol) or "no annotation"
        details.append(
            f"{r.symbol}: expression {r.expression:.2f}, "
            f"{'mutated' if r.mutated else 'not mutated'}, {note}"
        )
    req = PromptRequest(
        template_id="gene.category_report.v1",
        variables={
            "category": category.value,
            "mean": f"{stats.mean:.2f}",
            "median": f"{stats.median:.2f}",
            "mutation_ratio": f"{stats.mutation_ratio:.2f}",
            "n_genes": str(stats.n_genes),
            "gene_details": "\n".join(details),
        },
        temperature=0.7,
        tag="category_report",
    )
    text = backend.chat_complete(req)
    return Report(source=ReportSource.GENE_CATEGORY, text=text, subject_id=category.value)


PLACEHOLDER_NOTE = "no genes measured in this category."


def placeholder_report(category: GeneCategory) -> Report:
    return Report(
        source=ReportSource.GENE_CATEGORY,
        text=f"{category.value} profile: {PLACEHOLDER_NOTE}",
        subject_id=category.value,
    )


def is_placeholder(report: Report) -> bool:
    return report.text.endswith(PLACEHOLDER_NOTE)


def summarize_gene(
    category_reports: Sequence[Report], backend: Backend
) -> tuple[Report, list[str]]:
    """Fuse per-category reports into the case's genomic summary.

    Placeholder reports (empty categories) carry no signal; when every
    report is a placeholder there is nothing to summarize. When
    placeholders outnumber real reports the summary is flagged
    low-information.
    """
    real = [r for r in category_reports if not is_placeholder(r)]
    if not real:
        raise AllCategoriesEmpty("no non-placeholder category reports to summarize")
    flags = []
    if len(real) < len(category_reports) - len(real):
        flags.append("low_information_gene_summary")
    blocks = "\n\n".join(f"[{r.subject_id}]\n{r.text}" for r in category_reports)
    req = PromptRequest(
        template_id="gene.summarize.v1",
        variables={"category_reports": blocks},
        temperature=0.7,
        tag="summarize_gene",
    )
    text = backend.chat_complete(req)
    return Report(source=ReportSource.GENE_SUMMARY, text=text), flags


@dataclass(frozen=True)
class GeneAnalysis:
    """Everything the gene pipeline produced for one case."""

    case_id: str
    stats: tuple[GeneCategoryStats, ...]
    key_genes: dict[str, tuple[str, ...]]
    category_reports: tuple[Report, ...]
    summary: Report
    flags: tuple[str, ...]


def analyze_genes(
    case_id: str,
    records: Sequence[GeneRecord],
    backend: Backend,
    *,
    category_map: Optional[CategoryMap] = None,
    knowledge: Optional[GeneKnowledgeBase] = None,
    max_k: int = DEFAULT_MAX_KEY_GENES,
) -> GeneAnalysis:
    """Run the full gene pipeline for one case.

    Empty categories contribute a fixed placeholder line instead of a
    model report; if every category is empty the profile cannot be
    analyzed (AllCategoriesEmpty).
    """
    if category_map is None:
        category_map = load_category_map()
    if knowledge is None:
        knowledge = load_knowledge_base()
    buckets, spillover = stratify(records, category_map)
    flags: list[str] = []
    if spillover:
        flags.append(f"unmapped_genes:{len(spillover)}")

    stats_list: list[GeneCategoryStats] = []
    key_map: dict[str, tuple[str, ...]] = {}
    reports: list[Report] = []
    for category in GeneCategory:
        recs = buckets[category]
        if not recs:
            flags.append(f"empty_category:{category.value}")
            reports.append(placeholder_report(category))
            continue
        stats = category_stats(category, recs)
        stats_list.append(stats)
        key_genes, fell_back = select_key_genes(
            category, recs, stats, knowledge, backend, max_k
        )
        if fell_back:
            flags.append(f"key_gene_fallback:{category.value}")
        key_map[category.value] = tuple(g.symbol for g in key_genes)
        reports.append(category_report(category, key_genes, stats, knowledge, backend))

    summary, summary_flags = summarize_gene(reports, backend)
    flags.extend(summary_flags)
    return GeneAnalysis(
        case_id=case_id,
        stats=tuple(stats_list),
        key_genes=key_map,
        category_reports=tuple(reports),
        summary=Report(source=ReportSource.GENE_SUMMARY, text=summary.text, subject_id=case_id),
        flags=tuple(flags),
    )
