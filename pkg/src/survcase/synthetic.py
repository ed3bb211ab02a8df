"""Synthetic cohort generator with a hidden monotone survival signal.

Each generated case has a true survival time drawn from a stratum-cycled
distribution. The time is encoded, with controlled noise, into the
artifacts the pipeline actually reads: tile metadata (necrosis fraction,
invasion depth, variant histology), the gene expression profile (count
of adverse categories), and the expert score file. Nothing downstream
sees the true time directly; a pipeline that preserves the ordering of
the injected signal will score well, one that scrambles it will not.

The slide layout also exercises the mining stages on purpose: a
high-attention blob at 20x that clusters into one region, a pair of
byte-identical stroma tiles inside the region for the similarity dedup
to drop, and one ambiguous tumor tile whose report rates low confidence
so the 20x zoom path runs.
"""

from __future__ import annotations

import json
import math
import random
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .cohort import write_cohort, write_expert_predictions
from .genes import load_category_map
from .sidecar import write_sidecar
from .types import (
    CaseRecord,
    ExpertPrediction,
    GeneCategory,
    SurvivalLabel,
    STRATA_BY_SEVERITY,
)

# (model name, score noise sd); scores are -ln(months/12) plus noise.
EXPERT_MODELS = (("motcat", 0.20), ("mcat", 0.30), ("ccl", 0.40))

# Report phrases derived from tile metadata shift a reader's months
# estimate by fixed amounts; the necrosis encoding compensates so the
# net signal stays centered on the true time.
_NECROSIS_INTERCEPT = 92.0
_NECROSIS_SLOPE = 0.75
_VARIANT_SHIFT = 4.0
_INVASION_SHIFT = 3.0

_VARIANTS = ("squamous", "glandular", "micropapillary", "plasmacytoid", "sarcomatoid")

# Tile wording must differ by several tokens per pair or the report-text
# dedup (tau 0.93 on bag-of-token embeddings) removes honest tiles.
_ARCHITECTURES = (
    "solid, nested",
    "papillary exophytic",
    "trabecular ribbon-like",
    "micronodular clustered",
    "infiltrative cord-forming",
    "discohesive sheet-like",
)
_MITOTIC = ("rare", "scattered", "frequent")
_NUCLEAR = (
    "marked nuclear pleomorphism and coarse clumped chromatin",
    "moderate nuclear atypia with occasional small nucleoli",
    "enlarged hyperchromatic nuclei showing irregular membranes",
    "vesicular nuclei bearing prominent eosinophilic macronucleoli",
)

# Level-1 attention grid: 16x16 cells of 512px; the hot blob spans grid
# cells [4,9]x[4,9], which scales to level-2 pixels [1024, 2560).
_GRID = 16
_TILE = 512
_BLOB = range(4, 10)

_IN_REGION_TUMOR = ((2, 2), (2, 3), (3, 2), (3, 4), (4, 3), (4, 4))
_AMBIGUOUS_CELL = (3, 3)
_DUP_STROMA_CELLS = ((2, 4), (4, 2))
_OUT_STROMA_CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))
_OUT_TUMOR_CELLS = ((6, 6), (6, 0), (0, 6))


def _png(path: Path, color: tuple[int, int, int]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (8, 8), color).save(path)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    mat = rng.normal(size=(n, dim))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def true_months(index: int, rng: random.Random) -> float:
    """Stratum-cycled true survival time; open-ended stratum caps at 110."""
    stratum = STRATA_BY_SEVERITY[index % len(STRATA_BY_SEVERITY)]
    interval = stratum.interval
    hi = interval.hi if math.isfinite(interval.hi) else 110.0
    lo = max(interval.lo, 1.0)
    return round(rng.uniform(lo, hi), 2)


def _necrosis_pct(months: float, adjustment: float, rng: random.Random, sd: float) -> int:
    target = months + adjustment
    raw = _NECROSIS_INTERCEPT - _NECROSIS_SLOPE * target + rng.gauss(0.0, sd)
    return int(min(max(round(raw), 1), 91))


def _adverse_count(months: float) -> int:
    return min(6, max(0, round((66.0 - months) / 11.0)))


def _write_genes(path: Path, months: float, rng: random.Random) -> None:
    cmap = load_category_map()
    k = _adverse_count(months)
    categories = sorted(GeneCategory, key=lambda c: c.value)
    adverse = set(rng.sample(categories, k))
    lines = ["symbol\texpression\tmutated"]
    for category in categories:
        symbols = sorted(cmap.symbols(category))
        if category in adverse:
            low_side = category in (
                GeneCategory.TUMOR_SUPPRESSOR,
                GeneCategory.DIFFERENTIATION_MARKER,
            )
            center = 3.1 if low_side else 6.9
            spread = 0.3
            n_mut = 1 if category is GeneCategory.DIFFERENTIATION_MARKER else 4
        else:
            center, spread = 5.0, 0.2
            n_mut = rng.randint(0, 2)
        mutated = set(rng.sample(range(len(symbols)), n_mut))
        for i, symbol in enumerate(symbols):
            expr = rng.gauss(center, spread)
            lines.append(f"{symbol}\t{expr:.3f}\t{1 if i in mutated else 0}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_slide(
    case_dir: Path,
    case_id: str,
    months: float,
    rng: random.Random,
    vec_rng: np.random.Generator,
    embed_dim: int,
    necrosis_sd: float,
) -> None:
    grade = "high-grade" if months < 24 else "low-grade"
    invasion = "deep" if months < 18 else "superficial" if months < 36 else "none"
    variant: Optional[str] = (
        rng.choice(_VARIANTS) if months < 30 and rng.random() < 0.5 else None
    )
    adjustment = _VARIANT_SHIFT * (variant is not None) + _INVASION_SHIFT * (
        invasion == "deep"
    )
    pct = _necrosis_pct(months, adjustment, rng, necrosis_sd)

    tiles1: list[dict] = []
    tiles2: list[dict] = []
    emb2: list[tuple[str, np.ndarray]] = []
    emb1: list[tuple[str, np.ndarray]] = []

    def tumor_meta(i: int) -> dict:
        # Every field cycles at a different stride so no two in-region
        # tiles share a full meta tuple; shared tuples render identical
        # report texts, which the similarity dedup then removes. Tiles
        # that share a mitotic adjective additionally disagree on the
        # lvi/cis sentence, keeping their text cosine clear of tau.
        meta = {
            "kind": "tumor",
            "grade": grade,
            "architecture": _ARCHITECTURES[i % len(_ARCHITECTURES)],
            "necrosis_pct": max(pct - i, 1),
            "mitotic": _MITOTIC[i % len(_MITOTIC)],
        }
        flags = ((), ("perineural",), ("lvi",), ("cis",), ("perineural", "lvi"), ("cis", "perineural"))
        for flag in flags[i % len(flags)]:
            meta[flag] = True
        return meta

    def add_level2(pid: str, cell: tuple[int, int], meta: dict, vec: np.ndarray) -> None:
        _png(case_dir / "tiles" / f"{pid}.png", (188, 143, 166) if meta["kind"] == "tumor" else (222, 200, 210))
        tiles2.append(
            {
                "patch_id": pid,
                "x": cell[0] * _TILE,
                "y": cell[1] * _TILE,
                "w": _TILE,
                "h": _TILE,
                "image": f"tiles/{pid}.png",
                "embedding_file": "emb_level2.bin",
                "meta": meta,
            }
        )
        emb2.append((pid, vec))

    vecs = _unit_rows(vec_rng, len(_IN_REGION_TUMOR) + len(_OUT_TUMOR_CELLS) + 7, embed_dim)
    vec_iter = iter(vecs)

    for i, cell in enumerate(_IN_REGION_TUMOR):
        add_level2(f"{case_id}_t{i}", cell, tumor_meta(i), next(vec_iter))
    amb_meta = tumor_meta(len(_IN_REGION_TUMOR))
    amb_meta["ambiguous"] = True
    add_level2(f"{case_id}_amb", _AMBIGUOUS_CELL, amb_meta, next(vec_iter))

    # The dedup bait: two tiles with one shared embedding and identical
    # metadata, so both the visual and the text criteria see a near-dup.
    dup_vec = next(vec_iter)
    for i, cell in enumerate(_DUP_STROMA_CELLS):
        add_level2(
            f"{case_id}_dup{i}",
            cell,
            {"kind": "stroma", "inflammation": "sparse"},
            dup_vec,
        )
    for i, cell in enumerate(_OUT_STROMA_CELLS):
        add_level2(
            f"{case_id}_s{i}",
            cell,
            {"kind": "stroma", "inflammation": "sparse"},
            next(vec_iter),
        )
    for i, cell in enumerate(_OUT_TUMOR_CELLS):
        add_level2(f"{case_id}_f{i}", cell, tumor_meta(i + 10), next(vec_iter))

    # Attention-only grid at 20x; no images, just scores for clustering.
    for gy in range(_GRID):
        for gx in range(_GRID):
            hot = gx in _BLOB and gy in _BLOB
            tiles1.append(
                {
                    "patch_id": f"{case_id}_a{gx}_{gy}",
                    "x": gx * _TILE,
                    "y": gy * _TILE,
                    "w": _TILE,
                    "h": _TILE,
                    "attention": 0.9 if hot else 0.1,
                }
            )

    # 20x sub-tiles covering the ambiguous parent's footprint.
    sub_vecs = _unit_rows(vec_rng, 4, embed_dim)
    px, py = _AMBIGUOUS_CELL[0] * _TILE * 2, _AMBIGUOUS_CELL[1] * _TILE * 2
    for i, (dx, dy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        pid = f"{case_id}_z{i}"
        meta = {
            "kind": "subtile",
            "grade": grade,
            "nuclear": _NUCLEAR[i % len(_NUCLEAR)],
            "necrosis_pct": max(pct - i, 1),
            "mitoses_per_hpf": 2 + 3 * i,
        }
        if variant is not None and i == 0:
            meta["lesion"] = variant
        _png(case_dir / "tiles" / f"{pid}.png", (170, 120, 150))
        tiles1.append(
            {
                "patch_id": pid,
                "x": px + dx * _TILE,
                "y": py + dy * _TILE,
                "w": _TILE,
                "h": _TILE,
                "image": f"tiles/{pid}.png",
                "embedding_file": "emb_level1.bin",
                "meta": meta,
            }
        )
        emb1.append((pid, sub_vecs[i]))

    overview_id = f"{case_id}_ov"
    _png(case_dir / "tiles" / f"{overview_id}.png", (230, 215, 222))
    tiles3 = [
        {
            "patch_id": overview_id,
            "x": 0,
            "y": 0,
            "w": _TILE,
            "h": _TILE,
            "image": f"tiles/{overview_id}.png",
            "meta": {
                "kind": "overview",
                "grade": grade,
                "tumor_fraction": int(min(max(20 + pct // 2, 10), 85)),
                "invasion": invasion,
            },
        }
    ]

    for name, rows in (("emb_level1.bin", emb1), ("emb_level2.bin", emb2)):
        ids = [pid for pid, _ in rows]
        write_sidecar(case_dir / name, np.stack([v for _, v in rows]), ids=ids, with_sha=True)

    manifest = {
        "slide_id": case_id,
        "levels": [
            {"level": 1, "magnification": 20.0, "tiles": tiles1},
            {"level": 2, "magnification": 10.0, "tiles": tiles2},
            {"level": 3, "magnification": 2.5, "tiles": tiles3},
        ],
    }
    (case_dir / "slide.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def generate_cohort(
    root: str | Path,
    n_cases: int = 25,
    seed: int = 7,
    *,
    event_rate: float = 0.75,
    necrosis_sd: float = 2.0,
    embed_dim: int = 8,
    cohort_id: str = "synthetic",
) -> Path:
    """Write a full synthetic cohort under ``root``; returns the cohort file.

    Layout: ``cohort.json``, ``experts.csv`` and one ``cases/<id>/``
    directory per case holding the slide tree and the gene TSV. The same
    seed always reproduces the same bytes.
    """
    base = Path(root)
    rng = random.Random(seed)
    cases: list[CaseRecord] = []
    experts: list[ExpertPrediction] = []

    for i in range(n_cases):
        case_id = f"case{i + 1:03d}"
        months = true_months(i, rng)
        event = rng.random() < event_rate
        observed = months if event else round(months * rng.uniform(0.5, 0.95), 2)

        case_dir = base / "cases" / case_id
        vec_rng = np.random.default_rng(seed * 100003 + i)
        _write_slide(case_dir, case_id, months, rng, vec_rng, embed_dim, necrosis_sd)
        _write_genes(case_dir / "genes.tsv", months, rng)

        for model, sd in EXPERT_MODELS:
            score = -math.log(months / 12.0) + rng.gauss(0.0, sd)
            experts.append(ExpertPrediction(case_id=case_id, model_name=model, risk_score=score))

        cases.append(
            CaseRecord(
                case_id=case_id,
                slide_manifest=f"cases/{case_id}/slide.json",
                gene_profile=f"cases/{case_id}/genes.tsv",
                label=SurvivalLabel(time_months=observed, event=event),
            )
        )

    cohort_path = base / "cohort.json"
    write_cohort(cohort_path, cases, cohort_id=cohort_id)
    write_expert_predictions(base / "experts.csv", experts)
    return cohort_path
