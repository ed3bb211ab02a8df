"""Rule-based responder for the mock backend's synthetic-oracle mode.

Image descriptions are composed from the ``meta`` block of the tile in
the slide manifest next to the image (found by walking up from the image
path to the nearest ``slide.json``). Chat responses are pure functions
of the prompt variables. At inference time the rules only see what the
prompt contains — summaries, retrieved cases, expert strata — never a
label, so the oracle cannot leak ground truth into predictions.
"""

from __future__ import annotations

import json
import re
import statistics
from pathlib import Path
from typing import Any, Mapping, Optional

from .base import BackendError, PromptRequest

VARIANT_TOKENS = ("squamous", "glandular", "micropapillary", "plasmacytoid", "sarcomatoid")

# Midpoints of the four strata intervals, used when combining expert votes.
STRATUM_MIDPOINTS = {
    "high": 6.0,
    "high-intermediate": 18.0,
    "low-intermediate": 30.0,
    "low": 48.0,
}

# Inverse of the synthetic cohort's necrosis rule (~92 - 0.75 * months).
_NECROSIS_INTERCEPT = 92.0
_NECROSIS_SLOPE = 0.75


class OracleResponder:
    def __init__(self, cohort_root: Optional[str | Path] = None):
        self.cohort_root = None if cohort_root is None else Path(cohort_root)
        self._tile_index: dict[str, dict[str, Any]] = {}
        self._indexed_manifests: set[str] = set()

    # ------------------------------------------------------------------
    # image description
    # ------------------------------------------------------------------

    def describe(self, image_ref: str, req: PromptRequest) -> str:
        meta = self._meta_for_image(image_ref)
        kind = meta.get("kind", "")
        if kind == "overview":
            return self._describe_overview(meta)
        if kind == "tumor":
            return self._describe_tumor(meta)
        if kind == "stroma":
            return self._describe_stroma(meta)
        if kind == "subtile":
            return self._describe_subtile(meta)
        raise BackendError(f"no description rule for tile kind {kind!r} ({image_ref})")

    def _meta_for_image(self, image_ref: str) -> dict[str, Any]:
        key = str(Path(image_ref).resolve())
        if key in self._tile_index:
            return self._tile_index[key]
        for parent in Path(image_ref).resolve().parents:
            manifest = parent / "slide.json"
            if manifest.is_file():
                self._index_manifest(manifest)
                break
        if key not in self._tile_index:
            raise BackendError(f"no tile metadata found for image {image_ref}")
        return self._tile_index[key]

    def _index_manifest(self, manifest_path: Path) -> None:
        mkey = str(manifest_path.resolve())
        if mkey in self._indexed_manifests:
            return
        self._indexed_manifests.add(mkey)
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        root = manifest_path.parent
        for level in data.get("levels", []):
            for tile in level.get("tiles", []):
                image = tile.get("image")
                if image:
                    path = str((root / image).resolve())
                    self._tile_index[path] = dict(tile.get("meta", {}))

    @staticmethod
    def _describe_overview(meta: Mapping[str, Any]) -> str:
        grade = meta.get("grade", "high-grade")
        fraction = meta.get("tumor_fraction", 40)
        invasion = meta.get("invasion", "none")
        invasion_sentence = {
            "deep": "The tumor invades the muscularis propria.",
            "superficial": "Tumor invasion is limited to the lamina propria.",
            "none": "No stromal invasion is identified at this power.",
        }.get(invasion, "Invasion status cannot be determined at this power.")
        return (
            f"Low-power overview shows a {grade} urothelial carcinoma occupying "
            f"approximately {fraction}% of the sampled tissue. {invasion_sentence} "
            "Background mucosa and stroma are present for comparison."
        )

    @staticmethod
    def _describe_tumor(meta: Mapping[str, Any]) -> str:
        grade = meta.get("grade", "high-grade")
        arch = meta.get("architecture", "solid, nested")
        necrosis = meta.get("necrosis_pct", 0)
        mitotic = meta.get("mitotic", "rare")
        parts = [
            f"{grade.capitalize()} urothelial carcinoma with a {arch} growth pattern.",
            f"Tumor necrosis covering approximately {necrosis}% of the field.",
            f"{mitotic.capitalize()} mitotic figures are seen.",
        ]
        if meta.get("perineural"):
            parts.append("Perineural invasion is identified.")
        if meta.get("lvi"):
            parts.append("Lymphovascular invasion is identified.")
        if meta.get("cis"):
            parts.append("Adjacent flat carcinoma in situ is noted.")
        if meta.get("ambiguous"):
            parts.append(
                "Focal architecture is ambiguous at this magnification; "
                "higher-power review is recommended."
            )
        return " ".join(parts)

    @staticmethod
    def _describe_stroma(meta: Mapping[str, Any]) -> str:
        inflammation = meta.get("inflammation", "sparse")
        return (
            f"Fibrovascular stroma with {inflammation} lymphocytic infiltration. "
            "No tumor is seen in this field."
        )

    @staticmethod
    def _describe_subtile(meta: Mapping[str, Any]) -> str:
        grade = meta.get("grade", "high-grade")
        nuclear = meta.get("nuclear", "moderate nuclear atypia")
        necrosis = meta.get("necrosis_pct", 0)
        mitoses = meta.get("mitoses_per_hpf", 2)
        parts = [
            f"High-power field shows {grade} carcinoma with {nuclear}.",
            f"Tumor necrosis covering approximately {necrosis}% of the field.",
            f"{mitoses} mitoses per 10 high-power fields.",
        ]
        lesion = meta.get("lesion")
        if lesion == "sarcomatoid":
            parts.append("Spindle-shaped sarcomatoid tumor cells are present.")
        elif lesion == "micropapillary":
            parts.append(
                "Small micropapillary tufts without fibrovascular cores are present."
            )
        elif lesion == "plasmacytoid":
            parts.append(
                "Discohesive plasmacytoid tumor cells with eccentric nuclei are present."
            )
        elif lesion == "squamous":
            parts.append("Keratinizing squamous differentiation is present.")
        elif lesion == "glandular":
            parts.append("Gland-forming glandular differentiation is present.")
        return " ".join(parts)

    # ------------------------------------------------------------------
    # chat dispatch
    # ------------------------------------------------------------------

    def chat(self, req: PromptRequest) -> str:
        tid = req.template_id
        v = req.variables
        if tid.startswith("wsi.confidence"):
            return self._confidence(v)
        if tid.startswith("wsi.extract_attributes"):
            return self._extract_attributes(v)
        if tid.startswith("wsi.summarize"):
            return self._summarize_wsi(v)
        if tid.startswith("gene.select_genes"):
            return self._select_genes(v)
        if tid.startswith("gene.category_report"):
            return self._category_report(v)
        if tid.startswith("gene.summarize"):
            return self._summarize_gene(v)
        if tid.startswith("cot.generate"):
            return self._generate_cot(v)
        if tid.startswith("cot.critique"):
            return self._critique_cot(v)
        if tid.startswith("cot.refine"):
            return self._refine_cot(v)
        if tid.startswith("infer.dichotomy.level1"):
            return self._dichotomy_level1(v)
        if tid.startswith("infer.dichotomy.level2"):
            return self._dichotomy_level2(v)
        if tid.startswith("infer.predict_time"):
            return self._predict_time(v)
        raise BackendError(f"no oracle rule for template {tid!r}")

    # -- slide analysis -------------------------------------------------

    @staticmethod
    def _confidence(v: Mapping[str, str]) -> str:
        report = v.get("report", "").lower()
        if "ambiguous" in report:
            return "Confidence: low"
        if "no tumor" in report:
            return "Confidence: medium"
        return "Confidence: high"

    @staticmethod
    def _extract_attributes(v: Mapping[str, str]) -> str:
        names = [n.strip() for n in v.get("checklist", "").splitlines() if n.strip()]
        text = " ".join(
            v.get(key, "") for key in ("global_report", "mag10_reports", "mag20_reports")
        )
        low = text.lower()
        lines = []
        for name in names:
            lines.append(f"{name}: {_attribute_value(name, text, low)}")
        return "\n".join(lines)

    @staticmethod
    def _summarize_wsi(v: Mapping[str, str]) -> str:
        attrs: dict[str, str] = {}
        for line in v.get("structured_report", "").splitlines():
            if ":" in line:
                key, _, value = line.partition(":")
                attrs[key.strip().lower()] = value.strip()

        def assessed(key: str) -> Optional[str]:
            value = attrs.get(key)
            if value and value.lower() not in ("not assessed", "not identified"):
                return value
            return None

        sentences = []
        grade = assessed("tumor grade")
        morphology = assessed("tumor morphology")
        if grade:
            lead = f"The slide shows {grade} urothelial carcinoma"
            if morphology:
                lead += f" with a {morphology}"
            sentences.append(lead + ".")
        invasion = assessed("depth of invasion")
        if invasion:
            sentences.append(f"Depth of invasion: {invasion}.")
        necrosis = assessed("necrosis percentage")
        if necrosis:
            match = re.search(r"(\d+)", necrosis)
            if match:
                sentences.append(
                    f"Tumor necrosis involves approximately {match.group(1)}% of the tumor."
                )
        for component in ("squamous", "glandular", "micropapillary", "plasmacytoid", "sarcomatoid"):
            if assessed(f"{component} component") or assessed(f"{component} differentiation"):
                sentences.append(f"A {component} component is present.")
        if assessed("perineural invasion"):
            sentences.append("Perineural invasion is present.")
        if assessed("lymphovascular invasion"):
            sentences.append("Lymphovascular invasion is present.")
        if assessed("carcinoma in situ"):
            sentences.append("Carcinoma in situ is present.")
        lymph = assessed("lymphocytic infiltration")
        if lymph:
            sentences.append(f"Lymphocytic infiltration is {lymph}.")
        if not sentences:
            sentences.append(
                "Findings are limited; the submitted material did not allow "
                "assessment of the checklist attributes."
            )
        return " ".join(sentences)

    # -- gene analysis ----------------------------------------------------

    @staticmethod
    def _select_genes(v: Mapping[str, str]) -> str:
        rows = []
        for line in v.get("gene_table", "").splitlines():
            m = re.match(r"\s*(\S+): expression (-?[\d.]+), (mutated|not mutated)", line)
            if m:
                rows.append((m.group(1), float(m.group(2)), m.group(3) == "mutated"))
        if not rows:
            return "none"
        try:
            mean = float(v.get("mean", ""))
        except ValueError:
            mean = statistics.fmean(r[1] for r in rows)
        max_k = int(v.get("max_k", "10"))
        rows.sort(key=lambda r: (not r[2], -abs(r[1] - mean), r[0]))
        return ", ".join(r[0] for r in rows[:max_k])

    @staticmethod
    def _category_report(v: Mapping[str, str]) -> str:
        category = v.get("category", "")
        mean = float(v.get("mean", "5"))
        ratio = float(v.get("mutation_ratio", "0"))
        upregulated = mean >= 6.0
        downregulated = mean <= 4.0
        mutation_heavy = ratio >= 0.3
        if category in ("TumorSuppressor", "DifferentiationMarker"):
            adverse = downregulated or (category == "TumorSuppressor" and mutation_heavy)
        else:
            adverse = upregulated or mutation_heavy
        direction = (
            "broadly upregulated"
            if upregulated
            else "broadly downregulated" if downregulated else "near baseline"
        )
        verdict = (
            "This constitutes an adverse prognostic signal."
            if adverse
            else "No adverse prognostic signal is evident."
        )
        key_line = ""
        details = v.get("gene_details", "").strip()
        if details:
            symbols = [line.split(":")[0].strip() for line in details.splitlines() if ":" in line]
            if symbols:
                key_line = f" Key genes reviewed: {', '.join(symbols)}."
        return (
            f"{category} profile: mean expression {mean:.2f}, median {float(v.get('median', mean)):.2f}, "
            f"mutation ratio {ratio:.2f} across {v.get('n_genes', '?')} genes. "
            f"Expression is {direction}. {verdict}{key_line}"
        )

    @staticmethod
    def _summarize_gene(v: Mapping[str, str]) -> str:
        reports = v.get("category_reports", "")
        blocks = re.split(r"\n\s*\n", reports.strip())
        adverse = []
        total = 0
        for block in blocks:
            # Blocks may carry a [SubjectId] header line before the body.
            m = re.search(r"\b(\w+) profile:", block)
            if not m:
                continue
            total += 1
            if "adverse prognostic signal." in block and "No adverse" not in block:
                adverse.append(m.group(1))
        level = "high" if len(adverse) >= 4 else "intermediate" if len(adverse) >= 2 else "low"
        lines = [
            f"Integrated genomic profile across {total} categories.",
            f"Adverse signals in {len(adverse)} of {total} categories.",
        ]
        if adverse:
            lines.append(f"Adverse categories: {', '.join(adverse)}.")
        lines.append(f"Overall genomic risk is {level}.")
        return " ".join(lines)

    # -- reasoning records -------------------------------------------------

    @staticmethod
    def _evidence_bullets(report: str) -> list[str]:
        low = report.lower()
        bullets = []
        if "high-grade" in low:
            bullets.append("High-grade tumor histology")
        elif "low-grade" in low:
            bullets.append("Low-grade tumor histology")
        if "muscularis propria" in low:
            bullets.append("Invasion of the muscularis propria")
        elif "lamina propria" in low:
            bullets.append("Invasion limited to the lamina propria")
        m = re.search(r"approximately (\d+)%", low)
        if m:
            bullets.append(f"Tumor necrosis of approximately {m.group(1)}%")
        for token in VARIANT_TOKENS:
            if f"{token} component" in low or f"{token} differentiation" in low:
                bullets.append(f"{token.capitalize()} component present")
        if "perineural" in low:
            bullets.append("Perineural invasion")
        m = re.search(r"adverse signals in (\d+) of (\d+)", low)
        if m:
            bullets.append(
                f"Adverse genomic signals in {m.group(1)} of {m.group(2)} categories"
            )
        if "brisk lymphocytic" in low:
            bullets.append("Brisk lymphocytic infiltration")
        if not bullets:
            bullets.append("Limited prognostic findings in the available report")
        return bullets[:5]

    def _generate_cot(self, v: Mapping[str, str]) -> str:
        report = v.get("report", "")
        stratum = v.get("stratum", "low")
        interval = v.get("interval", "")
        censored = "censor" in v.get("event_status", "").lower()
        bullets = self._evidence_bullets(report)
        body = (
            "Step-by-step review of the case report. "
            + " ".join(f"Finding {i + 1}: {b.lower()}." for i, b in enumerate(bullets))
            + f" Weighing these findings, the overall severity is consistent with "
            f"survival in the {stratum} range ({interval} months)."
        )
        uncertainty = (
            "Follow-up was censored, so the observed interval is a lower bound."
            if censored
            else "Findings are internally concordant; residual uncertainty reflects sampling variation."
        )
        evidence_block = "\n".join(f"- {b}" for b in bullets)
        return f"{body}\nRisk level: {stratum}\nKey evidence:\n{evidence_block}\nUncertainty: {uncertainty}"

    @staticmethod
    def _critique_cot(v: Mapping[str, str]) -> str:
        cot = v.get("cot", "").lower()
        missing = []
        if "risk level:" not in cot:
            missing.append("a stated risk level")
        if "key evidence:" not in cot or not re.search(r"^\s*- ", cot, re.MULTILINE):
            missing.append("itemized key evidence")
        if "uncertainty:" not in cot:
            missing.append("an uncertainty statement")
        if missing:
            return "Quality: low\nCritique: The reasoning lacks " + ", ".join(missing) + "."
        return "Quality: high"

    def _refine_cot(self, v: Mapping[str, str]) -> str:
        cot = v.get("cot", "")
        report = v.get("report", "")
        low = cot.lower()
        additions = []
        if "risk level:" not in low:
            est = self._estimate_months(report, "", None, None)
            additions.append(f"Risk level: {_stratum_name_for(est)}")
        if "key evidence:" not in low or not re.search(r"^\s*- ", cot, re.MULTILINE):
            bullets = "\n".join(f"- {b}" for b in self._evidence_bullets(report))
            additions.append(f"Key evidence:\n{bullets}")
        if "uncertainty:" not in low:
            additions.append(
                "Uncertainty: Revised for structural completeness; underlying findings unchanged."
            )
        if not additions:
            return cot
        return cot.rstrip() + "\n" + "\n".join(additions)

    # -- inference ---------------------------------------------------------

    @classmethod
    def _estimate_months(
        cls,
        wsi_summary: str,
        gene_summary: str,
        retrieved_block: Optional[str],
        expert_block: Optional[str],
    ) -> float:
        parts: list[tuple[float, float]] = []
        low = wsi_summary.lower()
        m = re.search(r"approximately (\d+)%", low)
        if m:
            estimate = (_NECROSIS_INTERCEPT - float(m.group(1))) / _NECROSIS_SLOPE
            for token in VARIANT_TOKENS:
                if f"{token} component" in low:
                    estimate -= 4.0
            if "muscularis propria" in low:
                estimate -= 3.0
            if "brisk" in low:
                estimate += 3.0
            parts.append((min(max(estimate, 0.5), 119.0), 0.45))
        gm = re.search(r"adverse signals in (\d+) of (\d+)", gene_summary.lower())
        if gm:
            k = int(gm.group(1))
            parts.append((min(max(66.0 - 11.0 * k, 1.0), 110.0), 0.10))
        if retrieved_block:
            times = [
                float(x)
                for x in re.findall(
                    r"survival of (?:at least )?([\d.]+) months", retrieved_block.lower()
                )
            ]
            if times:
                parts.append((statistics.median(times), 0.20))
        if expert_block:
            strata = re.findall(
                r"\b(high-intermediate|low-intermediate|high|low)\b", expert_block.lower()
            )
            if strata:
                mids = [STRATUM_MIDPOINTS[s] for s in strata]
                parts.append((statistics.fmean(mids), 0.25))
        if not parts:
            return 30.0
        total = sum(w for _, w in parts)
        return sum(t * w for t, w in parts) / total

    def _dichotomy_level1(self, v: Mapping[str, str]) -> str:
        est = self._estimate_months(
            v.get("wsi_summary", ""),
            v.get("gene_summary", ""),
            v.get("retrieved_cases", ""),
            v.get("expert_strata", ""),
        )
        return "1" if est < 24.0 else "2"

    def _dichotomy_level2(self, v: Mapping[str, str]) -> str:
        est = self._estimate_months(
            v.get("wsi_summary", ""),
            v.get("gene_summary", ""),
            v.get("retrieved_cases", ""),
            v.get("expert_strata", ""),
        )
        choices = []
        for line in v.get("choices", "").splitlines():
            label = line.strip()
            if label:
                choices.append(label)
        if not choices:
            raise BackendError("level-2 prompt carries no choices")
        picked = choices[-1]
        for label in choices:
            lo, hi = _parse_interval_label(label)
            if lo <= est < hi:
                picked = label
                break
        else:
            # Estimate fell outside the parent interval; take the nearer edge.
            first_lo, _ = _parse_interval_label(choices[0])
            picked = choices[0] if est < first_lo else choices[-1]
        return picked

    def _predict_time(self, v: Mapping[str, str]) -> str:
        est = self._estimate_months(
            v.get("wsi_summary", ""),
            v.get("gene_summary", ""),
            v.get("retrieved_times", ""),
            None,
        )
        lo, hi = _parse_interval_label(v.get("interval", "0-12"))
        upper = hi - 0.1 if hi != float("inf") else max(lo + 1.0, min(est, 119.0))
        value = min(max(est, lo + 0.05), upper)
        return f"{value:.1f}"


def _attribute_value(name: str, text: str, low: str) -> str:
    key = name.strip().lower()
    if key == "tumor grade":
        if "high-grade" in low:
            return "high-grade"
        if "low-grade" in low:
            return "low-grade"
        return "not assessed"
    if key == "depth of invasion":
        if "invades the muscularis propria" in low:
            return "muscularis propria invasion"
        if "limited to the lamina propria" in low:
            return "lamina propria only"
        if "no stromal invasion" in low:
            return "no invasion identified"
        return "not assessed"
    if key == "lymphovascular invasion":
        return "present" if "lymphovascular invasion" in low else "not identified"
    if key == "perineural invasion":
        return "present" if "perineural invasion" in low else "not identified"
    if key in ("lymph node metastasis", "margin status"):
        return "not assessed"
    if key == "tumor morphology":
        if "solid, nested growth" in low:
            return "solid, nested growth pattern"
        if "papillary growth" in low:
            return "papillary growth pattern"
        return "not assessed"
    if key == "carcinoma in situ":
        return "present" if "carcinoma in situ" in low else "not identified"
    if key == "variant histology":
        found = [t for t in VARIANT_TOKENS if t in low]
        return ", ".join(found) if found else "not identified"
    if key == "squamous differentiation":
        return "present" if "squamous" in low else "not identified"
    if key == "glandular differentiation":
        return "present" if "glandular" in low else "not identified"
    if key == "micropapillary component":
        return "present" if "micropapillary" in low else "not identified"
    if key == "plasmacytoid component":
        return "present" if "plasmacytoid" in low else "not identified"
    if key == "sarcomatoid component":
        return "present" if "sarcomatoid" in low else "not identified"
    if key == "lymphocytic infiltration":
        if "brisk lymphocytic" in low:
            return "brisk"
        if "sparse lymphocytic" in low:
            return "sparse"
        return "not assessed"
    if key == "necrosis percentage":
        values = [int(x) for x in re.findall(r"necrosis covering approximately (\d+)%", low)]
        return f"approximately {max(values)}%" if values else "not identified"
    return "not assessed"


def _parse_interval_label(label: str) -> tuple[float, float]:
    label = label.strip()
    if label.endswith("+"):
        return float(label[:-1]), float("inf")
    m = re.match(r"^(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?)$", label)
    if not m:
        raise BackendError(f"unparseable interval label {label!r}")
    return float(m.group(1)), float(m.group(2))


def _stratum_name_for(months: float) -> str:
    if months < 12:
        return "high"
    if months < 24:
        return "high-intermediate"
    if months < 36:
        return "low-intermediate"
    return "low"
