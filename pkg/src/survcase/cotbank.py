"""Reasoning-trace generation, self-critique, and persistent case banks.

For each training case and modality, a reasoning record is written
backward from the known outcome, reviewed without the outcome, and
refined until the review passes (bounded). The surviving (report,
reasoning, label) triplet is appended to the modality's bank: a JSONL
file plus a float32 embedding sidecar, loaded back verbatim for
retrieval.
"""

from __future__ import annotations

import dataclasses
import json
import re
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import sidecar
from .backend.base import Backend, PromptRequest
from .sidecar import CorruptSidecar, SidecarError
from .types import (
    BankEntry,
    CotRecord,
    Modality,
    PipelineError,
    Quality,
    Report,
    RiskStratum,
    SurvivalLabel,
    ValidationError,
)

SCHEMA_VERSION = 1
DEFAULT_MAX_ROUNDS = 3

UNPARSEABLE_CRITIQUE = "<unparseable>"


class CotError(PipelineError):
    pass


class ParseFailure(CotError):
    """The generated reasoning lacked required fields even after a re-prompt."""


class BankError(PipelineError):
    pass


class DuplicateEntry(BankError):
    pass


class DimensionMismatch(BankError):
    pass


class CorruptBank(BankError):
    """Bank file and sidecar disagree, or the sidecar checksum fails."""


# -- reasoning-record parsing -----------------------------------------------

_RISK_RE = re.compile(r"^\s*risk level\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)
_UNCERTAINTY_RE = re.compile(r"^\s*uncertainty\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)
_EVIDENCE_HEAD_RE = re.compile(r"^\s*key evidence\s*:\s*$", re.IGNORECASE)
_BULLET_RE = re.compile(r"^\s*[-*]\s+(.*\S)\s*$")

_STRATUM_ALIASES = {
    "high": RiskStratum.HIGH,
    "high-intermediate": RiskStratum.HIGH_INTERMEDIATE,
    "high intermediate": RiskStratum.HIGH_INTERMEDIATE,
    "highintermediate": RiskStratum.HIGH_INTERMEDIATE,
    "low-intermediate": RiskStratum.LOW_INTERMEDIATE,
    "low intermediate": RiskStratum.LOW_INTERMEDIATE,
    "lowintermediate": RiskStratum.LOW_INTERMEDIATE,
    "low": RiskStratum.LOW,
}


def _parse_stratum(raw: str) -> Optional[RiskStratum]:
    token = raw.strip().strip(".").lower().replace("_", "-")
    return _STRATUM_ALIASES.get(token)


def parse_cot_fields(text: str) -> tuple[Optional[RiskStratum], list[str], Optional[str]]:
    """Pull (risk level, key-evidence bullets, uncertainty line) out of a
    reasoning record; missing parts come back as None / empty."""
    risk = None
    m = _RISK_RE.search(text)
    if m:
        risk = _parse_stratum(m.group(1))
    evidence: list[str] = []
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if _EVIDENCE_HEAD_RE.match(line):
            for follow in lines[i + 1:]:
                bullet = _BULLET_RE.match(follow)
                if not bullet:
                    break
                evidence.append(bullet.group(1))
            break
    m = _UNCERTAINTY_RE.search(text)
    uncertainty = m.group(1) if m else None
    return risk, evidence, uncertainty


def _event_status(label: SurvivalLabel) -> str:
    return "event observed" if label.event else "censored; event-free at last follow-up"


def format_outcome_months(label: SurvivalLabel) -> str:
    """Exact outcome string shown to the generator; the leak scanner
    searches critique prompts for this token."""
    return f"{label.time_months:.2f}"


def generate_cot(
    case_id: str,
    modality: Modality,
    report: Report,
    label: SurvivalLabel,
    backend: Backend,
) -> CotRecord:
    """Write a reasoning record backward from the known outcome.

    The stated risk level must match the label's stratum; a mismatch is
    regenerated once and then hard-set with the risk_overridden flag. A
    record missing required fields is re-prompted once, then raises
    ParseFailure. Censored labels yield a lower-bound stratum, flagged
    censored_stratum.
    """
    stratum = label.stratum
    req = PromptRequest(
        template_id="cot.generate.v1",
        variables={
            "report": report.text,
            "outcome_months": format_outcome_months(label),
            "event_status": _event_status(label),
            "stratum": stratum.value,
            "interval": stratum.interval.label(),
        },
        temperature=0.7,
        max_tokens=2048,
        tag=f"generate_cot_{modality.value}",
    )
    text = ""
    parsed_risk: Optional[RiskStratum] = None
    evidence: list[str] = []
    uncertainty: Optional[str] = None
    for _ in range(2):
        text = backend.chat_complete(req)
        parsed_risk, evidence, uncertainty = parse_cot_fields(text)
        if parsed_risk is not None and evidence and uncertainty:
            if parsed_risk is stratum:
                break
            # parseable but wrong stratum: regenerate once, then override
        # otherwise: parse failure, re-prompt once
    if parsed_risk is None or not evidence or not uncertainty:
        raise ParseFailure(
            f"case {case_id} ({modality.value}): reasoning record missing required fields"
        )
    overridden = parsed_risk is not stratum
    return CotRecord(
        case_id=case_id,
        modality=modality,
        text=text,
        risk_level=stratum,
        key_evidence=tuple(evidence),
        uncertainty=uncertainty,
        quality=Quality.LOW,
        rounds=0,
        risk_overridden=overridden,
        censored_stratum=not label.event,
    )


_QUALITY_RE = re.compile(r"quality\s*:\s*(high|low)\b", re.IGNORECASE)
_CRITIQUE_RE = re.compile(r"critique\s*:\s*(.+)", re.IGNORECASE | re.DOTALL)


def critique_cot(
    cot: CotRecord, report: Report, backend: Backend
) -> tuple[Quality, str]:
    """Review a reasoning record against its report, blind to the label.

    Returns (quality, critique); the critique is kept only for low
    quality. An unparseable verdict after one re-prompt is treated as
    low with a sentinel critique.
    """
    if not cot.text.strip():
        raise CotError("cannot critique an empty reasoning record")
    req = PromptRequest(
        template_id="cot.critique.v1",
        variables={"report": report.text, "cot": cot.text},
        temperature=0.0,
        tag=f"critique_cot_{cot.modality.value}",
    )
    for _ in range(2):
        answer = backend.chat_complete(req)
        m = _QUALITY_RE.search(answer)
        if not m:
            continue
        if m.group(1).lower() == "high":
            return Quality.HIGH, ""
        cm = _CRITIQUE_RE.search(answer)
        critique = cm.group(1).strip() if cm else ""
        return Quality.LOW, critique or UNPARSEABLE_CRITIQUE
    return Quality.LOW, UNPARSEABLE_CRITIQUE


def _refine_once(
    cot: CotRecord, report: Report, critique: str, label: SurvivalLabel, backend: Backend
) -> CotRecord:
    req = PromptRequest(
        template_id="cot.refine.v1",
        variables={"report": report.text, "cot": cot.text, "critique": critique},
        temperature=0.7,
        max_tokens=2048,
        tag=f"refine_cot_{cot.modality.value}",
    )
    text = backend.chat_complete(req)
    risk, evidence, uncertainty = parse_cot_fields(text)
    overridden = cot.risk_overridden
    if risk is not None and risk is not label.stratum:
        overridden = True
    return dataclasses.replace(
        cot,
        text=text,
        risk_level=label.stratum,
        key_evidence=tuple(evidence) if evidence else cot.key_evidence,
        uncertainty=uncertainty if uncertainty else cot.uncertainty,
        risk_overridden=overridden,
    )


def refine_loop(
    cot: CotRecord,
    report: Report,
    label: SurvivalLabel,
    backend: Backend,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> CotRecord:
    """Critique-and-revise until the review passes.

    ``rounds`` on the result counts the revisions applied; at most
    max_rounds + 1 critique calls are made. When the bound is hit the
    last revision is kept with quality low and force_accept set.
    """
    if max_rounds < 0:
        raise CotError("max_rounds must be >= 0")
    current = cot
    for round_idx in range(max_rounds + 1):
        quality, critique = critique_cot(current, report, backend)
        if quality is Quality.HIGH:
            return dataclasses.replace(current, quality=Quality.HIGH, rounds=round_idx)
        if round_idx == max_rounds:
            return dataclasses.replace(
                current, quality=Quality.LOW, rounds=round_idx, force_accept=True
            )
        current = _refine_once(current, report, critique, label, backend)
    raise AssertionError("unreachable")


def build_cot(
    case_id: str,
    modality: Modality,
    report: Report,
    label: SurvivalLabel,
    backend: Backend,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> CotRecord:
    """generate_cot followed by the refine loop."""
    first = generate_cot(case_id, modality, report, label, backend)
    return refine_loop(first, report, label, backend, max_rounds)


# -- persistent banks ---------------------------------------------------------


class CaseBank:
    """Append-only store of one modality's entries.

    File layout: a JSONL whose first line is the header
    ``{schema_version, modality}`` and each following line one entry
    (embedding stored as a row index into the sibling ``.emb`` sidecar).
    """

    def __init__(self, path: str | Path, modality: Modality):
        self.path = Path(path)
        self.modality = modality
        self.entries: list[BankEntry] = []

    @property
    def sidecar_path(self) -> Path:
        return self.path.with_suffix(".emb")

    @property
    def case_ids(self) -> list[str]:
        return [e.case_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> Optional[int]:
        if not self.entries:
            return None
        assert self.entries[0].embedding is not None
        return int(self.entries[0].embedding.shape[0])

    def embedding_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.embedding for e in self.entries])

    def get(self, case_id: str) -> Optional[BankEntry]:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        return None


def create_bank(path: str | Path, modality: Modality) -> CaseBank:
    """Start an empty bank on disk (header line only)."""
    bank = CaseBank(path, modality)
    bank.path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": SCHEMA_VERSION, "modality": modality.value}
    bank.path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    if bank.sidecar_path.exists():
        bank.sidecar_path.unlink()
    return bank


def append_entry(
    bank: CaseBank, entry: BankEntry, embedder: Optional[Backend] = None
) -> BankEntry:
    """Append one entry durably; returns the stored (embedded) entry.

    The report embedding is computed here when the entry does not carry
    one, so bank rows never need re-embedding at retrieval time.
    """
    if entry.modality is not bank.modality:
        raise ValidationError(
            f"entry modality {entry.modality.value} != bank modality {bank.modality.value}"
        )
    if any(e.case_id == entry.case_id for e in bank.entries):
        raise DuplicateEntry(f"({entry.case_id}, {bank.modality.value}) already stored")
    if entry.embedding is None:
        if embedder is None:
            raise BankError("entry has no embedding and no embedder was given")
        entry = dataclasses.replace(
            entry, embedding=embedder.embed_text(entry.summarized_report.text)
        )
    dim = bank.dim
    if dim is not None and entry.embedding.shape[0] != dim:
        raise DimensionMismatch(
            f"embedding dim {entry.embedding.shape[0]} != bank dim {dim}"
        )
    if not bank.path.exists():
        create_bank(bank.path, bank.modality)
    row = entry.to_dict()
    row.pop("embedding", None)
    row["embedding_row"] = len(bank.entries)
    with open(bank.path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.flush()
    try:
        sidecar.append_row(bank.sidecar_path, entry.embedding)
    except SidecarError as exc:
        raise CorruptBank(f"{bank.sidecar_path}: {exc}") from exc
    bank.entries.append(entry)
    return entry


def load_bank(path: str | Path) -> CaseBank:
    """Load a bank and its sidecar back into memory, verifying integrity."""
    p = Path(path)
    try:
        lines = [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise BankError(f"{p}: unreadable bank: {exc}") from exc
    if not lines:
        raise CorruptBank(f"{p}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptBank(f"{p}: bad header: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CorruptBank(f"{p}: unsupported schema_version {header.get('schema_version')!r}")
    try:
        modality = Modality(header["modality"])
    except (KeyError, ValueError) as exc:
        raise CorruptBank(f"{p}: bad modality in header") from exc

    bank = CaseBank(p, modality)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptBank(f"{p}:{lineno}: bad entry line: {exc}") from exc

    if rows:
        try:
            matrix, _ = sidecar.read_sidecar(bank.sidecar_path)
        except (CorruptSidecar, SidecarError, OSError) as exc:
            raise CorruptBank(f"{bank.sidecar_path}: {exc}") from exc
        if matrix.shape[0] != len(rows):
            raise CorruptBank(
                f"{p}: {len(rows)} entries but {matrix.shape[0]} embedding rows"
            )
    seen: set[str] = set()
    for row in rows:
        idx = row.pop("embedding_row", None)
        if idx is None or not (0 <= int(idx) < len(rows)):
            raise CorruptBank(f"{p}: entry {row.get('case_id')!r} has bad embedding_row")
        row["embedding"] = [float(v) for v in matrix[int(idx)]]
        try:
            entry = BankEntry.from_dict(row)
        except (ValidationError, KeyError, ValueError) as exc:
            raise CorruptBank(f"{p}: bad entry {row.get('case_id')!r}: {exc}") from exc
        if entry.modality is not modality:
            raise CorruptBank(f"{p}: entry {entry.case_id} modality mismatch")
        if entry.case_id in seen:
            raise CorruptBank(f"{p}: duplicate case_id {entry.case_id}")
        seen.add(entry.case_id)
        bank.entries.append(entry)
    return bank


# -- label-leak auditing ------------------------------------------------------

_BLIND_TEMPLATES = ("cot.critique.v1",)


def find_label_leaks(
    trace_entries: Iterable[dict[str, Any]],
    labels: Sequence[SurvivalLabel],
) -> list[dict[str, Any]]:
    """Scan captured critique prompts for exact outcome strings.

    The critique step must stay blind to the ground truth; any critique
    prompt containing a label's formatted outcome (e.g. "62.40") is
    returned as an offender. Requires a trace recorded with
    capture_prompts=True; entries without prompts are skipped.
    """
    needles = {format_outcome_months(lab) for lab in labels}
    offenders = []
    for entry in trace_entries:
        if entry.get("template_id") not in _BLIND_TEMPLATES:
            continue
        prompt = entry.get("prompt")
        if not prompt:
            continue
        if any(needle in prompt for needle in needles):
            offenders.append(entry)
    return offenders
