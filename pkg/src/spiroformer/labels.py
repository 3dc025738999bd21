"""Medical-record code sets -> binary endpoint labels.

Pure mapping logic: a list of coded records plus the spirometry date yields
(copd_risk, mortality, exacerbation). Code sets live in a LabelRuleset value,
so swapping rulesets changes behavior with no code change.

Matching convention: a 3-character code-set entry is a category prefix
("J43" matches "J43", "J431", ...); longer entries match exactly. This keeps
category-level and fully-specified codes in one list.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field

from .errors import DataError
from .fileio import read_ndjson

SOURCES = (
    "self_report",
    "hospital_icd10",
    "hospital_icd9",
    "gp_icd10_mapped",
    "death_icd10",
)
HOSPITAL_SOURCES = ("hospital_icd10", "hospital_icd9")


@dataclass(frozen=True)
class MedicalRecord:
    source: str
    code: str
    date: str  # ISO yyyy-mm-dd
    primary_cause: bool | None = None  # hospital records only


@dataclass(frozen=True)
class LabelRuleset:
    """Code sets; defaults are the published COPD definitions."""

    self_report_codes: frozenset = frozenset({"1112", "1113", "1472"})
    icd10_prefixes: frozenset = frozenset({"J43", "J440", "J441", "J449"})
    icd9_codes: frozenset = frozenset({"492", "496"})
    mortality_extra_icd10: frozenset = frozenset({"J41"})

    def to_obj(self) -> dict:
        return {
            "self_report_codes": sorted(self.self_report_codes),
            "icd10_prefixes": sorted(self.icd10_prefixes),
            "icd9_codes": sorted(self.icd9_codes),
            "mortality_extra_icd10": sorted(self.mortality_extra_icd10),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "LabelRuleset":
        try:
            return cls(
                self_report_codes=frozenset(map(str, obj["self_report_codes"])),
                icd10_prefixes=frozenset(map(str, obj["icd10_prefixes"])),
                icd9_codes=frozenset(map(str, obj["icd9_codes"])),
                mortality_extra_icd10=frozenset(map(str, obj["mortality_extra_icd10"])),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed label ruleset: {exc}") from exc


def default_ruleset() -> LabelRuleset:
    return LabelRuleset()


@dataclass(frozen=True)
class RecordRejection:
    index: int
    reason: str


@dataclass(frozen=True)
class EndpointLabels:
    copd_risk: int
    mortality: int
    exacerbation: int


def _code_matches(code: str, entries: frozenset) -> bool:
    for e in entries:
        if len(e) == 3:
            if code.startswith(e):
                return True
        elif code == e:
            return True
    return False


def _parse_date(text: str) -> datetime.date:
    return datetime.date.fromisoformat(text)


def _validate_record(rec: MedicalRecord) -> str | None:
    """Reason the record is malformed, or None if well-formed."""
    if rec.source not in SOURCES:
        return f"unknown source {rec.source!r}"
    if not isinstance(rec.code, str) or not rec.code.strip():
        return "empty code"
    try:
        _parse_date(rec.date)
    except (TypeError, ValueError):
        return f"unparseable date {rec.date!r}"
    if rec.source in HOSPITAL_SOURCES and not isinstance(rec.primary_cause, bool):
        return "hospital record missing primary_cause flag"
    return None


def _matches_ruleset(rec: MedicalRecord, rules: LabelRuleset, mortality: bool) -> bool:
    code = rec.code.strip()
    if rec.source == "self_report":
        return _code_matches(code, rules.self_report_codes)
    if rec.source == "hospital_icd9":
        return _code_matches(code, rules.icd9_codes)
    if rec.source in ("hospital_icd10", "gp_icd10_mapped"):
        return _code_matches(code, rules.icd10_prefixes)
    if rec.source == "death_icd10":
        if _code_matches(code, rules.icd10_prefixes):
            return True
        return mortality and _code_matches(code, rules.mortality_extra_icd10)
    return False


def map_records(
    records: list[MedicalRecord],
    spiro_date: str,
    rules: LabelRuleset | None = None,
    rejections: list[RecordRejection] | None = None,
) -> EndpointLabels:
    """Apply the code rules to one person's records.

    copd_risk: any matching non-death record dated strictly after spiro_date.
    exacerbation: a matching hospital record, flagged as the primary cause,
    dated strictly after spiro_date.
    mortality: a matching death record (chronic-bronchitis category counts
    here too); death records are not date-filtered.

    Malformed records abort with DataError unless ``rejections`` is supplied,
    in which case each is excluded and reported there.
    """
    rules = rules or default_ruleset()
    try:
        spiro = _parse_date(spiro_date)
    except (TypeError, ValueError) as exc:
        raise DataError(f"unparseable spirometry date {spiro_date!r}") from exc

    copd = mort = exac = 0
    for i, rec in enumerate(records):
        reason = _validate_record(rec)
        if reason is not None:
            if rejections is None:
                raise DataError(f"record #{i} rejected: {reason}")
            rejections.append(RecordRejection(index=i, reason=reason))
            continue
        if rec.source == "death_icd10":
            if _matches_ruleset(rec, rules, mortality=True):
                mort = 1
            continue
        if not _matches_ruleset(rec, rules, mortality=False):
            continue
        after = _parse_date(rec.date) > spiro
        if after:
            copd = 1
            if rec.source in HOSPITAL_SOURCES and rec.primary_cause:
                exac = 1
    return EndpointLabels(copd_risk=copd, mortality=mort, exacerbation=exac)


def records_from_ndjson(path) -> list[MedicalRecord]:
    """Read MedicalRecords from NDJSON with keys source, code, date[, primary_cause]."""
    out = []
    for i, obj in enumerate(read_ndjson(path)):
        try:
            out.append(
                MedicalRecord(
                    source=str(obj["source"]),
                    code=str(obj["code"]),
                    date=str(obj["date"]),
                    primary_cause=obj.get("primary_cause"),
                )
            )
        except KeyError as exc:
            raise DataError(f"record line {i + 1} missing field {exc}") from exc
    return out


def load_ruleset(path) -> LabelRuleset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ruleset {path}: {exc}") from exc
    return LabelRuleset.from_obj(obj)
