"""Preprocessed-cohort container: raw flow curves + metadata in one file.

Binary layout, all little-endian:

    bytes 0..3   magic "SPDS"
    uint32       format version (1)
    uint64       manifest length in bytes
    ...          manifest JSON (utf-8)
    ...          curve block: n_records x t_len float32
    ...          metadata block: one JSON object per line (utf-8)

The manifest records the grid (dv_l, t_len, patch_len), the per-position
standardizer statistics fit on the whole retained cohort, and the byte sizes
of both trailing blocks so truncation is detectable before any array is
built. Curves are stored raw (unstandardized) so overlays can read physical
flow values; model input standardization happens at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, IntegrityError
from .fileio import atomic_write_bytes
from .preproc import (
    FlowVolumeCurve,
    Standardizer,
    SpiroSummary,
    apply_standardizer,
    fit_standardizer,
    pad_to_patch_multiple,
    patchify,
    preprocess_blow,
    qc_filter,
)
from .synthdata import ENDPOINTS, CohortRecord

MAGIC = b"SPDS"
VERSION = 1
_HEADER = len(MAGIC) + 4 + 8


@dataclass
class SpiroDataset:
    dv_l: float
    t_len: int  # stored curve length, a multiple of patch_len
    patch_len: int
    standardizer: Standardizer
    curves: np.ndarray  # [n, t_len] float32, raw flow
    meta: list  # per-record dicts: id, valid_len, demographics, labels, summary

    @property
    def n_records(self) -> int:
        return self.curves.shape[0]

    @property
    def n_patches(self) -> int:
        return self.t_len // self.patch_len

    def ids(self) -> list:
        return [m["id"] for m in self.meta]

    def labels(self, endpoint: str) -> np.ndarray:
        if endpoint not in ENDPOINTS:
            raise DataError(f"unknown endpoint {endpoint!r}; expected one of {ENDPOINTS}")
        return np.array([m["labels"][endpoint] for m in self.meta], dtype=int)

    def demographics_matrix(self) -> np.ndarray:
        """[n, 4] in the documented order [age, sex, smoking, height]."""
        return np.array(
            [[m["age"], m["sex"], m["smoking"], m["height_cm"]] for m in self.meta],
            dtype=np.float64,
        )

    def summary_matrix(self) -> np.ndarray:
        """[n, 3] baseline inputs [fev1, fvc, ratio]."""
        return np.array(
            [[m["summary"]["fev1_l"], m["summary"]["fvc_l"], m["summary"]["ratio"]]
             for m in self.meta],
            dtype=np.float64,
        )

    def summaries(self) -> list:
        return [SpiroSummary(**m["summary"]) for m in self.meta]

    def raw_curve(self, i: int) -> FlowVolumeCurve:
        return FlowVolumeCurve(
            flow_lps=self.curves[i].astype(np.float64),
            valid_len=int(self.meta[i]["valid_len"]),
            dv_l=self.dv_l,
        )

    def standardized_curve(self, i: int) -> FlowVolumeCurve:
        return apply_standardizer(self.standardizer, self.raw_curve(i))

    def model_inputs(self) -> tuple:
        """Standardized patch tensor [n, N, P] and key mask [n, N+1]."""
        patches = np.empty((self.n_records, self.n_patches, self.patch_len))
        mask = np.empty((self.n_records, self.n_patches + 1), dtype=bool)
        for i in range(self.n_records):
            seq = patchify(self.standardized_curve(i), self.patch_len)
            patches[i] = seq.patches
            mask[i] = seq.mask
        return patches, mask


def build_dataset(
    records: list,
    dv_l: float = 0.01,
    t_max: int = 1024,
    patch_len: int = 30,
    sigma: float = 1.0,
    apply_qc: bool = True,
) -> tuple:
    """Preprocess a cohort into a dataset; returns (dataset, dropped_ids)."""
    if not records:
        raise DataError("cannot build a dataset from zero records")
    t_len = pad_to_patch_multiple(t_max, patch_len)
    curves = []
    summaries = []
    for rec in records:
        curve, summary = preprocess_blow(rec.blow, dv_l=dv_l, t_max=t_len, sigma=sigma)
        curves.append(curve)
        summaries.append(summary)

    if apply_qc:
        keep = qc_filter(summaries)
    else:
        keep = np.arange(len(records))
    dropped = [records[i].id for i in range(len(records))
               if i not in set(keep.tolist())]
    kept_curves = [curves[i] for i in keep]
    std = fit_standardizer(kept_curves)

    meta = []
    for i in keep:
        rec: CohortRecord = records[i]
        s = summaries[i]
        meta.append({
            "id": rec.id,
            "valid_len": curves[i].valid_len,
            "age": rec.demographics.age,
            "sex": rec.demographics.sex,
            "smoking": rec.demographics.smoking,
            "height_cm": rec.demographics.height_cm,
            "labels": {
                "copd_risk": rec.labels.copd_risk,
                "mortality": rec.labels.mortality,
                "exacerbation": rec.labels.exacerbation,
            },
            "summary": {
                "fev1_l": s.fev1_l, "fvc_l": s.fvc_l, "pef_lps": s.pef_lps,
                "fef25_lps": s.fef25_lps, "fef50_lps": s.fef50_lps,
                "fef75_lps": s.fef75_lps, "ratio": s.ratio,
            },
        })
    ds = SpiroDataset(
        dv_l=dv_l,
        t_len=t_len,
        patch_len=patch_len,
        standardizer=std,
        curves=np.stack([c.flow_lps for c in kept_curves]).astype("<f4"),
        meta=meta,
    )
    return ds, dropped


def write_dataset(ds: SpiroDataset, path) -> None:
    curve_block = np.ascontiguousarray(ds.curves, dtype="<f4").tobytes()
    meta_block = "".join(
        json.dumps(m, separators=(",", ":")) + "\n" for m in ds.meta
    ).encode("utf-8")
    manifest = {
        "schema_version": VERSION,
        "dv_l": ds.dv_l,
        "t_len": ds.t_len,
        "patch_len": ds.patch_len,
        "n_records": ds.n_records,
        "curve_dtype": "<f4",
        "curve_bytes": len(curve_block),
        "metadata_bytes": len(meta_block),
        "standardizer": ds.standardizer.to_obj(),
        "endpoints": list(ENDPOINTS),
    }
    mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    blob = (
        MAGIC
        + np.uint32(VERSION).tobytes()
        + np.uint64(len(mbytes)).tobytes()
        + mbytes
        + curve_block
        + meta_block
    )
    atomic_write_bytes(path, blob)


def read_dataset(path) -> SpiroDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER:
        raise IntegrityError(
            f"dataset file is {len(blob)} bytes, shorter than the {_HEADER}-byte header"
        )
    if blob[:4] != MAGIC:
        raise IntegrityError(f"bad magic {blob[:4]!r} at offset 0; expected {MAGIC!r}")
    version = int(np.frombuffer(blob, "<u4", count=1, offset=4)[0])
    if version != VERSION:
        raise IntegrityError(f"unsupported dataset version {version}; expected {VERSION}")
    mlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    if _HEADER + mlen > len(blob):
        raise IntegrityError(
            f"manifest of {mlen} bytes exceeds file size at offset {_HEADER}"
        )
    try:
        manifest = json.loads(blob[_HEADER : _HEADER + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable dataset manifest: {exc}") from exc

    curve_off = _HEADER + mlen
    curve_bytes = int(manifest["curve_bytes"])
    meta_bytes = int(manifest["metadata_bytes"])
    expected = curve_off + curve_bytes + meta_bytes
    if len(blob) != expected:
        raise IntegrityError(
            f"dataset file is {len(blob)} bytes; expected {expected} "
            f"(truncated at offset {len(blob)})"
        )
    n = int(manifest["n_records"])
    t_len = int(manifest["t_len"])
    if curve_bytes != n * t_len * 4:
        raise IntegrityError(
            f"curve block is {curve_bytes} bytes; {n} x {t_len} float32 needs "
            f"{n * t_len * 4}"
        )
    curves = np.frombuffer(
        blob, dtype="<f4", count=n * t_len, offset=curve_off
    ).reshape(n, t_len).copy()
    meta_lines = blob[curve_off + curve_bytes :].decode("utf-8").splitlines()
    if len(meta_lines) != n:
        raise IntegrityError(
            f"metadata table has {len(meta_lines)} rows for {n} records"
        )
    meta = [json.loads(line) for line in meta_lines]
    return SpiroDataset(
        dv_l=float(manifest["dv_l"]),
        t_len=t_len,
        patch_len=int(manifest["patch_len"]),
        standardizer=Standardizer.from_obj(manifest["standardizer"]),
        curves=curves,
        meta=meta,
    )
