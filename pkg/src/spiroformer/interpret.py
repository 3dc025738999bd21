"""CLS-attention interpretability: patch importance, stratification, overlays.

Importance of a patch is how much the CLS query attends to it, averaged over
every head and layer, then softmax-normalized over valid (non-pad) patches.
The softmax sharpens the profile and guarantees a distribution; the
alternative order (softmax per head/layer first, then mean, then renormalize)
sits behind a flag since the two disagree in general.

Cohorts are split at FEV1 50% of predicted using configurable sex-specific
linear reference coefficients; no clinical validity is claimed for any
bundled numbers, they are pipeline parameters.

Overlays are exported twice per curve: a CSV table (volume_l, flow_lps,
patch_index, importance) with exactly valid_len rows, and a self-contained
SVG showing the flow-volume polyline, per-patch shading with opacity
opacity_i = OPACITY_MAX * importance_i / max(importance), a black-stroke
rectangle around the most important patch, and labeled vertical lines at the
PEF and FEF25/50/75 volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .fileio import atomic_write_text
from .model import ForwardTrace
from .preproc import FlowVolumeCurve, SpiroSummary

OPACITY_MAX = 0.85  # shading opacity of the most important patch


@dataclass(frozen=True)
class AttentionProfile:
    importance: np.ndarray  # [N], zeros on pad patches, sums to 1 over valid
    valid_patches: int
    most_important_patch: int


@dataclass(frozen=True)
class ReferenceEquation:
    """Sex-specific linear predicted-FEV1 model: a*height_cm + b*age + c."""

    male: tuple  # (a_height, b_age, c)
    female: tuple

    def predicted_fev1(self, demographics) -> float:
        a, b, c = self.male if demographics.sex == 1 else self.female
        return a * demographics.height_cm + b * demographics.age + c

    def to_obj(self) -> dict:
        return {"male": list(self.male), "female": list(self.female)}

    @classmethod
    def from_obj(cls, obj: dict) -> "ReferenceEquation":
        male = tuple(float(v) for v in obj["male"])
        female = tuple(float(v) for v in obj["female"])
        if len(male) != 3 or len(female) != 3:
            raise ConfigError("reference equation needs 3 coefficients per sex")
        return cls(male=male, female=female)


GOLD_THRESHOLD_PCT = 50.0
GOLD_TAGS = ("stage12", "stage34")


@dataclass(frozen=True)
class MarkerSet:
    pef_pos: int
    fef25_pos: int
    fef50_pos: int
    fef75_pos: int

    def as_dict(self) -> dict:
        return {"PEF": self.pef_pos, "FEF25": self.fef25_pos,
                "FEF50": self.fef50_pos, "FEF75": self.fef75_pos}


def _masked_softmax(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros(values.size)
    v = values[valid]
    e = np.exp(v - v.max())
    out[valid] = e / e.sum()
    return out


def cls_attention_profile(
    trace: ForwardTrace, softmax_first: bool = False
) -> AttentionProfile:
    """Importance per patch from the CLS attention row.

    Default: mean the CLS-query attention over layers and heads, then
    softmax over valid patches. softmax_first applies the softmax per
    (layer, head) before averaging and renormalizes the mean instead.
    """
    attn = np.asarray(trace.attention, dtype=np.float64)
    if attn.ndim != 4 or attn.shape[-1] != attn.shape[-2]:
        raise DataError(f"trace attention has shape {attn.shape}; "
                        "expected [layers, heads, L, L]")
    if attn.size == 0:
        raise DataError("trace carries no attention weights")
    n = attn.shape[-1] - 1
    valid = ~np.asarray(trace.mask[1:], dtype=bool)  # [N]
    if not valid.any():
        raise DataError("no valid patches to attribute")
    cls_rows = attn[:, :, 0, 1:]  # [layers, heads, N]

    if softmax_first:
        per = np.stack([
            _masked_softmax(cls_rows[l, h], valid)
            for l in range(cls_rows.shape[0])
            for h in range(cls_rows.shape[1])
        ])
        mean = per.mean(axis=0)
        importance = np.zeros(n)
        importance[valid] = mean[valid] / mean[valid].sum()
    else:
        mean = cls_rows.mean(axis=(0, 1))
        importance = _masked_softmax(mean, valid)

    return AttentionProfile(
        importance=importance,
        valid_patches=int(valid.sum()),
        most_important_patch=int(np.argmax(importance)),
    )


def gold_stratify(summary: SpiroSummary, demographics,
                  ref: ReferenceEquation) -> str:
    """stage12 iff FEV1 percent-predicted >= 50 (boundary inclusive)."""
    predicted = ref.predicted_fev1(demographics)
    if predicted <= 0:
        raise DataError(
            f"reference equation predicts non-positive FEV1 ({predicted:.3f} L)"
        )
    pct = 100.0 * summary.fev1_l / predicted
    return "stage12" if pct >= GOLD_THRESHOLD_PCT else "stage34"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def locate_markers(summary: SpiroSummary, curve: FlowVolumeCurve) -> MarkerSet:
    """Grid indices of PEF (argmax flow) and FEF25/50/75 (volume fractions)."""
    if curve.valid_len < 2 or summary.fvc_l <= 0:
        raise DataError(
            f"degenerate curve: valid_len={curve.valid_len}, fvc={summary.fvc_l}"
        )
    pef_pos = int(np.argmax(curve.flow_lps[: curve.valid_len]))
    positions = {}
    for q in (0.25, 0.50, 0.75):
        pos = _round_half_up(q * summary.fvc_l / curve.dv_l)
        positions[q] = min(pos, curve.valid_len - 1)
    return MarkerSet(
        pef_pos=pef_pos,
        fef25_pos=positions[0.25],
        fef50_pos=positions[0.50],
        fef75_pos=positions[0.75],
    )


def cohort_mean_profile(profiles: list) -> AttentionProfile:
    """Element-wise mean of importance, renormalized over valid patches."""
    if not profiles:
        raise DataError("cannot average an empty cohort")
    n = profiles[0].importance.size
    for p in profiles:
        if p.importance.size != n:
            raise ShapeError(
                f"profiles disagree on patch count: {p.importance.size} vs {n}"
            )
    stack = np.stack([p.importance for p in profiles])
    mean = stack.mean(axis=0)
    valid = mean > 0
    if not valid.any():
        raise DataError("cohort importance is all zero")
    out = np.zeros(n)
    out[valid] = mean[valid] / mean[valid].sum()
    return AttentionProfile(
        importance=out,
        valid_patches=int(valid.sum()),
        most_important_patch=int(np.argmax(out)),
    )


# ---------------------------------------------------------------------------
# overlay export
# ---------------------------------------------------------------------------

def overlay_csv_text(curve: FlowVolumeCurve, profile: AttentionProfile,
                     patch_len: int) -> str:
    lines = ["volume_l,flow_lps,patch_index,importance"]
    for i in range(curve.valid_len):
        patch = i // patch_len
        lines.append(
            f"{i * curve.dv_l:.10f},{curve.flow_lps[i]:.10f},{patch},"
            f"{profile.importance[patch]:.17g}"
        )
    return "\n".join(lines) + "\n"


def _svg_header(width: float, height: float) -> str:
    return (
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {width:.1f} {height:.1f}" '
        f'width="{width:.0f}" height="{height:.0f}">'
    )


def overlay_svg_text(curve: FlowVolumeCurve, profile: AttentionProfile,
                     markers: MarkerSet, patch_len: int) -> str:
    """Self-contained SVG: shaded patches, black top-patch box, marker lines."""
    width, height, pad = 640.0, 360.0, 40.0
    v_max = (curve.valid_len - 1) * curve.dv_l
    f_max = float(curve.flow_lps[: curve.valid_len].max())
    if v_max <= 0 or f_max <= 0:
        raise DataError("cannot render a degenerate curve")
    sx = (width - 2 * pad) / v_max
    sy = (height - 2 * pad) / f_max

    def x_of(vol: float) -> float:
        return pad + vol * sx

    def y_of(flow: float) -> float:
        return height - pad - flow * sy

    parts = [_svg_header(width, height)]
    imax = profile.importance.max()
    n_valid_patches = (curve.valid_len + patch_len - 1) // patch_len
    top = profile.most_important_patch
    for i in range(n_valid_patches):
        v0 = i * patch_len * curve.dv_l
        v1 = min((i + 1) * patch_len, curve.valid_len - 1) * curve.dv_l
        if v1 <= v0:
            continue
        opacity = OPACITY_MAX * profile.importance[i] / imax if imax > 0 else 0.0
        parts.append(
            f'<rect class="patch" x="{x_of(v0):.3f}" y="{pad:.3f}" '
            f'width="{(v1 - v0) * sx:.3f}" height="{height - 2 * pad:.3f}" '
            f'fill="#2166ac" opacity="{opacity:.17g}"/>'
        )
    # exactly one black-stroke rectangle, around the most important patch
    v0 = top * patch_len * curve.dv_l
    v1 = min((top + 1) * patch_len, curve.valid_len - 1) * curve.dv_l
    parts.append(
        f'<rect class="top-patch" x="{x_of(v0):.3f}" y="{pad:.3f}" '
        f'width="{max(v1 - v0, curve.dv_l) * sx:.3f}" '
        f'height="{height - 2 * pad:.3f}" fill="none" stroke="black" '
        'stroke-width="2"/>'
    )
    points = " ".join(
        f"{x_of(i * curve.dv_l):.3f},{y_of(curve.flow_lps[i]):.3f}"
        for i in range(curve.valid_len)
    )
    parts.append(
        f'<polyline points="{points}" fill="none" stroke="#b2182b" '
        'stroke-width="1.5"/>'
    )
    for label, pos in markers.as_dict().items():
        x = x_of(pos * curve.dv_l)
        parts.append(
            f'<line class="marker" x1="{x:.3f}" y1="{pad:.3f}" '
            f'x2="{x:.3f}" y2="{height - pad:.3f}" stroke="#4d4d4d" '
            'stroke-width="1" stroke-dasharray="4 3"/>'
        )
        parts.append(
            f'<text x="{x + 3:.3f}" y="{pad + 12:.3f}" font-size="10" '
            f'font-family="monospace" fill="#4d4d4d">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def overlay_export(curve: FlowVolumeCurve, profile: AttentionProfile,
                   markers: MarkerSet, out_prefix, patch_len: int) -> tuple:
    """Write <prefix>.csv and <prefix>.svg; returns both paths."""
    csv_path = f"{out_prefix}.csv"
    svg_path = f"{out_prefix}.svg"
    atomic_write_text(csv_path, overlay_csv_text(curve, profile, patch_len))
    atomic_write_text(svg_path, overlay_svg_text(curve, profile, markers, patch_len))
    return csv_path, svg_path
