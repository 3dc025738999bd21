"""Raw blow -> standardized, patchified flow-volume model input.

Order of operations per blow (mirrors the preprocessing appendix of the
protocol this package implements):

  1. acceptability-code check (0 or 32 pass),
  2. mL -> L, monotone enforcement by running max,
  3. Gaussian smoothing (sigma = 1 sample) of the volume series,
  4. forward finite difference -> flow,
  5. linear interpolation of flow onto a uniform volume grid (dv_l per step),
  6. zero right-padding to a fixed length T, patchified into N = T/P patches.

Summary measures (FEV1, FVC, PEF, FEF25/50/75) come from the same smoothed
series. Cohort-level QC drops blows in the extreme 0.5% tails of FEV1, FVC
or PEF. Standardization is per grid position, fit on the training split only;
padded positions stay exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParameterError

DT_S = 0.010

VALID_ACCEPTABILITY_CODES = frozenset({0, 32})


@dataclass(frozen=True)
class VolumeTimeSeries:
    """Raw blow: integer volume samples (mL) at fixed 10 ms steps."""

    volume_ml: np.ndarray
    dt_s: float = DT_S
    acceptability_code: int = 0


@dataclass(frozen=True)
class SpiroSummary:
    fev1_l: float
    fvc_l: float
    pef_lps: float
    fef25_lps: float
    fef50_lps: float
    fef75_lps: float
    ratio: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.fev1_l, self.fvc_l, self.pef_lps, self.fef25_lps,
             self.fef50_lps, self.fef75_lps, self.ratio]
        )


SUMMARY_FEATURE_NAMES = (
    "fev1_l", "fvc_l", "pef_lps", "fef25_lps", "fef50_lps", "fef75_lps", "ratio"
)


@dataclass(frozen=True)
class FlowVolumeCurve:
    """Flow (L/s) on the uniform volume grid, zero-padded to length T."""

    flow_lps: np.ndarray
    valid_len: int
    dv_l: float


@dataclass(frozen=True)
class PatchSequence:
    patches: np.ndarray  # [N, P]
    mask: np.ndarray  # [N+1] bool, True = padding; mask[0] is the CLS slot
    n_patches: int


def validate_blow(acceptability_code: int) -> bool:
    """True iff the recorded acceptability code marks the blow usable."""
    return acceptability_code in VALID_ACCEPTABILITY_CODES


def smooth_gaussian(series: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing, kernel truncated at +/-4 sigma, reflect padding.

    The kernel is renormalized to sum exactly 1 after truncation, so constant
    inputs pass through unchanged.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"smooth_gaussian expects a 1-D series, got shape {x.shape}")
    radius = int(4.0 * sigma + 0.5)
    if radius == 0:
        return x.copy()
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    # edge-repeating reflection (numpy "symmetric"); this is the convention
    # under which the convolution preserves the total sum exactly
    ext = np.pad(x, radius, mode="symmetric")
    return np.convolve(ext, kernel, mode="valid")


def volume_to_flow(volume_l: np.ndarray, dt_s: float = DT_S) -> np.ndarray:
    """Forward difference flow F(t) = (V(t+dt) - V(t)) / dt, length n-1."""
    v = np.asarray(volume_l, dtype=np.float64)
    if v.size < 2:
        raise DataError(f"need at least 2 volume samples to form flow, got {v.size}")
    return np.diff(v) / dt_s


def _prepare_volume_l(blow: VolumeTimeSeries) -> np.ndarray:
    v = np.asarray(blow.volume_ml, dtype=np.float64) / 1000.0
    return np.maximum.accumulate(v)  # enforce monotone non-decreasing


def _smoothed_flow_and_volume(blow: VolumeTimeSeries, sigma: float = 1.0):
    vol = smooth_gaussian(_prepare_volume_l(blow), sigma)
    vol = np.maximum.accumulate(vol)
    flow = volume_to_flow(vol, blow.dt_s)
    return flow, vol


def compute_summary(blow: VolumeTimeSeries, sigma: float = 1.0) -> SpiroSummary:
    """FEV1, FVC, PEF and FEF markers from one blow.

    Volume measures (FEV1, FVC) read the raw monotone volume; flow measures
    (PEF, FEF) read the smoothed flow, since smoothing exists to stabilize
    differentiation but slightly biases the series endpoints.
    """
    if np.asarray(blow.volume_ml).size < 2:
        raise DataError("blow shorter than 2 samples")
    raw = _prepare_volume_l(blow)
    flow, vol = _smoothed_flow_and_volume(blow, sigma)
    t = np.arange(raw.size) * blow.dt_s
    if t[-1] < 1.0:
        raise DataError(
            f"blow lasts {t[-1]:.2f} s (< 1 s); FEV1 is undefined"
        )
    fvc = float(raw.max())
    if fvc <= 0.0:
        raise DataError("degenerate blow: FVC is zero")
    fev1 = float(np.interp(1.0, t, raw))
    pef = float(flow.max())
    # flow[i] is measured at volume vol[i]; restrict to the first occurrence
    # of each volume so plateaus resolve to the earliest crossing
    base = vol[: flow.size]
    keep = np.concatenate([[True], np.diff(base) > 0])
    fefs = [
        float(np.interp(q * fvc, base[keep], flow[keep])) for q in (0.25, 0.50, 0.75)
    ]
    ratio = min(fev1 / fvc, 1.0)
    return SpiroSummary(
        fev1_l=fev1, fvc_l=fvc, pef_lps=pef,
        fef25_lps=fefs[0], fef50_lps=fefs[1], fef75_lps=fefs[2], ratio=ratio,
    )


def qc_filter(summaries: list[SpiroSummary]) -> np.ndarray:
    """Indices of blows inside the [0.5, 99.5] percentile band of FEV1/FVC/PEF.

    Percentiles use the nearest-rank convention, so small cohorts drop
    nothing and a cohort of n blows never loses more than 0.5% per tail per
    measure. A blow is dropped iff any measure falls strictly outside its
    band.
    """
    if not summaries:
        raise DataError("qc_filter needs at least one summary")
    cols = {
        "fev1": np.array([s.fev1_l for s in summaries]),
        "fvc": np.array([s.fvc_l for s in summaries]),
        "pef": np.array([s.pef_lps for s in summaries]),
    }
    keep = np.ones(len(summaries), dtype=bool)
    for vals in cols.values():
        lo, hi = np.percentile(vals, [0.5, 99.5], method="nearest")
        keep &= (vals >= lo) & (vals <= hi)
    return np.flatnonzero(keep)


def build_flow_volume(
    flow: np.ndarray, volume: np.ndarray, dv_l: float, t_max: int
) -> FlowVolumeCurve:
    """Interpolate flow onto the uniform volume grid and zero-pad to t_max.

    ``flow[i]`` is the forward difference over [volume[i], volume[i+1]]; the
    interpolation treats it as the flow at grid point volume[i].
    """
    if dv_l <= 0:
        raise ParameterError(f"dv_l must be positive, got {dv_l}")
    flow = np.asarray(flow, dtype=np.float64)
    volume = np.asarray(volume, dtype=np.float64)
    if flow.size + 1 != volume.size and flow.size != volume.size:
        raise DataError(
            f"flow ({flow.size}) and volume ({volume.size}) are not aligned"
        )
    vol = np.maximum.accumulate(volume)[: flow.size]
    fvc = float(np.maximum.accumulate(volume).max())
    # 1e-9 guards the float division so e.g. FVC=0.30, dv=0.01 yields 31
    valid_len = int(np.floor(fvc / dv_l + 1e-9)) + 1
    if valid_len > t_max:
        raise DataError(
            f"curve needs {valid_len} samples at dv_l={dv_l} but t_max={t_max}; "
            "raise t_max or coarsen the grid"
        )
    grid = np.arange(valid_len) * dv_l
    # collapse duplicate volume points (zero-flow plateaus) for interpolation
    keep = np.concatenate([[True], np.diff(vol) > 0])
    resampled = np.interp(grid, vol[keep], flow[keep])
    out = np.zeros(t_max, dtype=np.float64)
    out[:valid_len] = resampled
    return FlowVolumeCurve(flow_lps=out, valid_len=valid_len, dv_l=dv_l)


def pad_to_patch_multiple(t_max: int, patch_len: int) -> int:
    """Smallest T >= t_max divisible by patch_len."""
    if patch_len <= 0:
        raise ConfigError(f"patch length must be positive, got {patch_len}")
    return ((t_max + patch_len - 1) // patch_len) * patch_len


def patchify(curve: FlowVolumeCurve, patch_len: int) -> PatchSequence:
    """Split into N = T/P contiguous patches plus a CLS mask slot."""
    t = curve.flow_lps.size
    if patch_len <= 0 or t % patch_len != 0:
        raise ConfigError(
            f"curve length {t} is not divisible by patch length {patch_len}"
        )
    n = t // patch_len
    patches = curve.flow_lps.reshape(n, patch_len)
    first_sample = np.arange(n) * patch_len
    mask = np.concatenate([[False], first_sample >= curve.valid_len])
    return PatchSequence(patches=patches, mask=mask, n_patches=n)


@dataclass(frozen=True)
class Standardizer:
    """Per-position z-scoring statistics fit on the training split."""

    mean: np.ndarray
    sd: np.ndarray

    def to_obj(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_obj(cls, obj: dict) -> "Standardizer":
        return cls(
            mean=np.asarray(obj["mean"], dtype=np.float64),
            sd=np.asarray(obj["sd"], dtype=np.float64),
        )


def fit_standardizer(curves: list[FlowVolumeCurve], sd_floor: float = 1e-6) -> Standardizer:
    """Per-position mean/sd over valid (non-pad) samples of the given curves."""
    if not curves:
        raise DataError("fit_standardizer needs at least one curve")
    t = curves[0].flow_lps.size
    flows = np.stack([c.flow_lps for c in curves])
    valid = np.arange(t)[None, :] < np.array([c.valid_len for c in curves])[:, None]
    count = valid.sum(axis=0)
    safe = np.maximum(count, 1)
    mean = np.where(count > 0, (flows * valid).sum(axis=0) / safe, 0.0)
    var = np.where(
        count > 0, (((flows - mean) * valid) ** 2).sum(axis=0) / safe, 0.0
    )
    sd = np.maximum(np.sqrt(var), sd_floor)
    return Standardizer(mean=mean, sd=sd)


def apply_standardizer(std: Standardizer, curve: FlowVolumeCurve) -> FlowVolumeCurve:
    """Z-score valid positions; padded positions stay exactly zero."""
    t = curve.flow_lps.size
    if std.mean.size != t:
        raise DataError(
            f"standardizer length {std.mean.size} does not match curve length {t}"
        )
    z = (curve.flow_lps - std.mean) / std.sd
    z[curve.valid_len:] = 0.0
    return FlowVolumeCurve(flow_lps=z, valid_len=curve.valid_len, dv_l=curve.dv_l)


def preprocess_blow(
    blow: VolumeTimeSeries, dv_l: float = 0.01, t_max: int = 1024, sigma: float = 1.0
) -> tuple[FlowVolumeCurve, SpiroSummary]:
    """Full single-blow path: smooth, differentiate, resample, summarize."""
    summary = compute_summary(blow, sigma)
    flow, vol = _smoothed_flow_and_volume(blow, sigma)
    curve = build_flow_volume(flow, vol, dv_l, t_max)
    return curve, summary
