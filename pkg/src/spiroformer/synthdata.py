"""Synthetic spirogram cohorts with demographics and endpoint labels.

The blow model has two regimes. Flow rises to the peak (PEF) along a
smoothstep over ``rise_time_s``, then decays along the descending limb, which
is defined directly in flow-volume space:

    F(V) = PEF * (1 - w)^gamma,   w = (V - V_peak) / (V_inf - V_peak)

with gamma = 1 + 3*scoop. gamma = 1 gives an exactly straight (affine)
descending limb; larger gamma gives the concave "scooped" shape associated
with airflow obstruction. The asymptote V_inf is solved per blow so the
volume at the final 10 ms sample equals fvc_liters exactly in the noiseless
case. Both regimes have closed-form volume trajectories, so FVC, PEF and the
limb shape are known analytically and serve as test oracles.

All randomness flows through numpy Generators derived from explicit integer
seeds; identical (params, seed) pairs give bitwise-identical series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, DataError, ParameterError
from .fileio import atomic_write_text, dump_ndjson_lines, read_ndjson
from .preproc import DT_S, VolumeTimeSeries

ENDPOINTS = ("copd_risk", "mortality", "exacerbation")


@dataclass(frozen=True)
class BlowParams:
    """Ground-truth parameters of one synthetic blow."""

    fvc_liters: float
    pef_lps: float
    scoop: float
    rise_time_s: float
    noise_sd: float
    duration_s: float


@dataclass(frozen=True)
class Demographics:
    age: int
    sex: int
    smoking: int
    height_cm: int


@dataclass(frozen=True)
class EndpointLabels:
    copd_risk: int
    mortality: int
    exacerbation: int


@dataclass(frozen=True)
class CohortRecord:
    id: str
    blow: VolumeTimeSeries
    demographics: Demographics
    labels: EndpointLabels
    blow_params: BlowParams


def validate_params(params: BlowParams) -> None:
    """Raise ParameterError if params fall outside the documented domain."""
    p = params
    if not (0.5 <= p.fvc_liters <= 8.0):
        raise ParameterError(f"fvc_liters {p.fvc_liters} outside [0.5, 8.0]")
    if not (1.0 <= p.pef_lps <= 16.0):
        raise ParameterError(f"pef_lps {p.pef_lps} outside [1.0, 16.0]")
    if not (0.0 <= p.scoop <= 1.0):
        raise ParameterError(f"scoop {p.scoop} outside [0, 1]")
    if p.noise_sd < 0.0:
        raise ParameterError(f"noise_sd {p.noise_sd} is negative")
    if p.rise_time_s <= 0.0 or p.duration_s <= 0.0:
        raise ParameterError("rise_time_s and duration_s must be positive")
    if p.rise_time_s >= p.duration_s:
        raise ParameterError(
            f"rise_time_s {p.rise_time_s} must be < duration_s {p.duration_s}"
        )
    dur = _grid_duration(p.duration_s)
    if dur <= p.rise_time_s:
        raise ParameterError(
            f"duration_s {p.duration_s} leaves no descending limb on the 10 ms grid"
        )
    vs = descent_start_volume(p)
    if vs >= p.fvc_liters:
        raise ParameterError(
            f"volume at end of PEF hold ({vs:.3f} L) reaches fvc_liters "
            f"({p.fvc_liters} L); shorten rise_time_s or lower pef_lps"
        )
    # the descending limb must be able to carry the remaining volume even as
    # flow decays; the hard ceiling is PEF sustained for the whole tail
    tail = dur - p.rise_time_s - peak_hold_s(p)
    if p.fvc_liters - vs >= 0.999 * p.pef_lps * tail:
        raise ParameterError(
            f"blow cannot reach fvc_liters {p.fvc_liters} L within duration_s "
            f"{p.duration_s} s at pef_lps {p.pef_lps}"
        )


def peak_volume(params: BlowParams) -> float:
    """Volume exhaled by the time flow peaks (integral of the smoothstep rise)."""
    return 0.5 * params.pef_lps * params.rise_time_s


def peak_hold_s(params: BlowParams) -> float:
    """Duration flow is held at PEF before the descending limb starts.

    The hold is wider than the smoothing kernel used downstream (sigma = 1
    sample = 10 ms, radius 4), so the smoothed flow maximum still reads PEF
    rather than a rounded-off corner.
    """
    tail = _grid_duration(params.duration_s) - params.rise_time_s
    return min(0.06, 0.3 * tail)


def descent_start_volume(params: BlowParams) -> float:
    """Volume at which the descending limb begins (end of the PEF hold)."""
    return peak_volume(params) + params.pef_lps * peak_hold_s(params)


def descending_gamma(params: BlowParams) -> float:
    return 1.0 + 3.0 * params.scoop


def _grid_duration(duration_s: float) -> float:
    """Snap the blow duration to the 10 ms sampling grid (nearest sample)."""
    return round(duration_s / DT_S) * DT_S


def _tail_fraction(gamma: float, k: float, tau) -> np.ndarray:
    """u(tau): remaining-volume fraction of the descending limb at tail time tau.

    Solves du/dtau = -k u^gamma with u(0) = 1; gamma == 1 is exponential,
    gamma > 1 decays algebraically.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if abs(gamma - 1.0) < 1e-12:
        return np.exp(-k * tau)
    return (1.0 + (gamma - 1.0) * k * tau) ** (-1.0 / (gamma - 1.0))


def _solve_vinf(params: BlowParams) -> float:
    """Find the descending-limb asymptote so V(duration) == fvc exactly."""
    vs = descent_start_volume(params)
    need = params.fvc_liters - vs
    gamma = descending_gamma(params)
    tail_t = (
        _grid_duration(params.duration_s) - params.rise_time_s - peak_hold_s(params)
    )

    def gap(a: float) -> float:
        # a = V_inf - V_start; delivered volume at the end of the tail
        k = params.pef_lps / a
        return a * (1.0 - float(_tail_fraction(gamma, k, tail_t))) - need

    lo = need * (1.0 + 1e-13)
    if gap(lo) >= 0.0:
        # flow decays to ~zero well before the end of the blow; the asymptote
        # sits within a part in 1e13 of the delivered volume
        return vs + lo
    hi = need * 2.0
    while gap(hi) < 0.0:
        hi *= 2.0
        if hi > 1e9:
            raise ParameterError("descending limb cannot deliver the requested FVC")
    a = brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=200)
    return vs + float(a)


def analytic_volume(params: BlowParams, t) -> np.ndarray:
    """Noise-free volume (L) at times t (s) under the blow model.

    Three regimes: smoothstep rise to PEF, brief hold at PEF, then the
    power-law descending limb.
    """
    t = np.asarray(t, dtype=np.float64)
    vp = peak_volume(params)
    vs = descent_start_volume(params)
    hold = peak_hold_s(params)
    vinf = _solve_vinf(params)
    gamma = descending_gamma(params)
    a = vinf - vs
    k = params.pef_lps / a
    u = np.clip(t / params.rise_time_s, 0.0, 1.0)
    rising = params.pef_lps * params.rise_time_s * (u**3 - 0.5 * u**4)
    held = vp + params.pef_lps * np.clip(t - params.rise_time_s, 0.0, hold)
    tau = np.maximum(t - params.rise_time_s - hold, 0.0)
    falling = vs + a * (1.0 - _tail_fraction(gamma, k, tau))
    out = np.where(t <= params.rise_time_s, rising, held)
    return np.where(tau > 0.0, falling, out)


def analytic_flow_at_volume(params: BlowParams, volume_l) -> np.ndarray:
    """Descending-limb flow (L/s) as a function of exhaled volume (L).

    Defined for volumes in [descent_start_volume, fvc_liters]; this is the
    curve whose concavity the scoop parameter controls (affine when
    scoop == 0).
    """
    v = np.asarray(volume_l, dtype=np.float64)
    vs = descent_start_volume(params)
    vinf = _solve_vinf(params)
    if np.any(v < vs - 1e-12) or np.any(v > params.fvc_liters + 1e-12):
        raise ParameterError("volume outside the descending limb [V_start, FVC]")
    w = (v - vs) / (vinf - vs)
    return params.pef_lps * (1.0 - np.clip(w, 0.0, 1.0)) ** descending_gamma(params)


def synth_volume_curve(params: BlowParams, seed: int) -> VolumeTimeSeries:
    """Render one blow to integer-mL samples at 10 ms steps.

    Additive volume noise is clipped at +/-2 noise_sd, so two renderings of
    the same params differ by at most 4 noise_sd per sample.
    """
    validate_params(params)
    dur = _grid_duration(params.duration_s)
    n = int(round(dur / DT_S))
    t = np.arange(n + 1) * DT_S
    vol = analytic_volume(params, t)
    if params.noise_sd > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, params.noise_sd, size=vol.shape)
        # clip half a mL inside +/-2 sd so integer rounding cannot push two
        # renderings of the same params past 4 noise_sd apart
        c = max(2.0 * params.noise_sd - 0.0005, 0.0)
        vol = vol + np.clip(noise, -c, c)
    ml = np.maximum(np.rint(vol * 1000.0), 0.0).astype(np.int64)
    return VolumeTimeSeries(volume_ml=ml, dt_s=DT_S, acceptability_code=0)


# ---------------------------------------------------------------------------
# cohort generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelSpec:
    """How endpoint labels depend on (scoop, fvc, demographics).

    mode "deterministic": label = 1 iff scoop > threshold for that endpoint.
    mode "probabilistic": label ~ Bernoulli(sigmoid(w . features + b)) with b
    calibrated per endpoint so prevalence matches ``targets``.
    """

    mode: str = "probabilistic"
    thresholds: dict = field(
        default_factory=lambda: {e: 0.5 for e in ENDPOINTS}
    )
    targets: dict = field(
        default_factory=lambda: {
            "copd_risk": 0.30,
            "mortality": 0.12,
            "exacerbation": 0.18,
        }
    )
    # per-endpoint weights on (scoop, fvc, age, sex, smoking, height); units:
    # scoop/fvc raw, age per decade from 55, height per 10 cm from 168
    weights: dict = field(
        default_factory=lambda: {
            "copd_risk": {"scoop": 40.0, "fvc": -6.4, "age": 1.8, "sex": 0.0,
                          "smoking": 3.6, "height": 0.0},
            "mortality": {"scoop": 3.0, "fvc": -0.4, "age": 1.6, "sex": 0.3,
                          "smoking": 0.9, "height": 0.0},
            "exacerbation": {"scoop": 6.0, "fvc": -0.2, "age": 0.3, "sex": 0.0,
                             "smoking": 1.8, "height": 0.0},
        }
    )
    scoop_choices: tuple | None = None  # discrete support overrides the range
    scoop_low: float = 0.02
    scoop_high: float = 0.98
    scoop_bimodal: bool = False  # two well-separated lobes (planted signal)
    fvc_band: tuple | None = None  # uniform FVC override (controlled probes)
    noise_sd_l: float = 0.001


def planted_label_spec(threshold: float = 0.5) -> LabelSpec:
    """Deterministic labels from a bimodal scoop: a planted shape signal.

    The FVC band is pinned so the scooped region falls on the same patch
    range for every record; nothing but the post-peak shape separates the
    classes, and nuisance alignment keeps the cohort-mean profile crisp.
    """
    return LabelSpec(
        mode="deterministic",
        thresholds={e: threshold for e in ENDPOINTS},
        scoop_bimodal=True,
        fvc_band=(3.0, 4.2),
    )


def benchmark_label_spec() -> LabelSpec:
    """Default probabilistic cohort used by the evaluation benchmark."""
    return LabelSpec()


def _validate_label_spec(spec: LabelSpec) -> None:
    if spec.mode not in ("deterministic", "probabilistic"):
        raise ConfigError(f"unknown label mode {spec.mode!r}")
    for e in ENDPOINTS:
        if spec.mode == "probabilistic":
            t = spec.targets.get(e)
            if t is None or not (0.0 < t < 1.0):
                raise ConfigError(
                    f"target prevalence for {e} must lie strictly in (0,1), got {t}"
                )
        else:
            th = spec.thresholds.get(e)
            if th is None:
                raise ConfigError(f"deterministic mode needs a threshold for {e}")
    if spec.scoop_choices is not None and len(spec.scoop_choices) == 0:
        raise ConfigError("scoop_choices must be non-empty when given")
    if not (0.0 <= spec.scoop_low < spec.scoop_high <= 1.0):
        raise ConfigError(f"scoop range [{spec.scoop_low}, {spec.scoop_high}] invalid")
    if spec.fvc_band is not None:
        lo, hi = spec.fvc_band
        if not (1.0 <= lo < hi <= 7.5):
            raise ConfigError(f"fvc band [{lo}, {hi}] outside the valid domain")


def _sample_scoop(spec: LabelSpec, rng: np.random.Generator) -> float:
    if spec.scoop_choices is not None:
        return float(spec.scoop_choices[rng.integers(len(spec.scoop_choices))])
    if spec.scoop_bimodal:
        lo, hi = (0.05, 0.30) if rng.random() < 0.5 else (0.70, 0.95)
        return float(rng.uniform(lo, hi))
    return float(rng.uniform(spec.scoop_low, spec.scoop_high))


def _sample_demographics(rng: np.random.Generator) -> Demographics:
    sex = int(rng.random() < 0.5)
    age = int(rng.integers(40, 76))
    smoking = int(rng.random() < 0.45)
    height = int(np.clip(round(rng.normal(176.0 if sex else 163.0, 7.0)), 145, 205))
    return Demographics(age=age, sex=sex, smoking=smoking, height_cm=height)


def _sample_blow_params(spec: LabelSpec, demo: Demographics,
                        rng: np.random.Generator) -> BlowParams:
    # FVC loosely tracks height/age/sex; PEF scales with FVC so the blow is
    # always feasible (peak volume stays well below FVC)
    if spec.fvc_band is not None:
        lo, hi = spec.fvc_band
        fvc = rng.uniform(lo, hi)
    else:
        fvc = 2.6 + 0.045 * (demo.height_cm - 150) - 0.012 * (demo.age - 40) \
            + 0.5 * demo.sex + rng.normal(0.0, 0.35)
    fvc = float(np.clip(fvc, 1.0, 7.5))
    pef = float(np.clip(fvc * rng.uniform(1.8, 2.8), 1.0, 16.0))
    return BlowParams(
        fvc_liters=fvc,
        pef_lps=pef,
        scoop=_sample_scoop(spec, rng),
        rise_time_s=float(rng.uniform(0.08, 0.25)),
        noise_sd=spec.noise_sd_l,
        duration_s=float(rng.uniform(4.0, 9.0)),
    )


def _endpoint_logit(weights: dict, params: BlowParams, demo: Demographics) -> float:
    return (
        weights["scoop"] * (params.scoop - 0.5)
        + weights["fvc"] * (params.fvc_liters - 3.5)
        + weights["age"] * (demo.age - 55) / 10.0
        + weights["sex"] * demo.sex
        + weights["smoking"] * demo.smoking
        + weights["height"] * (demo.height_cm - 168) / 10.0
    )


def _calibrate_intercept(logits: np.ndarray, target: float) -> float:
    """Bisect the intercept so mean(sigmoid(logits + b)) == target."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logits + mid)))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_cohort(n: int, label_spec: LabelSpec, seed: int) -> list[CohortRecord]:
    """Sample n records: demographics, blow params, rendered blow, labels."""
    if n < 1:
        raise ParameterError(f"cohort size must be >= 1, got {n}")
    _validate_label_spec(label_spec)

    demos: list[Demographics] = []
    bparams: list[BlowParams] = []
    blows: list[VolumeTimeSeries] = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        demo = _sample_demographics(rng)
        bp = _sample_blow_params(label_spec, demo, rng)
        demos.append(demo)
        bparams.append(bp)
        blows.append(synth_volume_curve(bp, seed=int(rng.integers(2**62))))

    labels = _draw_labels(label_spec, bparams, demos, seed, n)
    records = []
    for i in range(n):
        records.append(
            CohortRecord(
                id=f"synth-{seed:08d}-{i:06d}",
                blow=blows[i],
                demographics=demos[i],
                labels=labels[i],
                blow_params=bparams[i],
            )
        )
    return records


def _draw_labels(spec, bparams, demos, seed, n) -> list[EndpointLabels]:
    cols: dict[str, np.ndarray] = {}
    for e in ENDPOINTS:
        if spec.mode == "deterministic":
            th = spec.thresholds[e]
            cols[e] = np.array(
                [1 if bp.scoop > th else 0 for bp in bparams], dtype=np.int64
            )
            continue
        target = spec.targets[e]
        logits = np.array(
            [_endpoint_logit(spec.weights[e], bp, d) for bp, d in zip(bparams, demos)]
        )
        b = _calibrate_intercept(logits, target)
        probs = 1.0 / (1.0 + np.exp(-(logits + b)))
        tol = 2.0 * math.sqrt(target * (1.0 - target) / n)
        best: np.ndarray | None = None
        best_gap = math.inf
        # Bernoulli draws; retry (deterministically) if the realized
        # prevalence strays beyond two binomial standard deviations
        for attempt in range(60):
            rng = np.random.default_rng([seed, 104729, attempt, _endpoint_tag(e)])
            draw = (rng.random(n) < probs).astype(np.int64)
            gap = abs(float(draw.mean()) - target)
            if gap < best_gap:
                best, best_gap = draw, gap
            if gap <= tol:
                break
        cols[e] = best
    return [
        EndpointLabels(
            copd_risk=int(cols["copd_risk"][i]),
            mortality=int(cols["mortality"][i]),
            exacerbation=int(cols["exacerbation"][i]),
        )
        for i in range(n)
    ]


def _endpoint_tag(endpoint: str) -> int:
    return ENDPOINTS.index(endpoint) + 1


# ---------------------------------------------------------------------------
# NDJSON cohort files
# ---------------------------------------------------------------------------

def record_to_obj(rec: CohortRecord) -> dict:
    return {
        "id": rec.id,
        "volume_ml": [int(v) for v in rec.blow.volume_ml],
        "age": rec.demographics.age,
        "sex": rec.demographics.sex,
        "smoking": rec.demographics.smoking,
        "height_cm": rec.demographics.height_cm,
        "copd_risk": rec.labels.copd_risk,
        "mortality": rec.labels.mortality,
        "exacerbation": rec.labels.exacerbation,
        "blow_params": asdict(rec.blow_params),
    }


def obj_to_record(obj: dict) -> CohortRecord:
    try:
        bp = obj["blow_params"]
        return CohortRecord(
            id=str(obj["id"]),
            blow=VolumeTimeSeries(
                volume_ml=np.asarray(obj["volume_ml"], dtype=np.int64)
            ),
            demographics=Demographics(
                age=int(obj["age"]), sex=int(obj["sex"]),
                smoking=int(obj["smoking"]), height_cm=int(obj["height_cm"]),
            ),
            labels=EndpointLabels(
                copd_risk=int(obj["copd_risk"]), mortality=int(obj["mortality"]),
                exacerbation=int(obj["exacerbation"]),
            ),
            blow_params=BlowParams(
                fvc_liters=float(bp["fvc_liters"]), pef_lps=float(bp["pef_lps"]),
                scoop=float(bp["scoop"]), rise_time_s=float(bp["rise_time_s"]),
                noise_sd=float(bp["noise_sd"]), duration_s=float(bp["duration_s"]),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed cohort record {obj.get('id', '?')!r}: {exc}") from exc


def write_cohort(records: Sequence[CohortRecord], path) -> None:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("cohort ids are not unique")
    atomic_write_text(path, dump_ndjson_lines(record_to_obj(r) for r in records))


def read_cohort(path) -> list[CohortRecord]:
    records = [obj_to_record(o) for o in read_ndjson(path)]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate record ids in {path}")
    return records
