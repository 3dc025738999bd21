"""Interpretability tests: importance math, stratification, markers, export."""

import math
import re

import numpy as np
import pytest

from spiroformer.errors import ConfigError, DataError, ShapeError
from spiroformer.interpret import (
    OPACITY_MAX,
    AttentionProfile,
    MarkerSet,
    ReferenceEquation,
    cls_attention_profile,
    cohort_mean_profile,
    gold_stratify,
    locate_markers,
    overlay_csv_text,
    overlay_export,
    overlay_svg_text,
)
from spiroformer.model import ForwardTrace
from spiroformer.preproc import FlowVolumeCurve, SpiroSummary


def make_trace(attention, mask):
    attention = np.asarray(attention, dtype=float)
    l, h, L, _ = attention.shape
    return ForwardTrace(
        h=np.zeros((L, 4)),
        cls_embedding=np.zeros(4),
        logit=0.0,
        probability=0.5,
        attention=attention,
        mask=np.asarray(mask, dtype=bool),
    )


def uniform_attention(layers, heads, n_tokens):
    a = np.full((layers, heads, n_tokens, n_tokens), 1.0 / n_tokens)
    return a


def make_summary(fev1=2.0, fvc=3.0):
    return SpiroSummary(fev1_l=fev1, fvc_l=fvc, pef_lps=6.0, fef25_lps=5.0,
                        fef50_lps=3.0, fef75_lps=1.0, ratio=fev1 / fvc)


class Demo:
    def __init__(self, age=60, sex=1, smoking=0, height_cm=175):
        self.age = age
        self.sex = sex
        self.smoking = smoking
        self.height_cm = height_cm


class TestAttentionProfile:
    def test_uniform_attention_gives_uniform_importance(self):
        trace = make_trace(uniform_attention(1, 1, 5), [False] * 5)
        prof = cls_attention_profile(trace)
        np.testing.assert_allclose(prof.importance, [0.25, 0.25, 0.25, 0.25],
                                   atol=1e-15)
        assert prof.valid_patches == 4
        assert prof.most_important_patch == 0  # tie -> lowest index

    def test_pad_patches_get_exact_zero(self):
        trace = make_trace(uniform_attention(2, 2, 5),
                           [False, False, False, True, True])
        prof = cls_attention_profile(trace)
        assert prof.importance[2] == 0.0
        assert prof.importance[3] == 0.0
        assert prof.importance[:2].sum() == pytest.approx(1.0, abs=1e-12)

    def test_hand_traced_mean_then_softmax(self):
        """2 layers x 2 heads with hand-set CLS rows, verified by hand."""
        att = np.zeros((2, 2, 3, 3))
        # CLS rows (query 0) toward keys 1..2 per (layer, head)
        att[0, 0, 0] = [0.0, 0.9, 0.1]
        att[0, 1, 0] = [0.0, 0.6, 0.4]
        att[1, 0, 0] = [0.0, 0.5, 0.5]
        att[1, 1, 0] = [0.0, 0.2, 0.8]
        trace = make_trace(att, [False, False, False])
        prof = cls_attention_profile(trace)
        m1 = (0.9 + 0.6 + 0.5 + 0.2) / 4  # 0.55
        m2 = (0.1 + 0.4 + 0.5 + 0.8) / 4  # 0.45
        z = math.exp(m1) + math.exp(m2)
        np.testing.assert_allclose(
            prof.importance, [math.exp(m1) / z, math.exp(m2) / z], atol=1e-12
        )
        assert prof.most_important_patch == 0

    def test_softmax_first_alternative(self):
        att = np.zeros((1, 2, 3, 3))
        att[0, 0, 0] = [0.0, 1.0, 0.0]
        att[0, 1, 0] = [0.0, 0.0, 1.0]
        trace = make_trace(att, [False, False, False])
        default = cls_attention_profile(trace)
        alt = cls_attention_profile(trace, softmax_first=True)
        # heads disagree symmetrically: softmax-first averages to uniform
        np.testing.assert_allclose(alt.importance, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(default.importance, [0.5, 0.5], atol=1e-12)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(0)
        base = rng.random((1, 1, 6, 6))
        trace_a = make_trace(base, [False] * 6)
        shifted = base.copy()
        shifted[0, 0, 0, 1:] += 3.7  # constant added to every CLS key weight
        trace_b = make_trace(shifted, [False] * 6)
        pa = cls_attention_profile(trace_a)
        pb = cls_attention_profile(trace_b)
        np.testing.assert_allclose(pa.importance, pb.importance, atol=1e-12)

    def test_no_attention_rejected(self):
        trace = make_trace(np.zeros((0, 0, 3, 3)), [False] * 3)
        with pytest.raises(DataError):
            cls_attention_profile(trace)

    def test_padding_length_invariance(self):
        """Extending the pad tail must not change valid-patch importance."""
        rng = np.random.default_rng(1)
        row = rng.random(4)
        att_short = np.zeros((1, 1, 5, 5))
        att_short[0, 0, 0, 1:] = row
        att_long = np.zeros((1, 1, 7, 7))
        att_long[0, 0, 0, 1:5] = row
        p_short = cls_attention_profile(
            make_trace(att_short, [False, False, False, True, True])
        )
        p_long = cls_attention_profile(
            make_trace(att_long, [False, False, False, True, True, True, True])
        )
        np.testing.assert_allclose(
            p_long.importance[:2], p_short.importance[:2], atol=1e-9
        )
        assert np.all(p_long.importance[2:] == 0.0)


class TestGoldStratify:
    def test_identity_reference_is_stage12(self):
        s = make_summary(fev1=2.0)
        ref = ReferenceEquation(male=(0.0, 0.0, 2.0), female=(0.0, 0.0, 2.0))
        assert gold_stratify(s, Demo(sex=1), ref) == "stage12"

    def test_boundary_fifty_percent_inclusive(self):
        s = make_summary(fev1=2.0)
        ref = ReferenceEquation(male=(0.0, 0.0, 4.0), female=(0.0, 0.0, 4.0))
        assert gold_stratify(s, Demo(sex=1), ref) == "stage12"

    def test_below_fifty_is_stage34(self):
        s = make_summary(fev1=1.9)
        ref = ReferenceEquation(male=(0.0, 0.0, 4.0), female=(0.0, 0.0, 4.0))
        assert gold_stratify(s, Demo(sex=1), ref) == "stage34"

    def test_sex_specific_coefficients(self):
        s = make_summary(fev1=2.0)
        ref = ReferenceEquation(male=(0.0, 0.0, 4.1), female=(0.0, 0.0, 3.9))
        assert gold_stratify(s, Demo(sex=1), ref) == "stage34"  # 48.8%
        assert gold_stratify(s, Demo(sex=0), ref) == "stage12"  # 51.3%

    def test_non_positive_prediction_rejected(self):
        ref = ReferenceEquation(male=(0.0, 0.0, -1.0), female=(0.0, 0.0, -1.0))
        with pytest.raises(DataError):
            gold_stratify(make_summary(), Demo(), ref)

    def test_cohort_split_matches_direct_recomputation(self):
        rng = np.random.default_rng(2)
        ref = ReferenceEquation(male=(0.03, -0.02, -0.5), female=(0.028, -0.02, -0.3))
        tags = []
        direct = []
        for _ in range(200):
            fev1 = float(rng.uniform(0.8, 4.0))
            demo = Demo(age=int(rng.integers(40, 76)), sex=int(rng.integers(0, 2)),
                        height_cm=int(rng.integers(150, 200)))
            s = make_summary(fev1=fev1, fvc=fev1 + 1.0)
            tags.append(gold_stratify(s, demo, ref))
            a, b, c = ref.male if demo.sex == 1 else ref.female
            pct = 100.0 * fev1 / (a * demo.height_cm + b * demo.age + c)
            direct.append("stage12" if pct >= 50.0 else "stage34")
        assert tags == direct
        assert len(set(tags)) == 2  # both cohorts occur

    def test_ref_equation_round_trip(self):
        ref = ReferenceEquation(male=(0.03, -0.02, -0.5), female=(0.028, -0.02, -0.3))
        assert ReferenceEquation.from_obj(ref.to_obj()) == ref
        with pytest.raises(ConfigError):
            ReferenceEquation.from_obj({"male": [1, 2], "female": [1, 2, 3]})


class TestMarkers:
    def test_documented_rounding_case(self):
        """FVC = 0.30 L on a 0.01 L grid: positions 8, 15, 23."""
        flow = np.zeros(40)
        flow[:31] = 2.0
        curve = FlowVolumeCurve(flow_lps=flow, valid_len=31, dv_l=0.01)
        s = make_summary(fev1=0.2, fvc=0.30)
        m = locate_markers(s, curve)
        assert (m.fef25_pos, m.fef50_pos, m.fef75_pos) == (8, 15, 23)

    def test_pef_at_unimodal_peak(self):
        flow = np.concatenate([np.linspace(0, 5, 10), np.linspace(5, 0.5, 21)[1:]])
        curve = FlowVolumeCurve(flow_lps=flow, valid_len=30, dv_l=0.01)
        m = locate_markers(make_summary(fvc=0.29), curve)
        assert m.pef_pos == 9

    def test_strictly_increasing_fef_positions(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            fvc = float(rng.uniform(0.04, 6.0))
            valid_len = int(np.floor(fvc / 0.01 + 1e-9)) + 1
            flow = np.zeros(valid_len + 5)
            flow[:valid_len] = rng.uniform(0.5, 8.0, size=valid_len)
            curve = FlowVolumeCurve(flow_lps=flow, valid_len=valid_len, dv_l=0.01)
            m = locate_markers(make_summary(fvc=fvc), curve)
            assert m.fef25_pos < m.fef50_pos < m.fef75_pos
            assert m.fef75_pos < valid_len

    def test_degenerate_curve_rejected(self):
        curve = FlowVolumeCurve(flow_lps=np.zeros(5), valid_len=1, dv_l=0.01)
        with pytest.raises(DataError):
            locate_markers(make_summary(), curve)


class TestCohortMean:
    def prof(self, importance):
        imp = np.asarray(importance, dtype=float)
        return AttentionProfile(
            importance=imp,
            valid_patches=int((imp > 0).sum()),
            most_important_patch=int(np.argmax(imp)),
        )

    def test_single_profile_unchanged(self):
        p = self.prof([0.7, 0.3, 0.0])
        mean = cohort_mean_profile([p])
        np.testing.assert_allclose(mean.importance, p.importance, atol=1e-15)

    def test_mirror_profiles_average_to_uniform(self):
        a = self.prof([0.8, 0.2])
        b = self.prof([0.2, 0.8])
        mean = cohort_mean_profile([a, b])
        np.testing.assert_allclose(mean.importance, [0.5, 0.5], atol=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        profs = []
        raw = []
        for _ in range(10):
            v = rng.random(6)
            v /= v.sum()
            raw.append(v)
            profs.append(self.prof(v))
        mean = cohort_mean_profile(profs)
        brute = np.mean(raw, axis=0)
        brute /= brute.sum()
        np.testing.assert_allclose(mean.importance, brute, atol=1e-12)

    def test_empty_and_mismatched(self):
        with pytest.raises(DataError):
            cohort_mean_profile([])
        with pytest.raises(ShapeError):
            cohort_mean_profile([self.prof([1.0]), self.prof([0.5, 0.5])])

    def test_argmax_stable_under_monotone_rescale(self):
        rng = np.random.default_rng(5)
        v = rng.random(8)
        v /= v.sum()
        p = self.prof(v)
        q = self.prof(np.sqrt(v) / np.sqrt(v).sum())  # strictly increasing map
        assert p.most_important_patch == q.most_important_patch


def sample_overlay(tmp_path):
    flow = np.concatenate([np.linspace(0, 6, 15), np.linspace(6, 0.2, 76)[1:]])
    t = np.zeros(120)
    t[:90] = flow
    curve = FlowVolumeCurve(flow_lps=t, valid_len=90, dv_l=0.01)
    imp = np.array([0.1, 0.5, 0.4, 0.0])
    profile = AttentionProfile(importance=imp, valid_patches=3,
                               most_important_patch=1)
    summary = make_summary(fvc=0.89)
    markers = locate_markers(summary, curve)
    prefix = str(tmp_path / "overlay")
    csv_path, svg_path = overlay_export(curve, profile, markers, prefix,
                                        patch_len=30)
    return curve, profile, markers, csv_path, svg_path


class TestOverlay:
    def test_csv_row_count_is_valid_len(self, tmp_path):
        curve, _, _, csv_path, _ = sample_overlay(tmp_path)
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "volume_l,flow_lps,patch_index,importance"
        assert len(lines) - 1 == curve.valid_len

    def test_svg_has_one_black_rect_and_four_markers(self, tmp_path):
        _, _, _, _, svg_path = sample_overlay(tmp_path)
        svg = open(svg_path).read()
        assert svg.count('stroke="black"') == 1
        assert len(re.findall(r'<rect class="top-patch"', svg)) == 1
        assert len(re.findall(r'<line class="marker"', svg)) == 4
        for label in ("PEF", "FEF25", "FEF50", "FEF75"):
            assert f">{label}</text>" in svg

    def test_opacity_matches_documented_linear_map(self, tmp_path):
        _, profile, _, csv_path, svg_path = sample_overlay(tmp_path)
        rows = [l.split(",") for l in open(csv_path).read().splitlines()[1:]]
        by_patch = {}
        for _, _, patch, importance in rows:
            by_patch[int(patch)] = float(importance)
        imax = max(by_patch.values())
        svg = open(svg_path).read()
        opacities = [
            float(m) for m in re.findall(
                r'<rect class="patch"[^>]*opacity="([^"]+)"', svg)
        ]
        assert len(opacities) == len(by_patch)
        for patch, opacity in enumerate(opacities):
            want = OPACITY_MAX * by_patch[patch] / imax
            assert abs(opacity - want) <= math.ulp(max(opacity, want))

    def test_self_contained_svg(self, tmp_path):
        _, _, _, _, svg_path = sample_overlay(tmp_path)
        svg = open(svg_path).read()
        assert svg.startswith("<svg ")
        assert "href" not in svg and "script" not in svg
