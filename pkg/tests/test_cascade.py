import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epimvs import synth
from epimvs.cascade import (
    PipelineConfig,
    run_pipeline,
    run_stage,
    stage_channels,
    stage_scale,
    upsample_depth,
)
from epimvs.errors import ConfigurationError, UsageError
from epimvs.features import WeightBundle, extract_pyramid
from epimvs.geometry import inverse_depth_samples

SMALL = dict(width=160, height=128, focal=200.0)


@pytest.fixture(scope="module")
def plane_views():
    return synth.render_all(synth.plane_scene(**SMALL))


@pytest.fixture(scope="module")
def corner_views():
    return synth.render_all(synth.three_plane_scene(0, **SMALL))


@pytest.fixture(scope="module")
def corner_result(corner_views):
    images, _, cams = corner_views
    return run_pipeline(images, cams)


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.depth_nums == (8, 8, 4, 4) and cfg.group_nums == (8, 8, 4, 4)
        assert cfg.temperature == 2.0 and (cfg.d_min, cfg.d_max) == (425.0, 935.0)

    def test_stage_mapping(self):
        assert [stage_scale(k) for k in range(4)] == [8, 4, 2, 1]
        assert [stage_channels(k) for k in range(4)] == [64, 32, 16, 8]

    @pytest.mark.parametrize(
        "bad",
        [dict(depth_nums=(1, 8, 4, 4)), dict(group_nums=(7, 8, 4, 4)), dict(d_min=900.0, d_max=400.0), dict(fusion="cnn"), dict(stages=5)],
    )
    def test_validation(self, bad):
        with pytest.raises(ConfigurationError):
            PipelineConfig(**bad)

    def test_doubled_first_stage(self):
        cfg = PipelineConfig(double_first_stage=True)
        assert [cfg.hypotheses(k) for k in range(4)] == [16, 8, 4, 4]

    def test_inverse_spans(self):
        s0 = 1 / 425 - 1 / 935
        np.testing.assert_allclose(PipelineConfig().inverse_spans(), [s0, s0 / 7, s0 / 49, s0 / 147])


class TestUpsample:
    def test_bilinear_interior(self):
        coarse = np.array([[1.0, 3.0], [5.0, 7.0]])
        up, ok = upsample_depth(coarse, np.ones((2, 2), bool), (4, 4))
        assert ok.all()
        assert up[0, 1] == pytest.approx(2.0) and up[1, 1] == pytest.approx(4.0)
        assert up[0, 0] == 1.0

    def test_nearest_fallback(self):
        coarse = np.array([[1.0, 3.0], [5.0, 7.0]])
        valid = np.array([[True, False], [True, True]])
        up, ok = upsample_depth(coarse, valid, (4, 4))
        assert ok.all()
        assert up[0, 1] == 1.0  # the invalid corner is never blended in
        assert not np.any(up == 3.0)

    def test_all_invalid(self):
        up, ok = upsample_depth(np.ones((2, 2)), np.zeros((2, 2), bool), (4, 4))
        assert not ok.any() and np.all(up == 0)

    @given(st.integers(0, 10_000))
    def test_within_valid_range(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.uniform(400, 900, (4, 5))
        v = rng.uniform(size=(4, 5)) > 0.3
        up, ok = upsample_depth(d, v, (8, 10))
        if v.any():
            assert np.all(up[ok] >= d[v].min() - 1e-9) and np.all(up[ok] <= d[v].max() + 1e-9)


class TestRunStage:
    def test_plane_stage0_within_one_bin(self, plane_views):
        images, depths, cams = plane_views
        res = run_pipeline(images, cams, PipelineConfig(stages=1))
        s = stage_scale(0)
        gt = depths[0][::s, ::s]
        inv = 1.0 / inverse_depth_samples(425.0, 935.0, 8)
        bin_width = 680.0**2 * (inv[0] - inv[1])
        d = res.final
        assert np.mean(np.abs(d.depth[d.valid] - gt[d.valid])) <= bin_width

    def test_zero_baseline_uniform(self, plane_views):
        images, _, cams = plane_views
        pyr = extract_pyramid(images[0], WeightBundle.patch_descriptor())
        cam = cams[0].scaled(8)
        cfg = PipelineConfig()
        out = run_stage(0, pyr[3], [pyr[3]], cam, [cam], cfg)
        np.testing.assert_allclose(out.prob.data, 1.0 / 8, atol=1e-12)
        np.testing.assert_allclose(out.depth.depth, inverse_depth_samples(425.0, 935.0, 8).mean(), rtol=1e-12)

    def test_stage_preconditions(self, plane_views):
        images, _, cams = plane_views
        pyr = [extract_pyramid(im, WeightBundle.patch_descriptor()) for im in images[:2]]
        cfg = PipelineConfig()
        c0, c1 = cams[0].scaled(8), cams[1].scaled(8)
        first = run_stage(0, pyr[0][3], [pyr[1][3]], c0, [c1], cfg)
        with pytest.raises(UsageError):
            run_stage(0, pyr[0][3], [pyr[1][3]], c0, [c1], cfg, prev=first.depth)
        with pytest.raises(UsageError):
            run_stage(1, pyr[0][2], [pyr[1][2]], cams[0].scaled(4), [cams[1].scaled(4)], cfg)
        with pytest.raises(UsageError):
            run_stage(0, pyr[0][2], [pyr[1][2]], c0, [c1], cfg)
        with pytest.raises(UsageError):
            run_stage(2, pyr[0][1], [pyr[1][1]], cams[0].scaled(2), [cams[1].scaled(2)], cfg, prev=first.depth)


class TestRunPipeline:
    def test_stage_shapes(self, corner_result):
        shapes = [d.depth.shape for d in corner_result.stages]
        assert shapes == [(16, 20), (32, 40), (64, 80), (128, 160)]
        assert [p.depth_bins for p in corner_result.probs] == [8, 8, 4, 4]

    def test_depths_in_range(self, corner_result):
        for d in corner_result.stages:
            v = d.depth[d.valid]
            assert np.all((v >= 425.0) & (v <= 935.0))

    def test_probabilities_normalised(self, corner_result):
        for p in corner_result.probs:
            np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_hypothesis_nesting(self, corner_result):
        spans = PipelineConfig().inverse_spans()
        for k in range(1, 4):
            h = corner_result.hypotheses[k]
            assert h.inverse_span == spans[k]
            inv = 1.0 / h.values[~h.fallback]
            D = h.count
            np.testing.assert_allclose(inv[:, 0] - inv[:, -1], spans[k] * (D - 1) / D, rtol=1e-6)

    def test_refines_across_stages(self, corner_views, corner_result):
        _, depths, _ = corner_views
        epe = []
        for k, d in enumerate(corner_result.stages):
            s = stage_scale(k)
            gt = depths[0][::s, ::s]
            epe.append(np.median(np.abs(d.depth - gt)[d.valid]))
        assert all(b <= a for a, b in zip(epe, epe[1:]))

    def test_source_order_irrelevant(self, corner_views, corner_result):
        images, _, cams = corner_views
        order = [0, 3, 1, 4, 2]
        res = run_pipeline([images[i] for i in order], [cams[i] for i in order])
        assert res.final.depth.tobytes() == corner_result.final.depth.tobytes()

    def test_threads_bit_identical(self, corner_views, corner_result):
        images, _, cams = corner_views
        res = run_pipeline(images, cams, PipelineConfig(threads=3))
        for a, b in zip(res.stages, corner_result.stages):
            assert a.depth.tobytes() == b.depth.tobytes()
            assert a.confidence.tobytes() == b.confidence.tobytes()

    def test_variance_mode_finite(self, corner_views):
        images, _, cams = corner_views
        res = run_pipeline(images, cams, PipelineConfig(fusion="variance"))
        d = res.final
        assert d.valid.any() and np.all(np.isfinite(d.depth[d.valid]))

    def test_doubled_first_stage_runs(self, corner_views):
        images, _, cams = corner_views
        res = run_pipeline(images, cams, PipelineConfig(double_first_stage=True, stages=2))
        assert [p.depth_bins for p in res.probs] == [16, 8]

    def test_learned_regulariser_and_fpn(self, corner_views):
        from epimvs.regularizer import seeded_unet

        images, _, cams = corner_views
        cfg = PipelineConfig(features="fpn", regularizer="learned", stages=2)
        reg = [seeded_unet(cfg.group_nums[k], seed=k) for k in range(4)]
        res = run_pipeline(images, cams, cfg, regularizer_weights=reg)
        assert np.all(np.isfinite(res.final.depth))

    def test_needs_two_views(self, corner_views):
        images, _, cams = corner_views
        with pytest.raises(UsageError):
            run_pipeline(images[:1], cams[:1])

    def test_resolution_divisible_by_eight(self, corner_views):
        images, _, cams = corner_views
        with pytest.raises(UsageError):
            run_pipeline([im[:124] for im in images], cams)
