import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synth2real import autodiff as ad
from synth2real import generator as G
from synth2real import imageops
from synth2real import losses as L
from synth2real import pipeline as P
from synth2real import synthrender as S

from gradcheck import check_gradients
from helpers import planted_target

W16 = L.LossWeights(eval_resolution=16)
QUICK = P.PipelineConfig(
    sampling=P.SamplingConfig(n_samples=16),
    csanns=P.CsannsConfig(outer_iters=2, proposals=6, inner_iters=6),
    fit=P.FitConfig(steps=40),
    weights=W16,
    restarts=1,
)


@pytest.fixture(scope="module")
def tiny(tiny_trained):
    return tiny_trained


@pytest.fixture(scope="module")
def corpus16():
    return [S.render(p, 16) for p in S.sample_scene(31, 4)]


# --- configuration -----------------------------------------------------------------------

def test_refinement_rate_steps_down_every_four():
    cfg = P.CsannsConfig(alpha_lr=None, beta_lr=None)
    assert [cfg.rate("alpha", i) for i in (0, 3, 4, 7, 8, 12)] == pytest.approx(
        [0.01, 0.01, 0.001, 0.001, 1e-4, 1e-5])
    assert P.CsannsConfig().rate("alpha", 5) == pytest.approx(0.4)


def test_fit_schedule_shape():
    cfg = P.FitConfig(steps=1000)
    assert cfg.rate(0) == 0.0
    assert cfg.rate(500) == pytest.approx(0.01)
    assert cfg.rate(1000) == pytest.approx(0.0, abs=1e-15)
    assert cfg.noise_std(0) == 0.01 and cfg.noise_std(250) == pytest.approx(0.005)
    assert cfg.noise_std(500) == 0.0 and cfg.noise_std(900) == 0.0


def test_schedule_for_layers():
    sched = P.InterpolationSchedule.for_layers(6)
    assert sorted({k for k, _ in sched.entries}) == [1, 2, 4, 6]
    assert len(sched) == 16
    assert {k for k, _ in P.InterpolationSchedule.for_layers(18).entries} == {1, 6, 12, 18}


@pytest.mark.parametrize("bad", [
    dict(n_samples=0), dict(sigma2=-1.0)])
def test_sampling_config_validation(bad):
    with pytest.raises(ValueError):
        P.SamplingConfig(**bad)


@pytest.mark.parametrize("bad", [
    dict(outer_iters=0), dict(blend_range=(0.8, 0.2)), dict(brightness_range=(1.1, 1.3)), dict(beta_clamp=-1)])
def test_csanns_config_validation(bad):
    with pytest.raises(ValueError):
        P.CsannsConfig(**bad)


def test_schedule_validation():
    with pytest.raises(ValueError):
        P.InterpolationSchedule(((0, 1.0),))
    with pytest.raises(ValueError):
        P.InterpolationSchedule(((1, 0.0),))


# --- step 1 ------------------------------------------------------------------------------

def test_degenerate_sampling_returns_centroid(tiny):
    spec, basis = tiny
    bare = G.SteeringBasis(basis.centroids, np.zeros((0, 2, 4)), np.zeros(0))
    code, _, _ = P.step1_sample(spec, S.render(S.SceneParams(), 16), bare,
                                P.SamplingConfig(n_samples=1, sigma2=0.0), W16, (0, 0))
    assert any(np.array_equal(code, c) for c in basis.centroids)


def test_step1_returns_argmin(tiny, corpus16):
    spec, basis = tiny
    code, loss, trace = P.step1_sample(spec, corpus16[0], basis, P.SamplingConfig(n_samples=20), W16, (3, 1))
    assert loss == min(trace.loss) and loss == trace.best[-1]
    assert L.sampling_loss(corpus16[0].render, corpus16[0].face_alpha, G.decode(spec, code), W16) == \
        pytest.approx(loss, rel=1e-12)


def test_samples_share_noise_across_rows(tiny):
    _, basis = tiny
    draws = P.draw_samples(basis, P.SamplingConfig(n_samples=5), (0, 0, 1))
    np.testing.assert_allclose(draws[:, 0], draws[:, 1], atol=1e-12)


def test_sample_streams_are_per_index(tiny):
    _, basis = tiny
    a = P.draw_samples(basis, P.SamplingConfig(n_samples=8), (1, 2, 3))
    b = P.draw_samples(basis, P.SamplingConfig(n_samples=3), (1, 2, 3))
    np.testing.assert_array_equal(a[:3], b)


def test_empty_basis_is_an_error(tiny):
    spec, basis = tiny
    wrong = G.SteeringBasis(np.zeros((1, 3, 4)), np.zeros((0, 3, 4)), np.zeros(0))
    with pytest.raises(ValueError):
        P.step1_sample(spec, S.render(S.SceneParams(), 16), wrong, P.SamplingConfig(), W16)


@pytest.mark.slow
def test_steered_sampling_beats_typical_prior_draw(tiny):
    # best of 512 steered draws vs the median of 512 fresh prior draws on planted targets
    spec, basis = tiny
    wins = 0
    for t in range(100):
        target = planted_target(spec, G.sample_prior(spec, 10_000 + t, 1)[0])
        _, loss, _ = P.step1_sample(spec, target, basis, P.SamplingConfig(n_samples=512), W16, (t, 0))
        fresh = G.decode_batched(spec, G.sample_prior(spec, 20_000 + t, 512))
        wins += loss <= np.median(L.sampling_losses(target.render, target.face_alpha, fresh, W16))
    assert wins >= 95


# --- step 2 ------------------------------------------------------------------------------

def test_anchor_logits_concentrate_mass():
    alpha = ad.softmax(P.anchor_logits(65, 3, 12.0), axis=0).data
    np.testing.assert_allclose(alpha[0], 1.0 / (1.0 + math.exp(-12.0)), rtol=1e-12)
    np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-15)


def test_mixture_at_anchor_reproduces_start(tiny):
    spec, basis = tiny
    w_n = G.sample_prior(spec, 4, 1)[0]
    cands = np.concatenate([w_n[None], G.sample_prior(spec, 5, 8)])
    code, _ = P.mixture_code(P.anchor_logits(9, 2, 12.0), cands, np.zeros(len(basis.controls)),
                             basis.controls, 2.0)
    assert np.abs(G.decode(spec, code.data) - G.decode(spec, w_n)).max() < 1e-5


def test_mixture_gradient_through_loss(tiny, corpus16):
    spec, basis = tiny
    target = corpus16[1]
    cands = G.sample_prior(spec, 6, 4)
    logits = np.random.default_rng(0).standard_normal((4, 2))
    beta = np.array([0.3, -0.5, 0.1, 0.7])[: len(basis.controls)]

    def loss(lg, b):
        code, _ = P.mixture_code(lg, cands, b, basis.controls, 2.0)
        return L.csanns_loss(target.render, target.face_alpha, G.decode(spec, code), W16)

    assert check_gradients(loss, [logits, beta]) < 1e-4


def test_refinement_keeps_weights_convex(tiny, corpus16):
    spec, basis = tiny
    seen = []
    cfg = P.CsannsConfig(outer_iters=3, proposals=5, inner_iters=8)

    def monitor(alpha, beta, bright):
        seen.append((alpha.copy(), beta.copy(), bright))

    w_s = G.sample_prior(spec, 7, 1)[0]
    P.step2_csanns(spec, corpus16[2], w_s, basis, cfg, W16, (0, 0), monitor=monitor)
    assert len(seen) == 24
    for alpha, beta, bright in seen:
        assert alpha.shape == (6, 2) and np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(np.abs(beta) <= 2.0 + 1e-9) and 0.7 <= bright <= 1.3


def test_refinement_never_worse_than_start(tiny, corpus16):
    spec, basis = tiny
    target = corpus16[3]
    w_s = G.sample_prior(spec, 8, 1)[0]
    start = L.csanns_loss(target.render, target.face_alpha, G.decode(spec, w_s), W16)
    prop, loss, trace = P.step2_csanns(spec, target, w_s, basis, QUICK.csanns, W16, (0, 0))
    # the first evaluation is the anchored start, within the anchor leak
    assert trace.loss[0] == pytest.approx(start, rel=1e-4, abs=1e-7)
    assert loss <= trace.loss[0] and np.all(np.diff(trace.best) <= 0)
    shown = G.decode(spec, prop.code) * prop.brightness
    assert L.csanns_loss(target.render, target.face_alpha, shown, W16) == pytest.approx(loss, rel=1e-9)


# --- step 3 ------------------------------------------------------------------------------

def test_fit_at_fixed_point_returns_start(tiny):
    spec, _ = tiny
    w = G.sample_prior(spec, 9, 1)[0]
    prop, loss, trace = P.step3_fit(spec, planted_target(spec, w), w, P.FitConfig(steps=30))
    assert trace.loss[0] == 0.0 and loss == 0.0
    np.testing.assert_array_equal(prop.code, w)


def test_fit_never_worse_than_start(tiny, corpus16):
    spec, _ = tiny
    w_n = P.Proposal(G.sample_prior(spec, 10, 1)[0], 1.1)
    prop, loss, trace = P.step3_fit(spec, corpus16[0], w_n, P.FitConfig(steps=60))
    assert loss <= trace.loss[0] and np.all(np.diff(trace.best) <= 0)
    assert prop.brightness == 1.1
    shown = G.decode(spec, prop.code) * 1.1
    assert L.fit_loss(corpus16[0].render, corpus16[0].face_alpha, shown) == pytest.approx(loss, rel=1e-12)


def test_fit_converges_from_perturbed_start(tiny):
    spec, _ = tiny
    for seed in range(20):
        w = G.sample_prior(spec, 300 + seed, 1)[0]
        start = w + 0.3 * np.random.default_rng(seed).standard_normal(w.shape)
        _, loss, trace = P.step3_fit(spec, planted_target(spec, w), start, P.FitConfig(steps=300), (seed, 0))
        assert loss < 0.1 * trace.loss[0]


def test_interpolation_identities():
    rng = np.random.default_rng(0)
    w_f, w_n = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    (all_fit,) = P.step3_interpolate(w_f, w_n, P.InterpolationSchedule(((6, 1.0),)))
    np.testing.assert_array_equal(all_fit, w_f)
    np.testing.assert_array_equal(P.blend_rows(w_f, w_n, np.zeros(6)), w_n)
    (first,) = P.step3_interpolate(w_f, w_n, P.InterpolationSchedule(((1, 1.0),)))
    np.testing.assert_array_equal(first[0], w_f[0])
    np.testing.assert_array_equal(first[1:], w_n[1:])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.floats(0.01, 1.0)), min_size=1, max_size=6),
       st.integers(0, 2 ** 31))
def test_interpolation_matches_scalar_formula(entries, seed):
    rng = np.random.default_rng(seed)
    w_f, w_n = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    out = P.step3_interpolate(w_f, w_n, P.InterpolationSchedule(tuple(entries)))
    for (k, a), code in zip(entries, out):
        for r in range(4):
            for c in range(3):
                al = a if r < k else 0.0
                expect = w_f[r, c] * math.sqrt(al) + w_n[r, c] * math.sqrt(1.0 - al)
                assert abs(code[r, c] - expect) <= 1e-12


def test_interpolation_rejects_deep_k():
    with pytest.raises(ValueError):
        P.step3_interpolate(np.zeros((2, 3)), np.zeros((2, 3)), P.InterpolationSchedule(((3, 1.0),)))


# --- step 4 ------------------------------------------------------------------------------

def test_single_proposal_is_selected(tiny, corpus16):
    spec, _ = tiny
    idx, scores = P.step4_select(spec, corpus16[0].render, [P.Proposal(G.sample_prior(spec, 0, 1)[0])])
    assert idx == 0 and scores.shape == (1,)


def test_perfect_reconstruction_wins(tiny):
    spec, _ = tiny
    codes = G.sample_prior(spec, 11, 5)
    target = G.decode(spec, codes[3])
    idx, scores = P.step4_select(spec, target, [P.Proposal(c) for c in codes])
    assert idx == 3 and scores[3] == pytest.approx(1.0, abs=1e-12)


def test_selection_matches_independent_ranking(tiny, corpus16):
    spec, _ = tiny
    props = [P.Proposal(c, b) for c, b in zip(G.sample_prior(spec, 12, 6), (1.0, 0.8, 1.2, 1.0, 0.9, 1.1))]
    idx, _ = P.step4_select(spec, corpus16[1].render, props)
    ref = [imageops.ssim(np.clip(G.decode(spec, p.code) * p.brightness, 0, 1), corpus16[1].render) for p in props]
    assert idx == int(np.argmax(ref))


def test_selection_resolution_resamples(tiny, corpus16):
    spec, _ = tiny
    props = [P.Proposal(c) for c in G.sample_prior(spec, 13, 2)]
    _, native = P.step4_select(spec, corpus16[0].render, props)
    _, big = P.step4_select(spec, corpus16[0].render, props, P.SelectionConfig(resolution=32))
    assert big.shape == native.shape and not np.allclose(big, native)


# --- orchestration ---------------------------------------------------------------------------

def test_single_restart_reproduces_run_restart(tiny, corpus16):
    spec, basis = tiny
    res = P.run_pipeline(spec, corpus16[0], basis, QUICK)
    direct = P.run_restart(spec, corpus16[0], basis, QUICK, 0)
    assert len(res.proposals) == 2 + len(QUICK.schedule(2))
    for a, b in zip(res.proposals, direct.proposals):
        np.testing.assert_array_equal(a.code, b.code)
        assert a.brightness == b.brightness


def test_pooled_selection_dominates_each_restart(tiny, corpus16):
    spec, basis = tiny
    cfg = QUICK.with_overrides(restarts=3)
    res = P.run_pipeline(spec, corpus16[1], basis, cfg)
    single = P.run_pipeline(spec, corpus16[1], basis, QUICK)
    per = [P.step4_select(spec, corpus16[1].render, r.proposals)[1].max() for r in res.restarts]
    assert res.selected_ssim >= max(per) >= single.selected_ssim
    assert res.selected_ssim >= res.ssim[0]  # never below the step-1 proposal


def test_worker_count_does_not_change_results(tiny, corpus16):
    spec, basis = tiny
    cfg = QUICK.with_overrides(restarts=2)
    a = P.run_pipeline(spec, corpus16[2], basis, cfg, workers=1)
    b = P.run_pipeline(spec, corpus16[2], basis, cfg, workers=2)
    assert a.selected == b.selected
    np.testing.assert_array_equal(a.ssim, b.ssim)
    for p, q in zip(a.proposals, b.proposals):
        np.testing.assert_array_equal(p.code, q.code)


def test_all_restarts_aborting_raises(tiny, corpus16, monkeypatch):
    spec, basis = tiny

    def boom(*args, **kwargs):
        raise ad.NonFiniteError("forced")

    monkeypatch.setattr(P, "run_restart", boom)
    with pytest.raises(P.PipelineAbort):
        P.run_pipeline(spec, corpus16[0], basis, QUICK)


def test_composite_endpoints(tiny):
    spec, _ = tiny
    prop = P.Proposal(G.sample_prior(spec, 14, 1)[0])
    decoded = P.render_proposal(spec, prop)
    render = S.render_image(S.SceneParams(), 16)
    ones, zeros = np.ones((16, 16)), np.zeros((16, 16))
    assert np.abs(P.composite_face_only(spec, prop, imageops.MaskSet(render, ones, zeros)) - decoded).max() < 1e-5
    assert np.abs(P.composite_face_only(spec, prop, imageops.MaskSet(render, zeros, zeros)) - render).max() < 1e-5


def test_composite_keeps_render_hair(tiny):
    spec, _ = tiny
    for params in S.sample_scene(3, 5):
        masks = S.render(params, 16)
        out = P.composite_face_only(spec, P.Proposal(G.sample_prior(spec, 15, 1)[0]), masks)
        hair = masks.hair_alpha == 1.0
        assert np.abs(out[hair] - masks.render[hair]).max() < 1e-5
