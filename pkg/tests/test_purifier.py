import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hetpure.attention import attention_mask
from hetpure.classifier import ClassifierModel
from hetpure.denoiser import AnalyticDenoiser, CountingDenoiser, LearnedDenoiser, ddim_jump, ddpm_step, reverse_chain
from hetpure.purifier import (
    PurifyConfig,
    ensemble_classify,
    expected_calls,
    hetero_forward,
    legacy_resample,
    member_stream,
    purify,
    purify_homogeneous,
    resample_refine,
    stage1_step,
    to_model_space,
)
from hetpure.rng import NoiseStream
from hetpure.schedule import build_linear_schedule, q_sample

F64 = torch.float64
SCHED = build_linear_schedule(1000)
SMALL = build_linear_schedule(100, 1e-3, 0.05)


def imgs(n=2, size=8, seed=0, dtype=F64):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def gaussian_den(size=8):
    return AnalyticDenoiser(torch.zeros(3, size, size, dtype=F64), 0.5)


def test_hetero_forward_extremes_and_mix():
    x = imgs()
    eps = torch.randn(x.shape, generator=torch.Generator().manual_seed(1), dtype=F64)
    ones, zeros = torch.ones(2, 8, 8, dtype=F64), torch.zeros(2, 8, 8, dtype=F64)
    assert torch.equal(hetero_forward(x, ones, 200, 50, SCHED, eps), q_sample(SCHED, x, 200, eps))
    assert torch.equal(hetero_forward(x, zeros, 200, 50, SCHED, eps), q_sample(SCHED, x, 50, eps))
    half = zeros.clone()
    half[:, :, :4] = 1
    out = hetero_forward(x, half, 200, 50, SCHED, eps)
    assert torch.equal(out[..., :4], q_sample(SCHED, x, 200, eps)[..., :4])
    assert torch.equal(out[..., 4:], q_sample(SCHED, x, 50, eps)[..., 4:])


def test_hetero_forward_scalar_example():
    s = build_linear_schedule(4, 0.1, 0.1)  # alpha_bar_t = 0.9^t
    x = torch.tensor([[[[1.0, 1.0]]]], dtype=F64)
    eps = torch.zeros_like(x)
    out = hetero_forward(x, torch.tensor([[[1.0, 0.0]]], dtype=F64), 3, 1, s, eps)
    assert out.flatten().tolist() == pytest.approx([math.sqrt(0.729), math.sqrt(0.9)])


def test_hetero_forward_errors():
    x = imgs()
    eps = torch.zeros_like(x)
    with pytest.raises(ValueError):
        hetero_forward(x, torch.ones(2, 8, 8), 50, 50, SCHED, eps)
    with pytest.raises(ValueError):
        hetero_forward(x, torch.ones(2, 4, 4), 100, 50, SCHED, eps)


def test_stage1_step_branches():
    x_adv = imgs() * 2 - 1
    stream = NoiseStream([3, 4])
    den = gaussian_den()
    x_t = torch.randn(x_adv.shape, generator=torch.Generator().manual_seed(2), dtype=F64)
    t = 40
    known = q_sample(SCHED, x_adv, t - 1, stream.normal("known", t, x_adv.shape[1:], F64))
    unknown = ddpm_step(den, x_t, t, SCHED, stream.normal("z", t, x_adv.shape[1:], F64))
    mask = torch.zeros(2, 8, 8, dtype=F64)
    mask[:, 2:5, 1:6] = 1
    out = stage1_step(x_t, t, x_adv, mask, den, SCHED, stream)
    m = mask[:, None].bool().expand_as(out)
    assert torch.equal(out[m], unknown[m])
    assert torch.equal(out[~m], known[~m])
    swapped = stage1_step(x_t, t, x_adv, mask, den, SCHED, stream, swap_mask_roles=True)
    assert torch.equal(swapped[m], known[m])
    assert torch.equal(swapped[~m], unknown[~m])


def test_stage1_step_at_t1_keeps_known_pixels_exact():
    x_adv = imgs() * 2 - 1
    out = stage1_step(torch.zeros_like(x_adv), 1, x_adv, torch.zeros(2, 8, 8), gaussian_den(), SCHED, NoiseStream([0, 1]))
    assert torch.equal(out, x_adv)
    with pytest.raises(ValueError):
        stage1_step(x_adv, 0, x_adv, torch.zeros(2, 8, 8), gaussian_den(), SCHED, NoiseStream([0, 1]))


def test_resample_refine_u0_is_identity_without_calls():
    x = imgs()
    den = CountingDenoiser(gaussian_den())
    assert resample_refine(x, 30, 0, den, SCHED, NoiseStream([1, 2])) is x
    assert den.calls == 0


@pytest.mark.parametrize("U", [1, 10, 20])
def test_resample_refine_single_call(U):
    den = CountingDenoiser(LearnedDenoiser(base=4))
    resample_refine(imgs(dtype=torch.float32), 60, U, den, SCHED, NoiseStream([1, 2]))
    assert den.calls == 1


def test_resample_refine_matches_explicit_composition():
    x = imgs()
    den = gaussian_den()
    stream = NoiseStream([5, 6])
    t, U = 30, 4
    noise = stream.normal_block("renoise", t, U, x.shape[1:], F64)
    y = x
    for u in range(1, U + 1):
        a = SCHED.alpha(t - 1 + u)
        y = math.sqrt(a) * y + math.sqrt(1 - a) * noise[:, u - 1]
    ref = ddim_jump(den, y, t - 1 + U, t - 1, SCHED)
    assert torch.equal(resample_refine(x, t, U, den, SCHED, stream), ref)


@pytest.mark.parametrize("U", [1, 5])
def test_resample_refine_point_mass_fixed_point_at_t1(U):
    # at t = 1 the renoising is noise-free, so an on-manifold input must come back unchanged
    mu = imgs(1)[0]
    den = AnalyticDenoiser(mu, 0.0)
    out = resample_refine(mu[None], 1, U, den, SCHED, NoiseStream([0]))
    torch.testing.assert_close(out[0], mu, atol=1e-12, rtol=0)


def test_resample_refine_errors():
    with pytest.raises(ValueError):
        resample_refine(imgs(), 995, 10, gaussian_den(), SCHED, NoiseStream([0, 1]))


@pytest.mark.parametrize("U", [1, 10, 20])
def test_stage1_step_call_budget(U):
    x_adv = imgs(dtype=torch.float32) * 2 - 1
    mask = torch.ones(2, 8, 8)
    stream = NoiseStream([0, 1])
    den = CountingDenoiser(LearnedDenoiser(base=4))
    x = stage1_step(x_adv, 100, x_adv, mask, den, SCHED, stream)
    resample_refine(x, 100, U, den, SCHED, stream)
    assert den.calls == 2
    legacy = CountingDenoiser(LearnedDenoiser(base=4))
    x = stage1_step(x_adv, 100, x_adv, mask, legacy, SCHED, stream)
    legacy_resample(x, 100, U, x_adv, mask, legacy, SCHED, stream)
    assert legacy.calls == U + 1


def test_expected_calls_formula_and_reduction():
    assert expected_calls(200, 50, 20) == 2 * 151 + 49 == 351
    assert expected_calls(200, 50, 20, legacy=True) == 21 * 151 + 49 == 3220
    assert 1 - 351 / 3220 >= 0.85
    assert expected_calls(200, 50, 0) == 200
    assert expected_calls(200, 50, 0, legacy=True) == 200


@pytest.mark.parametrize("U,legacy", [(0, False), (1, False), (3, False), (2, True)])
def test_purify_call_accounting(U, legacy):
    cfg = PurifyConfig(t_l_frac=0.08, t_s_frac=0.03, U=U, legacy_resample=legacy)
    res = purify(imgs(), None, gaussian_den(), SMALL, cfg, NoiseStream([0, 1]), mask=torch.ones(2, 8, 8))
    t_l, t_s = cfg.steps(SMALL)
    assert (t_l, t_s) == (8, 3)
    assert res.denoiser_calls == expected_calls(t_l, t_s, U, legacy)
    assert [t for t, _ in res.stage_trace] == list(range(8, 0, -1))
    assert [s for _, s in res.stage_trace] == ["stage1"] * 6 + ["stage2"] * 2


@settings(max_examples=20, deadline=None)
@given(t_l=st.integers(2, 12), gap=st.integers(1, 10), U=st.integers(0, 4), legacy=st.booleans())
def test_call_accounting_property(t_l, gap, U, legacy):
    t_s = max(1, t_l - gap)
    if t_s >= t_l:
        return
    cfg = PurifyConfig(t_l_frac=t_l / 100, t_s_frac=t_s / 100, U=U, legacy_resample=legacy)
    res = purify(imgs(1, 4), None, gaussian_den(4), SMALL, cfg, NoiseStream([0]), mask=torch.ones(1, 4, 4))
    assert res.denoiser_calls == expected_calls(t_l, t_s, U, legacy)


def test_homogeneous_reduction_with_zero_mask():
    """All-zero mask: Stage 1 only re-draws the forward marginal, Stage 2 is a plain reverse chain."""
    x = imgs()
    den = gaussian_den()
    stream = NoiseStream([7, 8])
    cfg = PurifyConfig(t_l_frac=0.06, t_s_frac=0.05, U=0)
    t_l, t_s = cfg.steps(SMALL)
    assert t_l == t_s + 1
    res = purify(x, None, den, SMALL, cfg, stream, mask=torch.zeros(2, 8, 8), keep_states=True)
    x0 = to_model_space(x, cfg)
    entry = q_sample(SMALL, x0, t_s - 1, stream.normal("known", t_s, x0.shape[1:], F64))
    assert torch.equal(res.states[t_s - 1], entry)
    tail = reverse_chain(den, entry, t_s - 1, SMALL, stream)
    assert torch.equal(res.states[0], tail)
    # the same trajectory as a homogeneous run whose forward draw equals the boundary draw
    boundary = NoiseStream(stream.seeds)
    boundary.normal = lambda tag, t, shape, dtype=torch.float32, u=0: stream.normal(
        "known" if tag == "forward" else tag, t_s if tag == "forward" else t, shape, dtype, u
    )
    homog = purify_homogeneous(x, den, SMALL, t_s - 1, cfg, boundary)
    assert torch.equal(homog.image, res.image)


def test_zero_mask_output_ignores_stage1_predictions():
    x = imgs()
    cfg = PurifyConfig(t_l_frac=0.09, t_s_frac=0.04, U=0)
    a = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([1, 2]), mask=torch.zeros(2, 8, 8))
    other = AnalyticDenoiser(torch.zeros(3, 8, 8, dtype=F64), 0.5)
    # a denoiser that disagrees only above t_s cannot change the result
    class Split:
        def predict_eps(self, xx, t, s):
            return (other if t < 4 else AnalyticDenoiser(torch.ones(3, 8, 8, dtype=F64), 2.0)).predict_eps(xx, t, s)

    b = purify(x, None, Split(), SMALL, cfg, NoiseStream([1, 2]), mask=torch.zeros(2, 8, 8))
    assert torch.equal(a.image, b.image)


@pytest.mark.parametrize("U,legacy,swap", [(0, False, False), (3, False, False), (2, True, False), (2, False, True)])
def test_point_mass_prior_returns_input(U, legacy, swap):
    x = imgs()
    cfg = PurifyConfig(t_l_frac=0.3, t_s_frac=0.1, U=U, legacy_resample=legacy, swap_mask_roles=swap)
    mask = (torch.rand(2, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).to(F64)
    # one point mass per image, at that image
    den = AnalyticDenoiser(to_model_space(x, cfg), 0.0)
    res = purify(x, None, den, SMALL, cfg, NoiseStream([3, 4]), mask=mask)
    torch.testing.assert_close(res.image, x, atol=1e-9, rtol=0)


def test_purify_is_deterministic_and_seed_sensitive():
    x = imgs()
    cfg = PurifyConfig(t_l_frac=0.1, t_s_frac=0.05, U=2)
    mask = torch.ones(2, 8, 8)
    a = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([1, 2]), mask=mask)
    b = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([1, 2]), mask=mask)
    c = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([1, 3]), mask=mask)
    assert torch.equal(a.image, b.image)
    assert torch.equal(a.image[0], c.image[0])
    assert not torch.equal(a.image[1], c.image[1])


def test_purify_does_not_depend_on_batching():
    x = imgs(3)
    cfg = PurifyConfig(t_l_frac=0.1, t_s_frac=0.05, U=2)
    mask = torch.ones(3, 8, 8)
    full = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([4, 5, 6]), mask=mask)
    one = purify(x[2:], None, gaussian_den(), SMALL, cfg, NoiseStream([6]), mask=mask[2:])
    assert torch.equal(full.image[2:], one.image)


def test_purify_builds_mask_from_input_and_outputs_pixels():
    clf = ClassifierModel(seed=0)
    x = imgs(2, 16, dtype=torch.float32)
    cfg = PurifyConfig(t_l_frac=0.02, t_s_frac=0.01, U=1)
    res = purify(x, clf, LearnedDenoiser(base=4), SCHED, cfg, NoiseStream([0, 1]))
    assert torch.equal(res.mask, attention_mask(clf, x, cfg.tau, cfg.pool_mode, cfg.p))
    assert res.image.shape == x.shape
    assert torch.all((res.image >= 0) & (res.image <= 1))


def test_purify_errors():
    x = imgs()
    with pytest.raises(ValueError):
        purify(x, None, gaussian_den(), SMALL, PurifyConfig(t_l_frac=0.05, t_s_frac=0.05), NoiseStream([0, 1]), mask=torch.ones(2, 8, 8))
    with pytest.raises(ValueError):
        purify(x, None, gaussian_den(), SMALL, PurifyConfig(t_l_frac=0.1, t_s_frac=0.05), NoiseStream([0]), mask=torch.ones(2, 8, 8))
    with pytest.raises(ValueError):
        PurifyConfig(tau=1.5).validate(SMALL)
    with pytest.raises(ValueError):
        PurifyConfig(t_l_frac=0.99, U=20).validate(SMALL)
    with pytest.raises(ValueError):
        PurifyConfig(S=0).validate(SMALL)


def test_gradient_flows_to_input():
    x = imgs().requires_grad_(True)
    cfg = PurifyConfig(t_l_frac=0.05, t_s_frac=0.02, U=1)
    res = purify(x, None, gaussian_den(), SMALL, cfg, NoiseStream([0, 1]), mask=torch.ones(2, 8, 8))
    res.image.sum().backward()
    assert x.grad is not None and torch.count_nonzero(x.grad) > 0


def test_homogeneous_baseline_calls_and_shape():
    res = purify_homogeneous(imgs(), CountingDenoiser(gaussian_den()), SMALL, 7, PurifyConfig(), NoiseStream([0, 1]))
    assert res.denoiser_calls == 7
    assert res.image.shape == (2, 3, 8, 8)
    assert res.mask.sum() == 0


def test_ensemble_single_member_matches_purify():
    clf = ClassifierModel(seed=1)
    x = imgs(3, 16, dtype=torch.float32)
    den = LearnedDenoiser(base=4)
    cfg = PurifyConfig(t_l_frac=0.02, t_s_frac=0.01, U=1, S=1)
    stream = NoiseStream([1, 2, 3])
    pred, runs = ensemble_classify(x, clf, den, SCHED, cfg, stream)
    direct = purify(x, clf, den, SCHED, cfg, stream)
    assert len(runs) == 1 and torch.equal(runs[0].image, direct.image)
    assert torch.equal(pred.label, clf.predict(direct.image).label)


def test_ensemble_averages_member_probabilities():
    clf = ClassifierModel(seed=1)
    x = imgs(3, 16, dtype=torch.float32)
    cfg = PurifyConfig(t_l_frac=0.02, t_s_frac=0.01, U=1, S=3)
    stream = NoiseStream([1, 2, 3])
    pred, runs = ensemble_classify(x, clf, LearnedDenoiser(base=4, seed=2), SCHED, cfg, stream)
    probs = sum(torch.softmax(clf(r.image), -1) for r in runs) / 3
    torch.testing.assert_close(pred.probs, probs)
    assert torch.equal(pred.label, probs.argmax(-1))
    assert not torch.equal(runs[0].image, runs[1].image)
    assert member_stream(stream, 0) is stream


def test_ensemble_with_custom_purifier():
    clf = ClassifierModel(seed=1)
    x = imgs(2, 16, dtype=torch.float32)
    seen = []

    def ident(xx, st):
        seen.append(st)
        return purify_homogeneous(xx, LearnedDenoiser(base=4), SCHED, 1, PurifyConfig(), st)

    pred, runs = ensemble_classify(x, clf, None, SCHED, PurifyConfig(S=2), NoiseStream([0, 1]), purifier=ident)
    assert len(runs) == 2 and len(seen) == 2
    assert pred.label.shape == (2,)
