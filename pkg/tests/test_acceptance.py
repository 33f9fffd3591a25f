"""Acceptance checks, one test per criterion, each within its runtime budget.

Every test records a PASS/FAIL line that pytest prints in the
"acceptance criteria" terminal section.  The toy benchmark (criteria 8, 10
and 11) runs the ``evaluate`` CLI on ``configs/toy_benchmark.cfg``.
"""
import csv
import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import fd_check
from hetpure.attack import AttackConfig, eot_gradient, pgd_attack
from hetpure.attention import block_maps, build_mask
from hetpure.classifier import ClassifierModel, accuracy
from hetpure.cli import main as cli_main
from hetpure.data import generate
from hetpure.denoiser import AnalyticDenoiser, CountingDenoiser, LearnedDenoiser, ddpm_step, denoising_loss, reverse_chain
from hetpure.config import load_config
from hetpure.io import load_model
from hetpure.purifier import (
    PurifyConfig,
    expected_calls,
    legacy_resample,
    purify,
    purify_homogeneous,
    resample_refine,
    stage1_step,
    to_model_space,
)
from hetpure.rng import NoiseStream
from hetpure.schedule import build_linear_schedule, q_sample

F64 = torch.float64
ROOT = Path(__file__).resolve().parents[1]
BENCH_CFG = ROOT / "configs" / "toy_benchmark.cfg"


# 1 -------------------------------------------------------------------------


def test_criterion_01_schedule_oracle(criterion):
    with criterion(1, "alpha_bar vs brute-force product", 1.0) as c:
        s = build_linear_schedule(1000, 1e-4, 0.02)
        worst = 0.0
        for t in range(1, 1001):
            # independent oracle: betas from the closed-form line, product in plain Python floats
            prod = 1.0
            for k in range(t):
                prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 999)
            worst = max(worst, abs(s.alpha_bar(t) - prod) / prod)
        c.detail = f"max rel err {worst:.2e}"
        assert worst <= 1e-12


# 2 -------------------------------------------------------------------------


def test_criterion_02_forward_marginal(criterion):
    with criterion(2, "q_sample moments, 3 timesteps x 1e5 draws", 10.0) as c:
        s = build_linear_schedule()
        gen = torch.Generator().manual_seed(2)
        x0 = torch.tensor([0.8, -0.6, 0.4, -1.0], dtype=F64)
        worst_mu = worst_sd = 0.0
        for t in (5, 50, 150):
            eps = torch.randn(100_000, 4, generator=gen, dtype=F64)
            xt = q_sample(s, x0.expand(100_000, 4), t, eps)
            ab = s.alpha_bar(t)
            ref = math.sqrt(ab) * x0
            worst_mu = max(worst_mu, float(((xt.mean(0) - ref).abs() / ref.abs()).max()))
            worst_sd = max(worst_sd, float((xt.std(0) / math.sqrt(1 - ab) - 1).abs().max()))
        c.detail = f"mean rel err {worst_mu:.4f}, std rel err {worst_sd:.4f}"
        assert worst_mu <= 0.02 and worst_sd <= 0.02


# 3 -------------------------------------------------------------------------


def test_criterion_03_reverse_chain(criterion):
    with criterion(3, "analytic-denoiser reverse chain, d=4, T=100", 120.0) as c:
        s = build_linear_schedule(100, 1e-3, 0.2)
        mu0 = torch.tensor([0.3, -0.8, 1.5, 0.0], dtype=F64)
        sigma0 = 0.4
        den = AnalyticDenoiser(mu0, sigma0)
        n = 10_000
        ab = s.alpha_bar(100)
        gen = torch.Generator().manual_seed(3)
        x_T = math.sqrt(ab) * mu0 + math.sqrt(ab * sigma0**2 + 1 - ab) * torch.randn(n, 4, generator=gen, dtype=F64)
        out = reverse_chain(den, x_T, 100, s, NoiseStream(list(range(n))))
        mean_err = float((out.mean(0) - mu0).abs().max()) / sigma0
        var_err = float((out.var(0) / sigma0**2 - 1).abs().max())
        c.detail = f"mean err {mean_err:.4f} sigma0, var rel err {var_err:.4f}"
        assert mean_err <= 0.05 and var_err <= 0.10


# 4 -------------------------------------------------------------------------


def _param_fd(loss_fn, params, n_coords: int, seed: int):
    """Finite-difference check on ``n_coords`` coordinates drawn uniformly over all parameters."""
    grads = torch.autograd.grad(loss_fn(), params)
    sizes = torch.tensor([p.numel() for p in params])
    picks = torch.randint(int(sizes.sum()), (n_coords,), generator=torch.Generator().manual_seed(seed))
    owner = torch.bucketize(picks, torch.cumsum(sizes, 0), right=True)
    worst, total = 0.0, 0
    for k, (p, g) in enumerate(zip(params, grads)):
        count = int((owner == k).sum())
        if count:
            w, n = fd_check(loss_fn, p, g, n_coords=count, seed=seed + k)
            worst, total = max(worst, w), total + n
    return worst, total


def test_criterion_04_gradients(criterion):
    with criterion(4, "classifier + denoiser gradients vs central differences", 60.0) as c:
        gen = torch.Generator().manual_seed(4)
        clf = ClassifierModel(seed=4).double()
        x = torch.rand(4, 3, 16, 16, generator=gen, dtype=F64)
        y = torch.tensor([0, 1, 1, 0])
        xr = x.clone().requires_grad_(True)
        (gx,) = torch.autograd.grad(F.cross_entropy(clf(xr), y), xr)
        w_in, n_in = fd_check(lambda: F.cross_entropy(clf(x), y), x, gx, n_coords=64, seed=1)
        w_par, n_par = _param_fd(lambda: F.cross_entropy(clf(x), y), list(clf.parameters()), 64, seed=2)

        den = LearnedDenoiser(base=8, seed=4).double()
        with torch.no_grad():
            # the output layer starts at zero, which would make upstream gradients vanish
            den.out.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(5))
        s = build_linear_schedule()
        x0 = torch.rand(2, 3, 16, 16, generator=gen, dtype=F64) * 2 - 1
        t = torch.tensor([20, 400])
        eps = torch.randn(2, 3, 16, 16, generator=gen, dtype=F64)
        xin = x0.clone()
        xir = xin.clone().requires_grad_(True)
        (gd,) = torch.autograd.grad(denoising_loss(den, xir, s, t, eps), xir)
        d_in, m_in = fd_check(lambda: denoising_loss(den, xin, s, t, eps), xin, gd, n_coords=64, seed=3)
        d_par, m_par = _param_fd(lambda: denoising_loss(den, x0, s, t, eps), list(den.parameters()), 64, seed=6)
        worst = max(w_in, w_par, d_in, d_par)
        c.detail = f"worst rel err {worst:.2e} over {n_in}+{n_par} classifier and {m_in}+{m_par} denoiser coords"
        assert min(n_in, n_par, m_in, m_par) >= 64
        assert worst <= 1e-4


# 5 -------------------------------------------------------------------------


def test_criterion_05_homogeneous_reduction(criterion):
    with criterion(5, "zero mask gives a plain reverse chain from t_s", 30.0) as c:
        s = build_linear_schedule()
        gen = torch.Generator().manual_seed(5)
        x = torch.rand(3, 3, 16, 16, generator=gen, dtype=F64)
        den = LearnedDenoiser(base=8, seed=5).double()
        with torch.no_grad():
            den.out.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(6))
        stream = NoiseStream([11, 12, 13])
        zero = torch.zeros(3, 16, 16, dtype=F64)
        mismatches = 0
        for U in (0, 10):
            cfg = PurifyConfig(t_l_frac=0.051, t_s_frac=0.05, U=U)
            t_l, t_s = cfg.steps(s)
            assert t_l == t_s + 1
            res = purify(x, None, den, s, cfg, stream, mask=zero, keep_states=True)
            # the plain chain, one ancestral step at a time with the same per-step draws
            xt = res.states[t_s - 1]
            for t in range(t_s - 1, 0, -1):
                z = stream.normal("z", t, xt.shape[1:], F64) if t > 1 else None
                xt = ddpm_step(den, xt, t, s, z)
                mismatches += int(not torch.equal(xt, res.states[t - 1]))
        # U = 0: Stage 1 only re-draws the forward marginal, so the whole run is a homogeneous one
        x0 = to_model_space(x, cfg)
        entry = q_sample(s, x0, t_s - 1, stream.normal("known", t_s, x0.shape[1:], F64))
        cfg = PurifyConfig(t_l_frac=0.051, t_s_frac=0.05, U=0)
        res = purify(x, None, den, s, cfg, stream, mask=zero, keep_states=True)
        chained = reverse_chain(den, entry, t_s - 1, s, stream)
        c.detail = f"t_l={t_l}, t_s={t_s}, U in (0, 10), {2 * (t_s - 1)} stage-2 states, {mismatches} mismatches"
        assert mismatches == 0
        assert torch.equal(res.states[t_s - 1], entry)
        assert torch.equal(res.states[0], chained)
        # purify_homogeneous with the boundary draw as its forward draw lands on the same image
        boundary = NoiseStream(stream.seeds)
        boundary.normal = lambda tag, t, shape, dtype=torch.float32, u=0: stream.normal(
            "known" if tag == "forward" else tag, t_s if tag == "forward" else t, shape, dtype, u
        )
        assert torch.equal(purify_homogeneous(x, den, s, t_s - 1, cfg, boundary).image, res.image)


# 6 -------------------------------------------------------------------------


def test_criterion_06_mask_algebra(criterion):
    with criterion(6, "softmax sums, tau monotonicity, union = OR", 10.0) as c:
        gen = torch.Generator().manual_seed(6)
        clf = ClassifierModel(seed=6)
        x = torch.rand(8, 3, 16, 16, generator=gen)
        with torch.no_grad():
            _, acts = clf.forward_with_activations(x)
        worst_sum = 0.0
        for mode in ("sum", "sum_p", "max_p"):
            maps = block_maps(acts, 16, 16, mode, 2)
            worst_sum = max(worst_sum, max(float((m.sum((-2, -1)) - 1).abs().max()) for m in maps))
        maps = block_maps(acts, 16, 16)
        taus = np.linspace(0.0, 1.0, 20)
        areas = [float(build_mask(maps, float(tau)).sum()) for tau in taus]
        monotone = all(b <= a for a, b in zip(areas, areas[1:]))
        union_ok = True
        for tau in taus:
            joint = build_mask(maps, float(tau))
            ored = torch.zeros_like(joint, dtype=torch.bool)
            for m in maps:
                ored |= build_mask([m], float(tau)).bool()
            union_ok &= torch.equal(joint.bool(), ored)
        c.detail = f"max |sum - 1| {worst_sum:.1e}, areas {areas[0]:.0f} -> {areas[-1]:.0f}, union ok {union_ok}"
        assert worst_sum <= 1e-6 and monotone and union_ok


# 7 -------------------------------------------------------------------------


def test_criterion_07_single_call_resampling(criterion):
    with criterion(7, "2 calls per Stage-1 step, legacy U+1, reduction >= 85%", 60.0) as c:
        s = build_linear_schedule()
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(7)) * 2 - 1
        mask = (torch.rand(2, 16, 16, generator=torch.Generator().manual_seed(8)) > 0.5).float()
        stream = NoiseStream([0, 1])
        seen = {}
        for U in (1, 10, 20):
            single = CountingDenoiser(LearnedDenoiser(base=8))
            xt = stage1_step(x, 150, x, mask, single, s, stream)
            resample_refine(xt, 150, U, single, s, stream)
            legacy = CountingDenoiser(LearnedDenoiser(base=8))
            xt = stage1_step(x, 150, x, mask, legacy, s, stream)
            legacy_resample(xt, 150, U, x, mask, legacy, s, stream)
            seen[U] = (single.calls, legacy.calls)
        # whole-pipeline counts at the reference setting
        den = AnalyticDenoiser(torch.zeros(3, 16, 16), 0.5)
        runs = {}
        for legacy_mode in (False, True):
            cfg = PurifyConfig(t_l_frac=0.2, t_s_frac=0.05, U=20, legacy_resample=legacy_mode)
            runs[legacy_mode] = purify(x[:1] * 0.5 + 0.5, None, den, s, cfg, NoiseStream([0]), mask=mask[:1]).denoiser_calls
        reduction = 1 - runs[False] / runs[True]
        c.detail = f"per-step calls {seen}, pipeline {runs[False]} vs {runs[True]}, reduction {100 * reduction:.1f}%"
        assert all(a == 2 and b == U + 1 for U, (a, b) in seen.items())
        assert runs[False] == expected_calls(200, 50, 20) and runs[True] == expected_calls(200, 50, 20, legacy=True)
        assert reduction >= 0.85


# 9 -------------------------------------------------------------------------


def test_criterion_09_eot_estimator(criterion):
    with criterion(9, "EOT gradient of (x+n)^2 within 3 s.e. of 2x", 10.0) as c:
        n = 10_000
        x = torch.tensor([-1.5, -0.4, 0.0, 0.7, 2.0], dtype=F64)
        noise = NoiseStream(list(range(n))).normal("eot", 0, (5,), F64)

        def loss(xr, k):
            return (xr + noise[k]).pow(2).sum()

        est = eot_gradient(x, loss, n)
        # per-sample gradients 2(x + n_k) give the sample standard error
        se = (2 * (x + noise)).std(0) / math.sqrt(n)
        z = ((est - 2 * x) / se).abs()
        c.detail = f"max |z| {float(z.max()):.2f} at n={n}"
        assert torch.all(z <= 3)


# 8, 10, 11: toy benchmark ----------------------------------------------------


def _read_metrics(path: Path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _mean_of(rows, mode, column, tau=None):
    vals = [float(r[column]) for r in rows if r["mode"] == mode and (tau is None or float(r["tau"]) == tau)]
    assert vals, f"no {mode} rows"
    return sum(vals) / len(vals), len(vals)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """One full ``evaluate`` run of the toy benchmark, models trained inline."""
    out = tmp_path_factory.mktemp("bench") / "run_a"
    t0 = time.perf_counter()
    rc = cli_main(["evaluate", "--config", str(BENCH_CFG), "--out", str(out), "--set", "output.plots=false"])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    return dict(out=out, rows=_read_metrics(out / "metrics.csv"), elapsed=elapsed)


def test_criterion_08_toy_robustness_ordering(criterion, benchmark):
    cfg = load_config(BENCH_CFG)
    n_img = cfg.eval.n_images
    with criterion(8, "toy robustness ordering", 1800.0 - benchmark["elapsed"]) as c:
        rows, out = benchmark["rows"], benchmark["out"]
        clf = load_model(out / "classifier.ckpt")
        x, y = generate(cfg.dataset)["test"]
        clean = accuracy(clf, x, y)
        xe, ye = x[:n_img], y[:n_img]
        xa = pgd_attack(xe, ye, clf, AttackConfig(epsilon=8 / 255, iterations=40), NoiseStream(list(range(n_img))))
        pgd_acc = accuracy(clf, xa, ye)

        het_rob, k = _mean_of(rows, "hetero", "robust_acc")
        ts_rob, _ = _mean_of(rows, "homog_ts", "robust_acc")
        het_std, _ = _mean_of(rows, "hetero", "standard_acc")
        tl_std, _ = _mean_of(rows, "homog_tl", "standard_acc")
        n = n_img * k

        def slack(p1, p2):
            return 3 * math.sqrt(p1 * (1 - p1) / n + p2 * (1 - p2) / n)

        taus = sorted({float(r["tau"]) for r in rows if r["mode"] == "sweep_tau"})
        curve = [_mean_of(rows, "sweep_tau", "standard_acc", tau)[0] for tau in taus]
        c.detail = (
            f"(a) clean {clean:.3f}, PGD-40 {pgd_acc:.3f}; "
            f"(b) robust het {het_rob:.3f} vs homog_ts {ts_rob:.3f} (slack {slack(het_rob, ts_rob):.3f}), "
            f"standard het {het_std:.3f} vs homog_tl {tl_std:.3f} (slack {slack(het_std, tl_std):.3f}); "
            f"(c) standard over tau {[round(v, 3) for v in curve]}; run {benchmark['elapsed']:.0f}s"
        )
        assert clean >= 0.95
        assert pgd_acc < 0.30
        assert k == 3
        assert het_rob - ts_rob >= -slack(het_rob, ts_rob)
        assert het_std - tl_std >= -slack(het_std, tl_std)
        assert len(curve) >= 2 and all(b >= a for a, b in zip(curve, curve[1:]))


def test_criterion_10_feature_distance(criterion, benchmark):
    with criterion(10, "feature distance hetero <= homogeneous at t_l", 600.0) as c:
        het, k = _mean_of(benchmark["rows"], "hetero", "feat_dist_clean")
        tl, _ = _mean_of(benchmark["rows"], "homog_tl", "feat_dist_clean")
        c.detail = f"{k}-seed mean: hetero {het:.3f}, homog_tl {tl:.3f}"
        assert k == 3 and het <= tl


def test_criterion_11_determinism(criterion, benchmark):
    with criterion(11, "two evaluate runs give byte-identical metrics.csv", 3600.0 - benchmark["elapsed"]) as c:
        out_b = benchmark["out"].parent / "run_b"
        rc = cli_main(["evaluate", "--config", str(BENCH_CFG), "--out", str(out_b), "--set", "output.plots=false"])
        assert rc == 0
        same = filecmp.cmp(benchmark["out"] / "metrics.csv", out_b / "metrics.csv", shallow=False)
        c.detail = f"{len(benchmark['rows'])} rows, identical {same}"
        assert same
