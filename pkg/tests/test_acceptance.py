"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed in the terminal summary.
"""

import itertools
import sys
import time

import numpy as np
import pytest
from scipy.special import logit

from conftest import ACCEPTANCE_LINES
from hierlattice.cli import main as cli_main
from hierlattice.data import Dataset
from hierlattice.decomposition import DecomposedParameter, materialize_cell_params
from hierlattice.evaluation import ConjugatePosterior, conjugate_posterior, waic, waic_variance_conjugate
from hierlattice.fit import FitConfig, Problem, fit_adaptive, map_fit, model_blocks, predict
from hierlattice.glm import FamilySpec
from hierlattice.io import load_model, model_to_bytes, save_model
from hierlattice.lattice import LatticeSpec, max_bins
from hierlattice.regularization import (
    RegularizationPlan,
    df_eff_ridge,
    generalization_preserving,
    shrinkage,
    tau_gaussian,
)
from hierlattice.simulate import SimConfig, run_regularization_comparison, run_replica_check, run_rg_flow
from hierlattice.stacking import StackingModel, fit_stacking, loo_loss, row_leverage, stack_weights


def report(n: int, ok: bool, detail: str, elapsed: float, budget: float):
    ok_time = elapsed < budget
    status = "PASS" if ok and ok_time else "FAIL"
    line = f"criterion {n:2d}: {status}  {detail}  [{elapsed:.1f}s / {budget:.0f}s]"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line
    assert ok_time, line


# 1 -----------------------------------------------------------------------


def _subset_sum_oracle(dp: DecomposedParameter, cell) -> np.ndarray:
    d = len(dp.levels)
    total = np.zeros(dp.p)
    for mask in range(1 << d):
        comp = tuple(i for i in range(d) if mask >> i & 1)
        if len(comp) > dp.K:
            continue
        flat = 0
        for i in comp:
            flat = flat * dp.levels[i] + cell[i]
        total += dp.tensors[comp][flat]
    return total


def test_criterion_01_decomposition_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        levels = tuple(int(l) for l in rng.integers(1, 5, size=d))
        p = int(rng.integers(1, 4))
        K = int(rng.integers(0, d + 1))
        dp = DecomposedParameter.zeros(levels, K, p)
        for c in dp.components:
            dp.tensors[c] = rng.normal(size=dp.tensors[c].shape)
        for cell in itertools.product(*(range(l) for l in levels)):
            diff = np.max(np.abs(materialize_cell_params(dp, cell) - _subset_sum_oracle(dp, cell)))
            worst = max(worst, float(diff))
    report(1, worst <= 1e-12, f"max |materialized - subset sum| = {worst:.1e}", time.perf_counter() - t0, 5)


# 2 -----------------------------------------------------------------------


def test_criterion_02_shrinkage_df_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for N, tau, sigma in itertools.product([1, 7, 50, 1000], [0.01, 0.3, 1.0, 5.0], [0.1, 1.0, 3.0]):
        df = df_eff_ridge(np.ones((N, 1)), np.full(N, 1 / sigma**2), tau)
        worst = max(worst, abs(df - shrinkage(N, tau, sigma)))
    report(2, worst <= 1e-12, f"max |df_eff - s| = {worst:.1e}", time.perf_counter() - t0, 1)


# 3 -----------------------------------------------------------------------


def test_criterion_03_generalization_preserving_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    N, sigma = 500, 1.0
    means = {}
    for p in (1, 2, 5):
        tau = tau_gaussian(sigma, p, N)
        dfs = [df_eff_ridge(rng.standard_normal((N, p)), np.full(N, 1 / sigma**2), tau) for _ in range(200)]
        means[p] = float(np.mean(dfs))
    ok = all(m <= 0.5 + 0.05 for m in means.values())
    detail = ", ".join(f"p={p}: {m:.3f}" for p, m in means.items())
    report(3, ok, f"mean df_eff {detail} (limit 0.55)", time.perf_counter() - t0, 30)


# 4 -----------------------------------------------------------------------


def test_criterion_04_replica_agreement():
    t0 = time.perf_counter()
    N = 1000
    res = run_replica_check(p=50, N=N, lambda2=1.0 / N, sigma2=1.0, draws=200, seed=4)
    report(4, res.rel_error < 0.05, f"closed_form={res.closed_form:.3f} mc={res.mc_mean:.3f}+/-{res.mc_stderr:.3f} rel={res.rel_error:.3%}", time.perf_counter() - t0, 60)


# 5 -----------------------------------------------------------------------


def test_criterion_05_regularization_ordering():
    t0 = time.perf_counter()
    res = run_regularization_comparison(SimConfig(), replications=20, seed=5)
    summary = {(r["scheme"], r["K"]): r["mean"] for r in res.summary("test_ll_improvement")}
    ok = True
    parts = []
    for K in (0, 1, 2):
        gp = summary[("generalization-preserving", K)]
        others = [summary[(s, K)] for s in ("unregularized", "fixed", "ad-hoc")]
        ok &= gp > max(others)
        parts.append(f"K={K}: gp={gp:+.4f} best other={max(others):+.4f}")
    report(5, ok, "; ".join(parts), time.perf_counter() - t0, 600)


# 6 -----------------------------------------------------------------------


def test_criterion_06_rg_flow_sign():
    t0 = time.perf_counter()
    agg = run_rg_flow(SimConfig(), replications=20, seed=6)
    frac = agg.frac_negative_gap()
    order = agg.frac_strictly_decreasing()
    ok = frac[0] >= 0.8 and frac[1] >= 0.8 and order > 0.5
    report(6, ok, f"P(dS1<0)={frac[0]:.2f} P(dS2<0)={frac[1]:.2f} P(test loss K2<K1<K0)={order:.2f}", time.perf_counter() - t0, 600)


# 7 -----------------------------------------------------------------------


def test_criterion_07_null_safety():
    t0 = time.perf_counter()
    res = run_regularization_comparison(SimConfig(rho=0.0), replications=50, seed=7, schemes=("generalization-preserving",))
    k0 = res.values("test_ll", "generalization-preserving", 0)
    k2 = res.values("test_ll", "generalization-preserving", 2)
    change = float(np.mean(k2 - k0))
    report(7, change >= -0.01, f"mean test ll change K0->K2 = {change:+.4f} nats/obs", time.perf_counter() - t0, 600)


# 8 -----------------------------------------------------------------------


def _known_sigma_loo(x, y, sigma2, tau) -> float:
    """Exact LOO for the Gaussian-prior, known-variance linear model."""
    total = 0.0
    for n in range(len(y)):
        keep = np.arange(len(y)) != n
        prec = x[keep] @ x[keep] / sigma2 + 1 / tau**2
        mean = (x[keep] @ y[keep] / sigma2) / prec
        var = sigma2 + x[n] ** 2 / prec
        total += 0.5 * np.log(2 * np.pi * var) + (y[n] - x[n] * mean) ** 2 / (2 * var)
    return total


def _nig_mc_variance(post: ConjugatePosterior, X, y, S, rng):
    s2 = post.b_N / rng.gamma(post.a_N, 1.0, size=S)
    beta = post.mean[None, :] + np.sqrt(s2)[:, None] * rng.standard_normal((S, X.shape[1])) @ np.linalg.cholesky(post.V).T
    resid = y[None, :] - beta @ X.T
    ll = -0.5 * np.log(2 * np.pi * s2)[:, None] - resid**2 / (2 * s2[:, None])
    dev = (ll - ll.mean(axis=0)) ** 2
    total = dev.sum(axis=1)
    return float(total.mean() * S / (S - 1)), float(total.std(ddof=1) / np.sqrt(S))


def test_criterion_08_waic_vs_loo():
    t0 = time.perf_counter()
    N, sigma2, tau = 50, 1.0, 2.0
    lattice = LatticeSpec(())
    family = FamilySpec("gaussian", sigma2)
    gaps, zs = [], []
    for seed in range(50):
        rng = np.random.default_rng(800 + seed)
        x = rng.normal(1.0, 1.0, N)
        y = 0.7 * x + rng.normal(0, np.sqrt(sigma2), N)
        data = Dataset(x, y)
        plan = RegularizationPlan.constant(model_blocks(lattice, 0, 1), tau)
        model = map_fit(data, lattice, 0, family, plan, FitConfig(solver="newton"))
        w = waic(model, data, S=1000, seed=seed).total
        gaps.append(abs(w - _known_sigma_loo(x, y, sigma2, tau)) / N)

        X = np.column_stack([np.ones(N), x])
        y2 = 0.5 + 0.7 * x + rng.normal(0, 1.3, N)
        post = conjugate_posterior(X, y2, prior_scale=10.0, a0=2.0, b0=2.0)
        exact = float(waic_variance_conjugate(post).sum())
        mc, se = _nig_mc_variance(post, X, y2, 20000, rng)
        zs.append((exact - mc) / se)
    max_gap, max_z = max(gaps), float(np.max(np.abs(zs)))
    ok = max_gap < 0.02 and max_z < 3
    report(8, ok, f"max |WAIC-LOO|/N = {max_gap:.4f}; max |z| conjugate variance vs MC = {max_z:.2f}", time.perf_counter() - t0, 120)


# 9 -----------------------------------------------------------------------


def _logistic_data(prevalence: float, N: int, seed: int) -> tuple[Dataset, LatticeSpec]:
    rng = np.random.default_rng(seed)
    lattice = LatticeSpec.uniform_categorical(2, 4)
    cells = rng.integers(0, 4, size=(N, 2))
    effects = rng.normal(0, 0.1, size=(2, 4))
    eta = logit(prevalence) + effects[0, cells[:, 0]] + effects[1, cells[:, 1]]
    y = (rng.random(N) < 1 / (1 + np.exp(-eta))).astype(float)
    return Dataset(np.ones((N, 1)), y, {"g0": cells[:, 0], "g1": cells[:, 1]}), lattice


def test_criterion_09_glm_scaling():
    t0 = time.perf_counter()
    family = FamilySpec("bernoulli-logit")
    cfg = FitConfig(solver="newton")
    N = 8000
    balanced, lattice = _logistic_data(0.5, N, 90)
    m = fit_adaptive(balanced, lattice, 1, family, cfg, penalize_global=True)
    wbar_b = m.fisher.global_wbar()
    tau = generalization_preserving(m.blocks, balanced.cells(lattice), wbar=m.fisher.wbar, penalize_global=True).taus["coeff"][()][0]
    tau_rel = abs(tau / (np.sqrt(2) / np.sqrt(N)) - 1)

    skewed, lattice = _logistic_data(0.1, N, 91)
    m2 = fit_adaptive(skewed, lattice, 1, family, cfg, penalize_global=False)
    wbar_s = m2.fisher.global_wbar()
    ok = 0.2 <= wbar_b <= 0.25 and tau_rel <= 0.05 and 0.07 <= wbar_s <= 0.11
    report(9, ok, f"balanced wbar={wbar_b:.4f} tau rel err={tau_rel:.2%}; prevalence-0.1 wbar={wbar_s:.4f}", time.perf_counter() - t0, 120)


# 10 ----------------------------------------------------------------------


def test_criterion_10_stacking_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    N = 4000
    lattice = LatticeSpec.uniform_categorical(1, 2)
    cells = rng.integers(0, 2, size=(N, 1))
    truth = rng.normal(0, 2, N)
    y = (rng.random(N) < 1 / (1 + np.exp(-truth))).astype(float)
    noise = rng.normal(0, 2, N)
    good_a = cells[:, 0] == 0
    eta_a = np.where(good_a, truth, truth * 0.2 + noise)
    eta_b = np.where(good_a, truth * 0.2 + noise, truth)
    logits = np.column_stack([eta_a, eta_b])
    family = FamilySpec("bernoulli-logit")
    sm = fit_stacking(logits, y, cells, lattice, 1, FitConfig(), family=family)
    w0, w1 = stack_weights(sm, [0]), stack_weights(sm, [1])
    h = row_leverage(2, cells, lattice)
    ens = loo_loss(sm, logits, y, cells, h=h)
    singles = [loo_loss(StackingModel.zeros(lattice, 1, 0, family), logits[:, [m]], y, cells, h=h) for m in range(2)]
    ok = w0[0] > w0[1] and w1[1] > w1[0] and ens <= min(singles) + 1e-6
    report(10, ok, f"cell0 w={w0.round(3)} cell1 w={w1.round(3)}; L_LOO ens={ens:.4f} best single={min(singles):.4f}", time.perf_counter() - t0, 60)


# 11 ----------------------------------------------------------------------


def test_criterion_11_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    families = [FamilySpec("gaussian", 1.7), FamilySpec("bernoulli-logit"), FamilySpec("poisson-log")]
    for i in range(50):
        family = families[i % 3]
        d = int(rng.integers(1, 3))
        lattice = LatticeSpec.uniform_categorical(d, int(rng.integers(2, 4)))
        N, p = 40, int(rng.integers(1, 3))
        K = int(rng.integers(0, d + 1))
        X = rng.normal(size=(N, p))
        cells = rng.integers(0, lattice.levels[0], size=(N, d))
        eta = rng.normal(0, 0.5, N)
        y = {"gaussian": eta + rng.normal(size=N), "bernoulli-logit": (rng.random(N) < 0.5) * 1.0, "poisson-log": rng.poisson(np.exp(eta)) * 1.0}[family.family]
        blocks = model_blocks(lattice, K, p, intercept_K=0)
        plan = RegularizationPlan.by_order(blocks, lambda k: 0.5 + k)
        prob = Problem(blocks, X, y, cells, family, plan)
        theta = rng.normal(0, 0.3, prob.P)
        _, g = prob.loss_grad(theta)
        eps = 1e-6
        fd = np.array([(prob.loss(theta + eps * e) - prob.loss(theta - eps * e)) / (2 * eps) for e in np.eye(prob.P)])
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    report(11, worst <= 1e-5, f"max relative gradient error = {worst:.1e}", time.perf_counter() - t0, 30)


# 12 ----------------------------------------------------------------------


def test_criterion_12_bin_constraint(tmp_path):
    t0 = time.perf_counter()
    worked = (max_bins(1000, 1, 3), max_bins(1000, 1, 5))
    rng = np.random.default_rng(12)
    N = 8000
    rows = ["y,a,b,c"] + [f"{v[0]:.6f},{v[1]:.6f},{v[2]:.6f},{v[3]:.6f}" for v in rng.normal(size=(N, 4))]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "run.yaml").write_text("data: {path: d.csv, response: y}\nbins: {columns: {a: binned, b: binned, c: binned}}\n")

    def run(*args):
        return cli_main(["bin", "--config", str(tmp_path / "run.yaml"), *args])

    # N/p = 8000, d_cont = 3: (8000)^(1/3) / 2 = 10
    codes = (run("--L", "10"), run("--L", "11"), run("--L", "11", "--force"))
    ok = worked == (10, 3) and codes == (0, 13, 0)
    report(12, ok, f"max_bins worked values {worked}; bin exit codes L=10/11/11+force = {codes}", time.perf_counter() - t0, 1)


# 13 ----------------------------------------------------------------------


def test_criterion_13_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(13)
    lattice = LatticeSpec.uniform_categorical(2, 3)
    N = 600
    cells = rng.integers(0, 3, size=(N, 2))
    X = np.column_stack([np.ones(N), rng.normal(size=N)])
    y = X[:, 1] * (1 + cells[:, 0] * 0.3) + rng.normal(size=N)
    data = Dataset(X, y, {"g0": cells[:, 0], "g1": cells[:, 1]})
    cfg = FitConfig(max_steps=400, batch_size=128, seed=3)
    config = {"K": 2, "seed": 3}

    def build():
        return map_fit(data, lattice, 2, FamilySpec("gaussian"), cfg=cfg)

    a, b = model_to_bytes(build(), config), model_to_bytes(build(), config)
    model = build()
    path = tmp_path / "m.hlm"
    save_model(model, path, config)
    loaded = load_model(path)
    new_X = rng.normal(size=(200, 2))
    new_cells = rng.integers(0, 3, size=(200, 2))
    p0 = predict(model, new_X, new_cells)[0]
    p1 = predict(loaded, new_X, new_cells)[0]
    ok = a == b and np.array_equal(p0, p1) and path.read_bytes() == a
    report(13, ok, f"artifacts identical={a == b}; reloaded predictions bit-identical={np.array_equal(p0, p1)}", time.perf_counter() - t0, 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
