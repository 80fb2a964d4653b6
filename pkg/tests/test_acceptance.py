"""End-to-end acceptance checks.

Each test records one pass/fail line (shown in the terminal summary) and then
asserts.  The two sweep tests train 90 and 45 networks respectively and are
the slow part of the suite.
"""

import time
from dataclasses import replace

import numpy as np

from conftest import central_diff, record_acceptance, rel_err
from dats import dist_match
from dats.datagen import DomainTransform, SyntheticSpec, generate, proportion_sweep
from dats.nn import (
    flatten_params,
    init_mlp,
    mlp_backward,
    mlp_forward,
    unflatten_params,
    weighted_cross_entropy,
)
from dats.proportions import (
    ClassMeans,
    beta_weights,
    class_conditional_means,
    gradient_path_proportions,
    mean_matching_loss,
    solve_proportions_closed_form,
)
from dats.trainer import (
    Minibatch,
    TrainingConfig,
    composite_gradients,
    evaluate,
    init_state,
    train,
    weighted_domain_loss,
)

SWEEP = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
SEEDS = [0, 1, 2, 3, 4]
N_PER_DOMAIN = 2000


def sweep_runs(mode):
    """Target accuracy and proportion error per (sweep point, seed)."""
    acc = np.zeros((len(SWEEP), len(SEEDS)))
    err = np.zeros_like(acc)
    for j, seed in enumerate(SEEDS):
        spec = SyntheticSpec(n_per_domain=N_PER_DOMAIN, seed=seed)
        for i, (p, data) in enumerate(proportion_sweep(spec, SWEEP)):
            state, _ = train(data, TrainingConfig(mode=mode, seed=seed))
            tgt = data[-1]
            ev = evaluate(state, tgt.x, tgt.y, true_gamma=tgt.proportions)
            acc[i, j], err[i, j] = ev["accuracy"], ev["gamma_linf"]
    return acc, err


def unimodal(values) -> bool:
    """Non-increasing when moving away from the maximum in either direction."""
    k = int(np.argmax(values))
    return bool(np.all(np.diff(values[:k + 1]) >= 0) and np.all(np.diff(values[k:]) <= 0))


def test_proportion_recovery():
    t0 = time.perf_counter()
    _, err = sweep_runs("dats")
    elapsed = time.perf_counter() - t0
    mean_err = err.mean(axis=1)
    ok = bool((mean_err <= 0.05).all()) and elapsed <= 300
    detail = " ".join(f"{p:.1f}:{e:.3f}" for p, e in zip(SWEEP, mean_err))
    record_acceptance(1, ok, f"seed-mean Linf per sweep point [{detail}] (<= 0.05); {elapsed:.0f}s (<= 300s)")
    assert ok


def test_closed_form_consistency():
    t0 = time.perf_counter()
    truth = np.array([0.3, 0.7])
    medians = []
    for n in (500, 2000, 8000):
        errs = []
        for seed in range(20):
            # identity transforms: class conditionals are shared across domains by construction
            spec = SyntheticSpec(n_per_domain=n, target_proportions=truth, seed=seed,
                                 transforms=[DomainTransform.identity(8)] * 2)
            src, tgt = generate(spec)
            means = class_conditional_means(src.x, src.y, 2)
            est = solve_proportions_closed_form(means, tgt.x.mean(axis=0))
            errs.append(np.abs(est - truth).max())
        medians.append(float(np.median(errs)))
    elapsed = time.perf_counter() - t0
    m = medians
    ok = m[0] > m[1] > m[2] and m[2] <= 0.6 * m[1] and elapsed <= 60
    record_acceptance(2, ok, f"median Linf n=500/2000/8000: {m[0]:.4f} {m[1]:.4f} {m[2]:.4f}; "
                             f"ratio 8000/2000 = {m[2] / m[1]:.3f} (<= 0.6); {elapsed:.1f}s (<= 60s)")
    assert ok


def test_gradient_path_matches_oracle():
    worst = 0.0
    r = np.random.default_rng(2024)
    for _ in range(20):
        L = int(r.integers(2, 5))
        d = int(r.integers(L, L + 4))
        M = r.standard_normal((d, L))
        while np.linalg.cond(M.T @ M) > 1e4:
            M = r.standard_normal((d, L))
        # a mix of interior and boundary optima
        mu = M @ r.dirichlet(np.ones(L)) + 0.3 * r.standard_normal(d)
        oracle = solve_proportions_closed_form(M, mu)
        path = gradient_path_proportions(M, mu)
        worst = max(worst, float(np.abs(path - oracle).max()))
    ok = worst <= 1e-3
    record_acceptance(3, ok, f"max Linf(gradient path - closed form) over 20 instances = {worst:.2e} (<= 1e-3)")
    assert ok


def test_gradient_integrity():
    r = np.random.default_rng(7)
    errs = {}

    # label loss through the label network
    label = init_mlp([5, 6, 3], r, output_activation="softmax")
    h = r.standard_normal((6, 5))
    y = r.integers(0, 3, 6)
    w = np.full(6, 1 / 6)

    def label_loss(vec):
        return weighted_cross_entropy(mlp_forward(h, unflatten_params(vec, label))[0], y, w)[0]

    out, cache = mlp_forward(h, label)
    _, g = weighted_cross_entropy(out, y, w)
    grads, _ = mlp_backward(cache, label, g)
    analytic = np.concatenate([np.r_[dw.ravel(), db] for dw, db in grads])
    errs["L_Y"] = rel_err(analytic, central_diff(label_loss, flatten_params(label)))

    # weighted domain loss
    logits = r.standard_normal((6, 3))
    dom = np.array([0, 0, 1, 1, 2, 2])
    cls = np.array([0, 1, 1, 0, -1, -1])
    betas = [beta_weights([0.2, 0.8], [0.5, 0.5]), beta_weights([0.2, 0.8], [0.7, 0.3])]
    args = (dom, cls, np.array([0.35, 0.65]), betas, [2, 2], 2, 2)
    _, g = weighted_domain_loss(logits, *args)
    errs["L_D"] = rel_err(g, central_diff(lambda z: weighted_domain_loss(z, *args)[0], logits))

    # mean matching
    means = [ClassMeans(r.standard_normal((4, 3)), np.ones(3)) for _ in range(2)]
    lam, mu, z = np.array([0.4, 0.6]), r.standard_normal(4), r.standard_normal(3)
    _, g = mean_matching_loss(means, lam, z, mu)
    errs["L_rM"] = rel_err(g, central_diff(lambda v: mean_matching_loss(means, lam, v, mu)[0], z))

    # kernel divergence
    grid = dist_match.KernelGrid(r.standard_normal((4, 2)), 1.0)
    hs = r.standard_normal((30, 2))
    stats = [dist_match.estimate_match_stats(r.standard_normal((20, 2)), hs, np.arange(30) % 3, grid)
             for _ in range(2)]
    _, g = dist_match.combined_match_loss(stats, lam, z)
    errs["L_rF"] = rel_err(g, central_diff(lambda v: dist_match.combined_match_loss(stats, lam, v)[0], z))

    # composite objective for the feature extractor
    cfg = TrainingConfig(feature_hidden=(7,), label_hidden=5, domain_hidden=5, alpha_domain=0.8)
    state = init_state(3, 2, [np.array([0.5, 0.5]), np.array([0.3, 0.7])], cfg)
    state.gamma_logits = np.array([0.4, -0.2])
    batch = Minibatch([r.standard_normal((4, 3)) for _ in range(2)],
                      [np.array([0, 1, 1, 0]), np.array([1, 1, 0, 0])], r.standard_normal((4, 3)))
    _, _, _, g_feat = composite_gradients(state, batch, cfg)

    def composite(vec):
        s = replace(state, feature=unflatten_params(vec, state.feature))
        ly, ld, _, _ = composite_gradients(s, batch, cfg)
        return ly - cfg.alpha_domain * ld

    analytic = np.concatenate([np.r_[dw.ravel(), db] for dw, db in g_feat])
    errs["composite"] = rel_err(analytic, central_diff(composite, flatten_params(state.feature)))

    ok = max(errs.values()) <= 1e-4
    record_acceptance(4, ok, "relative errors " + " ".join(f"{k}={v:.1e}" for k, v in errs.items())
                      + " (<= 1e-4)")
    assert ok


def test_dats_beats_dann_under_shift():
    t0 = time.perf_counter()
    dats_acc, _ = sweep_runs("dats")
    dann_acc, _ = sweep_runs("dann")
    elapsed = time.perf_counter() - t0
    da, dn = dats_acc.mean(axis=1), dann_acc.mean(axis=1)
    margin = [da[0] - dn[0], da[-1] - dn[-1]]
    spread = da.max() - da.min()
    checks = {
        "margin": min(margin) >= 0.05,
        "dats_spread": spread <= 0.10,
        "dann_unimodal": unimodal(dn),
        "runtime": elapsed <= 900,
    }
    ok = all(checks.values())
    detail = (f"margin at 0.1/0.9 = {margin[0]:+.3f}/{margin[1]:+.3f} (>= 0.05); "
              f"dats spread = {spread:.3f} (<= 0.10); "
              f"dann acc [{' '.join(f'{a:.3f}' for a in dn)}] unimodal={checks['dann_unimodal']}; "
              f"dats acc [{' '.join(f'{a:.3f}' for a in da)}]; {elapsed:.0f}s (<= 900s)")
    record_acceptance(5, ok, detail)
    assert ok, checks


def test_dann_reduction_of_domain_loss():
    r = np.random.default_rng(3)
    worst = 0.0
    for n, L in ((8, 2), (16, 3), (5, 4)):
        logits = r.standard_normal((2 * n, 2))
        dom = np.r_[np.zeros(n), np.ones(n)].astype(int)
        cls = np.r_[r.integers(0, L, n), -np.ones(n)].astype(int)
        uniform = np.full(L, 1.0 / L)
        beta = beta_weights(uniform, uniform)  # gamma frozen uniform, uniform sources
        weighted, g_w = weighted_domain_loss(logits, dom, cls, [1.0], [beta], [n], n, L)
        plain, g_p = weighted_cross_entropy(logits, dom, np.full(2 * n, 1.0 / (2 * n)))
        const = 2.0 / L  # each sample carries 1/(n L) instead of 1/(2n)
        worst = max(worst, abs(weighted - const * plain) / abs(const * plain),
                    float(np.abs(g_w - const * g_p).max()))
    ok = worst <= 1e-14
    record_acceptance(6, ok, f"max relative deviation from (2/L) x unweighted cross-entropy = {worst:.1e}")
    assert ok


def test_divergence_grid_minimum():
    hits = []
    cand = np.round(np.arange(0.0, 1.0 + 1e-9, 0.05), 2)
    for seed in range(10):
        r = np.random.default_rng(seed)
        p = float(r.choice(cand[2:-2]))
        spec = SyntheticSpec(n_per_domain=2000, target_proportions=[p, 1 - p], seed=seed,
                             transforms=[DomainTransform.identity(8)] * 2)
        src, tgt = generate(spec)
        grid = dist_match.build_grid(src.x, src.y, 2, "median")
        stats = dist_match.estimate_match_stats(tgt.x, src.x, src.y, grid)
        vals = [dist_match.divergence_value(stats, [a, 1 - a])[0] for a in cand]
        hits.append(cand[int(np.argmin(vals))] == cand[np.argmin(np.abs(cand - p))])
    ok = all(hits)
    record_acceptance(7, ok, f"grid argmin at nearest grid point for {sum(hits)}/10 seeds")
    assert ok
