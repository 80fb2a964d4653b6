import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err
from dats.errors import DegenerateGeometryError, IncompleteStatsError, UsageError
from dats.nn import softmax
from dats.proportions import (
    ClassMeans,
    beta_weights,
    class_conditional_means,
    gradient_path_proportions,
    mean_matching_loss,
    project_to_simplex,
    solve_proportions_closed_form,
    source_proportions,
)


def cm(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return ClassMeans(m, np.ones(m.shape[1], dtype=int))


def simplex_grid(step=1e-3):
    """All points of the 3-class simplex on a lattice of the given spacing."""
    k = int(round(1 / step))
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    a, b = i[keep] / k, j[keep] / k
    return np.stack([a, b, 1 - a - b], axis=1)


class TestSourceProportions:
    def test_counts(self):
        np.testing.assert_allclose(source_proportions([0, 0, 1, 1], 2), [0.5, 0.5])
        np.testing.assert_allclose(source_proportions([1, 1, 1, 1], 2), [0.0, 1.0])

    def test_seeded_draw(self):
        labels = np.random.default_rng(7).choice(2, size=1000, p=[0.2, 0.8])
        got = source_proportions(labels, 2)
        np.testing.assert_allclose(got, np.bincount(labels) / 1000)
        assert np.abs(got - [0.2, 0.8]).max() <= 0.05

    def test_errors(self):
        with pytest.raises(UsageError):
            source_proportions([], 2)
        with pytest.raises(UsageError):
            source_proportions([0, 2], 2)


class TestClassMeans:
    def test_one_sample_per_class(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(class_conditional_means(x, [0, 1], 2).means, x.T)

    def test_duplicates(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]])
        np.testing.assert_array_equal(class_conditional_means(x, [0, 0, 1, 1], 2).means,
                                      [[1.0, 3.0], [2.0, 4.0]])

    def test_brute_force(self, rng):
        x = rng.standard_normal((50, 4))
        y = rng.integers(0, 3, 50)
        got = class_conditional_means(x, y, 3).means
        for l in range(3):
            rows = [x[i] for i in range(50) if y[i] == l]
            expected = [sum(r[j] for r in rows) / len(rows) for j in range(4)]
            np.testing.assert_allclose(got[:, l], expected, rtol=1e-12)

    def test_absent_class_flagged(self):
        got = class_conditional_means(np.ones((3, 2)), [0, 0, 2], 3)
        assert list(got.present) == [True, False, True]
        assert np.isnan(got.means[:, 1]).all()
        filled = got.filled(np.zeros((2, 3)))
        assert filled.complete is False and np.isfinite(filled.means).all()


class TestMeanMatchingLoss:
    def test_exact_interpolation(self):
        logits = np.log([0.7, 0.3])
        loss, _ = mean_matching_loss([cm([[0.0, 1.0]])], [1.0], logits, [0.3])
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_vertex(self, rng):
        m = rng.standard_normal((4, 3))
        logits = np.array([0.0, 60.0, 0.0])  # softmax ~ e_1
        loss, _ = mean_matching_loss([cm(m)], [1.0], logits, m[:, 1])
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_gradient(self, rng):
        means = [cm(rng.standard_normal((5, 3))) for _ in range(2)]
        lam = np.array([0.3, 0.7])
        mu = rng.standard_normal(5)
        logits = rng.standard_normal(3)
        _, g = mean_matching_loss(means, lam, logits, mu)
        num = central_diff(lambda z: mean_matching_loss(means, lam, z, mu)[0], logits)
        assert rel_err(g, num) <= 1e-5

    def test_mask_zeroes_column(self, rng):
        means = [cm(rng.standard_normal((3, 3)))]
        logits = rng.standard_normal(3)
        mu = rng.standard_normal(3)
        _, full = mean_matching_loss(means, [1.0], logits, mu)
        _, masked = mean_matching_loss(means, [1.0], logits, mu, [np.array([1.0, 0.0, 1.0])])
        assert not np.allclose(full, masked)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            mean_matching_loss([cm(np.ones((2, 2)))], [1.0], np.zeros(2), np.zeros(3))
        with pytest.raises(UsageError):
            mean_matching_loss([cm(np.ones((2, 2)))], [0.5, 0.5], np.zeros(2), np.zeros(2))

    def test_incomplete(self):
        means = ClassMeans(np.array([[1.0, np.nan]]), np.array([1, 0]))
        with pytest.raises(IncompleteStatsError):
            mean_matching_loss([means], [1.0], np.zeros(2), [0.0])

    @pytest.mark.parametrize("scale", [1.0, 30.0])
    def test_softmax_stays_on_simplex(self, rng, scale):
        g = softmax(scale * rng.standard_normal(6))
        assert (g >= 0).all() and abs(g.sum() - 1) <= 1e-9


class TestClosedForm:
    def test_column_recovered(self, rng):
        m = rng.standard_normal((5, 3))
        np.testing.assert_allclose(solve_proportions_closed_form(m, m[:, 2]), [0, 0, 1], atol=1e-10)

    def test_interpolation_1d(self):
        got = solve_proportions_closed_form(np.array([[0.0, 1.0]]), [0.3])
        np.testing.assert_allclose(got, [0.7, 0.3], atol=1e-12)

    def test_singular(self):
        with pytest.raises(DegenerateGeometryError):
            solve_proportions_closed_form(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]), [1.0, 2.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_against_grid_search(self, seed):
        r = np.random.default_rng(seed)
        m = 3.0 * np.eye(3)[:, :3] + 0.3 * r.standard_normal((3, 3))
        m = np.vstack([m, r.standard_normal((2, 3))])
        truth = r.dirichlet(np.ones(3))
        noise = 0.05 * r.standard_normal(5)
        mu = m @ truth + noise
        got = solve_proportions_closed_form(m, mu)
        grid = simplex_grid(1e-3)
        obj = ((grid @ m.T - mu) ** 2).sum(axis=1)
        best = grid[np.argmin(obj)]
        assert np.abs(got - best).max() <= 2e-3
        assert ((m @ got - mu) ** 2).sum() <= obj.min() + 1e-12
        # noise-scaled recovery of the generating proportions
        sv = np.linalg.svd(m, compute_uv=False).min()
        assert np.abs(got - truth).max() <= 2 * np.linalg.norm(noise) / sv

    def test_boundary_solution_against_grid(self):
        m = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
        mu = np.array([1.5, -0.5, 1.0])  # unconstrained solution leaves the simplex
        got = solve_proportions_closed_form(m, mu)
        grid = simplex_grid(1e-3)
        best = grid[np.argmin(((grid @ m.T - mu) ** 2).sum(axis=1))]
        assert np.abs(got - best).max() <= 2e-3
        assert got.min() >= 0 and got.sum() == pytest.approx(1.0)

    def test_multi_source_weights(self, rng):
        m1, m2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        g = np.array([0.35, 0.65])
        got = solve_proportions_closed_form([cm(m1), cm(m2)], m1 @ g, weights=[1.0, 0.0])
        np.testing.assert_allclose(got, g, atol=1e-10)

    def test_scale_equivariance(self, rng):
        m = rng.standard_normal((6, 3))
        mu = m @ np.array([0.2, 0.5, 0.3]) + 0.1 * rng.standard_normal(6)
        base = solve_proportions_closed_form(m, mu)
        for c in (-3.0, 0.01, 250.0):
            np.testing.assert_allclose(solve_proportions_closed_form(c * m, c * mu), base, atol=1e-9)

    def test_permutation_equivariance(self, rng):
        m = rng.standard_normal((6, 4))
        mu = m @ rng.dirichlet(np.ones(4)) + 0.05 * rng.standard_normal(6)
        perm = np.array([2, 0, 3, 1])
        base = solve_proportions_closed_form(m, mu)
        np.testing.assert_allclose(solve_proportions_closed_form(m[:, perm], mu), base[perm], atol=1e-9)


def test_gradient_path_matches_closed_form(rng):
    m = rng.standard_normal((6, 3)) + 2 * np.eye(6, 3)
    mu = m @ np.array([0.5, 0.2, 0.3])
    np.testing.assert_allclose(gradient_path_proportions(m, mu), [0.5, 0.2, 0.3], atol=1e-3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_projection_lands_on_simplex(v):
    p = project_to_simplex(v)
    assert (p >= 0).all() and abs(p.sum() - 1) <= 1e-9


class TestBeta:
    def test_identity_ratio(self):
        b = beta_weights([0.2, 0.3, 0.5], [0.2, 0.3, 0.5])
        np.testing.assert_allclose(b.values, 1.0)
        assert b.l1 == pytest.approx(3.0)

    def test_arithmetic(self):
        b = beta_weights([0.9, 0.1], [0.5, 0.5])
        np.testing.assert_allclose(b.values, [1.8, 0.2])
        assert b.l1 == pytest.approx(2.0)

    def test_floor(self):
        b = beta_weights([0.5, 0.5], [1.0, 0.0], floor=1e-6)
        assert np.isfinite(b.values).all() and b.values[1] == pytest.approx(5e5)

    def test_bad_floor(self):
        with pytest.raises(UsageError):
            beta_weights([1.0], [1.0], floor=0.0)
