import math

import numpy as np
import pytest

from conftest import make_dual

from kmirror import (
    AdaptiveBudget,
    ConstantBudget,
    adaptive_budget_update,
    eval_kernel,
    komp_prune,
    komp_prune_detailed,
    komp_prune_joint,
    removal_residual,
    rkhs_norm,
    rkhs_norm_diff,
)
from kmirror.kernels import Kernel, kernel_matrix


def greedy_oracle(z, epsilon):
    """Exhaustive destructive greedy with fresh normal-equation solves.

    Independent of the library path: each round enumerates every removable
    atom, refits against the original function, and removes the smallest
    residual if it fits the budget (lowest index on ties).
    """
    atoms = z.dictionary.atoms
    fixed = z.dictionary.fixed_mask
    w_orig = z.weights
    gram = kernel_matrix(z.kernel, atoms, atoms)
    norm2 = float(w_orig @ gram @ w_orig)
    active = list(range(len(atoms)))
    weights = w_orig.copy()
    final_residual = 0.0
    while True:
        removable = [p for p, i in enumerate(active) if not fixed[i]]
        if not removable:
            break
        best = None
        for p in removable:
            rest = [i for q, i in enumerate(active) if q != p]
            gram_red = gram[np.ix_(rest, rest)]
            rhs = gram[rest] @ w_orig
            if rest:
                u = np.linalg.solve(gram_red, rhs)
            else:
                u = np.empty(0)
            r2 = norm2 - 2.0 * float(u @ rhs) + float(u @ (gram_red @ u)) if rest else norm2
            r = math.sqrt(max(r2, 0.0))
            if best is None or r < best[0]:
                best = (r, p, u)
        r, p, u = best
        if r > epsilon:
            break
        active.pop(p)
        weights = u
        final_residual = r
        if not active:
            break
    return active, weights, final_residual


def random_instance(rng, n_removable=None):
    dim = int(rng.integers(1, 3))
    n_fixed = int(rng.integers(0, 3))
    n_rem = int(rng.integers(1, 7)) if n_removable is None else n_removable
    kernel = Kernel("gaussian", bandwidth=float(rng.uniform(0.05, 0.5)))
    atoms = rng.uniform(0, 1, size=(n_fixed + n_rem, dim))
    fixed = np.array([True] * n_fixed + [False] * n_rem)
    weights = rng.normal(size=n_fixed + n_rem)
    return make_dual(kernel, atoms, weights, fixed=fixed), kernel


class TestRemovalResidual:
    def test_zero_weight_atom(self, wide_gauss, rng):
        atoms = rng.uniform(size=(4, 1))
        w = np.array([1.0, 0.0, -0.5, 0.25])
        z = make_dual(wide_gauss, atoms, w)
        r, refit = removal_residual(z, 1)
        assert r == 0.0
        assert np.array_equal(refit, np.array([1.0, -0.5, 0.25]))

    def test_duplicate_atom_transfers_weight(self, wide_gauss):
        z = make_dual(wide_gauss, [[0.3], [0.3], [0.8]], [1.0, 0.5, -0.2])
        r, refit = removal_residual(z, 0)
        assert r == pytest.approx(0.0, abs=1e-6)
        # surviving duplicate absorbs the removed weight
        assert refit[0] == pytest.approx(1.5, abs=1e-4)

    def test_two_atom_closed_form(self, wide_gauss):
        x1, x2 = [0.1], [0.9]
        k = eval_kernel(wide_gauss, x1, x2)
        z = make_dual(wide_gauss, [x1, x2], [1.0, 0.0])
        r, refit = removal_residual(z, 0)
        assert r == pytest.approx(math.sqrt(1.0 - k * k), rel=1e-12)
        assert refit[0] == pytest.approx(k, rel=1e-12)

    def test_index_and_fixed_errors(self, wide_gauss):
        z = make_dual(wide_gauss, [[0.1], [0.2]], [1.0, 1.0], fixed=[True, False])
        with pytest.raises(IndexError):
            removal_residual(z, 5)
        with pytest.raises(ValueError):
            removal_residual(z, 0)


class TestKompPrune:
    def test_zero_budget_keeps_independent_atoms(self, wide_gauss, rng):
        atoms = np.array([[0.0], [0.4], [0.8]])
        z = make_dual(wide_gauss, atoms, [1.0, -0.7, 0.4])
        out = komp_prune(z, 0.0)
        assert out.model_order == 3
        assert np.array_equal(out.weights, z.weights)

    def test_zero_weight_atom_pruned_at_zero_budget(self, wide_gauss):
        z = make_dual(wide_gauss, [[0.0], [0.5]], [1.0, 0.0])
        out, residual = komp_prune_detailed(z, 0.0)
        assert out.model_order == 1
        assert residual == 0.0
        assert out.weights.tolist() == [1.0]

    def test_negative_budget_rejected(self, wide_gauss):
        z = make_dual(wide_gauss, [[0.0]], [1.0])
        with pytest.raises(ValueError):
            komp_prune(z, -1e-9)

    def test_fixed_atoms_always_survive(self, rng):
        for _ in range(20):
            z, _ = random_instance(rng)
            out = komp_prune(z, float(rng.uniform(0, 2)))
            n_fixed = int(z.dictionary.fixed_mask.sum())
            assert int(out.dictionary.fixed_mask.sum()) == n_fixed

    def test_post_compression_guarantee(self, rng):
        for _ in range(30):
            z, _ = random_instance(rng)
            eps = float(rng.uniform(0, 1.5))
            out = komp_prune(z, eps)
            assert rkhs_norm_diff(out, z) <= eps + 1e-9

    def test_whole_function_prunable(self, wide_gauss):
        z = make_dual(wide_gauss, [[0.2], [0.7]], [0.01, -0.01])
        out = komp_prune(z, 10.0)
        assert out.model_order == 0
        assert rkhs_norm_diff(out, z) <= 10.0

    def test_matches_oracle_on_midrange_budget(self, rng):
        z, _ = random_instance(rng, n_removable=4)
        first_round = [removal_residual(z, j)[0] for j in range(z.model_order) if not z.dictionary.fixed_mask[j]]
        eps = float(np.median(first_round))
        kept_oracle, w_oracle, r_oracle = greedy_oracle(z, eps)
        out, residual = komp_prune_detailed(z, eps)
        kept_lib = [z.dictionary.index_of(a) for a in out.dictionary.atoms]
        assert kept_lib == kept_oracle
        np.testing.assert_allclose(out.weights, w_oracle, atol=1e-8)
        assert abs(residual - r_oracle) <= 1e-10


class TestKompJoint:
    def test_scalar_case_matches_single(self, rng):
        z, _ = random_instance(rng)
        eps = 0.3
        out_single = komp_prune(z, eps)
        out_joint, _ = komp_prune_joint([z], eps)
        assert out_joint[0].model_order == out_single.model_order
        np.testing.assert_allclose(out_joint[0].weights, out_single.weights, atol=1e-12)

    def test_shared_dictionary_and_guarantee(self, wide_gauss, rng):
        atoms = rng.uniform(size=(6, 2))
        z1 = make_dual(wide_gauss, atoms, rng.normal(size=6), map_kind="squared_norm")
        z2 = make_dual(wide_gauss, atoms, rng.normal(size=6), map_kind="squared_norm")
        eps = 0.5
        pruned, residual = komp_prune_joint([z1, z2], eps)
        assert np.array_equal(pruned[0].dictionary.atoms, pruned[1].dictionary.atoms)
        total = math.sqrt(rkhs_norm_diff(pruned[0], z1) ** 2 + rkhs_norm_diff(pruned[1], z2) ** 2)
        assert total <= eps + 1e-9
        assert residual <= eps


class TestAdaptiveBudget:
    def test_on_target_unchanged(self):
        p = AdaptiveBudget(alpha=2e-6, d_mo=105)
        assert adaptive_budget_update(p, 105).alpha == 2e-6

    def test_inner_clamp_up(self):
        p = AdaptiveBudget(alpha=1e-4, d_mo=100)
        assert adaptive_budget_update(p, 300).alpha == pytest.approx(1.1e-4, rel=1e-12)

    def test_inner_clamp_down(self):
        p = AdaptiveBudget(alpha=1e-4, d_mo=100)
        assert adaptive_budget_update(p, -100).alpha == pytest.approx(0.9e-4, rel=1e-12)

    def test_small_offset_proportional(self):
        p = AdaptiveBudget(alpha=1.0, d_mo=100)
        assert adaptive_budget_update(p, 110).alpha == pytest.approx(1.01, rel=1e-12)

    def test_outer_bounds_hold(self):
        p = AdaptiveBudget(alpha=1.0, d_mo=500)
        for _ in range(200):
            p = adaptive_budget_update(p, 100_000)
        assert p.alpha == pytest.approx(100.0)
        for _ in range(500):
            p = adaptive_budget_update(p, 0)
        assert p.alpha == pytest.approx(0.01)

    def test_constant_budget_validation(self):
        with pytest.raises(ValueError):
            ConstantBudget(-1.0)
        with pytest.raises(ValueError):
            AdaptiveBudget(alpha=0.0, d_mo=10)


class TestOracleEquivalenceSweep:
    def test_many_random_instances(self, rng):
        mismatches = 0
        for _ in range(60):
            z, _ = random_instance(rng)
            scale = rkhs_norm(z)
            eps = float(rng.uniform(0.0, 0.8)) * max(scale, 0.1)
            kept_oracle, w_oracle, r_oracle = greedy_oracle(z, eps)
            out, residual = komp_prune_detailed(z, eps)
            kept_lib = [z.dictionary.index_of(a) for a in out.dictionary.atoms]
            if kept_lib != kept_oracle:
                mismatches += 1
                continue
            np.testing.assert_allclose(out.weights, w_oracle, atol=1e-7)
            assert abs(residual - r_oracle) <= 1e-9
        assert mismatches == 0
