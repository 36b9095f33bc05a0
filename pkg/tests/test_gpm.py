"""Projection-memory tests: SVD oracles, rank selection, projection algebra."""

import numpy as np
import pytest

from robustcl.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    ParameterError,
)
from robustcl import gpm as G
from robustcl import model as M


def char_poly_eigenvalues(a):
    """Eigenvalues of a symmetric matrix via Faddeev-LeVerrier + root finding.

    Brute-force oracle: build the characteristic polynomial coefficients
    from matrix traces, then take the real parts of its roots.
    """
    n = a.shape[0]
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    mat = np.zeros_like(a)
    for k in range(1, n + 1):
        mat = a @ mat + coeffs[k - 1] * np.eye(n)
        coeffs[k] = -(a @ mat).trace() / k
    roots = np.roots(coeffs)
    return np.sort(roots.real)[::-1]


class TestSvd:
    def test_diagonal(self):
        u, s, v = G.svd(np.diag([3.0, 1.0]))
        assert np.allclose(s, [3.0, 1.0])
        assert np.abs(np.abs(u) - np.eye(2)).max() < 1e-12
        assert np.abs(np.abs(v) - np.eye(2)).max() < 1e-12

    def test_rank_one(self):
        rng = np.random.default_rng(0)
        uvec, vvec = rng.normal(size=5), rng.normal(size=4)
        a = np.outer(uvec, vvec)
        _, s, _ = G.svd(a)
        want = np.linalg.norm(uvec) * np.linalg.norm(vvec)
        assert abs(s[0] - want) < 1e-9 * want
        assert s[1] < 1e-6 * want

    @pytest.mark.parametrize("seed", range(10))
    def test_reconstruction_and_orthonormality(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, 9))
        a = rng.normal(size=(m, n))
        u, s, v = G.svd(a)
        fro = np.linalg.norm(a)
        assert np.linalg.norm(a - u @ np.diag(s) @ v.T) <= 1e-9 * fro
        k = min(m, n)
        assert np.abs(u.T @ u - np.eye(u.shape[1])).max() <= 1e-9
        assert np.abs(v.T @ v - np.eye(v.shape[1])).max() <= 1e-9
        assert (np.diff(s) <= 1e-15).all()
        assert s.size == k

    def test_sigma_matches_characteristic_polynomial_oracle(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(8, 8))
        _, s, _ = G.svd(a)
        lam = char_poly_eigenvalues(a.T @ a)
        want = np.sqrt(np.clip(lam, 0.0, None))
        assert np.abs(s - want).max() < 1e-6

    def test_rank_deficient_orthonormal_completion(self):
        a = np.zeros((4, 3))
        a[:, 0] = [1.0, 2.0, 3.0, 4.0]
        u, s, v = G.svd(a)
        assert np.abs(u.T @ u - np.eye(3)).max() <= 1e-9
        assert s[1] <= 1e-12 and s[2] <= 1e-12

    def test_nan_rejected(self):
        with pytest.raises(ContractError):
            G.svd(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestResidual:
    def test_empty_basis_identity(self):
        r = np.random.default_rng(1).normal(size=(4, 6))
        assert np.array_equal(G.residual(r, None), r)
        assert np.array_equal(G.residual(r, np.zeros((4, 0))), r)

    def test_spanned_columns_vanish(self):
        rng = np.random.default_rng(2)
        basis, _ = np.linalg.qr(rng.normal(size=(6, 3)))
        r = basis @ rng.normal(size=(3, 5))
        assert np.abs(G.residual(r, basis)).max() <= 1e-10

    def test_hand_projection(self):
        r = np.array([[3.0], [4.0]])
        basis = np.array([[1.0], [0.0]])
        assert np.array_equal(G.residual(r, basis), [[0.0], [4.0]])

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            G.residual(np.zeros((3, 2)), np.eye(2))


class TestSelectK:
    def test_zero_when_memory_covers(self):
        rng = np.random.default_rng(3)
        basis, _ = np.linalg.qr(rng.normal(size=(5, 2)))
        r = basis @ rng.normal(size=(2, 7))
        r_hat = G.residual(r, basis)
        assert G.select_k(r_hat, r, basis, 0.5) == 0

    def test_hand_diag_case(self):
        r = np.diag([1.0, 0.0])
        assert G.select_k(r, r, None, 0.5) == 1

    def test_threshold_one_full_rank(self):
        rng = np.random.default_rng(4)
        r = rng.normal(size=(4, 4))
        assert G.select_k(r, r, None, 1.0) == 4

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(5)
        r = rng.normal(size=(6, 6))
        ks = [G.select_k(r, r, None, th) for th in (0.3, 0.5, 0.7, 0.9, 0.99)]
        assert ks == sorted(ks)

    @pytest.mark.parametrize("eps_th", [0.5, 0.9, 0.99])
    def test_matches_enumeration_oracle(self, eps_th):
        rng = np.random.default_rng(6)
        for _ in range(30):
            r = rng.normal(size=(6, 6))
            if rng.random() < 0.5:
                basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
            else:
                basis = None
            r_hat = G.residual(r, basis)
            got = G.select_k(r_hat, r, basis, eps_th)

            # independent enumeration: numpy SVD energies, smallest k meeting
            # the criterion
            sigma = np.linalg.svd(r_hat, compute_uv=False)
            base = 0.0 if basis is None else float(((basis.T @ r) ** 2).sum())
            total = float((r * r).sum())
            want = None
            for k in range(sigma.size + 1):
                if base + float((sigma[:k] ** 2).sum()) >= eps_th * total:
                    want = k
                    break
            assert want is not None and got == want

    def test_bad_threshold(self):
        with pytest.raises(ParameterError):
            G.select_k(np.eye(2), np.eye(2), None, 0.0)
        with pytest.raises(ParameterError):
            G.select_k(np.eye(2), np.eye(2), None, 1.5)


class TestUpdateMemory:
    def test_zero_k_no_change(self):
        memory = G.ProjectionMemory()
        u = np.eye(3)
        G.update_memory(memory, "layer0.weight", u, 0)
        assert "layer0.weight" not in memory.bases

    def test_append_to_empty_is_exact(self):
        memory = G.ProjectionMemory()
        u, _, _ = G.svd(np.random.default_rng(7).normal(size=(5, 5)))
        G.update_memory(memory, "w", u, 2)
        assert np.array_equal(memory.bases["w"], u[:, :2])

    def test_orthonormal_after_two_appends(self):
        rng = np.random.default_rng(8)
        memory = G.ProjectionMemory()
        for _ in range(2):
            u, _, _ = G.svd(rng.normal(size=(6, 6)))
            G.update_memory(memory, "w", u, 2)
        gram = memory.bases["w"].T @ memory.bases["w"]
        assert np.abs(gram - np.eye(gram.shape[0])).max() <= 1e-8

    def test_width_bound(self):
        memory = G.ProjectionMemory()
        u = np.eye(3)
        G.update_memory(memory, "w", u, 3)
        with pytest.raises(DimensionError):
            G.update_memory(memory, "w", u, 1)


class TestProjection:
    def test_empty_memory_passthrough(self):
        memory = G.ProjectionMemory()
        g = {"w": np.random.default_rng(9).normal(size=(4, 3))}
        out = G.project_gradient(g, memory)
        assert out["w"] is g["w"]

    def test_full_span_annihilates(self):
        memory = G.ProjectionMemory()
        memory.bases["w"] = np.eye(4)
        g = {"w": np.random.default_rng(10).normal(size=(4, 3))}
        assert np.abs(G.project_gradient(g, memory)["w"]).max() <= 1e-10

    def test_hand_projection(self):
        memory = G.ProjectionMemory()
        memory.bases["w"] = np.array([[1.0], [0.0]])
        g = {"w": np.array([[3.0], [4.0]])}
        assert np.array_equal(G.project_gradient(g, memory)["w"], [[0.0], [4.0]])

    def test_orthogonality_idempotence_contraction(self):
        rng = np.random.default_rng(11)
        memory = G.ProjectionMemory()
        basis, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        memory.bases["w"] = basis
        for _ in range(20):
            g = {"w": rng.normal(size=(8, 5))}
            ghat = G.project_gradient(g, memory)
            assert np.abs(basis.T @ ghat["w"]).max() <= 1e-8 * np.linalg.norm(g["w"])
            twice = G.project_gradient(ghat, memory)
            assert np.abs(twice["w"] - ghat["w"]).max() <= 1e-10
            assert np.linalg.norm(ghat["w"]) <= np.linalg.norm(g["w"])

    def test_bias_projection_freezes(self):
        memory = G.ProjectionMemory()
        memory.bases["b"] = np.array([[1.0]])
        g = {"b": np.array([0.5, -0.25])}
        assert np.array_equal(G.project_gradient(g, memory)["b"], [0.0, 0.0])

    def test_conv_kernel_view(self):
        rng = np.random.default_rng(12)
        memory = G.ProjectionMemory()
        basis, _ = np.linalg.qr(rng.normal(size=(18, 4)))  # Ci*k*k = 2*3*3
        memory.bases["k"] = basis
        g = {"k": rng.normal(size=(5, 2, 3, 3))}
        ghat = G.project_gradient(g, memory)["k"]
        mat = ghat.reshape(5, -1).T
        assert np.abs(basis.T @ mat).max() <= 1e-8 * np.linalg.norm(g["k"])

    def test_shape_mismatch(self):
        memory = G.ProjectionMemory()
        memory.bases["w"] = np.eye(3)
        with pytest.raises(DimensionError):
            G.project_gradient({"w": np.zeros((4, 2))}, memory)


class TestCollectRepresentations:
    def test_column_counts_and_raw_inputs(self):
        net = M.make_mlp(4, [6, 6], seed=0)
        net.add_head(0, 2)
        x = np.random.default_rng(13).normal(size=(7, 4))
        reps = G.collect_representations(net, x, 0)
        assert np.array_equal(reps["layer0.weight"], x.T)
        for name, r in reps.items():
            assert r.shape[1] == 7, name

    def test_duplicated_samples_rank_one(self):
        net = M.make_mlp(3, [5], seed=1)
        net.add_head(0, 2)
        x = np.tile(np.random.default_rng(14).normal(size=(1, 3)), (6, 1))
        reps = G.collect_representations(net, x, 0)
        assert np.linalg.matrix_rank(reps["layer0.weight"]) == 1

    def test_no_capture_layers_rejected(self):
        specs = [M.dense(3, 4, capture=False)]
        net = M.Network(specs, rng_seed=0)
        net.add_head(0, 2)
        with pytest.raises(ConfigError):
            G.collect_representations(net, np.zeros((2, 3)), 0)


class TestUpdateFromTask:
    def test_memory_grows_and_stays_orthonormal(self):
        rng = np.random.default_rng(15)
        net = M.make_mlp(6, [10], seed=2)
        net.add_head(0, 2)
        net.add_head(1, 2)
        memory = G.ProjectionMemory(eps_th=0.95)
        widths = {}
        for task in (0, 1):
            ranks = G.update_from_task(memory, net, rng.normal(size=(20, 6)), task)
            assert set(ranks) == set(memory.bases) | {n for n, k in ranks.items() if k == 0}
            for name in memory.bases:
                assert memory.bases[name].shape[1] >= widths.get(name, 0)
                widths[name] = memory.bases[name].shape[1]
                assert memory.bases[name].shape[1] <= memory.bases[name].shape[0]
        assert G.orthonormality_defect(memory) <= 1e-8
        assert len(memory.history) == 2

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        net = M.make_mlp(4, [8], seed=3)
        net.add_head(0, 2)
        memory = G.ProjectionMemory(eps_th=0.9)
        G.update_from_task(memory, net, rng.normal(size=(12, 4)), 0)
        path = tmp_path / "memory.json"
        G.save_memory(memory, path)
        loaded = G.load_memory(path)
        assert loaded.eps_th == memory.eps_th
        assert loaded.history == memory.history
        for name in memory.bases:
            assert np.array_equal(loaded.bases[name], memory.bases[name])
