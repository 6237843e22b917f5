import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgkit import stgt
from stgkit.counting import MaddCounter
from stgkit.errors import ContractError, DegenerateDegreeError, EstimationError, LoadError
from stgkit.graph import (
    CsrMatrix,
    RoadGraph,
    build_operator,
    graph_propagation,
    lambda_max,
    load_edge_list,
    load_graph,
    normalized_laplacian,
    random_graph,
    save_edge_list,
    sgc_operator,
)
from stgkit.oracles import dense_sgc, jacobi_eigenvalues
from stgkit.tensor import Tape, Tensor, backward
from stgkit.verify import equivariance_errors


def k2():
    return RoadGraph.from_edges(2, [(0, 1, 1.0)])


def triangle():
    return RoadGraph.from_edges(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])


class TestRoadGraph:
    def test_symmetrizes_directed_input_with_warning(self, caplog):
        caplog.set_level(logging.WARNING, logger="stgkit")
        a = np.array([[0, 2.0, 0], [1.0, 0, 0], [0, 3.0, 0]])
        g = RoadGraph.from_adjacency(a)
        np.testing.assert_array_equal(g.adjacency, g.adjacency.T)
        assert g.adjacency[0, 1] == 2.0 and g.adjacency[1, 2] == 3.0
        assert "asymmetric" in caplog.text

    def test_diagonal_zeroed(self):
        g = RoadGraph.from_adjacency(np.array([[5.0, 1.0], [1.0, 0.0]]))
        assert np.diag(g.adjacency).tolist() == [0.0, 0.0]

    def test_edge_count_is_undirected(self):
        g = triangle()
        assert g.n_edges == 3
        assert g.n_directed_edges == 6

    def test_negative_weight_rejected(self):
        with pytest.raises(ContractError):
            RoadGraph.from_edges(2, [(0, 1, -1.0)])


class TestLaplacian:
    def test_k2(self):
        np.testing.assert_allclose(normalized_laplacian(k2()), [[1, -1], [-1, 1]], atol=1e-15)

    def test_triangle(self):
        lap = normalized_laplacian(triangle())
        np.testing.assert_allclose(np.diag(lap), 1.0, atol=1e-15)
        off = lap[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, -0.5, atol=1e-15)

    def test_random_spectrum_in_range(self):
        g = random_graph(10, 20, seed=3)
        g = RoadGraph.from_adjacency(g.adjacency, self_loops=True)
        lap = normalized_laplacian(g)
        np.testing.assert_array_equal(lap, lap.T)
        eig = jacobi_eigenvalues(lap)
        assert eig[0] >= -1e-12 and eig[-1] <= 2 + 1e-12

    def test_isolated_node_named(self):
        g = RoadGraph.from_edges(3, [(0, 1, 1.0)])
        with pytest.raises(DegenerateDegreeError) as info:
            normalized_laplacian(g)
        assert info.value.node == 2
        assert "2" in str(info.value)


class TestLambdaMax:
    def test_k2(self):
        assert lambda_max(normalized_laplacian(k2())) == pytest.approx(2.0, rel=1e-9)

    def test_identity(self):
        assert lambda_max(np.eye(4)) == pytest.approx(1.0, rel=1e-12)

    def test_random_12_node_against_jacobi(self):
        g = RoadGraph.from_adjacency(random_graph(12, 25, seed=9).adjacency, self_loops=True)
        lap = normalized_laplacian(g)
        assert lambda_max(lap) == pytest.approx(jacobi_eigenvalues(lap)[-1], rel=1e-6)

    def test_nonconvergence_carries_estimate(self):
        # Close eigenvalues converge slowly; two steps cannot reach the tolerance.
        with pytest.raises(EstimationError) as info:
            lambda_max(np.diag([1.0, 0.9, 0.8]), max_iter=2, seed=1)
        assert 0.8 <= info.value.last_estimate <= 1.0

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            lambda_max(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestOperator:
    def test_sgc_matches_entrywise_oracle(self):
        g = random_graph(8, 12, seed=2)
        np.testing.assert_allclose(build_operator(g).matrix.to_dense(), dense_sgc(g.adjacency), atol=1e-15)

    def test_sgc_row_sums_and_spectrum(self):
        g = random_graph(15, 30, seed=4)
        p = sgc_operator(g)
        rows = p.sum(axis=1)
        assert (rows > 0).all() and (rows <= 15).all()
        eig = jacobi_eigenvalues(p)
        assert eig[0] >= -1 - 1e-12 and eig[-1] <= 1 + 1e-12

    def test_sgc_degree_weighted_fixed_point(self):
        g = random_graph(12, 20, seed=5)
        root_deg = np.sqrt(g.adjacency.sum(axis=1) + 1.0)
        np.testing.assert_allclose(sgc_operator(g) @ root_deg, root_deg, atol=1e-10)

    @pytest.mark.parametrize("kind", ["sgc_adjacency", "rescaled_laplacian"])
    def test_pattern_is_adjacency_plus_diagonal(self, kind):
        g = random_graph(9, 14, seed=6)
        csr = build_operator(g, kind).matrix
        expected = (g.adjacency != 0) | np.eye(9, dtype=bool)
        stored = np.zeros((9, 9), dtype=bool)
        rows = np.repeat(np.arange(9), np.diff(csr.indptr))
        stored[rows, csr.indices] = True
        np.testing.assert_array_equal(stored, expected)
        assert csr.nnz == 2 * g.n_edges + 9

    def test_rescaled_laplacian_definition(self):
        g = random_graph(10, 18, seed=7)
        op = build_operator(g, "rescaled_laplacian")
        lap = normalized_laplacian(g)
        ref = 2 * lap / jacobi_eigenvalues(lap)[-1] - np.eye(10)
        np.testing.assert_allclose(op.matrix.to_dense(), ref, atol=1e-12)
        assert op.lambda_max is not None

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            build_operator(k2(), "chebyshev")


class TestCsr:
    @given(st.integers(1, 50), st.integers(0, 200), st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_sparse_dense_agreement(self, n, edges, cols, seed):
        edges = min(edges, n * (n - 1) // 2)
        g = random_graph(n, edges, seed=seed)
        csr = build_operator(g).matrix
        x = np.random.default_rng(seed).standard_normal((n, cols))
        np.testing.assert_allclose(csr.matmul_dense(x), csr.to_dense() @ x, rtol=0, atol=1e-12)

    def test_transpose(self, rng):
        dense = np.where(rng.random((5, 4)) < 0.5, rng.standard_normal((5, 4)), 0.0)
        csr = CsrMatrix.from_dense(dense)
        np.testing.assert_array_equal(csr.transpose().to_dense(), dense.T)

    def test_madd_count_is_nnz_per_column(self):
        g = random_graph(10, 13, seed=1)
        csr = build_operator(g).matrix
        with MaddCounter() as counter:
            csr.matmul_dense(np.ones((10, 7)))
        assert counter.total() == (2 * 13 + 10) * 7


class TestPropagation:
    def test_order_zero_is_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 5, 2)))
        orders = graph_propagation(x, build_operator(random_graph(5, 4, seed=0)), 0)
        assert len(orders) == 1 and orders[0] is x

    def test_edgeless_graph_gives_identity_operator(self, rng):
        g = RoadGraph.from_adjacency(np.zeros((4, 4)))
        x = Tensor(rng.standard_normal((2, 4, 3)))
        for xk in graph_propagation(x, build_operator(g, order=3)):
            np.testing.assert_array_equal(xk.data, x.data)

    def test_third_order_matches_dense_power(self, rng):
        g = random_graph(6, 8, seed=11)
        x = rng.standard_normal((4, 6, 3))
        orders = graph_propagation(Tensor(x), build_operator(g, order=3))
        p = dense_sgc(g.adjacency)
        for t in range(4):
            for c in range(3):
                np.testing.assert_allclose(orders[3].data[t, :, c], p @ (p @ (p @ x[t, :, c])), atol=1e-10)

    def test_single_step_madds(self):
        g = random_graph(12, 17, seed=2)
        with MaddCounter() as counter:
            graph_propagation(Tensor(np.ones((1, 12, 1))), build_operator(g), 1)
        assert counter.total("propagation") == 2 * 17 + 12

    def test_errors(self):
        op = build_operator(random_graph(5, 4, seed=0))
        with pytest.raises(ContractError):
            graph_propagation(Tensor(np.ones((2, 4, 3))), op, 1)
        with pytest.raises(ContractError):
            graph_propagation(Tensor(np.ones((2, 5, 3))), op, -1)

    def test_gradient_uses_transpose(self, rng):
        g = random_graph(6, 7, seed=3)
        op = build_operator(g, "rescaled_laplacian", 2)
        x = Tensor(rng.standard_normal((2, 6, 2)), requires_grad=True)
        w = rng.standard_normal((2, 6, 2))
        with Tape():
            grads = backward((graph_propagation(x, op)[2] * Tensor(w)).sum())
        p = op.matrix.to_dense()
        ref = np.einsum("ij,tic->tjc", p @ p, w)
        np.testing.assert_allclose(grads[x], ref, atol=1e-12)

    def test_permutation_equivariance(self):
        assert equivariance_errors(n_graphs=10) <= 1e-12


class TestGraphFiles:
    def test_edge_list_round_trip(self, tmp_path):
        g = random_graph(7, 9, seed=1)
        save_edge_list(g, tmp_path / "g.txt")
        back = load_edge_list(tmp_path / "g.txt")
        np.testing.assert_array_equal(back.adjacency, g.adjacency)

    def test_dense_stgt_graph(self, tmp_path):
        g = random_graph(5, 6, seed=1)
        stgt.save(tmp_path / "a.stgt", g.adjacency)
        np.testing.assert_array_equal(load_graph(tmp_path / "a.stgt").adjacency, g.adjacency)

    def test_bad_line_names_file_and_line(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("nodes=3\n0 1 1.0\n0 x 2\n")
        with pytest.raises(LoadError, match=r"g.txt:3"):
            load_edge_list(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("0 1 1.0\n")
        with pytest.raises(LoadError, match="nodes="):
            load_edge_list(path)
