"""Fixed-point model: projection, Picard solves, implicit gradients.

Oracles: a scalar recurrence solvable by hand, a dense linear system for
the adjoint equation, and finite differences through a tightly solved
forward pass.
"""
import numpy as np
import pytest

from conftest import dense_adj, path_graph, random_graph
from lmcgnn.diagnostics import elementwise_fd_err, finite_diff, random_rec_instance
from lmcgnn.gradset import GradSet
from lmcgnn.graph import build_graph, normalized_adjacency
from lmcgnn.kernels import fro_norm, matmul, softmax_xent
from lmcgnn.recnet import (RecParams, SolverDiverged, SolverStalled,
                           full_rec_gradients, gd_rec_step, init_rec_params,
                           project_wellposed, solve_backward, solve_forward)


def _single_node():
    return normalized_adjacency(build_graph(1, []))


def _scalar_params(w):
    return RecParams(W=np.array([[w]]), P=np.zeros((1, 1)),
                     c=np.array([1.0]), w_out=np.ones((1, 1)))


def _random_rec_params(rng, d_in, d, k, kappa=0.95):
    params = init_rec_params(rng, d_in, d, k, kappa)
    # make the contraction bound active so the projection is exercised
    params.W = project_wellposed(rng.standard_normal((d, d)) * 2.0, kappa)
    return params


# ---------------------------------------------------------------------------
# projection


def test_project_scales_offending_columns_only():
    W = np.array([[0.9, 0.3], [0.3, 0.2]])  # column abs-sums 1.2, 0.5
    out = project_wellposed(W, 0.9)
    assert np.max(np.abs(out[:, 0] - W[:, 0] * 0.75)) <= 1e-15
    assert np.array_equal(out[:, 1], W[:, 1])
    assert np.abs(out).sum(axis=0).max() <= 0.9 + 1e-15
    assert project_wellposed(out, 0.9) == pytest.approx(out, abs=1e-15)


def test_project_counts_signs_in_column_sums():
    W = np.array([[0.8], [-0.8]])
    out = project_wellposed(W, 0.95)
    assert np.abs(out).sum() == pytest.approx(0.95)


def test_project_kappa_validation():
    for bad in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError, match="in \\(0, 1\\)"):
            project_wellposed(np.eye(2), bad)


def test_apply_grads_reprojects():
    rng = np.random.default_rng(0)
    params = _random_rec_params(rng, 3, 4, 2, kappa=0.9)
    grads = GradSet({"W": -np.ones((4, 4)), "P": np.zeros((3, 4)),
                     "c": np.zeros(4), "Wout": np.zeros((4, 2))})
    params.apply_grads(grads, lr=1.0)
    assert np.abs(params.W).sum(axis=0).max() <= 0.9 + 1e-12


# ---------------------------------------------------------------------------
# forward solve


def test_scalar_fixed_point():
    # h = relu(0.5 h + 1) has the unique solution h = 2
    state = solve_forward(_single_node(), np.zeros((1, 1)),
                          _scalar_params(0.5), tol=1e-12)
    assert state.converged
    assert state.H[0, 0] == pytest.approx(2.0, abs=1e-10)
    assert state.Z[0, 0] == pytest.approx(2.0, abs=1e-10)
    assert state.agg[0, 0] == pytest.approx(2.0, abs=1e-10)


def test_scalar_residual_ratio_matches_contraction_rate():
    state = solve_forward(_single_node(), np.zeros((1, 1)),
                          _scalar_params(0.5), tol=1e-10)
    r = np.asarray(state.residuals)
    ratios = r[-6:] / r[-7:-1]
    assert np.all((0.45 <= ratios) & (ratios <= 0.55))


def test_forward_solution_is_start_independent():
    rng = np.random.default_rng(1)
    adj = normalized_adjacency(random_graph(rng, 12, 0.3))
    X = rng.standard_normal((12, 3))
    params = _random_rec_params(rng, 3, 5, 2)
    tol = 1e-10
    a = solve_forward(adj, X, params, tol=tol)
    b = solve_forward(adj, X, params, tol=tol,
                      warm_start=10.0 * rng.standard_normal((12, 5)))
    assert a.converged and b.converged
    assert fro_norm(a.H - b.H) / (1.0 + fro_norm(a.H)) <= 10 * tol


def test_forward_is_a_fixed_point():
    rng = np.random.default_rng(2)
    adj = normalized_adjacency(random_graph(rng, 10, 0.3))
    X = rng.standard_normal((10, 3))
    params = _random_rec_params(rng, 3, 4, 2)
    state = solve_forward(adj, X, params, tol=1e-12)
    D = dense_adj(adj)
    again = np.maximum(D @ state.H @ params.W + X @ params.P + params.c, 0.0)
    assert np.max(np.abs(again - state.H)) <= 1e-10


def test_solver_stall_and_silent_modes():
    rng = np.random.default_rng(3)
    adj = normalized_adjacency(path_graph(4))
    X = rng.standard_normal((4, 2))
    params = _random_rec_params(rng, 2, 3, 2)
    with pytest.raises(SolverStalled, match="forward solve"):
        solve_forward(adj, X, params, tol=1e-12, max_iter=1)
    state = solve_forward(adj, X, params, tol=1e-12, max_iter=1,
                          raise_on_stall=False)
    assert not state.converged and state.iters == 1


def test_solver_divergence_detected():
    # h <- relu(10 h + 1) grows tenfold per sweep and overflows
    with np.errstate(over="ignore"):
        with pytest.raises(SolverDiverged, match="not finite"):
            solve_forward(_single_node(), np.zeros((1, 1)),
                          _scalar_params(10.0))


# ---------------------------------------------------------------------------
# adjoint solve


def test_backward_solves_dense_linear_system():
    rng = np.random.default_rng(4)
    n, d = 10, 4
    adj = normalized_adjacency(random_graph(rng, n, 0.3))
    X = rng.standard_normal((n, 3))
    params = _random_rec_params(rng, 3, d, 2)
    state = solve_forward(adj, X, params, tol=1e-12)
    dH = rng.standard_normal((n, d))
    aux = solve_backward(adj, state, dH, params, tol=1e-12)
    assert aux.converged
    # assemble the linear operator V -> A (mask o V) W^T column by column
    D = dense_adj(adj)
    mask = state.mask.astype(np.float64)
    M = np.zeros((n * d, n * d))
    for idx in range(n * d):
        E = np.zeros((n, d))
        E.flat[idx] = 1.0
        M[:, idx] = (D @ (mask * E) @ params.W.T).ravel()
    want = np.linalg.solve(np.eye(n * d) - M, dH.ravel()).reshape(n, d)
    assert np.max(np.abs(aux.V - want)) <= 1e-8


def test_gradients_match_finite_differences():
    _, adj, X, labels, params = random_rec_instance(seed=21)
    _, grads, _, _ = full_rec_gradients(adj, X, labels, params,
                                        tol=1e-12, max_iter=2000)

    def loss_fn():
        st = solve_forward(adj, X, params, tol=1e-12, max_iter=2000)
        return softmax_xent(matmul(st.H, params.w_out), labels)[0]

    fd = finite_diff(loss_fn, params.blocks())
    assert elementwise_fd_err(fd, grads) <= 1e-3


def test_gd_rec_step_decreases_loss():
    rng = np.random.default_rng(5)
    adj = normalized_adjacency(random_graph(rng, 14, 0.25))
    X = rng.standard_normal((14, 3))
    labels = rng.integers(0, 2, size=14).astype(np.int64)
    params = init_rec_params(rng, 3, 6, 2)
    losses = [gd_rec_step(adj, X, labels, params, lr=0.2, step=s).loss
              for s in range(8)]
    assert losses[-1] < losses[0]
    assert np.abs(params.W).sum(axis=0).max() <= params.kappa + 1e-12
