"""Compensated subgraph steps for the fixed-point model.

`_naive_step` re-derives one step densely, phase by phase: one-pass core
refresh from the pre-step snapshot, core-local forward solve with frozen
halo compensation, one-pass adjoint refresh, adjoint solve with the
gradient compensation assembled once, reweighted gradients.  Histories are
garbage-warmed so stale reads and unintended writes are load-bearing.
"""
import itertools

import numpy as np
import pytest

from conftest import dense_adj, random_graph
from lmcgnn.engine import RecHistory, gas_rec_step, lmc_rec_step, rec_backward_sgd_grads
from lmcgnn.gradset import GradSet
from lmcgnn.graph import batch_from_parts, normalized_adjacency, partition_random
from lmcgnn.kernels import softmax_xent
from lmcgnn.recnet import (full_rec_gradients, init_rec_params,
                           project_wellposed, rec_grads, solve_backward,
                           solve_forward)

TOL = 1e-10
MAX_ITER = 500


def _setup(seed, n=16, d=4, d_in=3, k=2, parts=5, kappa=0.8):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 0.22)
    adj = normalized_adjacency(g)
    X = np.asarray(rng.standard_normal((n, d_in)), dtype=np.float64)
    labels = rng.integers(0, k, size=n).astype(np.int64)
    labels[rng.permutation(n)[: n // 4]] = -1
    params = init_rec_params(rng, d_in, d, k, kappa)
    params.W = project_wellposed(rng.standard_normal((d, d)) * 2.0, kappa)
    part = partition_random(g, parts, seed=seed)
    return rng, g, adj, X, labels, params, part


def _garbage_history(rng, n, d):
    hist = RecHistory.init(n, d)
    hist.embed[:] = rng.standard_normal((n, d))
    hist.aux[:] = rng.standard_normal((n, d))
    hist.preact[:] = rng.standard_normal((n, d))
    return hist


def _copy_hist(hist):
    return RecHistory(hist.embed.copy(), hist.aux.copy(), hist.preact.copy(),
                      hist.last_refresh.copy())


def _picard(map_fn, start, tol, max_iter):
    cur = start.copy()
    for _ in range(max_iter):
        new = map_fn(cur)
        r = np.sqrt(np.sum((new - cur) ** 2)) / (1.0 + np.sqrt(np.sum(cur ** 2)))
        cur = new
        if r <= tol:
            break
    return cur


def _naive_step(D, g, X, labels, n_lab, batch, params, hist, lr,
                zero_backward=False):
    """Dense mirror of one compensated fixed-point step."""
    core, halo1, halo2 = batch.core, batch.halo1, batch.halo2
    inside = np.union1d(core, halo1)
    W, P, c, w_out = params.W, params.P, params.c, params.w_out
    bias = X[core] @ P + c

    # (a) one-pass refresh from the snapshot
    z_ref = (D[np.ix_(core, inside)] @ hist.embed[inside]) @ W + bias
    hist.preact[core] = z_ref
    hist.embed[core] = np.maximum(z_ref, 0.0)

    # (b) core-local equilibrium, halo messages frozen at history values
    Dcc = D[np.ix_(core, core)]
    c_fwd = D[np.ix_(core, halo1)] @ hist.embed[halo1]
    eff_bias = c_fwd @ W + bias
    h_hat = _picard(lambda h: np.maximum((Dcc @ h) @ W + eff_bias, 0.0),
                    hist.embed[core], TOL, MAX_ITER)
    z_hat = (Dcc @ h_hat) @ W + eff_bias
    mask_hat = z_hat > 0.0

    # (c) one-pass adjoint refresh through the cached pre-activation masks
    m_src = (hist.preact[inside] > 0.0) * hist.aux[inside]
    n_lc = len(batch.labeled_core)
    _, dlog_ref = softmax_xent(hist.embed[core] @ w_out, labels[core],
                               weight=n_lc / n_lab)
    hist.aux[core] = (D[np.ix_(core, inside)] @ m_src) @ W.T + dlog_ref @ w_out.T

    # (d) adjoint solve; the compensation reaches 2-hop rows through the
    # halo nodes' own neighborhoods
    if zero_backward:
        c_bwd = np.zeros((len(core), params.dim))
    else:
        u12 = np.union1d(halo1, halo2)
        z_halo = ((D[np.ix_(halo1, core)] @ h_hat
                   + D[np.ix_(halo1, u12)] @ hist.embed[u12]) @ W
                  + X[halo1] @ P + c)
        m_halo = (z_halo > 0.0) * hist.aux[halo1]
        c_bwd = (D[np.ix_(core, halo1)] @ m_halo) @ W.T
    logits = h_hat @ w_out
    loss, dlog_mb = softmax_xent(logits, labels[core], weight=batch.w_loss)
    _, dlog_hat = softmax_xent(logits, labels[core], weight=n_lc / n_lab)
    const = c_bwd + dlog_hat @ w_out.T
    v_hat = _picard(lambda v: (Dcc @ (mask_hat * v)) @ W.T + const,
                    hist.aux[core], TOL, MAX_ITER)

    # (e) reweighted gradients and the projected update
    m_hat = mask_hat * v_hat
    agg_h = Dcc @ h_hat + c_fwd
    scale = batch.w_grad * (g.n / len(core))
    grads = GradSet({"W": agg_h.T @ m_hat * scale,
                     "P": X[core].T @ m_hat * scale,
                     "c": m_hat.sum(axis=0) * scale,
                     "Wout": h_hat.T @ dlog_mb})
    params.apply_grads(grads, lr)
    return loss, grads


def test_step_matches_naive_reference():
    for seed in range(3):
        rng, g, adj, X, labels, params, part = _setup(seed)
        batch = batch_from_parts(g, part, [0, 2], labeled_mask=labels >= 0)
        n_lab = int((labels >= 0).sum())
        hist = _garbage_history(rng, g.n, params.dim)
        hist_ref, params_ref = _copy_hist(hist), params.copy()
        loss_ref, grads_ref = _naive_step(dense_adj(adj), g, X, labels, n_lab,
                                          batch, params_ref, hist_ref, lr=0.1)
        rep = lmc_rec_step(adj, g, X, labels, n_lab, batch, params, hist,
                           lr=0.1, step=3, tol=TOL, max_iter=MAX_ITER)
        assert rep.loss == pytest.approx(loss_ref, rel=1e-9)
        for name, want in grads_ref:
            assert np.max(np.abs(rep.grads[name] - want)) <= 1e-7
        for got, want in zip(params.blocks().values(),
                             params_ref.blocks().values()):
            assert np.max(np.abs(got - want)) <= 1e-8
        assert np.max(np.abs(hist.embed - hist_ref.embed)) <= 1e-10
        assert np.max(np.abs(hist.aux - hist_ref.aux)) <= 1e-10
        assert np.max(np.abs(hist.preact - hist_ref.preact)) <= 1e-10
        assert np.all(hist.last_refresh[batch.core] == 3)


def test_gas_zeroes_only_the_backward_compensation():
    rng, g, adj, X, labels, params, part = _setup(4)
    batch = batch_from_parts(g, part, [1, 3], labeled_mask=labels >= 0)
    n_lab = int((labels >= 0).sum())
    base = _garbage_history(rng, g.n, params.dim)

    hist_a, hist_b, hist_c = _copy_hist(base), _copy_hist(base), _copy_hist(base)
    rep_gas = gas_rec_step(adj, g, X, labels, n_lab, batch, params.copy(),
                           hist_a, lr=0.1, tol=TOL)
    rep_restricted = lmc_rec_step(adj, g, X, labels, n_lab, batch,
                                  params.copy(), hist_b, lr=0.1, tol=TOL,
                                  zero_backward=True)
    rep_full = lmc_rec_step(adj, g, X, labels, n_lab, batch, params.copy(),
                            hist_c, lr=0.1, tol=TOL)
    # restriction identity is bitwise
    assert rep_gas.loss == rep_restricted.loss
    for name, val in rep_gas.grads:
        assert np.array_equal(val, rep_restricted.grads[name])
    assert np.array_equal(hist_a.embed, hist_b.embed)
    assert np.array_equal(hist_a.aux, hist_b.aux)
    # the forward side is unchanged, so the batch loss agrees too
    assert rep_full.loss == rep_gas.loss
    # but the compensated adjoint sees the halo pullbacks
    assert rep_full.grads.rel_err(rep_gas.grads) > 1e-4


def test_full_batch_matches_implicit_gradients():
    rng, g, adj, X, labels, params, part = _setup(5)
    batch = batch_from_parts(g, part, range(part.B), labeled_mask=labels >= 0)
    assert len(batch.halo1) == 0
    n_lab = int((labels >= 0).sum())
    hist = RecHistory.init(g.n, params.dim)
    loss_e, grads_e, _, _ = full_rec_gradients(adj, X, labels, params,
                                               1e-12, 2000)
    rep = lmc_rec_step(adj, g, X, labels, n_lab, batch, params.copy(), hist,
                       lr=0.1, tol=1e-11, max_iter=2000)
    assert rep.loss == pytest.approx(loss_e, rel=1e-8)
    assert rep.grads.rel_err(grads_e) <= 1e-6


def test_step_never_touches_rows_outside_core():
    rng, g, adj, X, labels, params, part = _setup(6)
    batch = batch_from_parts(g, part, [0], labeled_mask=labels >= 0)
    n_lab = int((labels >= 0).sum())
    hist = _garbage_history(rng, g.n, params.dim)
    before = _copy_hist(hist)
    lmc_rec_step(adj, g, X, labels, n_lab, batch, params, hist, lr=0.1,
                 tol=TOL)
    outside = np.setdiff1d(np.arange(g.n), batch.core)
    assert np.array_equal(hist.embed[outside], before.embed[outside])
    assert np.array_equal(hist.aux[outside], before.aux[outside])
    assert np.array_equal(hist.preact[outside], before.preact[outside])
    assert np.array_equal(hist.last_refresh[outside],
                          before.last_refresh[outside])
    assert not np.array_equal(hist.embed[batch.core],
                              before.embed[batch.core])


def test_step_requires_labeled_core():
    rng, g, adj, X, labels, params, part = _setup(7)
    none = np.full(g.n, -1, dtype=np.int64)
    batch = batch_from_parts(g, part, [0], labeled_mask=none >= 0)
    hist = RecHistory.init(g.n, params.dim)
    with pytest.raises(ValueError, match="no labeled core"):
        lmc_rec_step(adj, g, X, none, 1, batch, params, hist, lr=0.1)


def test_backward_sgd_estimator_is_unbiased():
    rng, g, adj, X, labels, params, part = _setup(8)
    labels = np.abs(labels)  # all nodes labeled so every batch contributes
    state = solve_forward(adj, X, params, tol=1e-12, max_iter=2000)
    loss_e, dlog = softmax_xent(state.H @ params.w_out, labels)
    aux = solve_backward(adj, state, dlog @ params.w_out.T, params,
                         tol=1e-12, max_iter=2000)
    exact = rec_grads(X, state, aux, params, dlog)

    mean = GradSet.zeros_like(exact)
    count = 0
    for ids in itertools.combinations(range(part.B), 2):
        batch = batch_from_parts(g, part, ids, labeled_mask=labels >= 0)
        _, est = rec_backward_sgd_grads(batch, X, state, aux, params, labels)
        mean.add_scaled(est, 1.0)
        count += 1
    mean.scale(1.0 / count)
    assert max(mean.max_abs_diff(exact).values()) <= 1e-10

    full = batch_from_parts(g, part, range(part.B), labeled_mask=labels >= 0)
    loss_f, est_f = rec_backward_sgd_grads(full, X, state, aux, params, labels)
    assert loss_f == pytest.approx(loss_e, rel=1e-13)
    assert est_f.rel_err(exact) <= 1e-14
