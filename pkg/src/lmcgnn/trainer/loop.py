"""Training and diagnostic loops shared by the CLI and the tests.

The loop owns model init, the partition, the batch schedule, metric rows,
and full-graph evaluation.  One metrics row is written per optimization
step.  Diagnostic runs additionally compare every step's gradient
estimate and history state against exact full-graph references computed
at the pre-update parameters.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..convnet import (backward_full, forward_full, full_gradients, gd_step,
                       init_conv_params, loss_full)
from ..diagnostics import ErrorTrace, _stacked_rel_err, conv_history_errors, rec_history_errors
from ..engine import (BlendSchedule, ConvHistory, RecHistory,
                      backward_sgd_grads, cluster_step, gas_conv_step,
                      gas_rec_step, induced_subgraph, lmc_conv_step,
                      lmc_rec_step, rec_backward_sgd_grads)
from ..graph import (epoch_batches, normalized_adjacency, partition_clustered,
                     partition_random, sample_minibatch)
from ..kernels import matmul, softmax_xent
from ..recnet import gd_rec_step, init_rec_params, solve_backward, solve_forward
from ..report import OpCounter, StepReport
from .config import RunConfig
from .data import Dataset

Array = np.ndarray

METRIC_COLUMNS = ("epoch", "step", "loss", "train_acc", "val_acc",
                  "grad_norm", "fwd_iters", "bwd_iters", "wall_ms")

# Exact references for the recurrent model run at a tolerance well below
# any training tolerance.
REF_TOL = 1e-12


class NumericAbort(RuntimeError):
    """Loss or parameters left the representable range."""


@dataclass
class TrainResult:
    params: object
    hist: object
    rows: list
    accs: dict
    skipped: int = 0

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


def build_partition(ds: Dataset, cfg: RunConfig):
    if cfg.partition == "random":
        return partition_random(ds.graph, cfg.parts, cfg.seed)
    return partition_clustered(ds.graph, cfg.parts, cfg.seed)


def init_model(cfg: RunConfig, ds: Dataset):
    """Seeded parameter + history init for the configured model."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.model == "gcn":
        params = init_conv_params(rng, ds.d_x, [cfg.hidden] * cfg.layers,
                                  ds.n_classes)
        hist = ConvHistory.init(np.asarray(ds.X, dtype=np.float64), params.dims)
    else:
        params = init_rec_params(rng, ds.d_x, cfg.hidden, ds.n_classes,
                                 cfg.kappa)
        hist = RecHistory.init(ds.n, cfg.hidden)
    return params, hist


def predict(cfg: RunConfig, ds: Dataset, adj, params) -> Array:
    """Full-graph argmax predictions at the current parameters."""
    if cfg.model == "gcn":
        logits = forward_full(adj, ds.X, params).logits
    else:
        state = solve_forward(adj, ds.X, params, cfg.tol, cfg.max_iter)
        logits = matmul(state.H, params.w_out)
    return np.argmax(logits, axis=1)


def _accuracies(cfg, ds, adj, params) -> dict:
    pred = predict(cfg, ds, adj, params)
    return {"train": ds.accuracy(pred, ds.train_mask),
            "val": ds.accuracy(pred, ds.val_mask),
            "test": ds.accuracy(pred, ds.test_mask)}


def make_step_fn(cfg: RunConfig, ds: Dataset, adj, params, hist,
                 counter: OpCounter | None = None):
    """Bind the configured method to a (batch, step) -> StepReport closure.

    The full-batch method ignores its batch argument.
    """
    g, X = ds.graph, np.asarray(ds.X, dtype=np.float64)
    labels = ds.train_labels
    n_lab = ds.n_labeled_train
    lr, tol, mx = cfg.lr, cfg.tol, cfg.max_iter
    schedule = BlendSchedule(alpha=cfg.alpha, score=cfg.score)

    if cfg.method == "gd":
        if cfg.model == "gcn":
            return lambda batch, step: gd_step(adj, X, labels, params, lr,
                                               step, counter=counter)
        return lambda batch, step: gd_rec_step(adj, X, labels, params, lr,
                                               step, tol, mx, counter=counter)

    if cfg.method == "backward-sgd":
        if cfg.model == "gcn":
            def step_fn(batch, step):
                t0 = time.perf_counter()
                _, dlog, cache = loss_full(adj, X, labels, params)
                cg = backward_full(adj, cache, dlog, params)
                loss, grads = backward_sgd_grads(batch, cache, cg, params,
                                                 labels)
                params.apply_grads(grads, lr)
                return StepReport(step=step, loss=loss,
                                  grad_norm=grads.norm(),
                                  touched_rows=adj.n * params.n_layers,
                                  wall_ms=(time.perf_counter() - t0) * 1e3,
                                  grads=grads)
        else:
            def step_fn(batch, step):
                t0 = time.perf_counter()
                state = solve_forward(adj, X, params, tol, mx)
                _, dlog = softmax_xent(matmul(state.H, params.w_out), labels,
                                       1.0)
                aux = solve_backward(adj, state,
                                     matmul(dlog, params.w_out.T), params,
                                     tol, mx)
                loss, grads = rec_backward_sgd_grads(batch, X, state, aux,
                                                     params, labels)
                params.apply_grads(grads, lr)
                return StepReport(step=step, loss=loss,
                                  grad_norm=grads.norm(),
                                  touched_rows=adj.n,
                                  wall_ms=(time.perf_counter() - t0) * 1e3,
                                  fwd_iters=state.iters, bwd_iters=aux.iters,
                                  grads=grads)
        return step_fn

    if cfg.method == "lmc-conv":
        return lambda batch, step: lmc_conv_step(
            adj, g, X, labels, n_lab, batch, params, hist, schedule, lr,
            step, counter=counter)
    if cfg.method == "gas-conv":
        return lambda batch, step: gas_conv_step(
            adj, g, X, labels, n_lab, batch, params, hist, lr, step,
            counter=counter)
    if cfg.method == "cluster":
        return lambda batch, step: cluster_step(
            g, X, labels, batch, params, lr, step, counter=counter)
    if cfg.method == "lmc-rec":
        return lambda batch, step: lmc_rec_step(
            adj, g, X, labels, n_lab, batch, params, hist, lr, step, tol,
            mx, counter=counter)
    if cfg.method == "gas-rec":
        return lambda batch, step: gas_rec_step(
            adj, g, X, labels, n_lab, batch, params, hist, lr, step, tol,
            mx, counter=counter)
    raise ValueError(f"unknown method {cfg.method!r}")


def _schedule(cfg: RunConfig, ds: Dataset, part, labeled_mask):
    """Yield (epoch, batch) pairs for the configured sampling mode.

    Full-batch descent takes one step per epoch; the batch is unused.
    """
    if cfg.method == "gd":
        for epoch in range(cfg.epochs):
            yield epoch, None
        return
    rng = np.random.default_rng(cfg.seed + 1)
    if cfg.iid:
        for step in range(cfg.steps):
            yield step * cfg.clusters // max(1, cfg.parts), sample_minibatch(
                ds.graph, part, cfg.clusters, rng, labeled_mask)
        return
    for epoch in range(cfg.epochs):
        for batch in epoch_batches(ds.graph, part, cfg.clusters, rng,
                                   labeled_mask):
            yield epoch, batch


def run_training(cfg: RunConfig, ds: Dataset, on_step=None) -> TrainResult:
    adj = normalized_adjacency(ds.graph)
    part = build_partition(ds, cfg)
    params, hist = init_model(cfg, ds)
    labeled_mask = ds.train_labels >= 0
    counter = OpCounter()
    step_fn = make_step_fn(cfg, ds, adj, params, hist, counter)

    rows = []
    skipped = 0
    accs = _accuracies(cfg, ds, adj, params)
    step = 0
    for epoch, batch in _schedule(cfg, ds, part, labeled_mask):
        if batch is not None and len(batch.labeled_core) == 0:
            skipped += 1
            continue
        rep = step_fn(batch, step)
        if not np.isfinite(rep.loss):
            raise NumericAbort(f"non-finite loss at step {step}")
        if step % cfg.eval_every == 0:
            accs = _accuracies(cfg, ds, adj, params)
        rows.append({"epoch": epoch, "step": step, "loss": rep.loss,
                     "train_acc": accs["train"], "val_acc": accs["val"],
                     "grad_norm": rep.grad_norm, "fwd_iters": rep.fwd_iters,
                     "bwd_iters": rep.bwd_iters, "wall_ms": rep.wall_ms})
        if on_step is not None:
            on_step(rep)
        step += 1
    accs = _accuracies(cfg, ds, adj, params)
    if rows:
        rows[-1]["train_acc"] = accs["train"]
        rows[-1]["val_acc"] = accs["val"]
    return TrainResult(params, hist, rows, accs, skipped)


def write_metrics(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in METRIC_COLUMNS:
                val = row.get(col)
                if val is None:
                    cells.append("")
                elif isinstance(val, float):
                    cells.append(repr(val))
                else:
                    cells.append(str(val))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# paired diagnostic runs


def _cluster_history_errors(ds, adj, batch, params, n_lab):
    """Local embeddings/pullbacks of an induced-subgraph step against the
    exact full-graph rows on the same core, at matching loss scale."""
    labels = ds.train_labels
    sub = induced_subgraph(ds.graph, batch.core)
    sadj = normalized_adjacency(sub)
    X = np.asarray(ds.X, dtype=np.float64)
    cache = forward_full(sadj, X[batch.core], params)
    n_lc = len(batch.labeled_core)
    _, dlog = softmax_xent(cache.logits, labels[batch.core],
                           weight=n_lc / n_lab)
    cg = backward_full(sadj, cache, dlog, params)
    _, _, cache_e, cg_e = full_gradients(adj, X, labels, params)
    L = params.n_layers
    d_h = _stacked_rel_err([cache.H[l] for l in range(1, L + 1)],
                           [cache_e.H[l][batch.core] for l in range(1, L + 1)])
    d_v = _stacked_rel_err([cg.V[l] for l in range(1, L + 1)],
                           [cg_e.V[l][batch.core] for l in range(1, L + 1)])
    return d_h, d_v


def run_diagnose(cfg: RunConfig, ds: Dataset, method: str) -> ErrorTrace:
    """Train `method` under cfg while tracing per-step estimator error and
    history staleness against exact full-graph references."""
    sub_cfg = RunConfig(**{**cfg.__dict__, "method": method, "model": ""})
    sub_cfg.finalize()
    adj = normalized_adjacency(ds.graph)
    part = build_partition(ds, sub_cfg)
    params, hist = init_model(sub_cfg, ds)
    labeled_mask = ds.train_labels >= 0
    step_fn = make_step_fn(sub_cfg, ds, adj, params, hist)
    labels = ds.train_labels
    X = np.asarray(ds.X, dtype=np.float64)

    trace = ErrorTrace()
    step = 0
    for _, batch in _schedule(sub_cfg, ds, part, labeled_mask):
        if batch is not None and len(batch.labeled_core) == 0:
            continue
        snap = params.copy()
        rep = step_fn(batch, step)
        if sub_cfg.model == "gcn":
            _, _, _, cg_e = full_gradients(adj, X, labels, snap)
            exact = cg_e.grads
            if sub_cfg.method == "cluster":
                d_h, d_v = _cluster_history_errors(ds, adj, batch, snap,
                                                   ds.n_labeled_train)
            elif sub_cfg.method in ("lmc-conv", "gas-conv"):
                d_h, d_v = conv_history_errors(adj, X, labels, snap, hist)
            else:
                d_h = d_v = float("nan")
        else:
            _, exact, _, _ = _rec_reference(adj, X, labels, snap, cfg)
            if sub_cfg.method in ("lmc-rec", "gas-rec"):
                d_h, d_v = rec_history_errors(adj, X, labels, snap, hist,
                                              REF_TOL, 4 * cfg.max_iter)
            else:
                d_h = d_v = float("nan")
        trace.append(step=step, loss=rep.loss,
                     grad_rel_err=rep.grads.rel_err(exact), d_h=d_h, d_v=d_v,
                     touched_rows=rep.touched_rows, wall_ms=rep.wall_ms)
        step += 1
    return trace


def _rec_reference(adj, X, labels, params, cfg):
    from ..recnet import full_rec_gradients
    loss, grads, state, aux = full_rec_gradients(adj, X, labels, params,
                                                 REF_TOL, 4 * cfg.max_iter)
    return loss, grads, state, aux
