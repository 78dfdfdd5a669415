"""Per-step training reports and the locality counters they carry."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class OpCounter:
    """Monotone per-step work counters, reset at every step boundary.

    All fields count quantities local to the batch (rows actually read or
    written, aggregate targets and source entries), never anything sized by
    the full graph, which is what the locality checks assert.
    """

    embed_rows_written: int = 0
    aux_rows_written: int = 0
    rows_read: int = 0
    agg_targets: int = 0
    agg_entries: int = 0

    def reset(self) -> None:
        self.embed_rows_written = 0
        self.aux_rows_written = 0
        self.rows_read = 0
        self.agg_targets = 0
        self.agg_entries = 0

    def count_view(self, view) -> None:
        self.agg_targets += view.n_targets
        self.agg_entries += view.n_listed + view.n_pruned

    @property
    def touched_rows(self) -> int:
        """Embedding-history rows written this step (n*L on a full-batch
        layered step, |core| on a recurrent step)."""
        return self.embed_rows_written


@dataclass
class StepReport:
    """Flat record of one optimization step."""

    step: int
    loss: float
    grad_norm: float
    touched_rows: int
    wall_ms: float
    rel_grad_err: float | None = None
    d_h: float | None = None
    d_v: float | None = None
    fwd_iters: int | None = None
    bwd_iters: int | None = None
    grads: object | None = None  # estimator GradSet, never serialized
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "step": self.step,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "touched_rows": self.touched_rows,
            "wall_ms": self.wall_ms,
        }
        for key in ("rel_grad_err", "d_h", "d_v", "fwd_iters", "bwd_iters"):
            val = getattr(self, key)
            if val is not None:
                rec[key] = val
        rec.update(self.extras)
        return rec
