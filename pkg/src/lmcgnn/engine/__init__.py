"""Subgraph-wise training engine: histories, blending, compensated steps,
and the baseline restrictions."""
from .blend import SCORE_KINDS, ZERO_SCHEDULE, BlendSchedule, blend_rows, blend_weights
from .conv import (ConvBatchContext, backward_sgd_grads, build_conv_context,
                   cluster_step, gas_conv_step, induced_subgraph,
                   lmc_conv_backward, lmc_conv_forward, lmc_conv_step)
from .history import ConvHistory, RecHistory
from .rec import gas_rec_step, lmc_rec_step, rec_backward_sgd_grads

__all__ = [
    "SCORE_KINDS", "ZERO_SCHEDULE", "BlendSchedule", "blend_rows",
    "blend_weights", "ConvBatchContext", "backward_sgd_grads",
    "build_conv_context", "cluster_step", "gas_conv_step",
    "induced_subgraph", "lmc_conv_backward", "lmc_conv_forward",
    "lmc_conv_step", "ConvHistory", "RecHistory", "gas_rec_step",
    "lmc_rec_step", "rec_backward_sgd_grads",
]
