"""Geometric-mean few-shot metric learning laboratory.

A small laboratory for metric-learning losses built on softmax attention
weights over pairwise Lp distances: the geometric-mean loss, its PN / NCA /
BCE / ASL baselines, analytic gradients, an MLP encoder trained by SGD with
Nesterov momentum, N-way K-shot episodic evaluation, and a mechanical
verification suite for every identity the loss family satisfies.
"""

__version__ = "0.1.0"

from .kernel import attention_weights, log_sum_exp, lp_distance, pairwise_distances
from .losses import (
    LossOutput,
    SupportSet,
    asl_loss,
    batch_loss,
    bce_loss,
    gm_gradient_query,
    gm_loss,
    gm_loss_multilabel_form,
    gm_loss_product_form,
    multi_hot_target,
    nca_gradient_query,
    nca_loss,
    pn_loss,
)

__all__ = [
    "__version__",
    "lp_distance",
    "pairwise_distances",
    "log_sum_exp",
    "attention_weights",
    "SupportSet",
    "LossOutput",
    "pn_loss",
    "nca_loss",
    "gm_loss",
    "gm_loss_product_form",
    "gm_loss_multilabel_form",
    "bce_loss",
    "asl_loss",
    "batch_loss",
    "gm_gradient_query",
    "nca_gradient_query",
    "multi_hot_target",
]
