"""Forward values and analytic gradients for the five metric-learning losses.

Per-query losses see a support set of labeled feature vectors and return the
scalar loss plus gradients with respect to the query and every support
vector. Each loss is a function of the distance vector d_j = d_p(x_q, x_j)
(or of distances to class centers, for the prototype loss), so gradients are
assembled from per-distance weights w_j = dL/dd_j and the elementwise
distance derivatives.

The geometric-mean loss has three mathematically equivalent formulations;
only the sum + log-sum-exp path is used for training, the literal product
and the multi-label (mean negative-log-attention) forms exist to verify it.
"""

from dataclasses import dataclass, field

import numpy as np

from .kernel import attention_weights, log_sum_exp

__all__ = [
    "LOSS_KINDS",
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
    "loss_function",
]

LOSS_KINDS = ("pn", "nca", "gm", "bce", "asl")


@dataclass(frozen=True)
class SupportSet:
    """Labeled support samples: features (n, D) and integer labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if feats.shape[0] != labels.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if feats.shape[0] < 1:
            raise ValueError("support set must contain at least one sample")
        if not np.all(np.isfinite(feats)):
            raise ValueError("support features must be finite")
        if np.any(labels < 0):
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_count(self, label: int) -> int:
        return int(np.sum(self.labels == label))


@dataclass
class LossOutput:
    """Scalar loss plus gradients w.r.t. the query and every support vector."""

    value: float
    grad_query: np.ndarray  # (D,)
    grad_support: np.ndarray  # (n, D)


def _validated(query, query_label, support: SupportSet, p: float):
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != support.dim:
        raise ValueError(f"query dim {q.shape[0]} does not match support dim {support.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query features must be finite")
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    if support.class_count(query_label) == 0:
        raise ValueError(f"class not represented in support set: {query_label}")
    return q


def _dist_and_grads(query: np.ndarray, xs: np.ndarray, p: float):
    """Distances d_j and the query-side derivative rows dd_j/dx_q (n, D).

    At coordinate ties the subgradient 0 is used (relevant for p < 2).
    """
    diff = query[None, :] - xs
    ad = np.abs(diff)
    d = np.sum(ad**p, axis=1)
    if p == 2.0:
        g = 2.0 * diff
    elif p == 1.0:
        g = np.sign(diff)
    else:
        g = np.zeros_like(diff)
        nz = diff != 0.0
        g[nz] = p * ad[nz] ** (p - 1.0) * np.sign(diff[nz])
    return d, g


def _assemble(value: float, w: np.ndarray, dgrads: np.ndarray) -> LossOutput:
    """Chain per-distance weights through dd/dx_q; support side is the negation."""
    grad_query = w @ dgrads
    grad_support = -(w[:, None] * dgrads)
    return LossOutput(float(value), grad_query, grad_support)


def gm_loss(query, query_label, support: SupportSet, p: float = 1.0) -> LossOutput:
    """Geometric-mean attention loss via the stable sum + log-sum-exp form.

    value = mean of in-class distances + log sum_j exp(-d_j).
    """
    q = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(q, support.features, p)
    in_mask = support.labels == query_label
    m = int(np.sum(in_mask))
    a = attention_weights(d)
    value = float(np.mean(d[in_mask])) + log_sum_exp(-d)
    w = in_mask / m - a
    return _assemble(value, w, dg)


def nca_loss(query, query_label, support: SupportSet, p: float = 1.0) -> LossOutput:
    """Neighborhood-component loss: -log of the summed in-class attention."""
    q = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(q, support.features, p)
    in_mask = support.labels == query_label
    value = -(log_sum_exp(-d[in_mask]) - log_sum_exp(-d))
    a = attention_weights(d)
    b = np.zeros_like(a)
    b[in_mask] = attention_weights(d[in_mask])
    w = b - a
    return _assemble(value, w, dg)


def pn_loss(query, query_label, support: SupportSet, p: float = 1.0) -> LossOutput:
    """Prototype loss: softmax over distances to per-class mean centers."""
    q = _validated(query, query_label, support, p)
    classes = np.unique(support.labels)
    centers = np.stack(
        [support.features[support.labels == c].mean(axis=0) for c in classes]
    )
    e, dg = _dist_and_grads(q, centers, p)
    y_idx = int(np.searchsorted(classes, query_label))
    value = float(e[y_idx]) + log_sum_exp(-e)
    s = attention_weights(e)
    w = np.zeros_like(e)
    w[y_idx] = 1.0
    w -= s
    grad_query = w @ dg
    grad_support = np.zeros_like(support.features)
    for ci, c in enumerate(classes):
        members = support.labels == c
        n_c = int(np.sum(members))
        # d e_c / d x_i = -(1/n_c) * (query-side derivative row) for members of c
        grad_support[members] = -(w[ci] / n_c) * dg[ci]
    return LossOutput(float(value), grad_query, grad_support)


def gm_loss_product_form(query, query_label, support: SupportSet, p: float = 1.0) -> float:
    """Literal negative-log geometric mean of in-class attention weights.

    Verification-only: the raw product underflows for large support sets
    (documented limit n <= 64 at moderate distances).
    """
    q = _validated(query, query_label, support, p)
    d, _ = _dist_and_grads(q, support.features, p)
    a = attention_weights(d)
    in_mask = support.labels == query_label
    m = int(np.sum(in_mask))
    prod = float(np.prod(a[in_mask]))
    if prod <= 0.0:
        raise FloatingPointError("attention product underflowed; instance beyond the verification limit")
    return float(-np.log(prod ** (1.0 / m)))


def gm_loss_multilabel_form(query, query_label, support: SupportSet, p: float = 1.0) -> float:
    """Mean negative log-attention over in-class samples (multi-label view).

    Equals the cross-entropy between the multi-hot target and the attention
    weights with the 1/m coefficient kept outside the log. Verification-only.
    """
    q = _validated(query, query_label, support, p)
    d, _ = _dist_and_grads(q, support.features, p)
    a = attention_weights(d)
    in_mask = support.labels == query_label
    return float(-np.mean(np.log(a[in_mask])))


def multi_hot_target(query_label, labels) -> np.ndarray:
    """Target distribution: 1/m on the m support entries sharing the query class."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    in_mask = labels == query_label
    m = int(np.sum(in_mask))
    if m == 0:
        raise ValueError(f"class not represented in support set: {query_label}")
    t = np.zeros(labels.shape[0], dtype=np.float64)
    t[in_mask] = 1.0 / m
    return t


def bce_loss(query, query_label, support: SupportSet, p: float = 1.0) -> LossOutput:
    """Per-pseudo-class binary cross-entropy with logistic probabilities.

    Each support sample is one binary problem with logit -d_j and target
    1 iff it shares the query class; terms are averaged over n.
    """
    q = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(q, support.features, p)
    n = support.size
    t = (support.labels == query_label).astype(np.float64)
    # -log sigmoid(-d) = softplus(d); -log(1 - sigmoid(-d)) = softplus(-d)
    value = float(np.mean(t * _softplus(d) + (1.0 - t) * _softplus(-d)))
    qprob = _sigmoid(-d)
    w = (t * (1.0 - qprob) - (1.0 - t) * qprob) / n
    return _assemble(value, w, dg)


def asl_loss(
    query,
    query_label,
    support: SupportSet,
    p: float = 1.0,
    gamma_pos: float = 0.0,
    gamma_neg: float = 4.0,
    clip_m: float = 0.05,
) -> LossOutput:
    """Asymmetric focal reweighting of the binary cross-entropy terms.

    Positives contribute -(1-q)^g+ log q, negatives -(q_m)^g- log(1-q_m)
    with q = sigmoid(-d) and q_m = max(q - clip_m, 0), averaged over n.
    With gamma_pos = gamma_neg = clip_m = 0 this reduces to bce_loss.
    """
    if gamma_pos < 0 or gamma_neg < 0:
        raise ValueError("focusing exponents must be nonnegative")
    if not (0.0 <= clip_m < 1.0):
        raise ValueError("clip margin must lie in [0, 1)")
    qv = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(qv, support.features, p)
    n = support.size
    pos = support.labels == query_label

    qprob = _sigmoid(-d)
    dq_dd = -qprob * (1.0 - qprob)
    value = 0.0
    w = np.zeros(n, dtype=np.float64)
    for j in range(n):
        qj = qprob[j]
        if pos[j]:
            # -log q written as softplus(d) for stability when q -> 0
            logq = -_softplus(d[j])
            focus = (1.0 - qj) ** gamma_pos
            value += -focus * logq
            if gamma_pos == 0.0:
                dT_dq = -1.0 / qj
            else:
                dT_dq = gamma_pos * (1.0 - qj) ** (gamma_pos - 1.0) * logq - focus / qj
            w[j] = dT_dq * dq_dd[j]
        else:
            qm = max(qj - clip_m, 0.0)
            if qm == 0.0:
                continue  # flat region: zero term, zero gradient
            log1m = np.log1p(-qm)
            value += -(qm**gamma_neg) * log1m
            if gamma_neg == 0.0:
                dT_dq = 1.0 / (1.0 - qm)
            else:
                dT_dq = -gamma_neg * qm ** (gamma_neg - 1.0) * log1m + qm**gamma_neg / (1.0 - qm)
            w[j] = dT_dq * dq_dd[j]
    value /= n
    w /= n
    return _assemble(value, w, dg)


def gm_gradient_query(query, query_label, support: SupportSet, p: float = 1.0) -> np.ndarray:
    """Query gradient assembled from per-sample attention derivatives.

    Uses the adaptive 1/a_i weighting applied to da_i/dx_q directly; exists
    as an independent cross-check of gm_loss's grad_query field.
    """
    q = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(q, support.features, p)
    a = attention_weights(d)
    in_mask = support.labels == query_label
    m = int(np.sum(in_mask))
    mean_dg = a @ dg  # sum_j a_j * dd_j/dx_q
    da = a[:, None] * (mean_dg[None, :] - dg)  # da_i/dx_q rows
    return -(1.0 / m) * np.sum((1.0 / a[in_mask])[:, None] * da[in_mask], axis=0)


def nca_gradient_query(query, query_label, support: SupportSet, p: float = 1.0) -> np.ndarray:
    """Query gradient with the uniform 1/mean-attention weighting of NCA."""
    q = _validated(query, query_label, support, p)
    d, dg = _dist_and_grads(q, support.features, p)
    a = attention_weights(d)
    in_mask = support.labels == query_label
    m = int(np.sum(in_mask))
    abar = float(np.mean(a[in_mask]))
    mean_dg = a @ dg
    da = a[:, None] * (mean_dg[None, :] - dg)
    return -(1.0 / m) * np.sum(da[in_mask] / abar, axis=0)


_LOSS_FUNCTIONS = {
    "pn": pn_loss,
    "nca": nca_loss,
    "gm": gm_loss,
    "bce": bce_loss,
    "asl": asl_loss,
}


def loss_function(kind: str):
    if kind not in _LOSS_FUNCTIONS:
        raise ValueError(f"unknown loss {kind!r}; expected one of {{{', '.join(LOSS_KINDS)}}}")
    return _LOSS_FUNCTIONS[kind]


def batch_loss(features, labels, kind: str = "gm", p: float = 1.0, **loss_kwargs):
    """Leave-one-out batch loss: each sample serves once as the query.

    Returns the mean loss over all queries and the gradient of that mean with
    respect to every feature vector, accumulating each sample's contribution
    both as query and as support member. Accumulation runs in query-index
    order so the result is independent of any internal parallelism.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labs = np.asarray(labels, dtype=np.int64).ravel()
    n = feats.shape[0]
    if n < 2:
        raise ValueError("batch must contain at least two samples")
    classes, counts = np.unique(labs, return_counts=True)
    singletons = classes[counts < 2]
    if singletons.size:
        raise ValueError(f"class with a single sample in batch: {int(singletons[0])}")
    fn = loss_function(kind)

    total = 0.0
    grads = np.zeros_like(feats)
    others_idx = np.arange(n)
    for qi in range(n):
        rest = others_idx != qi
        sup = SupportSet(feats[rest], labs[rest])
        out = fn(feats[qi], int(labs[qi]), sup, p, **loss_kwargs)
        total += out.value
        grads[qi] += out.grad_query
        grads[rest] += out.grad_support
    return total / n, grads / n


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
