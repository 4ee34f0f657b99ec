"""Mechanical verification of every identity and bound the loss family obeys.

Each check draws random instances from a seeded stream, tests one property
at a fixed tolerance, and reports the worst error plus a serialized failing
instance on violation. The CLI `verify` subcommand runs the whole suite and
exits nonzero if any check fails.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import attention_weights, log_sum_exp, lp_distance
from .losses import (
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
from .rng import stream

__all__ = ["CheckResult", "run_suite", "CHECK_NAMES", "random_instance", "fd_gradient", "rel_error"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    trials: int
    max_error: float = 0.0
    detail: str = ""
    failing_instance: dict = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "trials": self.trials,
            "max_error": self.max_error,
            "detail": self.detail,
            "failing_instance": self.failing_instance,
        }


def random_instance(rng, n_max=16, d_max=8, dist_cap=30.0, p=None):
    """Random (query, label, support, p) with every class populated and
    pairwise distances rescaled under dist_cap.

    Coordinate near-ties between the query and support vectors (or class
    means) are resampled away so p=1 kinks cannot corrupt finite-difference
    probes near the instance.
    """
    n = int(rng.integers(3, n_max + 1))
    dim = int(rng.integers(2, d_max + 1))
    n_classes = int(rng.integers(2, min(n, 5) + 1))
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
    rng.shuffle(labels)
    while True:
        feats = rng.uniform(-2.0, 2.0, size=(n, dim))
        query = rng.uniform(-2.0, 2.0, size=dim)
        means = np.stack([feats[labels == c].mean(axis=0) for c in range(n_classes)])
        gap = min(
            float(np.min(np.abs(query[None, :] - feats))),
            float(np.min(np.abs(query[None, :] - means))),
        )
        if gap > 2e-3:
            break
    if p is None:
        p = float(rng.choice([1.0, 2.0]))
    dmax = max(
        float(np.max(np.sum(np.abs(query[None, :] - feats) ** p, axis=1))), 1e-12
    )
    if dmax > dist_cap:
        scale = (dist_cap / dmax) ** (1.0 / p)
        feats *= scale
        query *= scale
    label = int(labels[int(rng.integers(0, n))])
    return query, label, SupportSet(feats, labels), p


def _serialize_instance(query, label, support, p, **extra):
    inst = {
        "query": np.asarray(query).tolist(),
        "query_label": int(label),
        "support_features": support.features.tolist(),
        "support_labels": support.labels.tolist(),
        "p": float(p),
    }
    inst.update(extra)
    return inst


def fd_gradient(f, x, step=1e-4):
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1.0)
    return float(np.linalg.norm(a - b)) / denom


# --- individual checks --------------------------------------------------------


def check_lp_symmetry(rng, trials):
    worst = 0.0
    for _ in range(trials):
        dim = int(rng.integers(1, 9))
        x = rng.uniform(-5, 5, dim)
        z = rng.uniform(-5, 5, dim)
        p = float(rng.uniform(0.5, 3.0))
        err = abs(lp_distance(x, z, p) - lp_distance(z, x, p))
        worst = max(worst, err)
        if err > 1e-12:
            return CheckResult(
                "lp-symmetry", False, trials, err, "symmetry violated",
                {"x": x.tolist(), "z": z.tolist(), "p": p},
            )
    return CheckResult("lp-symmetry", True, trials, worst)


def check_lse_shift(rng, trials):
    worst = 0.0
    for _ in range(trials):
        v = rng.uniform(-100, 100, int(rng.integers(1, 20)))
        c = float(rng.uniform(-100, 100))
        lhs = log_sum_exp(v + c)
        rhs = log_sum_exp(v) + c
        err = abs(lhs - rhs) / (1.0 + abs(rhs))
        worst = max(worst, err)
        if err > 1e-12:
            return CheckResult(
                "lse-shift-invariance", False, trials, err, "shift identity violated",
                {"v": v.tolist(), "c": c},
            )
    return CheckResult("lse-shift-invariance", True, trials, worst)


def check_attention_normalization(rng, trials):
    worst = 0.0
    for _ in range(trials):
        d = rng.uniform(0, 1e4, int(rng.integers(1, 30)))
        a = attention_weights(d)
        err = abs(float(np.sum(a)) - 1.0)
        worst = max(worst, err)
        # entries are strictly positive mathematically, but a spread beyond
        # ~745 underflows exp to exactly 0 in binary64
        spread_ok = float(np.max(d) - np.min(d)) < 700.0
        if err > 1e-12 or (spread_ok and np.any(a <= 0)) or np.any(a < 0) or np.any(a > 1):
            return CheckResult(
                "attention-normalization", False, trials, err, "weights not a distribution",
                {"d": d.tolist()},
            )
    return CheckResult("attention-normalization", True, trials, worst)


def check_attention_shift(rng, trials):
    worst = 0.0
    for _ in range(trials):
        d = rng.uniform(0, 100, int(rng.integers(1, 20)))
        c = float(rng.uniform(0, 100))
        err = float(np.max(np.abs(attention_weights(d + c) - attention_weights(d))))
        worst = max(worst, err)
        if err > 1e-12:
            return CheckResult(
                "attention-shift-invariance", False, trials, err, "softmax shift violated",
                {"d": d.tolist(), "c": c},
            )
    return CheckResult("attention-shift-invariance", True, trials, worst)


def check_three_form_equivalence(rng, trials, n_max=64, d_max=32):
    worst = 0.0
    for _ in range(trials):
        query, label, support, p = random_instance(rng, n_max=n_max, d_max=d_max)
        canonical = gm_loss(query, label, support, p).value
        prod = gm_loss_product_form(query, label, support, p)
        multi = gm_loss_multilabel_form(query, label, support, p)
        err = max(abs(canonical - prod), abs(canonical - multi))
        worst = max(worst, err)
        if err > 1e-9:
            return CheckResult(
                "three-form-equivalence", False, trials, err, "forms disagree",
                _serialize_instance(query, label, support, p),
            )
    return CheckResult("three-form-equivalence", True, trials, worst)


def check_gm_nca_bound(rng, trials):
    """gm upper-bounds nca; AM-GM equality at equal in-class attention.

    At equal attention the geometric and arithmetic means coincide, so gm
    equals the arithmetic-mean intrinsic form nca + log m; it equals raw nca
    exactly when m = 1 (the two losses coincide for a single-member class).
    """
    worst = -np.inf
    for _ in range(trials):
        query, label, support, p = random_instance(rng)
        gap = nca_loss(query, label, support, p).value - gm_loss(query, label, support, p).value
        worst = max(worst, gap)
        if gap > 1e-12:
            return CheckResult(
                "gm-nca-bound", False, trials, gap, "gm fell below nca",
                _serialize_instance(query, label, support, p),
            )
    # constructed equality instances: in-class samples at equal distance
    # from the query, so all in-class attention weights coincide
    for _ in range(max(trials // 10, 5)):
        dim = int(rng.integers(2, 6))
        m = int(rng.integers(1, 5))
        query = rng.uniform(-1, 1, dim)
        dirs = rng.standard_normal((m, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = float(rng.uniform(0.5, 2.0))
        in_feats = query + radius * dirs  # equal L2 norms -> equal p=2 distances
        out_feats = rng.uniform(-2, 2, (int(rng.integers(1, 4)), dim))
        support = SupportSet(np.vstack([in_feats, out_feats]),
                             np.concatenate([np.zeros(m, int), np.ones(len(out_feats), int)]))
        gm = gm_loss(query, 0, support, 2.0).value
        nca = nca_loss(query, 0, support, 2.0).value
        gap = abs(gm - (nca + math.log(m)))
        if m == 1:
            gap = max(gap, abs(gm - nca))
        if gap > 1e-9:
            return CheckResult(
                "gm-nca-bound", False, trials, gap, "equality case violated",
                _serialize_instance(query, 0, support, 2.0),
            )
    return CheckResult("gm-nca-bound", True, trials, float(worst))


def check_nca_rewrite(rng, trials):
    """NCA equals the arithmetic-mean intrinsic form up to its log m constant:
    nca = -log(mean in-class attention) - log m."""
    worst = 0.0
    for _ in range(trials):
        query, label, support, p = random_instance(rng)
        value = nca_loss(query, label, support, p).value
        d = np.array([lp_distance(query, x, p) for x in support.features])
        a = attention_weights(d)
        m = support.class_count(label)
        literal = -math.log(float(np.mean(a[support.labels == label]))) - math.log(m)
        err = abs(value - literal)
        worst = max(worst, err)
        if err > 1e-10:
            return CheckResult(
                "nca-arith-rewrite", False, trials, err, "mean-attention rewrite disagrees",
                _serialize_instance(query, label, support, p),
            )
    return CheckResult("nca-arith-rewrite", True, trials, worst)


def check_variance_decomposition(rng, trials):
    worst = 0.0
    for _ in range(trials):
        query, label, support, _ = random_instance(rng, p=2.0)
        in_feats = support.features[support.labels == label]
        mu = in_feats.mean(axis=0)
        lhs = float(np.mean(np.sum((query[None, :] - in_feats) ** 2, axis=1)))
        rhs = float(np.sum((query - mu) ** 2)) + float(
            np.mean(np.sum((in_feats - mu) ** 2, axis=1))
        )
        err = abs(lhs - rhs)
        worst = max(worst, err)
        if err > 1e-9:
            return CheckResult(
                "variance-decomposition", False, trials, err, "decomposition violated",
                _serialize_instance(query, label, support, 2.0),
            )
    return CheckResult("variance-decomposition", True, trials, worst)


def check_translation_invariance(rng, trials):
    worst = 0.0
    losses = {"pn": pn_loss, "nca": nca_loss, "gm": gm_loss, "bce": bce_loss, "asl": asl_loss}
    for _ in range(trials):
        query, label, support, p = random_instance(rng)
        shift = rng.uniform(-3, 3, query.shape[0])
        shifted = SupportSet(support.features + shift, support.labels)
        for name, fn in losses.items():
            err = abs(fn(query, label, support, p).value - fn(query + shift, label, shifted, p).value)
            worst = max(worst, err)
            if err > 1e-10:
                return CheckResult(
                    "translation-invariance", False, trials, err, f"{name} not translation invariant",
                    _serialize_instance(query, label, support, p, shift=shift.tolist()),
                )
    return CheckResult("translation-invariance", True, trials, worst)


def check_gradient_fd(rng, trials, inject_fault=False):
    """Analytic query and support gradients of all five losses vs central FD."""
    losses = {"pn": pn_loss, "nca": nca_loss, "gm": gm_loss, "bce": bce_loss, "asl": asl_loss}
    worst = 0.0
    for _ in range(trials):
        query, label, support, p = random_instance(rng, n_max=8, d_max=5)
        for name, fn in losses.items():
            out = fn(query, label, support, p)
            gq = out.grad_query.copy()
            if inject_fault:
                gq = gq + 1e-2
            fd_q = fd_gradient(lambda q: fn(q, label, support, p).value, query)
            err = rel_error(gq, fd_q)
            flat = support.features.ravel()

            def loss_of_support(v):
                sup = SupportSet(v.reshape(support.features.shape), support.labels)
                return fn(query, label, sup, p).value

            fd_s = fd_gradient(loss_of_support, flat)
            err = max(err, rel_error(out.grad_support.ravel(), fd_s))
            worst = max(worst, err)
            if err > 1e-5:
                return CheckResult(
                    "gradient-fd-mismatch", False, trials, err, f"{name} gradient mismatch",
                    _serialize_instance(query, label, support, p, loss=name),
                )
    return CheckResult("gradient-fd-mismatch", True, trials, worst)


def check_gradient_weighting(rng, trials):
    """Eq-style reassembled gradients (1/a_i adaptive vs 1/abar uniform weights)."""
    worst = 0.0
    for _ in range(trials):
        query, label, support, p = random_instance(rng)
        err = float(
            np.max(np.abs(gm_gradient_query(query, label, support, p) - gm_loss(query, label, support, p).grad_query))
        )
        err = max(
            err,
            float(
                np.max(np.abs(nca_gradient_query(query, label, support, p) - nca_loss(query, label, support, p).grad_query))
            ),
        )
        worst = max(worst, err)
        if err > 1e-10:
            return CheckResult(
                "gradient-weighting-structure", False, trials, err, "reassembled gradient disagrees",
                _serialize_instance(query, label, support, p),
            )
    return CheckResult("gradient-weighting-structure", True, trials, worst)


def check_multi_hot(rng, trials):
    for _ in range(trials):
        _, label, support, _ = random_instance(rng, n_max=64)
        t = multi_hot_target(label, support.labels)
        m = support.class_count(label)
        total = math.fsum(t)
        # equal 1/m entries cannot always sum to exactly 1.0 in binary64
        # (m = 49 is the smallest offender); allow the half-ulp remainder
        if abs(total - 1.0) > 2**-53 or int(np.count_nonzero(t)) != m:
            return CheckResult(
                "multi-hot-target", False, trials, abs(total - 1.0), "target malformed",
                {"labels": support.labels.tolist(), "query_label": int(label)},
            )
    return CheckResult("multi-hot-target", True, trials)


def descend_query(query, label, support, p=2.0, steps=10_000, lr=0.02):
    """Plain gradient descent on the geometric-mean loss over the query only.

    Inlines the p=2 gradient for speed; other p fall back to gm_loss.
    """
    q = np.asarray(query, dtype=np.float64).copy()
    if p == 2.0:
        xs = support.features
        in_mask = support.labels == label
        m = int(np.sum(in_mask))
        for _ in range(steps):
            diff = q[None, :] - xs
            d = np.sum(diff * diff, axis=1)
            e = np.exp(np.min(d) - d)
            w = in_mask / m - e / np.sum(e)
            q -= lr * 2.0 * (w @ diff)
        return q
    for _ in range(steps):
        q -= lr * gm_loss(q, label, support, p).grad_query
    return q


def _in_class_attention_std(query, label, support, p):
    d = np.sum(np.abs(query[None, :] - support.features) ** p, axis=1)
    a = attention_weights(d)
    return float(np.std(a[support.labels == label]))


def check_medoid_attraction(rng, trials, steps=10_000, lr=0.02):
    """Query-only descent equalizes in-class attention weights (p=2)."""
    n_rand = max(trials, 1)
    for _ in range(n_rand):
        dim = int(rng.integers(2, 5))
        m = int(rng.integers(3, 7))
        # compact in-class cluster with distant out-class samples, so the
        # multi-hot optimum (uniform in-class attention) is nearly attainable
        in_feats = rng.uniform(-0.4, 0.4, (m, dim))
        k = int(rng.integers(1, 4))
        dirs = rng.standard_normal((k, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        out_feats = in_feats.mean(axis=0) + dirs * rng.uniform(4.0, 7.0, (k, 1))
        support = SupportSet(
            np.vstack([in_feats, out_feats]),
            np.concatenate([np.zeros(m, int), np.ones(k, int)]),
        )
        center = in_feats.mean(axis=0)
        while True:  # a genuinely perturbed start: visible attention imbalance
            start = center + rng.uniform(1.0, 1.8) * rng.standard_normal(dim)
            if _in_class_attention_std(start, 0, support, 2.0) > 0.08:
                break
        std0 = _in_class_attention_std(start, 0, support, 2.0)
        q = descend_query(start, 0, support, 2.0, steps=steps, lr=lr)
        std1 = _in_class_attention_std(q, 0, support, 2.0)
        if not (std1 <= 0.5 * std0):
            return CheckResult(
                "medoid-attraction", False, trials, std1 / max(std0, 1e-300),
                "attention std not halved",
                _serialize_instance(start, 0, support, 2.0),
            )
    # symmetric construction: out-class mass mirrored about the axis between
    # the two in-class points -> minimizer sits on the axis, equal distances
    for _ in range(max(trials // 10, 3)):
        dim = int(rng.integers(2, 4))
        in_feats = np.zeros((2, dim))
        in_feats[0, 0] = -1.0
        in_feats[1, 0] = 1.0
        half = rng.uniform(-1.5, 1.5, (2, dim))
        mirrored = half.copy()
        mirrored[:, 0] *= -1.0
        support = SupportSet(
            np.vstack([in_feats, half, mirrored]),
            np.array([0, 0, 1, 1, 1, 1]),
        )
        start = rng.uniform(0.2, 0.6) * np.ones(dim)
        q = descend_query(start, 0, support, 2.0, steps=steps, lr=lr)
        d0 = float(np.sum((q - in_feats[0]) ** 2))
        d1 = float(np.sum((q - in_feats[1]) ** 2))
        if abs(d0 - d1) > 1e-6:
            return CheckResult(
                "medoid-attraction", False, trials, abs(d0 - d1),
                "symmetric in-class distances disagree",
                _serialize_instance(start, 0, support, 2.0),
            )
    return CheckResult("medoid-attraction", True, trials)


def check_batch_loss_consistency(rng, trials):
    """Batch loss equals the average of per-query leave-one-out losses and its
    gradient matches finite differences."""
    from .losses import loss_function

    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(4, 9))
        dim = int(rng.integers(2, 5))
        labels = np.repeat(np.arange(n // 2), 2)[:n]
        if len(labels) < n:
            labels = np.concatenate([labels, [0] * (n - len(labels))])
        classes = np.unique(labels)
        while True:
            feats = rng.uniform(-1.5, 1.5, (n, dim))
            diffs = np.abs(feats[:, None, :] - feats[None, :, :])
            diffs[np.arange(n), np.arange(n)] = 1.0
            if float(np.min(diffs)) <= 1e-3:
                continue
            # leave-one-out class means also feed p=1 kinks (pn loss)
            gaps = []
            for qi in range(n):
                rest = np.arange(n) != qi
                for c in classes:
                    members = rest & (labels == c)
                    if members.any():
                        gaps.append(np.min(np.abs(feats[qi] - feats[members].mean(axis=0))))
            if min(gaps) > 1e-3:
                break
        kind = str(rng.choice(["gm", "nca", "pn", "bce", "asl"]))
        value, grads = batch_loss(feats, labels, kind)
        fn = loss_function(kind)
        per_query = []
        for qi in range(n):
            rest = np.arange(n) != qi
            per_query.append(
                fn(feats[qi], int(labels[qi]), SupportSet(feats[rest], labels[rest]), 1.0).value
            )
        err = abs(value - float(np.mean(per_query)))

        def total(v):
            return batch_loss(v.reshape(feats.shape), labels, kind)[0]

        fd = fd_gradient(total, feats.ravel())
        err_g = rel_error(grads.ravel(), fd)
        worst = max(worst, err, err_g)
        if err > 1e-12 or err_g > 1e-5:
            return CheckResult(
                "batch-loss-consistency", False, trials, max(err, err_g),
                f"{kind} batch loss inconsistent",
                {"features": feats.tolist(), "labels": labels.tolist(), "kind": kind},
            )
    return CheckResult("batch-loss-consistency", True, trials, worst)


_CHECKS = [
    ("lp-symmetry", check_lp_symmetry),
    ("lse-shift-invariance", check_lse_shift),
    ("attention-normalization", check_attention_normalization),
    ("attention-shift-invariance", check_attention_shift),
    ("three-form-equivalence", check_three_form_equivalence),
    ("gm-nca-bound", check_gm_nca_bound),
    ("nca-arith-rewrite", check_nca_rewrite),
    ("variance-decomposition", check_variance_decomposition),
    ("translation-invariance", check_translation_invariance),
    ("gradient-fd-mismatch", check_gradient_fd),
    ("gradient-weighting-structure", check_gradient_weighting),
    ("multi-hot-target", check_multi_hot),
    ("medoid-attraction", check_medoid_attraction),
    ("batch-loss-consistency", check_batch_loss_consistency),
]

CHECK_NAMES = tuple(name for name, _ in _CHECKS)

# checks whose cost per trial is high get a reduced trial share
_TRIAL_SCALE = {
    "gradient-fd-mismatch": 0.2,
    "medoid-attraction": 0.05,
    "batch-loss-consistency": 0.1,
}


def run_suite(trials: int = 200, seed: int = 0, inject_fault: str = None):
    """Run every check; returns (all_passed, [CheckResult])."""
    results = []
    for name, fn in _CHECKS:
        rng = stream(seed, f"verify:{name}")
        n = max(int(trials * _TRIAL_SCALE.get(name, 1.0)), 1)
        if name == "gradient-fd-mismatch":
            res = fn(rng, n, inject_fault=(inject_fault == name))
        else:
            res = fn(rng, n)
        results.append(res)
    return all(r.passed for r in results), results
