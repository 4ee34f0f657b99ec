"""N-way K-shot episode sampling and nearest-mean episodic evaluation.

Each trial draws an episode on its own counter-based RNG substream, so the
evaluation is reproducible from (seed, trial index) no matter how trials are
scheduled; per-trial accuracies are always combined in trial-index order.
"""

import json
from dataclasses import dataclass

import numpy as np

from .encoder import MlpParams, forward
from .kernel import pairwise_distances
from .rng import stream

__all__ = ["Episode", "EvalReport", "sample_episode", "nearest_mean_classify", "evaluate"]


@dataclass
class Episode:
    support_x: np.ndarray  # (N*K, D)
    support_y: np.ndarray  # (N*K,)
    query_x: np.ndarray  # (N*Q, D)
    query_truth: np.ndarray  # (N*Q,)


@dataclass
class EvalReport:
    mean_accuracy: float
    ci_halfwidth: float
    trials: int
    n_way: int
    k_shot: int
    q_per_class: int
    p: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "ci_halfwidth": self.ci_halfwidth,
            "trials": self.trials,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_per_class": self.q_per_class,
            "p": self.p,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv_row(self) -> str:
        d = self.to_dict()
        keys = ["mean_accuracy", "ci_halfwidth", "trials", "n_way", "k_shot", "q_per_class", "p", "seed"]
        return ",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k]) for k in keys)


def sample_episode(features, labels, n_way: int, k_shot: int, q_per_class: int, rng) -> Episode:
    """Uniform class draw, then uniform per-class sample draw, both without replacement."""
    feats = np.atleast_2d(np.asarray(features))
    labs = np.asarray(labels, dtype=np.int64).ravel()
    classes, counts = np.unique(labs, return_counts=True)
    eligible = classes[counts >= k_shot + q_per_class]
    if eligible.size < n_way:
        raise ValueError(
            f"need {n_way} classes with at least {k_shot + q_per_class} samples, "
            f"only {eligible.size} available"
        )
    chosen = rng.choice(eligible, size=n_way, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for c in chosen:
        pool = np.nonzero(labs == c)[0]
        picked = rng.choice(pool, size=k_shot + q_per_class, replace=False)
        sup_x.append(feats[picked[:k_shot]])
        sup_y.append(np.full(k_shot, c, dtype=np.int64))
        qry_x.append(feats[picked[k_shot:]])
        qry_y.append(np.full(q_per_class, c, dtype=np.int64))
    return Episode(
        np.concatenate(sup_x),
        np.concatenate(sup_y),
        np.concatenate(qry_x),
        np.concatenate(qry_y),
    )


def nearest_mean_classify(episode: Episode, params: MlpParams, p: float = 1.0) -> np.ndarray:
    """Assign each query the class of its nearest support mean (head detached).

    Ties go to the lowest class id.
    """
    sup = forward(params, episode.support_x, include_head=False)
    qry = forward(params, episode.query_x, include_head=False)
    classes = np.unique(episode.support_y)  # sorted, so argmin ties pick the lowest id
    means = np.stack([sup[episode.support_y == c].mean(axis=0) for c in classes])
    dists = pairwise_distances(qry, means, p)
    return classes[np.argmin(dists, axis=1)]


def evaluate(
    params: MlpParams,
    features,
    labels,
    n_way: int = 5,
    k_shot: int = 1,
    q_per_class: int = 15,
    trials: int = 2000,
    p: float = 1.0,
    seed: int = 0,
) -> EvalReport:
    """Mean episodic accuracy with a 1.96-sigma normal-approximation CI."""
    accs = np.empty(trials, dtype=np.float64)
    for t in range(trials):
        rng = stream(seed, f"episode:{t}")
        episode = sample_episode(features, labels, n_way, k_shot, q_per_class, rng)
        pred = nearest_mean_classify(episode, params, p)
        accs[t] = float(np.mean(pred == episode.query_truth))
    mean = float(np.mean(accs))
    if trials < 2 or np.all(accs == accs[0]):
        ci = 0.0
    else:
        ci = float(1.96 * np.std(accs, ddof=1) / np.sqrt(trials))
    return EvalReport(mean, ci, trials, n_way, k_shot, q_per_class, float(p), int(seed))
