"""Contrastive corpus statistics: token-frequency skew, information gain
from long-range context, and a quantized-embedding divergence score.

All metrics are per-instance pure functions; group contrasts re-draw the
random group per seed and report the mean difference with a 95% interval
(1.96 times the standard error across seeds).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .errors import ConfigurationError, UndefinedFitError, UsageError
from .model import ModelParameters
from .seeding import make_rng


@dataclass(frozen=True)
class IGConfig:
    """Block lengths for the short/long context comparison.

    Context for token i resets every 2s (respectively 2l) positions, so the
    average context length across positions is s (respectively l). Positions
    at a reset boundary condition on bos alone. Trailing positions beyond
    the last complete 2l block are dropped.
    """

    short_len: int
    long_lens: tuple[int, ...]
    scorer_fingerprint: str = ""

    def __post_init__(self):
        if self.short_len < 1:
            raise ConfigurationError("short context length must be >= 1")
        if any(l < self.short_len for l in self.long_lens):
            raise ConfigurationError("every long length must be >= short length")


@dataclass(frozen=True)
class DivergenceConfig:
    n_clusters: int = 16
    n_lambda: int = 25
    scale_c: float = 5.0
    kmeans_iters: int = 50
    seed: int = 0


@dataclass
class MetricSample:
    instance_id: int
    kind: str  # "zipf" | "info_gain" | "embedding"
    value: object  # float or per-l dict

    def __post_init__(self):
        vals = self.value.values() if isinstance(self.value, dict) else [self.value]
        if not all(np.isfinite(v) for v in vals):
            raise UsageError(f"non-finite metric value for instance {self.instance_id}")


@dataclass
class GroupComparison:
    metric_kind: str
    group_size: int
    mean_difference: float  # supportive minus random
    ci_half_width: float  # 1.96 * standard error across seeds
    n_seeds: int
    per_seed_differences: list[float]

    def significant(self) -> bool:
        return abs(self.mean_difference) > self.ci_half_width


# ----------------------------- token frequency skew -----------------------------


def zipf_coefficient(tokens: np.ndarray) -> float:
    """Negated OLS slope of log frequency on log rank over observed types.

    Rank 1 is the most frequent type; ties order by token id (the slope is
    unaffected since tied frequencies are equal). Higher values mean more
    mass on the frequent types; 0 means a flat distribution.
    """
    tokens = np.asarray(tokens).ravel()
    counts = np.bincount(tokens)
    freqs = counts[counts > 0].astype(np.float64)
    if freqs.size < 2:
        raise UndefinedFitError("need at least 2 distinct token types")
    freqs = np.sort(freqs)[::-1]
    x = np.log(np.arange(1, freqs.size + 1, dtype=np.float64))
    y = np.log(freqs)
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    return -slope


# ----------------------------- information gain -----------------------------


def _block_ces(scorer: ModelParameters, tokens: np.ndarray, block: int, bos_id: int) -> np.ndarray:
    """Per-position CE where context resets every ``block`` positions.

    Position i is scored given bos plus tokens[start:i] with
    start = i - (i mod block); a fresh block conditions on bos alone.
    """
    n = tokens.size
    usable = (n // block) * block
    out = np.empty(usable, dtype=np.float64)
    for start in range(0, usable, block):
        chunk = tokens[start : start + block]
        inputs = np.concatenate([[bos_id], chunk[:-1]])[None, :]
        out[start : start + block] = model_mod.position_ces(
            scorer, inputs, chunk[None, :]
        )[0]
    return out


def info_gain(
    scorer_params: ModelParameters,
    tokens: np.ndarray,
    ig_config: IGConfig,
    bos_id: int = 1,
) -> dict[int, float]:
    """Mean per-token CE drop when the context block grows from 2s to 2l.

    Returns {l: mean over positions of CE_short - CE_long}; identically zero
    when l == s because both sides are the same computation.
    """
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    s = ig_config.short_len
    max_l = max(ig_config.long_lens)
    if tokens.size < 2 * max_l:
        raise UsageError(
            f"instance length {tokens.size} < 2*max long length {2 * max_l}"
        )
    if 2 * max_l > scorer_params.arch.window:
        raise UsageError("scorer window too small for the longest block")
    ce_short = _block_ces(scorer_params, tokens, 2 * s, bos_id)
    result = {}
    for l in ig_config.long_lens:
        if l == s:
            ce_long = ce_short
        else:
            ce_long = _block_ces(scorer_params, tokens, 2 * l, bos_id)
        usable = min(ce_short.size, ce_long.size)
        result[int(l)] = float(np.mean(ce_short[:usable] - ce_long[:usable]))
    return result


# ----------------------------- divergence score -----------------------------


def embed_instances(embed_params: ModelParameters, token_seqs) -> np.ndarray:
    """Mean-pooled final hidden state per sequence."""
    vecs = [
        model_mod.final_hidden(embed_params, np.asarray(seq, dtype=np.int64)[None, :])[0].mean(axis=0)
        for seq in token_seqs
    ]
    return np.stack(vecs)


def _kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> np.ndarray:
    """Deterministic Lloyd's with greedy farthest-point seeding."""
    n = points.shape[0]
    rng = make_rng(seed, "kmeans")
    centers = [points[int(rng.integers(0, n))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        centers.append(points[int(np.argmax(d2))])
        d2 = np.minimum(d2, ((points - centers[-1]) ** 2).sum(axis=1))
    centers = np.stack(centers)
    assign = np.full(n, -1, dtype=np.int64)
    for _step in range(iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:  # deterministic re-seed on the farthest point
                far = int(np.argmax(dists.min(axis=1)))
                centers[c] = points[far]
    return assign


def _kl(p: np.ndarray, r: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(r[mask]))).sum())


def _frontier_auc(p: np.ndarray, q: np.ndarray, config: DivergenceConfig) -> float:
    """Area under the divergence frontier of the two cluster histograms.

    Points are (exp(-c KL(q||R)), exp(-c KL(p||R))) over mixtures
    R = lam*p + (1-lam)*q, anchored at (0, 1) and (1, 0).
    """
    lams = np.arange(1, config.n_lambda + 1) / (config.n_lambda + 1)
    xs, ys = [0.0, 1.0], [1.0, 0.0]
    for lam in lams:
        r = lam * p + (1 - lam) * q
        xs.append(np.exp(-config.scale_c * _kl(q, r)))
        ys.append(np.exp(-config.scale_c * _kl(p, r)))
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    order = np.lexsort((-ys, xs))  # x ascending, ties keep the higher y first
    return float(np.trapezoid(ys[order], xs[order]))


def divergence_score(
    group_a_instances,
    group_b_instances,
    embed_params: ModelParameters,
    div_config: DivergenceConfig,
) -> float:
    """Similarity in (0, 1] between two groups of token sequences.

    Embeds every sequence, quantizes the joint set with k-means (in a
    canonical point order, so the score is exactly symmetric in the two
    groups under a shared seed), and averages the frontier area over both
    argument orders.
    """
    a = list(group_a_instances)
    b = list(group_b_instances)
    if not a or not b:
        raise UsageError("both groups must be nonempty")
    emb_a = embed_instances(embed_params, a)
    emb_b = embed_instances(embed_params, b)
    joint = np.concatenate([emb_a, emb_b], axis=0)
    if div_config.n_clusters > joint.shape[0]:
        raise ConfigurationError(
            f"k-means k={div_config.n_clusters} exceeds {joint.shape[0]} points"
        )
    canon = np.lexsort(joint.T[::-1])  # canonical row order, independent of a/b order
    assign_sorted = _kmeans(
        joint[canon], div_config.n_clusters, div_config.kmeans_iters, div_config.seed
    )
    assign = np.empty(joint.shape[0], dtype=np.int64)
    assign[canon] = assign_sorted
    k = div_config.n_clusters
    p = np.bincount(assign[: len(a)], minlength=k).astype(np.float64) / len(a)
    q = np.bincount(assign[len(a) :], minlength=k).astype(np.float64) / len(b)
    return 0.5 * (_frontier_auc(p, q, div_config) + _frontier_auc(q, p, div_config))


# ----------------------------- group contrasts -----------------------------


def group_comparison(
    metric_samples_supportive,
    metric_samples_random,
    n_seeds: int,
    seed: int = 0,
    metric_kind: str = "",
) -> GroupComparison:
    """Supportive-vs-random mean difference with a seed-resampled 95% CI.

    The random side is a population pool: each seed draws a fresh uniform
    subset of the supportive group's size and recomputes the difference.
    """
    sup = np.asarray([float(v) for v in metric_samples_supportive])
    pool = np.asarray([float(v) for v in metric_samples_random])
    if sup.size == 0 or pool.size == 0:
        raise UsageError("both metric sample sets must be nonempty")
    if n_seeds < 2:
        raise UsageError("need at least 2 resampling seeds")
    if pool.size < sup.size:
        raise UsageError("random pool smaller than the supportive group")
    sup_mean = sup.mean()
    diffs = []
    for j in range(n_seeds):
        rng = make_rng(seed, "resample", j)
        draw = rng.choice(pool.size, size=sup.size, replace=False)
        diffs.append(float(sup_mean - pool[draw].mean()))
    arr = np.asarray(diffs)
    se = float(arr.std(ddof=1) / np.sqrt(n_seeds))
    return GroupComparison(
        metric_kind=metric_kind,
        group_size=int(sup.size),
        mean_difference=float(arr.mean()),
        ci_half_width=1.96 * se,
        n_seeds=n_seeds,
        per_seed_differences=diffs,
    )
