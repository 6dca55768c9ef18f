"""Iterative gradient-similarity selection of supportive pretraining data.

Each of M iterations scores every not-yet-selected corpus instance by the
cosine between its reconstruction-loss gradient at the base model and the
summed prompting-loss gradient of the guidance task sample, keeps the
top k, and rebuilds the perturbed model by a fresh one-pass descent from
the base model over the cumulative union. Corpus-side gradients are always
taken at the base model; the guidance gradient tracks the latest perturbed
model. Guidance demonstrations are sampled once and frozen across
iterations so the guidance objective stays fixed while the model moves.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .corpus import Corpus, TaskDataset, assemble_prompt, sample_demonstrations
from .errors import UndefinedSimilarityError, UsageError
from .model import GradientVector, ModelParameters, OptimizerConfig
from .train_eval import continued_pretrain, update_count


@dataclass(frozen=True)
class SelectionConfig:
    m_iterations: int
    k_per_iteration: int
    optimizer: OptimizerConfig
    group_size: int = 1

    def __post_init__(self):
        if self.m_iterations < 1:
            raise UsageError("m_iterations must be >= 1")
        if self.k_per_iteration < 1:
            raise UsageError("k_per_iteration must be >= 1")
        if self.group_size < 1:
            raise UsageError("group_size must be >= 1")


@dataclass
class IterationRecord:
    iteration: int  # 1-based
    ids: list[int]  # sorted by (score desc, id asc)
    scores: list[float]  # aligned with ids
    model_fingerprint: str
    descent_updates: int


@dataclass
class SelectionResult:
    iterations: list[IterationRecord]
    union: list[int]  # ascending instance ids
    final_descent_updates: int
    score_log: list[np.ndarray] = field(default_factory=list)

    @property
    def fingerprints(self) -> list[str]:
        return [it.model_fingerprint for it in self.iterations]


def cosine_similarity(g1, g2) -> float:
    """Standard cosine between two flat gradients; errors on zero norm."""
    v1 = g1.values if isinstance(g1, GradientVector) else np.asarray(g1, dtype=np.float64)
    v2 = g2.values if isinstance(g2, GradientVector) else np.asarray(g2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise UsageError(f"gradient lengths differ: {v1.shape} vs {v2.shape}")
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise UndefinedSimilarityError("cosine undefined for zero-norm gradient")
    return float(np.dot(v1, v2) / (n1 * n2))


def guidance_gradient(
    params: ModelParameters,
    task_dataset: TaskDataset,
    per_class_demos: int,
    seed: int,
) -> GradientVector:
    """Gradient of the summed prompting loss over all guidance examples.

    Demonstrations are drawn per guidance example from the demo pool under
    the "guidance" role, so they are independent of evaluation demos and
    stable across selection iterations for a fixed seed.
    """
    if not task_dataset.guidance_examples:
        raise UsageError("task dataset has no guidance examples")
    spec = task_dataset.spec
    window = params.arch.window
    total = None
    for i, ex in enumerate(task_dataset.guidance_examples):
        demos = sample_demonstrations(task_dataset, i, per_class_demos, seed, role="guidance")
        prompt = assemble_prompt(demos, ex.input_tokens, spec.template, window)
        g = model_mod.loss_gradient(params, "icl", (prompt, ex.label_tokens), source=i)
        total = g.values if total is None else total + g.values
    return GradientVector(values=total, kind="icl", source="guidance-sum")


def score_corpus(
    params_for_pt_grads: ModelParameters,
    guidance_grad: GradientVector,
    corpus: Corpus,
    group_size: int = 1,
    jobs: int = 1,
) -> np.ndarray:
    """Cosine score per instance (shared within groups when group_size > 1).

    Scores are keyed by instance id, not completion order, so any jobs
    setting returns identical results.
    """
    n = corpus.n_instances
    if n == 0:
        raise UsageError("corpus is empty")
    g_ref = guidance_grad.values
    ref_norm = np.linalg.norm(g_ref)
    if ref_norm == 0.0:
        raise UndefinedSimilarityError("guidance gradient has zero norm")
    tokens = corpus.tokens.astype(np.int64)

    def grad_of(i: int) -> np.ndarray:
        return model_mod.loss_gradient(params_for_pt_grads, "pt", tokens[i], source=i).values

    scores = np.empty(n, dtype=np.float64)
    starts = list(range(0, n, group_size))

    def score_group(lo: int):
        members = range(lo, min(lo + group_size, n))
        total = None
        for i in members:
            gi = grad_of(i)
            total = gi if total is None else total + gi
        norm = np.linalg.norm(total)
        if norm == 0.0:
            raise UndefinedSimilarityError(f"zero-norm gradient for group at {lo}")
        val = float(np.dot(total, g_ref) / (norm * ref_norm))
        for i in members:
            scores[i] = val

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(score_group, starts))
    else:
        for lo in starts:
            score_group(lo)
    return scores


def select_topk(scores: np.ndarray, k: int, excluded_ids=()) -> list[int]:
    """Top-k ids by score among non-excluded; ties break toward lower id.

    Output is sorted by (score descending, id ascending).
    """
    scores = np.asarray(scores, dtype=np.float64)
    excluded = set(int(i) for i in excluded_ids)
    avail = np.array([i for i in range(scores.size) if i not in excluded], dtype=np.int64)
    if k > avail.size:
        raise UsageError(f"k={k} exceeds {avail.size} selectable instances")
    order = np.lexsort((avail, -scores[avail]))
    return [int(avail[j]) for j in order[:k]]


def run_orca_icl(
    theta0: ModelParameters,
    corpus: Corpus,
    task_dataset: TaskDataset,
    config: SelectionConfig,
    per_class_demos: int,
    demo_seed: int,
    keep_scores: bool = False,
    jobs: int = 1,
) -> tuple[SelectionResult, ModelParameters]:
    """M rounds of top-k selection with cumulative one-pass descent.

    Returns the per-iteration records plus the final perturbed model. Every
    descent restarts from theta0 over the union selected so far, so the
    final model embodies exactly ceil(M*k / batch) optimizer updates.
    """
    m, k = config.m_iterations, config.k_per_iteration
    if m * k > corpus.n_instances:
        raise UsageError(
            f"M*k = {m * k} exceeds corpus size {corpus.n_instances}"
        )
    theta_prev = theta0
    excluded: list[int] = []
    iterations: list[IterationRecord] = []
    score_log: list[np.ndarray] = []
    for it in range(1, m + 1):
        g_icl = guidance_gradient(theta_prev, task_dataset, per_class_demos, demo_seed)
        scores = score_corpus(theta0, g_icl, corpus, config.group_size, jobs=jobs)
        if keep_scores:
            score_log.append(scores.copy())
        picked = select_topk(scores, k, excluded)
        excluded.extend(picked)
        union = sorted(excluded)
        theta_i = continued_pretrain(theta0, union, corpus, config.optimizer)
        iterations.append(
            IterationRecord(
                iteration=it,
                ids=picked,
                scores=[float(scores[i]) for i in picked],
                model_fingerprint=model_mod.fingerprint(theta_i),
                descent_updates=update_count(len(union), config.optimizer.batch_size),
            )
        )
        theta_prev = theta_i
    union = sorted(excluded)
    result = SelectionResult(
        iterations=iterations,
        union=union,
        final_descent_updates=update_count(len(union), config.optimizer.batch_size),
        score_log=score_log,
    )
    return result, theta_prev
