"""Perturbative continued pretraining and prompting-accuracy evaluation.

Continued pretraining is a single pass over a selected id set: ids are
always visited in ascending order (callers cannot influence the order by
shuffling), batches are consecutive chunks, and each step applies the
batch-mean reconstruction-loss gradient with fresh optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .corpus import Corpus, TaskDataset, assemble_prompt, sample_demonstrations
from .errors import UsageError
from .model import ModelParameters, OptimizerConfig, OptimizerState
from .seeding import make_rng


@dataclass
class EvalReport:
    task_id: str
    mode: str  # "icl" | "zero_shot"
    accuracy: float
    n: int
    records: list[tuple[int, int, int]]  # (example index, predicted, gold)
    model_fingerprint: str


@dataclass
class BaselineReport:
    seeds: list[int]
    accuracies: list[float]
    mean: float
    std: float  # sample standard deviation (n-1 denominator)

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise UsageError("baseline needs at least 2 seeds")


def continued_pretrain(
    theta0: ModelParameters,
    instance_ids,
    corpus: Corpus,
    optimizer_config: OptimizerConfig,
) -> ModelParameters:
    """One pass of batch updates over the id set in canonical ascending order."""
    ids = sorted(int(i) for i in instance_ids)
    if any(i < 0 or i >= corpus.n_instances for i in ids):
        raise UsageError("instance id out of range")
    if len(set(ids)) != len(ids):
        raise UsageError("instance ids must be unique")
    if not ids:
        return theta0.copy()
    params = theta0
    state = OptimizerState()
    bs = optimizer_config.batch_size
    tokens = corpus.tokens.astype(np.int64)
    for lo in range(0, len(ids), bs):
        chunk = ids[lo : lo + bs]
        _, grad = model_mod.batch_pretrain_loss_and_grad(params, tokens[chunk])
        params, state = model_mod.apply_update(params, grad, state, optimizer_config)
    return params


def update_count(n_ids: int, batch_size: int) -> int:
    """Number of optimizer steps a one-pass descent over n_ids performs."""
    return -(-n_ids // batch_size) if n_ids else 0


def evaluate_icl(
    params: ModelParameters,
    task_dataset: TaskDataset,
    per_class_demos: int,
    seed: int,
) -> EvalReport:
    """Accuracy of argmax candidate scoring with freshly sampled demos per example."""
    spec = task_dataset.spec
    window = params.arch.window
    candidates = [list(v) for v in spec.verbalizers]
    records = []
    correct = 0
    for i, ex in enumerate(task_dataset.eval_examples):
        demos = sample_demonstrations(task_dataset, i, per_class_demos, seed)
        prompt = assemble_prompt(demos, ex.input_tokens, spec.template, window)
        pred, _ = model_mod.score_candidates(params, prompt, candidates)
        records.append((i, pred, ex.label))
        if pred == ex.label:
            correct += 1
    n = len(task_dataset.eval_examples)
    if n == 0:
        raise UsageError("task dataset has no eval examples")
    return EvalReport(
        task_id=spec.task_id,
        mode="icl" if per_class_demos > 0 else "zero_shot",
        accuracy=correct / n,
        n=n,
        records=records,
        model_fingerprint=model_mod.fingerprint(params),
    )


def evaluate_zero_shot(params: ModelParameters, task_dataset: TaskDataset) -> EvalReport:
    """Candidate scoring on the bare input; identical to evaluate_icl with 0 demos."""
    return evaluate_icl(params, task_dataset, per_class_demos=0, seed=0)


def random_baseline(
    theta0: ModelParameters,
    corpus: Corpus,
    subset_size: int,
    optimizer_config: OptimizerConfig,
    task_dataset: TaskDataset,
    seeds,
    per_class_demos: int,
    demo_seed: int,
) -> BaselineReport:
    """Continued pretraining on uniform random subsets, one run per seed."""
    if subset_size > corpus.n_instances:
        raise UsageError("subset size exceeds corpus size")
    seeds = [int(s) for s in seeds]
    accuracies = []
    for s in seeds:
        rng = make_rng(s, "random-subset")
        ids = rng.choice(corpus.n_instances, size=subset_size, replace=False)
        params = continued_pretrain(theta0, ids, corpus, optimizer_config)
        report = evaluate_icl(params, task_dataset, per_class_demos, demo_seed)
        accuracies.append(report.accuracy)
    arr = np.asarray(accuracies)
    return BaselineReport(
        seeds=seeds,
        accuracies=accuracies,
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
    )


def significance_flag(our_acc: float, baseline: BaselineReport) -> bool:
    """True iff the gain over the baseline mean strictly exceeds one std."""
    if baseline.std < 0:
        raise UsageError("baseline std must be nonnegative")
    return our_acc - baseline.mean > baseline.std
