"""Synthetic pretraining corpus and downstream classification tasks.

The token id space is partitioned into disjoint regions:

    0 pad | 1 bos | 2 sep | label pool | general | planted | task area

Three generator families produce fixed-length instances over these regions:

* ``markov``  -- an order-1 chain over the general region with a skewed
  stationary distribution; the next token is fully determined in
  distribution by the current one, so long-range context adds nothing.
* ``bursty``  -- i.i.d. draws concentrated on a small per-document topic
  subset of the general region; a longer context pins the topic down
  better, so long-range context is genuinely informative.
* ``planted`` -- demonstration-formatted documents: repeated
  ``content... sep label sep`` pairs whose pattern->label mapping is
  random per document, so the label is only predictable by matching the
  pattern earlier in the context. Pattern content comes from the planted
  region (disjoint from every task's content vocabulary); labels come
  from the shared label pool that task verbalizers are also drawn from.

Downstream tasks draw class-specific content from the task area, which no
generator family ever touches: a task's inputs are unseen during
pretraining, and only the demonstration format and label pool are shared
with planted documents.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PromptTooLongError, UsageError
from .seeding import make_rng

CORPUS_MAGIC = b"ORCC"
CORPUS_VERSION = 1

PAD_ID = 0
BOS_ID = 1
SEP_ID = 2

FAMILIES = ("markov", "bursty", "planted")


@dataclass(frozen=True)
class Vocab:
    """Token id space with its special ids and the verbalizer label pool."""

    size: int
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    sep_id: int = SEP_ID
    label_ids: tuple[int, ...] = ()

    def __post_init__(self):
        specials = (self.pad_id, self.bos_id, self.sep_id, *self.label_ids)
        if len(set(specials)) != len(specials):
            raise ConfigurationError("special token ids must be distinct")
        if any(s < 0 or s >= self.size for s in specials):
            raise ConfigurationError("special token ids must be < vocab size")
        if len(self.label_ids) < 1:
            raise ConfigurationError("label pool must be nonempty")


@dataclass(frozen=True)
class VocabLayout:
    """Region boundaries on top of a Vocab; regions are disjoint by construction."""

    vocab: Vocab
    label_pool: tuple[int, ...]
    general: tuple[int, int]  # [start, stop)
    planted: tuple[int, int]
    task_area: tuple[int, int]

    def general_ids(self) -> np.ndarray:
        return np.arange(*self.general)

    def planted_ids(self) -> np.ndarray:
        return np.arange(*self.planted)

    def task_ids(self) -> np.ndarray:
        return np.arange(*self.task_area)


def make_vocab_layout(
    label_pool_size: int, general_size: int, planted_size: int, task_area_size: int
) -> VocabLayout:
    if min(label_pool_size, general_size, planted_size, task_area_size) < 1:
        raise ConfigurationError("all vocab regions need at least one token")
    start = 3
    labels = tuple(range(start, start + label_pool_size))
    g0 = start + label_pool_size
    p0 = g0 + general_size
    t0 = p0 + planted_size
    size = t0 + task_area_size
    vocab = Vocab(size=size, label_ids=labels)
    return VocabLayout(
        vocab=vocab,
        label_pool=labels,
        general=(g0, p0),
        planted=(p0, t0),
        task_area=(t0, size),
    )


@dataclass(frozen=True)
class GenConfig:
    """Generator configuration: sizes, mixture weights, family parameters."""

    n_instances: int
    seq_len: int
    label_pool_size: int = 16
    general_size: int = 96
    planted_size: int = 64
    task_area_size: int = 64
    weight_markov: float = 0.35
    weight_bursty: float = 0.60
    weight_planted: float = 0.05
    markov_skew: float = 1.0  # popularity exponent over the general region
    markov_concentration: float = 0.3  # gamma shape for transition rows
    topic_size: int = 24
    topic_mass: float = 0.85
    topic_skew: float = 1.0
    pattern_bag_size: int = 8  # token bag per planted pattern
    pattern_sample_len: int = 4  # content tokens drawn from the bag per pair
    patterns_per_doc: int = 3
    repeat_prob: float = 0.4  # chance the next pair repeats the current pattern
    # rare appearances of task-area tokens inside bursty noise keep their
    # embeddings in the trained space without teaching any task structure
    noise_includes_task_area: bool = True

    def __post_init__(self):
        if self.n_instances < 1:
            raise ConfigurationError("n_instances must be >= 1")
        if self.seq_len < 8:
            raise ConfigurationError("seq_len must be >= 8")
        total = self.weight_markov + self.weight_bursty + self.weight_planted
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(
                f"mixture weights sum to {total!r}, expected 1.0"
            )
        if min(self.weight_markov, self.weight_bursty, self.weight_planted) < 0:
            raise ConfigurationError("mixture weights must be nonnegative")
        if self.topic_size > self.general_size:
            raise ConfigurationError("topic_size exceeds general region")
        if self.patterns_per_doc > self.label_pool_size:
            raise ConfigurationError("patterns_per_doc exceeds label pool")
        if not 0.0 <= self.repeat_prob < 1.0:
            raise ConfigurationError("repeat_prob must be in [0, 1)")
        if self.pattern_sample_len > self.pattern_bag_size:
            raise ConfigurationError("pattern_sample_len exceeds pattern_bag_size")
        if self.patterns_per_doc * self.pattern_bag_size > self.planted_size:
            raise ConfigurationError("planted region too small for pattern bags")

    def layout(self) -> VocabLayout:
        return make_vocab_layout(
            self.label_pool_size,
            self.general_size,
            self.planted_size,
            self.task_area_size,
        )


@dataclass(frozen=True)
class PretrainInstance:
    """One fixed-length pretraining sequence; provenance is for tests only."""

    id: int
    tokens: np.ndarray
    provenance_tag: str


@dataclass
class Corpus:
    vocab: Vocab
    seq_len: int
    tokens: np.ndarray  # (N, T) int32
    tags: list[str]

    @property
    def n_instances(self) -> int:
        return self.tokens.shape[0]

    def instance(self, i: int) -> PretrainInstance:
        return PretrainInstance(id=i, tokens=self.tokens[i], provenance_tag=self.tags[i])

    def ids_with_tag(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == tag]


def _family_counts(n: int, config: GenConfig) -> dict[str, int]:
    """Largest-remainder apportionment of instances to families."""
    weights = {
        "markov": config.weight_markov,
        "bursty": config.weight_bursty,
        "planted": config.weight_planted,
    }
    counts = {f: int(np.floor(weights[f] * n)) for f in FAMILIES}
    remainder = n - sum(counts.values())
    fractions = sorted(
        FAMILIES, key=lambda f: (-(weights[f] * n - counts[f]), FAMILIES.index(f))
    )
    for f in fractions[:remainder]:
        counts[f] += 1
    return counts


def _markov_tables(layout: VocabLayout, config: GenConfig, seed: int):
    """Shared transition structure for the whole corpus."""
    rng = make_rng(seed, "markov-chain")
    g = layout.general_ids()
    n = g.size
    popularity = (np.arange(1, n + 1, dtype=np.float64)) ** (-config.markov_skew)
    rows = popularity[None, :] * rng.gamma(config.markov_concentration, size=(n, n))
    rows = rows / rows.sum(axis=1, keepdims=True)
    start = popularity / popularity.sum()
    return g, np.cumsum(rows, axis=1), np.cumsum(start)


def _gen_markov(rng, layout, config, tables) -> np.ndarray:
    g, cum_rows, cum_start = tables
    out = np.empty(config.seq_len, dtype=np.int32)
    u = rng.random(config.seq_len)
    state = int(np.searchsorted(cum_start, u[0]))
    out[0] = g[state]
    for t in range(1, config.seq_len):
        state = int(np.searchsorted(cum_rows[state], u[t]))
        out[t] = g[state]
    return out


def _gen_bursty(rng, layout, config) -> np.ndarray:
    """Bursty-topic document: a skewed topic block that recurs verbatim.

    The first half draws from a small topic subset under a skewed weight
    profile (plus uniform noise over the general and task regions); the
    second half repeats the first half exactly. The verbatim recurrence is
    what makes long-range context informative for these documents, and it
    exposes the model to copy structure over a diverse token range.
    """
    g = layout.general_ids()
    topic = rng.choice(g, size=config.topic_size, replace=False)
    w = (np.arange(1, config.topic_size + 1, dtype=np.float64)) ** (-config.topic_skew)
    w /= w.sum()
    half = config.seq_len // 2
    from_topic = rng.random(half) < config.topic_mass
    topic_draws = rng.choice(topic, size=half, p=w)
    noise_pool = g
    if config.noise_includes_task_area:
        noise_pool = np.concatenate([g, layout.task_ids()])
    noise_draws = rng.choice(noise_pool, size=half)
    block = np.where(from_topic, topic_draws, noise_draws)
    doc = np.concatenate([block, block, block[: config.seq_len - 2 * half]])
    return doc.astype(np.int32)


def _gen_planted(rng, layout, config) -> np.ndarray:
    """Demonstration-formatted document: repeated (content sep label sep) pairs.

    Each document draws a few token bags, arranges every bag in a fixed
    cyclic order, and maps each bag to a label; all three choices are fresh
    per document. A pair's content is a run of consecutive cycle tokens at
    a random phase, so occurrences of one bag overlap without repeating
    verbatim, and the label is only predictable from an earlier occurrence
    of the same bag in the context. A random starting offset keeps pair
    boundaries off absolute positions.
    """
    sep = layout.vocab.sep_id
    n_pat = config.patterns_per_doc
    bag = config.pattern_bag_size
    slen = config.pattern_sample_len
    cycles = rng.choice(layout.planted_ids(), size=(n_pat, bag), replace=False)
    labels = rng.choice(np.array(layout.label_pool), size=n_pat, replace=False)
    seq: list[int] = []
    phase = int(rng.integers(0, slen + 3))
    current = int(rng.integers(0, n_pat))
    first = True
    while len(seq) < config.seq_len + phase:
        if not first and (n_pat > 1 and rng.random() >= config.repeat_prob):
            others = [j for j in range(n_pat) if j != current]
            current = int(others[rng.integers(0, len(others))])
        first = False
        k = int(rng.integers(0, bag))
        content = [int(cycles[current][(k + j) % bag]) for j in range(slen)]
        seq.extend(content + [sep, int(labels[current]), sep])
    return np.asarray(seq[phase : phase + config.seq_len], dtype=np.int32)


def generate_corpus(gen_config: GenConfig, seed: int) -> Corpus:
    """Exactly N instances, deterministic for (config, seed).

    Family assignment and per-instance content both derive from splittable
    per-item seeds, so any parallel generation order yields the same corpus.
    """
    layout = gen_config.layout()
    n = gen_config.n_instances
    counts = _family_counts(n, gen_config)
    assignment = np.repeat(
        [FAMILIES.index(f) for f in FAMILIES], [counts[f] for f in FAMILIES]
    )
    perm = make_rng(seed, "families").permutation(n)
    assignment = assignment[perm]
    tables = _markov_tables(layout, gen_config, seed)
    tokens = np.empty((n, gen_config.seq_len), dtype=np.int32)
    tags = []
    for i in range(n):
        rng = make_rng(seed, "instance", i)
        fam = FAMILIES[assignment[i]]
        if fam == "markov":
            tokens[i] = _gen_markov(rng, layout, gen_config, tables)
        elif fam == "bursty":
            tokens[i] = _gen_bursty(rng, layout, gen_config)
        else:
            tokens[i] = _gen_planted(rng, layout, gen_config)
        tags.append(fam)
    return Corpus(vocab=layout.vocab, seq_len=gen_config.seq_len, tokens=tokens, tags=tags)


# ----------------------------- tasks -----------------------------


@dataclass(frozen=True)
class PromptTemplate:
    """Demonstration layout: bos, then (input sep label sep)*, input, sep."""

    bos_id: int
    sep_id: int


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    num_classes: int
    verbalizers: tuple[tuple[int, ...], ...]  # token ids per class
    class_regions: tuple[tuple[int, ...], ...]
    input_len: int
    template: PromptTemplate

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("tasks need at least 2 classes")
        if len(self.verbalizers) != self.num_classes:
            raise ConfigurationError("one verbalizer per class required")
        if any(len(v) == 0 for v in self.verbalizers):
            raise ConfigurationError("verbalizers must map to at least one token")
        if len(self.class_regions) != self.num_classes:
            raise ConfigurationError("one content region per class required")


@dataclass(frozen=True)
class TaskExample:
    input_tokens: np.ndarray
    label: int
    label_tokens: np.ndarray

    def __post_init__(self):
        if self.label < 0:
            raise UsageError("label must be a nonnegative class index")


@dataclass
class TaskDataset:
    spec: TaskSpec
    guidance_examples: list[TaskExample]
    eval_examples: list[TaskExample]
    demo_pool: dict[int, list[TaskExample]]


def make_task_spec(
    layout: VocabLayout,
    task_index: int,
    num_classes: int = 2,
    class_region_size: int = 8,
    input_len: int = 4,
) -> TaskSpec:
    """Carve a task's per-class content regions and verbalizers positionally.

    Task ``t`` occupies slice ``[t*C*R, (t+1)*C*R)`` of the task area and
    verbalizers ``label_pool[t*C : (t+1)*C]``, so distinct tasks never share
    content tokens or verbalizers while the layout has room.
    """
    area = layout.task_ids()
    c, r = num_classes, class_region_size
    lo = task_index * c * r
    if lo + c * r > area.size:
        raise ConfigurationError(
            f"task area too small for task index {task_index} "
            f"({c * r} tokens needed beyond offset {lo}, have {area.size - lo})"
        )
    if (task_index + 1) * c > len(layout.label_pool):
        raise ConfigurationError("label pool too small for task index")
    if input_len > r:
        raise ConfigurationError("input_len exceeds class region size")
    regions = tuple(
        tuple(int(x) for x in area[lo + i * r : lo + (i + 1) * r]) for i in range(c)
    )
    verbs = tuple((layout.label_pool[task_index * c + i],) for i in range(c))
    return TaskSpec(
        task_id=f"task{task_index}",
        num_classes=c,
        verbalizers=verbs,
        class_regions=regions,
        input_len=input_len,
        template=PromptTemplate(bos_id=layout.vocab.bos_id, sep_id=layout.vocab.sep_id),
    )


def _distinct_inputs(rng, region: tuple[int, ...], input_len: int, count: int) -> list[tuple[int, ...]]:
    """Draw ``count`` distinct input token tuples from one class region."""
    region_arr = np.array(region)
    seen: set[tuple[int, ...]] = set()
    out: list[tuple[int, ...]] = []
    max_attempts = 200 * count + 1000
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigurationError(
                f"cannot draw {count} distinct inputs of length {input_len} "
                f"from a region of {region_arr.size} tokens"
            )
        candidate = tuple(
            int(x) for x in rng.choice(region_arr, size=input_len, replace=input_len > region_arr.size)
        )
        if candidate not in seen:
            seen.add(candidate)
            out.append(candidate)
    return out


def build_task_dataset(
    task_spec: TaskSpec,
    n_guidance: int,
    n_eval: int,
    seed: int,
    demo_pool_per_class: int = 16,
) -> TaskDataset:
    """Class-balanced guidance set plus eval set and demo pools, all disjoint.

    Distinct input tuples are drawn per class and split guidance/eval/demo,
    so no example content leaks between the three roles.
    """
    c = task_spec.num_classes
    if n_guidance % c != 0:
        raise ConfigurationError(
            f"n_guidance {n_guidance} not divisible by num_classes {c}"
        )
    per_class_g = n_guidance // c
    eval_counts = [n_eval // c + (1 if i < n_eval % c else 0) for i in range(c)]
    guidance, eval_examples = [], []
    demo_pool: dict[int, list[TaskExample]] = {}
    for cls in range(c):
        rng = make_rng(seed, "task-class", task_spec.task_id, cls)
        need = per_class_g + eval_counts[cls] + demo_pool_per_class
        inputs = _distinct_inputs(rng, task_spec.class_regions[cls], task_spec.input_len, need)
        label_tokens = np.asarray(task_spec.verbalizers[cls], dtype=np.int64)

        def example(tup):
            return TaskExample(
                input_tokens=np.asarray(tup, dtype=np.int64),
                label=cls,
                label_tokens=label_tokens,
            )

        guidance.extend(example(t) for t in inputs[:per_class_g])
        eval_examples.extend(
            example(t) for t in inputs[per_class_g : per_class_g + eval_counts[cls]]
        )
        demo_pool[cls] = [example(t) for t in inputs[per_class_g + eval_counts[cls] :]]
    # interleave classes so truncated prefixes stay balanced
    guidance = [guidance[i + cls * per_class_g] for i in range(per_class_g) for cls in range(c)]
    order = []
    offsets = [sum(eval_counts[:i]) for i in range(c)]
    for i in range(max(eval_counts)):
        for cls in range(c):
            if i < eval_counts[cls]:
                order.append(eval_examples[offsets[cls] + i])
    return TaskDataset(
        spec=task_spec,
        guidance_examples=guidance,
        eval_examples=order,
        demo_pool=demo_pool,
    )


def sample_demonstrations(
    dataset: TaskDataset,
    test_example_id: int,
    per_class: int,
    seed: int,
    role: str = "eval",
) -> list[TaskExample]:
    """Per-class demos in one randomly shuffled list; independent per test id."""
    if per_class == 0:
        return []
    rng = make_rng(seed, "demos", role, test_example_id)
    demos: list[TaskExample] = []
    for cls in range(dataset.spec.num_classes):
        pool = dataset.demo_pool[cls]
        if len(pool) < per_class:
            raise ConfigurationError(
                f"demo pool for class {cls} has {len(pool)} < {per_class} examples"
            )
        picks = rng.choice(len(pool), size=per_class, replace=False)
        demos.extend(pool[int(i)] for i in picks)
    perm = rng.permutation(len(demos))
    return [demos[int(i)] for i in perm]


def assemble_prompt(
    demos: list[TaskExample],
    test_input: np.ndarray,
    template: PromptTemplate,
    window: int,
) -> np.ndarray:
    """bos + (demo_input sep demo_label sep)* + test_input + sep.

    The target slot is the position following the final separator. Raises
    PromptTooLongError instead of truncating.
    """
    parts = [np.array([template.bos_id], dtype=np.int64)]
    for demo in demos:
        parts.append(np.asarray(demo.input_tokens, dtype=np.int64))
        parts.append(np.array([template.sep_id], dtype=np.int64))
        parts.append(np.asarray(demo.label_tokens, dtype=np.int64))
        parts.append(np.array([template.sep_id], dtype=np.int64))
    parts.append(np.asarray(test_input, dtype=np.int64))
    parts.append(np.array([template.sep_id], dtype=np.int64))
    prompt = np.concatenate(parts)
    if prompt.size > window:
        raise PromptTooLongError(
            f"assembled prompt of {prompt.size} tokens exceeds window {window}"
        )
    return prompt


# ----------------------------- file formats -----------------------------


def serialize_corpus(corpus: Corpus) -> bytes:
    """Header (magic, version, vocab size, T, N) + N*T uint32 little-endian."""
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(
        struct.pack(
            "<4I", CORPUS_VERSION, corpus.vocab.size, corpus.seq_len, corpus.n_instances
        )
    )
    buf.write(corpus.tokens.astype("<u4").tobytes())
    return buf.getvalue()


def write_corpus_file(corpus: Corpus, path, meta_path=None):
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(corpus))
    if meta_path is not None:
        meta = {
            "vocab": {
                "size": corpus.vocab.size,
                "pad_id": corpus.vocab.pad_id,
                "bos_id": corpus.vocab.bos_id,
                "sep_id": corpus.vocab.sep_id,
                "label_ids": list(corpus.vocab.label_ids),
            },
            "tags": corpus.tags,
        }
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh)


def read_corpus_file(path, meta_path=None) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CORPUS_MAGIC:
        raise UsageError("bad corpus magic")
    version, vocab_size, seq_len, n = struct.unpack("<4I", blob[4:20])
    if version != CORPUS_VERSION:
        raise UsageError(f"unsupported corpus version {version}")
    tokens = (
        np.frombuffer(blob[20:], dtype="<u4").astype(np.int32).reshape(n, seq_len)
    )
    if meta_path is not None:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        vocab = Vocab(
            size=meta["vocab"]["size"],
            pad_id=meta["vocab"]["pad_id"],
            bos_id=meta["vocab"]["bos_id"],
            sep_id=meta["vocab"]["sep_id"],
            label_ids=tuple(meta["vocab"]["label_ids"]),
        )
        tags = meta["tags"]
    else:
        vocab = Vocab(size=vocab_size, label_ids=(3,))
        tags = ["unknown"] * n
    return Corpus(vocab=vocab, seq_len=seq_len, tokens=tokens, tags=tags)


def write_task_dataset_file(dataset: TaskDataset, path, meta_path=None):
    """Line-delimited JSON records {role, class, tokens}."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.guidance_examples:
            fh.write(json.dumps({"role": "guidance", "class": ex.label,
                                 "tokens": [int(t) for t in ex.input_tokens]}) + "\n")
        for ex in dataset.eval_examples:
            fh.write(json.dumps({"role": "eval", "class": ex.label,
                                 "tokens": [int(t) for t in ex.input_tokens]}) + "\n")
        for cls in sorted(dataset.demo_pool):
            for ex in dataset.demo_pool[cls]:
                fh.write(json.dumps({"role": "demo", "class": ex.label,
                                     "tokens": [int(t) for t in ex.input_tokens]}) + "\n")
    if meta_path is not None:
        spec = dataset.spec
        meta = {
            "task_id": spec.task_id,
            "num_classes": spec.num_classes,
            "verbalizers": [list(v) for v in spec.verbalizers],
            "class_regions": [list(r) for r in spec.class_regions],
            "input_len": spec.input_len,
            "bos_id": spec.template.bos_id,
            "sep_id": spec.template.sep_id,
        }
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh)


def read_task_dataset_file(path, meta_path) -> TaskDataset:
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = TaskSpec(
        task_id=meta["task_id"],
        num_classes=meta["num_classes"],
        verbalizers=tuple(tuple(v) for v in meta["verbalizers"]),
        class_regions=tuple(tuple(r) for r in meta["class_regions"]),
        input_len=meta["input_len"],
        template=PromptTemplate(bos_id=meta["bos_id"], sep_id=meta["sep_id"]),
    )
    guidance, eval_examples = [], []
    demo_pool: dict[int, list[TaskExample]] = {c: [] for c in range(spec.num_classes)}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            ex = TaskExample(
                input_tokens=np.asarray(rec["tokens"], dtype=np.int64),
                label=rec["class"],
                label_tokens=np.asarray(spec.verbalizers[rec["class"]], dtype=np.int64),
            )
            if rec["role"] == "guidance":
                guidance.append(ex)
            elif rec["role"] == "eval":
                eval_examples.append(ex)
            else:
                demo_pool[ex.label].append(ex)
    return TaskDataset(
        spec=spec, guidance_examples=guidance, eval_examples=eval_examples, demo_pool=demo_pool
    )
