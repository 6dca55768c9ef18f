import numpy as np
import pytest

from orca import model as M
from orca import selection as S
from orca import train_eval as TE
from orca.corpus import assemble_prompt, sample_demonstrations
from orca.errors import UndefinedSimilarityError, UsageError


# ----------------------------- cosine -----------------------------


def test_cosine_self_is_one():
    g = np.random.default_rng(0).normal(size=50)
    assert S.cosine_similarity(g, g) == pytest.approx(1.0, abs=1e-12)


def test_cosine_negation_is_minus_one():
    g = np.random.default_rng(1).normal(size=50)
    assert S.cosine_similarity(g, -g) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_analytic_value():
    assert S.cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(
        0.70710678, abs=1e-8
    )


def test_cosine_zero_norm_errors():
    with pytest.raises(UndefinedSimilarityError):
        S.cosine_similarity(np.zeros(3), np.ones(3))


def test_cosine_length_mismatch_errors():
    with pytest.raises(UsageError):
        S.cosine_similarity(np.ones(3), np.ones(4))


def test_cosine_accepts_gradient_vectors():
    a = M.GradientVector(values=np.array([1.0, 2.0]), kind="pt")
    b = M.GradientVector(values=np.array([2.0, 4.0]), kind="icl")
    assert S.cosine_similarity(a, b) == pytest.approx(1.0, abs=1e-12)


# ----------------------------- top-k -----------------------------


def test_select_topk_tie_breaks_by_lower_id():
    assert S.select_topk(np.array([0.1, 0.9, 0.9, 0.2]), k=2) == [1, 2]


def test_select_topk_full_corpus():
    scores = np.array([0.3, 0.1, 0.2])
    assert S.select_topk(scores, k=3) == [0, 2, 1]


def test_select_topk_respects_exclusions():
    scores = np.array([0.9, 0.8, 0.7, 0.6])
    assert S.select_topk(scores, k=2, excluded_ids=[0, 2]) == [1, 3]


def test_select_topk_k_too_large_errors():
    with pytest.raises(UsageError):
        S.select_topk(np.array([0.1, 0.2]), k=3)


def test_select_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(42)
    for trial in range(300):
        n = int(rng.integers(5, 60))
        scores = rng.choice(np.round(rng.normal(size=6), 2), size=n)  # planted ties
        k = int(rng.integers(1, n + 1))
        expected = [i for _, i in sorted(((-scores[i], i) for i in range(n)))][:k]
        assert S.select_topk(scores, k) == expected


# ----------------------------- guidance gradient -----------------------------


def test_guidance_gradient_single_example_equals_loss_gradient(small_model, small_task):
    ds1 = type(small_task)(
        spec=small_task.spec,
        guidance_examples=small_task.guidance_examples[:1],
        eval_examples=small_task.eval_examples,
        demo_pool=small_task.demo_pool,
    )
    g = S.guidance_gradient(small_model, ds1, per_class_demos=1, seed=3)
    ex = ds1.guidance_examples[0]
    demos = sample_demonstrations(ds1, 0, 1, seed=3, role="guidance")
    prompt = assemble_prompt(demos, ex.input_tokens, ds1.spec.template, small_model.arch.window)
    direct = M.loss_gradient(small_model, "icl", (prompt, ex.label_tokens))
    assert np.allclose(g.values, direct.values, atol=1e-12)


def test_guidance_gradient_is_sum_of_examples(small_model, small_task):
    full = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    total = np.zeros_like(full.values)
    for i, ex in enumerate(small_task.guidance_examples):
        demos = sample_demonstrations(small_task, i, 1, seed=3, role="guidance")
        prompt = assemble_prompt(demos, ex.input_tokens, small_task.spec.template,
                                 small_model.arch.window)
        total += M.loss_gradient(small_model, "icl", (prompt, ex.label_tokens)).values
    assert np.allclose(full.values, total, atol=1e-9)


# ----------------------------- corpus scoring -----------------------------


def test_score_corpus_matches_serial_oracle(small_model, small_corpus, small_task):
    g = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    scores = S.score_corpus(small_model, g, small_corpus)
    oracle = np.array([
        S.cosine_similarity(
            M.loss_gradient(small_model, "pt", small_corpus.tokens[i].astype(np.int64)), g
        )
        for i in range(small_corpus.n_instances)
    ])
    assert np.allclose(scores, oracle, atol=1e-12)


def test_score_corpus_jobs_do_not_change_scores(small_model, small_corpus, small_task):
    g = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    serial = S.score_corpus(small_model, g, small_corpus, jobs=1)
    threaded = S.score_corpus(small_model, g, small_corpus, jobs=4)
    assert np.array_equal(serial, threaded)


def test_score_corpus_self_gradient_scores_one(small_model, small_corpus):
    g = M.loss_gradient(small_model, "pt", small_corpus.tokens[5].astype(np.int64))
    scores = S.score_corpus(small_model, g, small_corpus)
    assert scores[5] == pytest.approx(1.0, abs=1e-12)
    assert int(np.argmax(scores)) == 5


def test_score_corpus_group_size_replicates_scores(small_model, small_corpus, small_task):
    g = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    scores = S.score_corpus(small_model, g, small_corpus, group_size=4)
    for lo in range(0, small_corpus.n_instances, 4):
        hi = min(lo + 4, small_corpus.n_instances)
        assert np.all(scores[lo:hi] == scores[lo])
    # group score equals cosine of the summed member gradients
    total = np.zeros(small_model.n_params)
    for i in range(4):
        total += M.loss_gradient(small_model, "pt", small_corpus.tokens[i].astype(np.int64)).values
    assert scores[0] == pytest.approx(S.cosine_similarity(total, g), abs=1e-12)


def test_scale_invariance_of_selection(small_model, small_corpus, small_task):
    g = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    scaled = M.GradientVector(values=3.7 * g.values, kind="icl")
    a = S.select_topk(S.score_corpus(small_model, g, small_corpus), k=5)
    b = S.select_topk(S.score_corpus(small_model, scaled, small_corpus), k=5)
    assert a == b


# ----------------------------- full algorithm -----------------------------


@pytest.fixture(scope="module")
def sel_config():
    return S.SelectionConfig(
        m_iterations=2,
        k_per_iteration=2,
        optimizer=M.OptimizerConfig(kind="adam", lr=1e-3, batch_size=2),
    )


def test_run_selection_shapes_and_disjointness(small_model, small_corpus, small_task, sel_config):
    result, theta_m = S.run_orca_icl(
        small_model, small_corpus, small_task, sel_config, per_class_demos=1, demo_seed=3
    )
    assert len(result.iterations) == 2
    sets = [set(it.ids) for it in result.iterations]
    assert all(len(it.ids) == 2 for it in result.iterations)
    assert not (sets[0] & sets[1])
    assert result.union == sorted(sets[0] | sets[1])
    assert result.final_descent_updates == 2  # 4 ids / batch 2
    assert M.fingerprint(theta_m) == result.iterations[-1].model_fingerprint


def test_single_iteration_degenerates_to_plain_topk(small_model, small_corpus, small_task):
    cfg = S.SelectionConfig(
        m_iterations=1, k_per_iteration=3,
        optimizer=M.OptimizerConfig(kind="adam", lr=1e-3, batch_size=2),
    )
    result, theta1 = S.run_orca_icl(
        small_model, small_corpus, small_task, cfg, per_class_demos=1, demo_seed=3
    )
    g = S.guidance_gradient(small_model, small_task, per_class_demos=1, seed=3)
    scores = S.score_corpus(small_model, g, small_corpus)
    assert result.iterations[0].ids == S.select_topk(scores, 3)
    direct = TE.continued_pretrain(small_model, result.union, small_corpus, cfg.optimizer)
    assert M.fingerprint(direct) == M.fingerprint(theta1)


def test_micro_trace_matches_straight_line_oracle(small_model, small_corpus, small_task, sel_config):
    """Step-for-step comparison with an independent implementation."""
    result, theta_m = S.run_orca_icl(
        small_model, small_corpus, small_task, sel_config,
        per_class_demos=1, demo_seed=3, keep_scores=True,
    )

    # straight-line oracle using only model primitives
    def oracle_guidance(params):
        total = np.zeros(params.n_params)
        for i, ex in enumerate(small_task.guidance_examples):
            demos = sample_demonstrations(small_task, i, 1, seed=3, role="guidance")
            prompt = assemble_prompt(demos, ex.input_tokens, small_task.spec.template,
                                     params.arch.window)
            total += M.loss_gradient(params, "icl", (prompt, ex.label_tokens)).values
        return total

    def oracle_descent(ids):
        params = small_model
        state = M.OptimizerState()
        ordered = sorted(ids)
        for lo in range(0, len(ordered), 2):
            chunk = ordered[lo : lo + 2]
            _, grad = M.batch_pretrain_loss_and_grad(
                params, small_corpus.tokens[chunk].astype(np.int64)
            )
            params, state = M.apply_update(params, grad, state, sel_config.optimizer)
        return params

    theta_prev = small_model
    chosen: list[int] = []
    for it in range(2):
        g_icl = oracle_guidance(theta_prev)
        pt = [
            M.loss_gradient(small_model, "pt", small_corpus.tokens[i].astype(np.int64)).values
            for i in range(small_corpus.n_instances)
        ]
        cos = np.array([
            float(np.dot(p, g_icl) / (np.linalg.norm(p) * np.linalg.norm(g_icl)))
            for p in pt
        ])
        assert np.allclose(result.score_log[it], cos, atol=1e-12)
        ranked = sorted((i for i in range(small_corpus.n_instances) if i not in chosen),
                        key=lambda i: (-cos[i], i))
        expected_ids = ranked[:2]
        assert result.iterations[it].ids == expected_ids
        chosen.extend(expected_ids)
        theta_prev = oracle_descent(chosen)
        assert M.fingerprint(theta_prev) == result.iterations[it].model_fingerprint
    assert np.array_equal(theta_prev.flatten(), theta_m.flatten())


def test_selection_deterministic_across_jobs(small_model, small_corpus, small_task, sel_config):
    a, ta = S.run_orca_icl(small_model, small_corpus, small_task, sel_config,
                           per_class_demos=1, demo_seed=3, jobs=1)
    b, tb = S.run_orca_icl(small_model, small_corpus, small_task, sel_config,
                           per_class_demos=1, demo_seed=3, jobs=3)
    assert a.union == b.union
    assert a.fingerprints == b.fingerprints
    assert np.array_equal(ta.flatten(), tb.flatten())


def test_rerunning_descent_reproduces_theta_bitwise(small_model, small_corpus, small_task, sel_config):
    result, theta_m = S.run_orca_icl(small_model, small_corpus, small_task, sel_config,
                                     per_class_demos=1, demo_seed=3)
    replay = TE.continued_pretrain(small_model, result.union, small_corpus, sel_config.optimizer)
    assert np.array_equal(replay.flatten(), theta_m.flatten())


def test_update_count_contract():
    # 5 iterations of 400 with batch 16 embodies 125 updates in the final model
    assert TE.update_count(5 * 400, 16) == 125


def test_mk_exceeding_corpus_errors(small_model, small_corpus, small_task):
    cfg = S.SelectionConfig(
        m_iterations=10, k_per_iteration=100,
        optimizer=M.OptimizerConfig(kind="adam", lr=1e-3, batch_size=2),
    )
    with pytest.raises(UsageError):
        S.run_orca_icl(small_model, small_corpus, small_task, cfg, per_class_demos=1, demo_seed=3)
