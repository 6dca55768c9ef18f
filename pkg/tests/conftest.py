import os

# Pin BLAS threading before numpy loads so test results are machine-independent.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from orca import corpus as corpus_mod
from orca import model as model_mod


@pytest.fixture(scope="session")
def micro_arch():
    return model_mod.ArchConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=11, window=12)


@pytest.fixture(scope="session")
def micro_params(micro_arch):
    return model_mod.init_parameters(micro_arch, seed=3, init_std=0.3)


@pytest.fixture(scope="session")
def small_gen_config():
    return corpus_mod.GenConfig(
        n_instances=60,
        seq_len=32,
        label_pool_size=8,
        general_size=48,
        planted_size=32,
        task_area_size=32,
        weight_markov=0.35,
        weight_bursty=0.60,
        weight_planted=0.05,
        topic_size=12,
        pattern_bag_size=6,
        pattern_sample_len=3,
        patterns_per_doc=3,
    )


@pytest.fixture(scope="session")
def small_corpus(small_gen_config):
    return corpus_mod.generate_corpus(small_gen_config, seed=7)


@pytest.fixture(scope="session")
def small_task(small_gen_config):
    layout = small_gen_config.layout()
    spec = corpus_mod.make_task_spec(layout, 0, num_classes=2, class_region_size=6, input_len=3)
    return corpus_mod.build_task_dataset(spec, n_guidance=8, n_eval=20, seed=5, demo_pool_per_class=8)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    arch = model_mod.ArchConfig(
        n_layers=2, d_model=16, n_heads=2, vocab_size=small_corpus.vocab.size, window=32
    )
    tc = model_mod.TrainConfig(
        arch=arch,
        steps=25,
        batch_size=8,
        optimizer=model_mod.OptimizerConfig(kind="adam", lr=3e-3, batch_size=8),
        holdout_count=6,
    )
    return model_mod.init_and_pretrain_base(small_corpus, tc, seed=11)
