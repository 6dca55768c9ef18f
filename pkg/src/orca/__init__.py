"""Supportive-pretraining-data pipeline: gradient-similarity selection over a
synthetic corpus, perturbative continued pretraining, and contrastive
corpus-statistics analyses, all on a self-contained tiny language model."""

import os

# Single-threaded BLAS: the model's matrices are small enough that thread
# fan-out loses outright, and fixed threading keeps results bitwise stable
# across machines. Only effective if numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
