"""Retrieval-augmented generation engine with reflective control tokens.

The package is organized around the pipeline stages: corpus chunking
(:mod:`reflectrag.corpus`), embedding retrieval with reranking
(:mod:`reflectrag.retriever`), control-token parsing
(:mod:`reflectrag.tokens`), critique scoring and the adaptive retrieval gate
(:mod:`reflectrag.scoring`), model backends (:mod:`reflectrag.backend`),
decoding control (:mod:`reflectrag.inference`), critic annotation of
instruction data (:mod:`reflectrag.annotate`), and evaluation
(:mod:`reflectrag.evaluation`). The ``reflectrag`` CLI exposes each stage.
"""

__version__ = "0.1.0"
