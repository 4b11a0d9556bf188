"""Desk-scale toolkit for compact BERT-style encoders.

WordPiece vocabularies, whole-word-masked MLM+NSP pretraining, task
fine-tuning (NER/RE/DC/QA), task metrics, and throughput benchmarks,
all on a NumPy substrate with a small reverse-mode autograd.
"""

__version__ = "0.1.0"
