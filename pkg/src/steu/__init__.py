"""Class-level behavioral unlearning lab for multi-label text classification.

Trains a small frozen-encoder classifier on synthetic clinical-style corpora,
removes one target class's predictive behavior by editing only PMI-selected
token-embedding rows plus the classifier head, and audits the result against
encoder-level unlearning baselines.
"""

__version__ = "0.1.0"
