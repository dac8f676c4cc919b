"""Desk-scale outpatient coding laboratory.

Synthetic encounter corpus with realistic pathologies (copied "ditto"
records, heavy label skew, evidence omitted from the note text), the
standard preprocessing (consecutive dedup, minimum-frequency label
filtering), CNN label-attention classifiers, a metadata reranker,
multi-label evaluation metrics, isotonic calibration and a two-threshold
rule to automate exact-match predictions under a false-positive budget.
"""

__version__ = "0.1.0"
