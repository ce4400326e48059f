"""Differentially private Transformer training for next-token prediction.

Shared-embedding per-sample gradient norms without per-sample gradients,
attention-score debiasing under DP noise, RDP accounting and a small
numpy Transformer with hand-written backprop.
"""

__version__ = "0.1.0"
