"""One-shot pruning at initialization driven by discriminative image patches."""

__version__ = "0.1.0"
