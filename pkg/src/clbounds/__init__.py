"""PAC-Bayes forgetting and backward-transfer bounds for continual learning."""

__version__ = "0.1.0"
