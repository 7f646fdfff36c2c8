"""qamine: mine instruction-tuning Q-A pairs from raw web corpora."""

__version__ = "0.1.0"
