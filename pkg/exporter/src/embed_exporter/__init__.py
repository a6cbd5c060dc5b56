"""Export caption-word and target-region embeddings for the grounding stack."""

__version__ = "0.1.0"
