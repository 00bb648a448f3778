"""Factorized self-distillation for multimodal sentiment analysis with missing modalities."""

__version__ = "0.1.0"
