"""Cascaded multimodal translation: transformers, deliberation decoders and incongruence analysis."""

__version__ = "0.1.0"
