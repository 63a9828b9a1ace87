"""Contrastive scorer for style-prompt adherence of speech."""

from .domain import Manifest, StyleKey, UtteranceRecord, Waveform, read_manifest, write_manifest
from .model import ModelConfig, SpamModel
from .scorer import Scorer

__all__ = [
    "Manifest",
    "ModelConfig",
    "Scorer",
    "SpamModel",
    "StyleKey",
    "UtteranceRecord",
    "Waveform",
    "read_manifest",
    "write_manifest",
]
__version__ = "0.1.0"
