"""The full scorer: speech encoder, prompt encoder and fusion module."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .domain import Waveform
from .dsp import phonemize
from .encoders import (
    PromptEncoder,
    PromptTokenizer,
    SpeakerEncoder,
    SpeechFusion,
    TranscriptEmbedding,
    WaveformBackbone,
    lengths_to_mask,
    pad_sequences,
)
from .fusion import AuxPredictions, BranchOutputs, FusionModule, similarity


@dataclass
class ModelConfig:
    h: int = 64
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    xvector_dim: int = 64
    xvector_seed: int = 1234

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SpeechInput:
    """Model-ready speech: filterbank frames plus phoneme ids."""

    feats: np.ndarray
    phonemes: tuple[int, ...]

    @property
    def n_frames(self) -> int:
        return len(self.feats)


def speech_input(waveform: Waveform, transcript: str) -> SpeechInput:
    return SpeechInput(WaveformBackbone.features(waveform), tuple(phonemize(transcript).phonemes))


@dataclass
class SpeechBatch:
    feats: torch.Tensor
    mask: torch.Tensor
    phonemes: torch.Tensor
    phoneme_mask: torch.Tensor


@dataclass
class SpeechOutputs:
    a: torch.Tensor
    aux: AuxPredictions
    branches: BranchOutputs
    a_hat: torch.Tensor
    mask: torch.Tensor


class SpamModel(nn.Module):
    def __init__(self, config: ModelConfig, tokenizer: PromptTokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        h = config.h
        self.waveform_backbone = WaveformBackbone(h)
        self.speaker = SpeakerEncoder(h, xvector_dim=config.xvector_dim, seed=config.xvector_seed)
        self.transcript = TranscriptEmbedding(h)
        self.speech_fusion = SpeechFusion(h, config.heads)
        self.prompt_encoder = PromptEncoder(
            len(tokenizer), h, config.heads, config.layers, config.dropout
        )
        self.fusion = FusionModule(h, config.dropout)

    # -- input preparation -------------------------------------------------

    def prepare_speech(self, waveform: Waveform, transcript: str) -> SpeechInput:
        return speech_input(waveform, transcript)

    def collate_speech(self, inputs: Sequence[SpeechInput]) -> SpeechBatch:
        dtype = self.transcript.table.weight.dtype
        feats, lengths = pad_sequences([x.feats for x in inputs], dtype=dtype)
        blank = self.transcript.blank_index
        ids = [np.asarray(x.phonemes or (blank,), dtype=np.int64) for x in inputs]
        phon, phon_len = pad_sequences(ids, dtype=torch.long)
        return SpeechBatch(
            feats=feats,
            mask=lengths_to_mask(lengths, feats.shape[1]),
            phonemes=phon,
            phoneme_mask=lengths_to_mask(phon_len, phon.shape[1]),
        )

    # -- forward passes ----------------------------------------------------

    def forward_speech(self, batch: SpeechBatch) -> SpeechOutputs:
        w = self.waveform_backbone(batch.feats)
        s = self.speaker(batch.feats, batch.mask)
        c = self.transcript(batch.phonemes)
        a_hat = self.speech_fusion(w, s, c, batch.phoneme_mask)
        branches = self.fusion.run_branches(a_hat)
        aux = self.fusion.predict_aux(branches, batch.mask)
        a = self.fusion.pool(branches, batch.mask)
        return SpeechOutputs(a=a, aux=aux, branches=branches, a_hat=a_hat, mask=batch.mask)

    def encode_prompts(self, prompts: Sequence[str]) -> torch.Tensor:
        ids = [np.asarray(self.tokenizer.encode(p), dtype=np.int64) for p in prompts]
        padded, lengths = pad_sequences(ids, dtype=torch.long)
        return self.prompt_encoder(padded, lengths)

    # -- single-item operations (inference) --------------------------------

    @torch.no_grad()
    def encode_waveform(self, waveform: Waveform) -> torch.Tensor:
        feats = torch.as_tensor(self.waveform_backbone.features(waveform))
        return self.waveform_backbone(feats.to(self.dtype)[None])[0]

    @torch.no_grad()
    def encode_speaker(self, waveform: Waveform) -> torch.Tensor:
        feats = torch.as_tensor(self.waveform_backbone.features(waveform)).to(self.dtype)[None]
        mask = torch.ones(feats.shape[:2], dtype=torch.bool)
        return self.speaker(feats, mask)[0]

    @torch.no_grad()
    def embed_transcript(self, transcript: str) -> torch.Tensor:
        ids = torch.tensor(self.transcript.ids(transcript), dtype=torch.long)
        return self.transcript(ids)

    @torch.no_grad()
    def fuse_speech(self, w: torch.Tensor, s: torch.Tensor, c: torch.Tensor, need_weights: bool = False):
        if len(w) == 0:
            raise ValueError("frame sequence must be non-empty")
        if len(c) == 0:
            c = self.transcript.table.weight[self.transcript.blank_index][None]
        out = self.speech_fusion(w[None], s[None], c[None], need_weights=need_weights)
        if need_weights:
            return out[0][0], out[1][0]
        return out[0]

    @torch.no_grad()
    def encode_prompt(self, prompt: str) -> torch.Tensor:
        return self.encode_prompts([prompt])[0]

    @torch.no_grad()
    def score_inputs(self, speech: Sequence[SpeechInput], prompts: Sequence[str]) -> torch.Tensor:
        """Scores for aligned (speech, prompt) pairs."""
        a = self.forward_speech(self.collate_speech(speech)).a
        b = self.encode_prompts(prompts)
        return similarity(a, b)

    def score(self, waveform: Waveform, transcript: str, prompt: str) -> float:
        was_training = self.training
        self.eval()
        try:
            value = self.score_inputs([self.prepare_speech(waveform, transcript)], [prompt])
        finally:
            self.train(was_training)
        return float(value[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.transcript.table.weight.dtype

    def frozen_parameters(self) -> list[nn.Parameter]:
        return self.speaker.frozen_parameters()

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]
