"""Speech and prompt encoders.

The toy backbones here stand in for large pretrained models. Waveform
backbones consume per-frame log filterbank features computed with the same
25 ms / 10 ms framing used by the acoustic feature extractors, so frame
axes line up everywhere.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dsp
from .domain import SAMPLE_RATE, Waveform

N_FFT = 512
N_MELS = 40
# fixed affine map bringing log filterbank energies to roughly unit scale
LOGMEL_OFFSET = 8.0
LOGMEL_SCALE = 4.0
LOGMEL_FLOOR = 1e-8


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m : m + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FILTERBANK = mel_filterbank()
_WINDOW = np.hanning(dsp.FRAME_LENGTH)


def log_filterbank(waveform: Waveform) -> np.ndarray:
    """Normalized log mel energies per frame, shape ``(n_frames, 40)``."""
    frames = dsp.frame(waveform) * _WINDOW
    power = np.abs(np.fft.rfft(frames, N_FFT, axis=1)) ** 2
    mel = power @ _FILTERBANK.T
    return ((np.log(np.maximum(mel, LOGMEL_FLOOR)) + LOGMEL_OFFSET) / LOGMEL_SCALE).astype(np.float32)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """Boolean mask, True on valid positions, shape ``(B, max_len)``."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def pad_sequences(seqs: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    width = max(int(lengths.max()), 1)
    first = np.asarray(seqs[0])
    out = torch.zeros((len(seqs), width) + first.shape[1:], dtype=dtype)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=dtype)
    return out, lengths


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over axis 1 of ``(B, T, ...)`` restricted to ``mask``."""
    weights = mask.to(x.dtype)
    while weights.dim() < x.dim():
        weights = weights.unsqueeze(-1)
    return (x * weights).sum(1) / weights.sum(1).clamp_min(1.0)


class FeedForward(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


class WaveformBackbone(nn.Module):
    """Frame-level waveform encoder: filterbank frames -> width ``h``.

    Subclasses replacing the toy network must keep ``frame_hop`` equal to
    the feature extractors' hop so frame axes stay aligned.
    """

    frame_hop = dsp.HOP_LENGTH

    def __init__(self, h: int, n_mels: int = N_MELS):
        super().__init__()
        self.output_dim = h
        self.net = FeedForward(n_mels, h, h)

    @staticmethod
    def features(waveform: Waveform) -> np.ndarray:
        return log_filterbank(waveform)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


class SpeakerEncoder(nn.Module):
    """Statistics pooling -> frozen projection -> trainable adapter."""

    def __init__(self, h: int, n_mels: int = N_MELS, xvector_dim: int = 64, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        weight = torch.randn(xvector_dim, 2 * n_mels, generator=gen) / math.sqrt(2 * n_mels)
        self.xvector = nn.Linear(2 * n_mels, xvector_dim)
        with torch.no_grad():
            self.xvector.weight.copy_(weight)
            self.xvector.bias.zero_()
        self.xvector.requires_grad_(False)
        self.adapter = FeedForward(xvector_dim, h, h)

    def frozen_parameters(self) -> list[nn.Parameter]:
        return list(self.xvector.parameters())

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        mean = masked_mean(feats, mask)
        var = masked_mean((feats - mean[:, None, :]) ** 2, mask)
        stats = torch.cat([mean, torch.sqrt(var + 1e-6)], dim=-1)
        return self.adapter(torch.tanh(self.xvector(stats)))


class TranscriptEmbedding(nn.Module):
    """Phoneme lookup table; the extra last row is the blank key used for
    empty transcripts."""

    def __init__(self, h: int, vocabulary_size: int = len(dsp.PHONEMES)):
        super().__init__()
        self.vocabulary_size = vocabulary_size
        self.blank_index = vocabulary_size
        self.table = nn.Embedding(vocabulary_size + 1, h)

    def ids(self, transcript: str) -> list[int]:
        return list(dsp.phonemize(transcript).phonemes)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)


class SpeechFusion(nn.Module):
    """Cross-attention from frame queries ``w_t + s`` onto phoneme keys."""

    def __init__(self, h: int, heads: int = 4):
        super().__init__()
        self.attn = nn.MultiheadAttention(h, heads, batch_first=True)
        self.norm = nn.LayerNorm(h)

    def forward(
        self,
        w: torch.Tensor,
        s: torch.Tensor,
        c: torch.Tensor,
        c_mask: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        if w.shape[-1] != s.shape[-1] or w.shape[-1] != c.shape[-1]:
            raise ValueError(f"width mismatch: w {w.shape[-1]}, s {s.shape[-1]}, c {c.shape[-1]}")
        query = w + s[:, None, :]
        pad = None if c_mask is None else ~c_mask
        out, weights = self.attn(
            query, c, c, key_padding_mask=pad, need_weights=need_weights, average_attn_weights=False
        )
        out = self.norm(query + out)
        return (out, weights) if need_weights else out


class PromptTokenizer:
    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, words: Sequence[str]):
        specials = [self.PAD, self.UNK]
        self.itos = specials + sorted(set(words) - set(specials))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @staticmethod
    def split(prompt: str) -> list[str]:
        return re.findall(r"[a-z0-9']+", prompt.lower())

    @classmethod
    def build(cls, prompts: Sequence[str], extra_words: Sequence[str] = ()) -> "PromptTokenizer":
        words = set(extra_words)
        for p in prompts:
            words.update(cls.split(p))
        return cls(sorted(words))

    def encode(self, prompt: str) -> list[int]:
        tokens = self.split(prompt)
        if not tokens:
            raise ValueError("prompt must contain at least one word")
        unk = self.stoi[self.UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def __len__(self) -> int:
        return len(self.itos)


def sinusoidal_positions(n: int, h: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, h, 2, dtype=torch.float64) / h)
    pe = torch.zeros(n, h, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate)[:, : h // 2]
    return pe


class PromptEncoder(nn.Module):
    def __init__(self, vocab_size: int, h: int, heads: int = 4, layers: int = 2, dropout: float = 0.1, max_len: int = 128):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, h, padding_idx=0)
        self.register_buffer("positions", sinusoidal_positions(max_len, h).float(), persistent=False)
        layer = nn.TransformerEncoderLayer(
            h, heads, dim_feedforward=2 * h, dropout=dropout, activation="gelu", batch_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.adapter = FeedForward(h, h, h)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = lengths_to_mask(lengths, ids.shape[1])
        x = self.embed(ids) + self.positions[: ids.shape[1]].to(self.embed.weight.dtype)
        x = self.transformer(x, src_key_padding_mask=~mask)
        pooled = masked_mean(x, mask)
        return F.normalize(self.adapter(pooled), dim=-1)


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        if self.normalized and abs(float(np.linalg.norm(self.vector)) - 1.0) > 1e-6:
            raise ValueError("normalized prompt embedding must have unit norm")


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
