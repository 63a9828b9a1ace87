"""Frame-level acoustic targets: pitch, energy, speaking rate, phonemes.

All frame-level quantities share one framing convention: 400-sample
(25 ms) windows with a 160-sample (10 ms) hop at 16 kHz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import SAMPLE_RATE, Waveform

FRAME_LENGTH = 400
HOP_LENGTH = 160
F0_MIN_HZ = 50.0
F0_MAX_HZ = 600.0
VOICING_THRESHOLD = 0.5
ENERGY_FLOOR = 1e-5
# earliest autocorrelation peak within this fraction of the best one is
# taken as the period; suppresses octave-down errors
OCTAVE_COST = 0.95


def frame_count(n_samples: int) -> int:
    if n_samples <= FRAME_LENGTH:
        return 1
    return (n_samples - FRAME_LENGTH) // HOP_LENGTH + 1


def frame(waveform: Waveform | np.ndarray) -> np.ndarray:
    """Split into overlapping frames, shape ``(n_frames, 400)``.

    Signals shorter than one window are right-padded with zeros to a
    single frame.
    """
    x = waveform.samples if isinstance(waveform, Waveform) else np.asarray(waveform, np.float64)
    if x.size < FRAME_LENGTH:
        x = np.pad(x, (0, FRAME_LENGTH - x.size))
    n = frame_count(x.size)
    idx = np.arange(FRAME_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    return x[idx]


def _lag_range(sample_rate: int = SAMPLE_RATE) -> tuple[int, int]:
    return math.ceil(sample_rate / F0_MAX_HZ), math.floor(sample_rate / F0_MIN_HZ)


def normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation between each frame and its lagged self.

    ``r[i, k] = sum_n x[n] x[n+k] / sqrt(sum_n x[n]^2 * sum_n x[n+k]^2)``
    where both sums run over the ``N - k`` overlapping samples. Returns
    shape ``(n_frames, max_lag + 1)``; zero where either energy vanishes.
    """
    n_frames, n = frames.shape
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 1]
    sq = frames**2
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = csum[:, n - lags]  # energy of x[0 : N-k]
    tail = csum[:, n:n + 1] - csum[:, lags]  # energy of x[k : N]
    denom = np.sqrt(head * tail)
    out = np.zeros_like(acf)
    ok = denom > 1e-12
    out[ok] = acf[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def extract_pitch(waveform: Waveform) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame log-F0 and voicing mask.

    Unvoiced frames carry pitch 0. A frame is voiced when its best
    normalized autocorrelation peak inside the 50-600 Hz lag range reaches
    0.5.
    """
    frames = frame(waveform)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lo, hi = _lag_range(waveform.sample_rate_hz)
    r = normalized_autocorrelation(frames, hi + 1)

    pitch = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    for i, row in enumerate(r):
        seg = row[lo : hi + 1]
        # local maxima strictly inside the search range
        peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
        if peaks.size == 0:
            continue
        top = seg[peaks].max()
        if top < VOICING_THRESHOLD:
            continue
        # earliest peak close to the global maximum wins
        best = next(p for p in peaks if seg[p] >= OCTAVE_COST * top)
        a, b, c = seg[best - 1], seg[best], seg[best + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lo + best + float(np.clip(shift, -0.5, 0.5))
        f0 = float(np.clip(waveform.sample_rate_hz / lag, F0_MIN_HZ, F0_MAX_HZ))
        pitch[i] = math.log(f0)
        voiced[i] = True
    return pitch, voiced


def extract_energy(waveform: Waveform) -> np.ndarray:
    frames = frame(waveform)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    return np.log(np.maximum(rms, ENERGY_FLOOR))


# 44-symbol phoneme inventory: 20 vowels then 24 consonants.
PHONEMES = (
    "IY", "IH", "EH", "AE", "AA", "AH", "AO", "UH", "UW", "ER",
    "AX", "EY", "AY", "OY", "AW", "OW", "IA", "EA", "UA", "OH",
    "P", "B", "T", "D", "K", "G", "F", "V", "TH", "DH", "S", "Z",
    "SH", "ZH", "HH", "M", "N", "NG", "L", "R", "W", "Y", "CH", "JH",
)
PHONEME_INDEX = {p: i for i, p in enumerate(PHONEMES)}
VOWEL_COUNT = 20

# grapheme -> phonemes, matched longest first within a word
_G2P_RULES = {
    "tch": ("CH",), "igh": ("AY",), "dge": ("JH",),
    "sh": ("SH",), "ch": ("CH",), "th": ("TH",), "ph": ("F",), "ng": ("NG",),
    "ck": ("K",), "qu": ("K", "W"), "wh": ("W",), "zh": ("ZH",), "dh": ("DH",),
    "ee": ("IY",), "ea": ("IY",), "oo": ("UW",), "ou": ("AW",), "ow": ("OW",),
    "oi": ("OY",), "oy": ("OY",), "ai": ("EY",), "ay": ("EY",), "au": ("AO",),
    "aw": ("AO",), "ar": ("AA", "R"), "er": ("ER",), "ir": ("ER",), "ur": ("ER",),
    "or": ("AO", "R"), "ie": ("IA",), "ue": ("UW",), "oa": ("OW",), "air": ("EA",),
    "ear": ("IA",), "ure": ("UA",), "oe": ("OH",), "ey": ("EY",), "eu": ("UH",),
    "a": ("AE",), "b": ("B",), "c": ("K",), "d": ("D",), "e": ("EH",), "f": ("F",),
    "g": ("G",), "h": ("HH",), "i": ("IH",), "j": ("JH",), "k": ("K",), "l": ("L",),
    "m": ("M",), "n": ("N",), "o": ("AA",), "p": ("P",), "q": ("K",), "r": ("R",),
    "s": ("S",), "t": ("T",), "u": ("AH",), "v": ("V",), "w": ("W",), "x": ("K", "S"),
    "y": ("Y",), "z": ("Z",),
}
_MAX_RULE = max(len(g) for g in _G2P_RULES)
_DIGITS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
_SILENT = {" ", "'"}


class PhonemizeError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeSequence:
    phonemes: tuple[int, ...]
    vocabulary_size: int = len(PHONEMES)

    def __len__(self) -> int:
        return len(self.phonemes)

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(PHONEMES[i] for i in self.phonemes)


def _phonemize_word(word: str) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(word):
        for size in range(min(_MAX_RULE, len(word) - i), 0, -1):
            rule = _G2P_RULES.get(word[i : i + size])
            if rule is not None:
                out.extend(PHONEME_INDEX[p] for p in rule)
                i += size
                break
    return out


def phonemize(transcript: str) -> PhonemeSequence:
    """Deterministic rule-based grapheme-to-phoneme conversion.

    Accepts lowercase letters, digits, spaces and apostrophes. Digits are
    read out as English number words.
    """
    for pos, ch in enumerate(transcript):
        if not (("a" <= ch <= "z") or ch.isdigit() and ch.isascii() or ch in _SILENT):
            raise PhonemizeError(f"unmappable character {ch!r} at position {pos}")
    words: list[str] = []
    for token in transcript.replace("'", "").split(" "):
        buf = ""
        for ch in token:
            if ch.isdigit():
                if buf:
                    words.append(buf)
                    buf = ""
                words.append(_DIGITS[int(ch)])
            else:
                buf += ch
        if buf:
            words.append(buf)
    phonemes: list[int] = []
    for word in words:
        phonemes.extend(_phonemize_word(word))
    return PhonemeSequence(tuple(phonemes))


def speaking_rate(transcript: str, waveform: Waveform) -> float:
    """Phonemes per second over the whole waveform."""
    n = len(phonemize(transcript))
    if n == 0:
        raise ValueError("speaking rate needs a non-empty transcript")
    return n / waveform.duration_s


@dataclass(frozen=True)
class FrameFeatures:
    pitch_log_hz: np.ndarray
    voicing_mask: np.ndarray
    energy_log_rms: np.ndarray
    speaking_rate_pps: float

    @property
    def frame_count(self) -> int:
        return len(self.pitch_log_hz)

    @property
    def mean_voiced_log_f0(self) -> float | None:
        if not self.voicing_mask.any():
            return None
        return float(self.pitch_log_hz[self.voicing_mask].mean())

    @property
    def mean_energy(self) -> float:
        return float(self.energy_log_rms.mean())


def extract_features(waveform: Waveform, transcript: str) -> FrameFeatures:
    pitch, voiced = extract_pitch(waveform)
    return FrameFeatures(
        pitch_log_hz=pitch,
        voicing_mask=voiced,
        energy_log_rms=extract_energy(waveform),
        speaking_rate_pps=speaking_rate(transcript, waveform),
    )
