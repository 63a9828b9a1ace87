"""Synthetic styled-speech corpus, templated prompts and prompt variants.

Audio is a harmonic tone with one voiced segment per phoneme. Every
acoustic attribute of a StyleKey maps onto a controllable signal property:

* gender: spectral tilt (male voices roll off 6 dB/octave faster)
* pitch: fundamental frequency drawn from a (gender, level) range
* speed: phoneme segments per second
* energy: frame log-RMS, calibrated to a sine-equivalent amplitude
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import dsp
from .domain import (
    ATTRIBUTES,
    SAMPLE_RATE,
    Manifest,
    StyleKey,
    UtteranceRecord,
    Waveform,
    all_style_keys,
    write_manifest,
    write_wav,
)

Interval = tuple[float, float]


def _default_f0() -> dict[tuple[str, str], Interval]:
    return {
        ("male", "low"): (80.0, 110.0),
        ("male", "normal"): (110.0, 150.0),
        ("male", "high"): (150.0, 200.0),
        ("female", "low"): (150.0, 200.0),
        ("female", "normal"): (200.0, 260.0),
        ("female", "high"): (260.0, 350.0),
    }


@dataclass
class GenerationSpec:
    n_items: int = 540
    seed: int = 0
    f0_ranges_hz: dict = field(default_factory=_default_f0)
    rate_ranges_pps: dict = field(
        default_factory=lambda: {"slow": (2.0, 4.0), "normal": (4.0, 7.0), "fast": (7.0, 11.0)}
    )
    amplitude_ranges: dict = field(
        default_factory=lambda: {"low": (0.05, 0.1), "normal": (0.15, 0.3), "high": (0.4, 0.8)}
    )
    duration_range_s: Interval = (1.0, 3.0)
    # values are drawn from the inner part of each interval so extracted
    # features stay inside it despite estimation error
    margin: float = 0.05

    def __post_init__(self):
        self.f0_ranges_hz = {tuple(k): tuple(v) for k, v in self.f0_ranges_hz.items()}
        self.rate_ranges_pps = {k: tuple(v) for k, v in self.rate_ranges_pps.items()}
        self.amplitude_ranges = {k: tuple(v) for k, v in self.amplitude_ranges.items()}
        self.duration_range_s = tuple(self.duration_range_s)
        self.validate()

    def validate(self) -> None:
        if self.n_items < 0:
            raise ValueError("n_items must be >= 0")
        for lo, hi in self.f0_ranges_hz.values():
            if not 60.0 <= lo < hi <= 400.0:
                raise ValueError(f"f0 range [{lo}, {hi}] must lie inside [60, 400] Hz")
        for gender in ATTRIBUTES["gender"]:
            _check_disjoint(
                [self.f0_ranges_hz[(gender, lvl)] for lvl in ATTRIBUTES["pitch"]], f"{gender} f0"
            )
        _check_disjoint([self.rate_ranges_pps[lvl] for lvl in ATTRIBUTES["speed"]], "rate")
        _check_disjoint([self.amplitude_ranges[lvl] for lvl in ATTRIBUTES["energy"]], "amplitude")
        lo, hi = self.duration_range_s
        if not 0 < lo < hi:
            raise ValueError("duration range must be a non-empty positive interval")
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must be in [0, 0.5)")
        if max(v[1] for v in self.amplitude_ranges.values()) > 0.85:
            raise ValueError("amplitudes above 0.85 would clip")

    def to_json(self) -> dict:
        data = asdict(self)
        data["f0_ranges_hz"] = {f"{g}/{p}": list(v) for (g, p), v in self.f0_ranges_hz.items()}
        return data

    @classmethod
    def from_json(cls, data: dict) -> "GenerationSpec":
        data = dict(data)
        if "f0_ranges_hz" in data:
            data["f0_ranges_hz"] = {
                tuple(k.split("/")): tuple(v) for k, v in data["f0_ranges_hz"].items()
            }
        return cls(**data)

    def energy_interval(self, level: str) -> Interval:
        """Declared interval of mean frame log-RMS for an energy level."""
        lo, hi = self.amplitude_ranges[level]
        return math.log(lo / math.sqrt(2)), math.log(hi / math.sqrt(2))


def _check_disjoint(intervals: list[Interval], what: str) -> None:
    for lo, hi in intervals:
        if not lo < hi:
            raise ValueError(f"empty {what} interval [{lo}, {hi}]")
    ordered = sorted(intervals)
    for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
        if lo < hi:
            raise ValueError(f"overlapping {what} intervals")


def derive_seed(seed: int, *parts: str | int) -> np.random.SeedSequence:
    """Independent random stream for ``(seed, *parts)``."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return np.random.SeedSequence([seed & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")])


def _inner(rng: np.random.Generator, interval: Interval, margin: float, log: bool = False) -> float:
    lo, hi = interval
    if log:
        lo, hi = math.log(lo), math.log(hi)
    pad = (hi - lo) * margin
    value = rng.uniform(lo + pad, hi - pad)
    return math.exp(value) if log else value


@functools.lru_cache(maxsize=None)
def _harmonic_phases(n_harmonics: int, tilt: int) -> np.ndarray:
    """Harmonic phases with a low crest factor, found by a fixed random search."""
    amps = np.arange(1, n_harmonics + 1, dtype=np.float64) ** -tilt
    t = np.linspace(0, 2 * np.pi, 2048, endpoint=False)
    basis = np.sin(np.outer(np.arange(1, n_harmonics + 1), t))
    cosb = np.cos(np.outer(np.arange(1, n_harmonics + 1), t))
    rng = np.random.default_rng(n_harmonics * 10 + tilt)
    best, best_crest = np.zeros(n_harmonics), np.inf
    for _ in range(64):
        phi = rng.uniform(0, 2 * np.pi, n_harmonics)
        x = (amps * np.cos(phi)) @ basis + (amps * np.sin(phi)) @ cosb
        crest = np.abs(x).max() / np.sqrt(np.mean(x**2))
        if crest < best_crest:
            best, best_crest = phi, crest
    return best


HARMONIC_CEILING_HZ = 4000.0
JITTER = 0.03
DIP_WIDTH_S = 0.02
DIP_DEPTH = 0.5
FADE_S = 0.015


@dataclass(frozen=True)
class UtteranceTargets:
    """Ground-truth values drawn for one synthetic utterance."""

    f0_hz: float
    rate_pps: float
    amplitude: float


def draw_targets(style_key: StyleKey, rng: np.random.Generator, spec: GenerationSpec) -> UtteranceTargets:
    return UtteranceTargets(
        f0_hz=_inner(rng, spec.f0_ranges_hz[(style_key.gender, style_key.pitch)], spec.margin, log=True),
        rate_pps=_inner(rng, spec.rate_ranges_pps[style_key.speed], spec.margin),
        amplitude=_inner(rng, spec.amplitude_ranges[style_key.energy], spec.margin, log=True),
    )


def render_audio(
    style_key: StyleKey, n_phonemes: int, targets: UtteranceTargets, rng: np.random.Generator
) -> Waveform:
    sr = SAMPLE_RATE
    bounds = np.round(np.arange(n_phonemes + 1) * sr / targets.rate_pps).astype(int)
    jitter = rng.uniform(math.log(1 - JITTER), math.log(1 + JITTER), n_phonemes)
    if n_phonemes > 1:
        jitter -= jitter.mean()
    inst_f0 = np.repeat(targets.f0_hz * np.exp(jitter), np.diff(bounds))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr

    tilt = 3 if style_key.gender == "male" else 2
    n_harm = max(1, int(HARMONIC_CEILING_HZ // (targets.f0_hz * (1 + JITTER))))
    phis = _harmonic_phases(n_harm, tilt)
    x = np.zeros_like(phase)
    for k in range(1, n_harm + 1):
        x += k**-tilt * np.sin(k * phase + phis[k - 1])

    t = np.arange(x.size) / sr
    env = np.ones_like(x)
    for b in bounds[1:-1] / sr:
        lo, hi = np.searchsorted(t, [b - DIP_WIDTH_S, b + DIP_WIDTH_S])
        d = np.abs(t[lo:hi] - b)
        env[lo:hi] -= DIP_DEPTH * 0.5 * (1 + np.cos(np.pi * d / DIP_WIDTH_S))
    fade = min(int(FADE_S * sr), x.size // 2)
    if fade:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        env[:fade] *= ramp
        env[-fade:] *= ramp[::-1]
    x *= env

    # calibrate mean frame log-RMS to that of a sine of the drawn amplitude
    peak = np.abs(x).max()
    x /= peak
    current = dsp.extract_energy(Waveform(x)).mean()
    x *= math.exp(math.log(targets.amplitude / math.sqrt(2)) - current)
    return Waveform(np.clip(x, -1.0, 1.0))


def synthesize_utterance(
    style_key: StyleKey, transcript: str, seed: int | np.random.SeedSequence, spec: GenerationSpec
) -> Waveform:
    n = len(dsp.phonemize(transcript))
    if n == 0:
        raise ValueError("cannot synthesize an empty transcript")
    rng = np.random.default_rng(seed)
    targets = draw_targets(style_key, rng, spec)
    return render_audio(style_key, n, targets, rng)


# ---------------------------------------------------------------------------
# prompts

GENDER_PHRASES = {
    "male": ("a man", "a male speaker", "a gentleman"),
    "female": ("a woman", "a female speaker", "a lady"),
}
PITCH_PHRASES = {
    "low": ("with a low pitch", "with a deep tone", "in a low register"),
    "normal": ("with a normal pitch", "with an average tone", "in a middle register"),
    "high": ("with a high pitch", "with a bright tone", "in a high register"),
}
SPEED_PHRASES = {
    "slow": ("slowly", "at a slow pace", "at an unhurried tempo"),
    "normal": ("at a normal pace", "at a moderate speed", "at an even tempo"),
    "fast": ("quickly", "at a fast pace", "at a rapid tempo"),
}
ENERGY_PHRASES = {
    "low": ("softly", "with low energy", "in a quiet voice"),
    "normal": ("with normal energy", "at a moderate volume", "in a steady voice"),
    "high": ("loudly", "with high energy", "in a powerful voice"),
}
PHRASES = {
    "gender": GENDER_PHRASES,
    "pitch": PITCH_PHRASES,
    "speed": SPEED_PHRASES,
    "energy": ENERGY_PHRASES,
}
TEMPLATES = (
    "{gender} speaks {speed} {pitch}, {energy}.",
    "Please generate {gender} talking {energy} {pitch}, delivered {speed}.",
    "The audio features {gender} {pitch} who speaks {speed} and {energy}.",
    "Speech from {gender}, {pitch}, {speed}, {energy}.",
    "Imagine {gender} reading {speed} {energy}, {pitch}.",
    "{gender} {pitch} says the line {energy} and {speed}.",
)


def render_prompt(style_key: StyleKey, seed: int | np.random.SeedSequence | np.random.Generator) -> str:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    slots = {}
    for name, table in PHRASES.items():
        options = table[getattr(style_key, name)]
        slots[name] = options[rng.integers(len(options))]
    text = template.format(**slots)
    return text[0].upper() + text[1:]


def _phrase_pattern(phrase: str) -> re.Pattern:
    return re.compile(r"(?<![\w-])" + re.escape(phrase) + r"(?![\w-])")


_PARSE_TABLE = [
    (name, level, _phrase_pattern(p))
    for name, table in PHRASES.items()
    for level, phrases in table.items()
    for p in phrases
]


class PromptParseError(ValueError):
    pass


def parse_prompt(prompt: str) -> StyleKey:
    """Recover the StyleKey verbalized by a templated prompt (test oracle)."""
    text = prompt.lower()
    found: dict[str, set[str]] = {name: set() for name in PHRASES}
    for name, level, pattern in _PARSE_TABLE:
        if pattern.search(text):
            found[name].add(level)
    values = {}
    for name, levels in found.items():
        if len(levels) != 1:
            raise PromptParseError(f"cannot resolve {name} in prompt {prompt!r}: {sorted(levels)}")
        values[name] = levels.pop()
    return StyleKey(**values)


def prompt_vocabulary_words() -> set[str]:
    """Every word the templates and phrase tables can produce."""
    words = set()
    for template in TEMPLATES:
        words.update(re.findall(r"[a-z']+", re.sub(r"\{\w+\}", " ", template.lower())))
    for table in PHRASES.values():
        for phrases in table.values():
            for p in phrases:
                words.update(re.findall(r"[a-z']+", p.lower()))
    return words


# ---------------------------------------------------------------------------
# faithfulness variants

N_VARIANTS = 10


@dataclass(frozen=True)
class VariantSet:
    item_id: str
    original_prompt: str
    positive_prompts: tuple[str, ...]
    negative_prompts: tuple[str, ...]
    # attribute names flipped to build each negative
    negative_flips: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if len(self.positive_prompts) != N_VARIANTS or len(self.negative_prompts) != N_VARIANTS:
            raise ValueError(f"{self.item_id}: need {N_VARIANTS} positive and negative prompts")

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "original_prompt": self.original_prompt,
            "positive_prompts": list(self.positive_prompts),
            "negative_prompts": list(self.negative_prompts),
            "negative_flips": [list(f) for f in self.negative_flips],
        }

    @classmethod
    def from_json(cls, data: dict) -> "VariantSet":
        return cls(
            item_id=data["item_id"],
            original_prompt=data["original_prompt"],
            positive_prompts=tuple(data["positive_prompts"]),
            negative_prompts=tuple(data["negative_prompts"]),
            negative_flips=tuple(tuple(f) for f in data.get("negative_flips", ())),
        )


def flip_attributes(key: StyleKey, rng: np.random.Generator) -> tuple[StyleKey, tuple[str, ...]]:
    """Change one or two attributes (chosen uniformly) to another level."""
    names = list(ATTRIBUTES)
    n_flip = int(rng.integers(1, 3))
    chosen = sorted(rng.choice(len(names), size=n_flip, replace=False))
    changes = {}
    for idx in chosen:
        name = names[idx]
        others = [lvl for lvl in ATTRIBUTES[name] if lvl != getattr(key, name)]
        changes[name] = others[rng.integers(len(others))]
    return key.replace(**changes), tuple(names[i] for i in chosen)


def make_variants(record: UtteranceRecord, seed: int | np.random.SeedSequence) -> VariantSet:
    rng = np.random.default_rng(seed)
    key = record.style_key
    positives: list[str] = []
    seen = {record.prompt}
    while len(positives) < N_VARIANTS:
        text = render_prompt(key, rng)
        if text not in seen:
            seen.add(text)
            positives.append(text)
    negatives, flips = [], []
    for _ in range(N_VARIANTS):
        neg_key, flipped = flip_attributes(key, rng)
        negatives.append(render_prompt(neg_key, rng))
        flips.append(flipped)
    return VariantSet(record.item_id, record.prompt, tuple(positives), tuple(negatives), tuple(flips))


def write_variants(variants: Iterable[VariantSet], path: str | Path) -> None:
    lines = [json.dumps(v.to_json(), ensure_ascii=False) for v in variants]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_variants(path: str | Path) -> list[VariantSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(VariantSet.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed variant set ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# corpus

_WORDS = (
    "a", "the", "cat", "dog", "sun", "red", "big", "run", "sit", "map", "hat", "pen",
    "fish", "ship", "chin", "moon", "rain", "boat", "tree", "green", "light", "night",
    "bring", "thing", "quick", "black", "stone", "river", "apple", "garden", "yellow",
    "window", "morning", "little", "table", "paper", "candle", "silver", "bridge", "winter",
    "it's", "we", "go", "up", "in", "on", "at", "to", "and", "from", "over", "under",
    "3", "7", "door", "bird", "farm", "lamp", "jump", "soft",
)


@functools.lru_cache(maxsize=1)
def toy_sentences() -> tuple[str, ...]:
    """The fixed list of 200 toy transcripts, spanning 2-40 phonemes."""
    rng = np.random.default_rng(20240101)
    out: list[str] = []
    seen = set()
    while len(out) < 200:
        n_words = 1 + len(out) % 8
        words = [_WORDS[i] for i in rng.integers(len(_WORDS), size=n_words)]
        sentence = " ".join(words)
        n_ph = len(dsp.phonemize(sentence))
        if sentence in seen or not 2 <= n_ph <= 40:
            continue
        seen.add(sentence)
        out.append(sentence)
    return tuple(out)


def split_for(item_id: str) -> str:
    bucket = int.from_bytes(hashlib.sha256(item_id.encode()).digest()[:4], "little") % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def item_id_for(index: int) -> str:
    return f"utt{index:05d}"


def generate_item(index: int, spec: GenerationSpec) -> tuple[UtteranceRecord, Waveform]:
    """Build one corpus item; depends only on ``(spec, index)``."""
    item_id = item_id_for(index)
    rng = np.random.default_rng(derive_seed(spec.seed, "item", item_id))
    keys = all_style_keys()
    key = keys[rng.integers(len(keys))]
    targets = draw_targets(key, rng, spec)
    lo_d, hi_d = spec.duration_range_s
    sentences = toy_sentences()
    counts = np.array([len(dsp.phonemize(s)) for s in sentences])
    ok = np.flatnonzero((counts >= targets.rate_pps * lo_d) & (counts <= targets.rate_pps * hi_d))
    if ok.size == 0:
        ok = np.array([int(np.argmin(np.abs(counts - targets.rate_pps * (lo_d + hi_d) / 2)))])
    transcript = sentences[ok[rng.integers(ok.size)]]
    waveform = render_audio(key, int(counts[sentences.index(transcript)]), targets, rng)
    prompt = render_prompt(key, rng)
    record = UtteranceRecord(
        item_id=item_id,
        audio_path=f"audio/{item_id}.wav",
        transcript=transcript,
        prompt=prompt,
        style_key=key,
        split=split_for(item_id),
    )
    return record, waveform


def generate_corpus(spec: GenerationSpec, out_dir: str | Path) -> Manifest:
    """Write audio and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    if spec.n_items:
        (out_dir / "audio").mkdir(exist_ok=True)
    for i in range(spec.n_items):
        record, waveform = generate_item(i, spec)
        write_wav(out_dir / record.audio_path, waveform)
        records.append(record)
    manifest = Manifest(tuple(records), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def corpus_variants(manifest: Manifest, seed: int, split: str = "test") -> list[VariantSet]:
    return [
        make_variants(rec, derive_seed(seed, "variants", rec.item_id))
        for rec in manifest.split(split)
    ]
