"""Shared domain types and the line-delimited manifest format.

A manifest is a UTF-8 text file with one JSON object per line. The first
line is a header ``{"format": "spam-manifest", "version": "1"}``; every
following line is one utterance record::

    {"item_id": "u0001", "audio_path": "audio/u0001.wav",
     "transcript": "the cat sat", "prompt": "A man speaks quickly ...",
     "style_key": {"gender": "male", "pitch": "high",
                   "speed": "normal", "energy": "normal"},
     "split": "train"}

``audio_path`` is relative to the directory holding the manifest and points
to a 16 kHz mono PCM-16 RIFF file.
"""

from __future__ import annotations

import itertools
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SAMPLE_RATE = 16000
MANIFEST_FORMAT = "spam-manifest"
MANIFEST_VERSION = "1"

GENDERS = ("male", "female")
PITCH_LEVELS = ("low", "normal", "high")
SPEED_LEVELS = ("slow", "normal", "fast")
ENERGY_LEVELS = ("low", "normal", "high")
SPLITS = ("train", "dev", "test")

# attribute name -> allowed levels, in StyleKey field order
ATTRIBUTES = {
    "gender": GENDERS,
    "pitch": PITCH_LEVELS,
    "speed": SPEED_LEVELS,
    "energy": ENERGY_LEVELS,
}


class ManifestError(ValueError):
    """Raised for malformed, inconsistent or unresolvable manifests."""


@dataclass(frozen=True, order=True)
class StyleKey:
    """Discrete acoustic attribute tuple; equal keys define positive pairs."""

    gender: str
    pitch: str
    speed: str
    energy: str

    def __post_init__(self):
        for name, levels in ATTRIBUTES.items():
            value = getattr(self, name)
            if value not in levels:
                raise ValueError(f"invalid {name} level {value!r}; expected one of {levels}")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in ATTRIBUTES}

    @classmethod
    def from_dict(cls, data: dict) -> "StyleKey":
        unknown = set(data) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown style key fields: {sorted(unknown)}")
        return cls(**{name: data[name] for name in ATTRIBUTES})

    def replace(self, **changes) -> "StyleKey":
        values = self.as_dict()
        values.update(changes)
        return StyleKey(**values)

    def differing(self, other: "StyleKey") -> tuple[str, ...]:
        """Names of attributes where the two keys differ."""
        return tuple(n for n in ATTRIBUTES if getattr(self, n) != getattr(other, n))

    def __str__(self) -> str:
        return f"({self.gender},{self.pitch},{self.speed},{self.energy})"


def all_style_keys() -> list[StyleKey]:
    """The 54 keys of the attribute vocabulary, in a fixed order."""
    return [StyleKey(*combo) for combo in itertools.product(*ATTRIBUTES.values())]


def style_key_equal(a: StyleKey, b: StyleKey) -> bool:
    return (
        a.gender == b.gender
        and a.pitch == b.pitch
        and a.speed == b.speed
        and a.energy == b.energy
    )


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate_hz}")
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if samples.size and (not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0):
            raise ValueError("waveform samples must be finite and within [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self) -> int:
        return self.samples.size


def read_wav(path: str | Path) -> Waveform:
    """Read a 16 kHz mono PCM-16 RIFF file."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise ManifestError(f"{path}: expected mono PCM-16 audio")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ManifestError(f"{path}: unreadable audio ({exc})") from exc
    pcm = np.clip(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, -1.0, 1.0)
    return Waveform(pcm, rate)


def write_wav(path: str | Path, waveform: Waveform) -> None:
    pcm = np.round(waveform.samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class UtteranceRecord:
    item_id: str
    audio_path: str
    transcript: str
    prompt: str
    style_key: StyleKey
    split: str

    def __post_init__(self):
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if not self.transcript.strip():
            raise ValueError(f"{self.item_id}: transcript must be non-empty")
        if not self.prompt.strip():
            raise ValueError(f"{self.item_id}: prompt must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"{self.item_id}: invalid split {self.split!r}")

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "audio_path": self.audio_path,
            "transcript": self.transcript,
            "prompt": self.prompt,
            "style_key": self.style_key.as_dict(),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, data: dict) -> "UtteranceRecord":
        expected = {"item_id", "audio_path", "transcript", "prompt", "style_key", "split"}
        missing = expected - set(data)
        if missing:
            raise ValueError(f"missing fields: {sorted(missing)}")
        unknown = set(data) - expected
        if unknown:
            raise ValueError(f"unknown fields: {sorted(unknown)}")
        return cls(
            item_id=data["item_id"],
            audio_path=data["audio_path"],
            transcript=data["transcript"],
            prompt=data["prompt"],
            style_key=StyleKey.from_dict(data["style_key"]),
            split=data["split"],
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...] = ()
    version: str = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.item_id in seen:
                raise ManifestError(f"duplicate item_id {rec.item_id!r}")
            seen.add(rec.item_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    def split(self, name: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == name]

    def audio_file(self, record: UtteranceRecord) -> Path:
        path = Path(record.audio_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load_audio(self, record: UtteranceRecord) -> Waveform:
        return read_wav(self.audio_file(record))


def read_manifest(path: str | Path, check_audio: bool = True) -> Manifest:
    path = Path(path)
    root = path.parent
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        # JSON escapes \n and \r, so a record never spans lines; str.splitlines
        # would also break on U+0085 / U+2028 inside transcripts
        lines = list(fh)
    if not lines:
        return Manifest((), MANIFEST_VERSION, root)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: malformed header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}:1: not a {MANIFEST_FORMAT} header")
    version = str(header.get("version"))
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported manifest version {version!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("record is not an object")
            rec = UtteranceRecord.from_json(data)
        except (json.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if rec.item_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate item_id {rec.item_id!r}")
        seen.add(rec.item_id)
        records.append(rec)
    manifest = Manifest(tuple(records), version, root)
    if check_audio:
        for rec in records:
            if not manifest.audio_file(rec).is_file():
                raise ManifestError(f"{path}: missing audio for {rec.item_id!r}: {rec.audio_path}")
    return manifest


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": manifest.version})]
    lines.extend(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) for r in manifest)
    if not manifest.records:
        text = ""
    else:
        text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def records_with_key(records: Sequence[UtteranceRecord], key: StyleKey) -> list[UtteranceRecord]:
    return [r for r in records if style_key_equal(r.style_key, key)]
