"""Inference-side helpers: scoring pairs and faithfulness variant sets."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Iterator, Sequence

import torch

from .datagen import VariantSet
from .domain import Manifest, UtteranceRecord, Waveform
from .model import SpamModel, SpeechInput, speech_input
from .stats import MosTable, ScoreRow, ScoreTable
from .training import Checkpoint, load_checkpoint, model_from_checkpoint


class Scorer:
    """Wraps a trained model; every call runs in inference mode."""

    def __init__(self, model: SpamModel):
        self.model = model.eval()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path) -> "Scorer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        return cls(model_from_checkpoint(ckpt))

    def score(self, waveform: Waveform, transcript: str, prompt: str) -> float:
        return self.model.score(waveform, transcript, prompt)

    @torch.no_grad()
    def score_prompts(self, speech: SpeechInput, prompts: Sequence[str]) -> list[float]:
        """Score one utterance against several prompts."""
        out = self.model.forward_speech(self.model.collate_speech([speech]))
        b = self.model.encode_prompts(prompts)
        return (b @ out.a[0]).clamp(-1.0, 1.0).tolist()

    def iter_variant_rows(
        self,
        manifest: Manifest,
        variants: Sequence[VariantSet],
        speech_cache: dict[str, SpeechInput] | None = None,
    ) -> Iterator[ScoreRow]:
        """Rows for original, positive and negative prompts, item by item."""
        records = {r.item_id: r for r in manifest}
        for vs in variants:
            record = records[vs.item_id]
            speech = speech_cache.get(vs.item_id) if speech_cache else None
            if speech is None:
                speech = speech_input(manifest.load_audio(record), record.transcript)
            prompts = [vs.original_prompt, *vs.positive_prompts, *vs.negative_prompts]
            scores = self.score_prompts(speech, prompts)
            n = len(vs.positive_prompts)
            yield ScoreRow(vs.item_id, "original", 0, scores[0])
            for i in range(n):
                yield ScoreRow(vs.item_id, "positive", i, scores[1 + i])
            for i in range(len(vs.negative_prompts)):
                yield ScoreRow(vs.item_id, "negative", i, scores[1 + n + i])

    def score_variants(self, manifest: Manifest, variants: Sequence[VariantSet], speech_cache=None) -> ScoreTable:
        return ScoreTable(self.iter_variant_rows(manifest, variants, speech_cache))


def pair_id(item_id: str, variant: str, idx: int) -> str:
    return f"{item_id}:{variant}:{idx}"


def proxy_mos(variants: Sequence[VariantSet]) -> MosTable:
    """Constructed adherence ratings: 5 minus the number of flipped attributes."""
    rows = []
    for vs in variants:
        rows.append((pair_id(vs.item_id, "original", 0), 5.0))
        for i in range(len(vs.positive_prompts)):
            rows.append((pair_id(vs.item_id, "positive", i), 5.0))
        for i, flips in enumerate(vs.negative_flips):
            rows.append((pair_id(vs.item_id, "negative", i), 5.0 - len(flips)))
    return MosTable(rows)


def table_scores(table: ScoreTable) -> dict[str, float]:
    return {pair_id(r.item_id, r.variant, r.variant_idx): r.score for r in table.rows}


def filter_negatives(table: ScoreTable, variants: Sequence[VariantSet], attribute: str) -> ScoreTable:
    """Keep originals, positives and only the negatives that flip ``attribute``."""
    flips = {vs.item_id: vs.negative_flips for vs in variants}
    keep = []
    for row in table.rows:
        if row.variant != "negative" or attribute in flips[row.item_id][row.variant_idx]:
            keep.append(row)
    # items without a matching negative are dropped entirely
    has_neg = {r.item_id for r in keep if r.variant == "negative"}
    return ScoreTable(r for r in keep if r.item_id in has_neg)


def ablate_branch(model: SpamModel, branch: str) -> SpamModel:
    """Copy of ``model`` with every parameter of one attribute branch zeroed."""
    ablated = copy.deepcopy(model)
    with torch.no_grad():
        for p in ablated.fusion.branches[branch].parameters():
            p.zero_()
    return ablated.eval()


def records_for(manifest: Manifest, variants: Sequence[VariantSet]) -> list[UtteranceRecord]:
    records = {r.item_id: r for r in manifest}
    return [records[v.item_id] for v in variants]
