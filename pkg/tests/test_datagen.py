import collections
import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spam_metric import datagen, dsp
from spam_metric.domain import ATTRIBUTES, StyleKey, all_style_keys, read_manifest

SPEC = datagen.GenerationSpec()
keys = st.sampled_from(all_style_keys())


def synth(key, seed=0, transcript="the green tree"):
    return datagen.synthesize_utterance(key, transcript, seed, SPEC)


class TestSynthesis:
    def test_pitch_inside_declared_range(self):
        key = StyleKey("female", "high", "fast", "normal")
        lo, hi = SPEC.f0_ranges_hz[("female", "high")]
        for seed in range(5):
            f0 = math.exp(dsp.extract_features(synth(key, seed), "the green tree").mean_voiced_log_f0)
            assert lo <= f0 <= hi

    def test_bit_identical(self):
        key = StyleKey("male", "low", "slow", "high")
        assert synth(key, 3).samples.tobytes() == synth(key, 3).samples.tobytes()

    def test_energy_levels_a_factor_two_apart(self):
        lo_key = StyleKey("male", "normal", "normal", "low")
        hi_key = lo_key.replace(energy="high")
        for seed in range(5):
            e_lo = dsp.extract_energy(synth(lo_key, seed)).mean()
            e_hi = dsp.extract_energy(synth(hi_key, seed)).mean()
            assert e_hi - e_lo >= math.log(2)

    def test_no_clipping(self):
        key = StyleKey("female", "low", "slow", "high")
        for seed in range(10):
            assert np.abs(synth(key, seed).samples).max() < 1.0

    def test_rejects_overlapping_intervals(self):
        with pytest.raises(ValueError):
            datagen.GenerationSpec(rate_ranges_pps={"slow": (2, 5), "normal": (4, 7), "fast": (7, 11)})

    def test_spec_json_round_trip(self):
        assert datagen.GenerationSpec.from_json(SPEC.to_json()) == SPEC


class TestGroundTruthConsistency:
    def test_extracted_features_inside_declared_intervals(self, small_corpus):
        for rec in small_corpus:
            w = small_corpus.load_audio(rec)
            feats = dsp.extract_features(w, rec.transcript)
            key = rec.style_key
            lo, hi = SPEC.f0_ranges_hz[(key.gender, key.pitch)]
            assert lo <= math.exp(feats.mean_voiced_log_f0) <= hi, rec.item_id
            lo, hi = SPEC.rate_ranges_pps[key.speed]
            assert lo <= feats.speaking_rate_pps <= hi, rec.item_id
            lo, hi = SPEC.energy_interval(key.energy)
            assert lo <= feats.mean_energy <= hi, rec.item_id

    def test_declared_rate_recovered(self):
        spec = datagen.GenerationSpec(seed=11)
        for i in range(10):
            rec, w = datagen.generate_item(i, spec)
            rng = np.random.default_rng(datagen.derive_seed(11, "item", rec.item_id))
            rng.integers(54)
            declared = datagen.draw_targets(rec.style_key, rng, spec).rate_pps
            assert dsp.speaking_rate(rec.transcript, w) == pytest.approx(declared, rel=0.05)


class TestPrompts:
    def test_example_key(self):
        text = datagen.render_prompt(StyleKey("male", "high", "normal", "normal"), 0).lower()
        assert any(p in text for p in datagen.GENDER_PHRASES["male"])
        assert any(p in text for p in datagen.PITCH_PHRASES["high"])

    def test_paraphrase_law(self):
        key = StyleKey("female", "low", "fast", "high")
        a, b = datagen.render_prompt(key, 1), datagen.render_prompt(key, 2)
        assert a != b
        assert datagen.parse_prompt(a) == datagen.parse_prompt(b) == key

    def test_all_54_keys_round_trip(self):
        parsed = {datagen.parse_prompt(datagen.render_prompt(k, 5)) for k in all_style_keys()}
        assert parsed == set(all_style_keys())

    @given(keys, st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, key, seed):
        assert datagen.parse_prompt(datagen.render_prompt(key, seed)) == key

    def test_template_and_synonym_counts(self):
        assert len(datagen.TEMPLATES) >= 5
        for attr, table in datagen.PHRASES.items():
            for level in ATTRIBUTES[attr]:
                assert len(table[level]) >= 3

    def test_unparseable(self):
        with pytest.raises(datagen.PromptParseError):
            datagen.parse_prompt("a pleasant voice")


class TestVariants:
    def _record(self, small_corpus):
        return small_corpus.records[0]

    def test_positives_and_negatives(self, small_corpus):
        for rec in small_corpus.records[:10]:
            vs = datagen.make_variants(rec, 9)
            assert len(vs.positive_prompts) == len(vs.negative_prompts) == 10
            assert len(set(vs.positive_prompts)) == 10
            assert rec.prompt not in vs.positive_prompts
            for p in vs.positive_prompts:
                assert datagen.parse_prompt(p) == rec.style_key
            for n, flips in zip(vs.negative_prompts, vs.negative_flips):
                parsed = datagen.parse_prompt(n)
                assert parsed != rec.style_key
                assert set(rec.style_key.differing(parsed)) == set(flips)
                assert 1 <= len(flips) <= 2

    def test_flip_frequencies(self, small_corpus):
        rec = self._record(small_corpus)
        counts = collections.Counter()
        total = 0
        for seed in range(1000):
            vs = datagen.make_variants(rec, seed)
            for flips in vs.negative_flips:
                counts.update(flips)
                total += 1
        for attr in ATTRIBUTES:
            assert 0.35 <= counts[attr] / total <= 0.65

    def test_file_round_trip(self, small_corpus, tmp_path):
        variants = datagen.corpus_variants(small_corpus, 0)
        datagen.write_variants(variants, tmp_path / "v.jsonl")
        assert datagen.read_variants(tmp_path / "v.jsonl") == variants


class TestCorpus:
    def test_toy_sentences(self):
        sents = datagen.toy_sentences()
        assert len(sents) == 200 == len(set(sents))

    def test_key_counts_for_540_items(self):
        # the key is the first draw of each item's generator
        counts = collections.Counter()
        for i in range(540):
            rng = np.random.default_rng(datagen.derive_seed(0, "item", datagen.item_id_for(i)))
            counts[int(rng.integers(54))] += 1
        assert len(counts) == 54
        assert all(2 <= c <= 18 for c in counts.values())

    def test_split_proportions(self):
        splits = collections.Counter(datagen.split_for(datagen.item_id_for(i)) for i in range(5000))
        assert splits["train"] / 5000 == pytest.approx(0.8, abs=0.03)
        assert splits["dev"] / 5000 == pytest.approx(0.1, abs=0.02)

    def test_deterministic_bytes(self, tmp_path):
        spec = datagen.GenerationSpec(n_items=6, seed=4)

        def digest(d):
            datagen.generate_corpus(spec, d)
            h = hashlib.sha256()
            for p in sorted(d.rglob("*")):
                if p.is_file():
                    h.update(p.name.encode() + p.read_bytes())
            return h.hexdigest()

        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_empty_corpus(self, tmp_path):
        m = datagen.generate_corpus(datagen.GenerationSpec(n_items=0), tmp_path)
        assert len(m) == 0
        assert not (tmp_path / "audio").exists()
        assert len(read_manifest(tmp_path / "manifest.jsonl")) == 0
