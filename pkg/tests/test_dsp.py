import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spam_metric import dsp
from spam_metric.domain import Waveform
from tests.conftest import sine


class TestFraming:
    @pytest.mark.parametrize("n, expected", [(16000, 98), (400, 1), (100, 1), (560, 2), (559, 1)])
    def test_frame_count(self, n, expected):
        assert dsp.frame_count(n) == expected
        assert dsp.frame(np.zeros(n)).shape == (expected, 400)

    def test_short_signal_zero_padded(self):
        x = np.arange(100) / 1000.0
        f = dsp.frame(x)
        assert np.array_equal(f[0, :100], x)
        assert not f[0, 100:].any()

    @given(st.integers(1, 5000))
    def test_all_features_share_frame_axis(self, n):
        w = Waveform(np.sin(np.arange(n) * 0.1) * 0.3)
        pitch, voiced = dsp.extract_pitch(w)
        assert len(pitch) == len(voiced) == len(dsp.extract_energy(w)) == dsp.frame_count(n)


class TestNormalizedAutocorrelation:
    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(3, 400))
        r = dsp.normalized_autocorrelation(frames, 50)
        for i in range(3):
            for k in (0, 1, 17, 50):
                a, b = frames[i, : 400 - k], frames[i, k:]
                direct = np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b))
                assert r[i, k] == pytest.approx(direct, abs=1e-12)


class TestPitch:
    def test_220hz_sine(self):
        pitch, voiced = dsp.extract_pitch(sine(220.0))
        f0 = np.exp(pitch[voiced])
        good = np.abs(f0 - 220.0) <= 2.0
        assert good.sum() >= 0.95 * len(pitch)

    def test_silence_unvoiced(self):
        pitch, voiced = dsp.extract_pitch(Waveform(np.zeros(16000)))
        assert not voiced.any()
        assert not pitch.any()

    def test_octave_ratio(self):
        lo = dsp.extract_features(sine(110.0), "a").mean_voiced_log_f0
        hi = dsp.extract_features(sine(440.0), "a").mean_voiced_log_f0
        assert hi - lo == pytest.approx(math.log(4), abs=0.02)

    def test_white_noise_mostly_unvoiced(self):
        rng = np.random.default_rng(1)
        _, voiced = dsp.extract_pitch(Waveform(rng.uniform(-0.5, 0.5, 16000)))
        assert voiced.mean() < 0.05

    @settings(max_examples=20, deadline=None)
    @given(st.floats(60.0, 500.0), st.floats(0.01, 1.0))
    def test_amplitude_invariance(self, f0, c):
        base = sine(f0, amplitude=0.9, seconds=0.3)
        scaled = Waveform(base.samples * c)
        p1, v1 = dsp.extract_pitch(base)
        p2, v2 = dsp.extract_pitch(scaled)
        assert np.array_equal(v1, v2)
        assert np.allclose(p1[v1], p2[v2], atol=1e-9)

    def test_deterministic(self):
        w = sine(133.0)
        a, b = dsp.extract_pitch(w), dsp.extract_pitch(w)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestEnergy:
    def test_sine_energy(self):
        e = dsp.extract_energy(sine(220.0, 0.5))
        assert np.all(np.abs(e - math.log(0.5 / math.sqrt(2))) <= 0.01)

    def test_silence_floor(self):
        e = dsp.extract_energy(Waveform(np.zeros(1000)))
        assert np.all(e == math.log(1e-5))

    def test_halving_amplitude(self):
        d = dsp.extract_energy(sine(220.0, 0.5)) - dsp.extract_energy(sine(220.0, 0.25))
        assert np.all(np.abs(d - math.log(2)) <= 0.01)

    @given(st.floats(0.01, 1.0))
    def test_shift_law(self, c):
        base = sine(220.0, 0.9, 0.2)
        d = dsp.extract_energy(Waveform(base.samples * c)) - dsp.extract_energy(base)
        assert np.all(np.abs(d - math.log(c)) <= 0.01)


class TestPhonemize:
    def test_repeated_grapheme(self):
        seq = dsp.phonemize("aa")
        assert len(seq) == 2 and seq.phonemes[0] == seq.phonemes[1]

    def test_empty(self):
        assert len(dsp.phonemize("")) == 0

    def test_inventory(self):
        assert len(dsp.PHONEMES) == 44 == len(set(dsp.PHONEMES))

    def test_longest_match(self):
        assert dsp.phonemize("ship").symbols == ("SH", "IH", "P")
        assert dsp.phonemize("night").symbols == ("N", "AY", "T")

    def test_digits_spelled(self):
        assert dsp.phonemize("3") == dsp.phonemize("three")

    def test_unmappable_names_char_and_position(self):
        with pytest.raises(dsp.PhonemizeError, match=r"'X' at position 4"):
            dsp.phonemize("the X")

    @given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789 '", max_size=40))
    def test_deterministic_and_in_range(self, text):
        a, b = dsp.phonemize(text), dsp.phonemize(text)
        assert a == b
        assert all(0 <= i < 44 for i in a.phonemes)


class TestSpeakingRate:
    def test_definition(self):
        # "cat dog sun map pen" is 15 phonemes
        text = "cat dog sun map pen"
        assert len(dsp.phonemize(text)) == 15
        assert dsp.speaking_rate(text, Waveform(np.zeros(48000))) == pytest.approx(5.0)

    def test_ten_over_two_seconds(self):
        text = "cat dog sun i"
        assert len(dsp.phonemize(text)) == 10
        assert dsp.speaking_rate(text, Waveform(np.zeros(32000))) == 5.0

    def test_stretch_halves_rate(self):
        w = sine(200.0, 0.5, 1.0)
        stretched = Waveform(np.repeat(w.samples, 2))
        assert dsp.speaking_rate("cat", stretched) == dsp.speaking_rate("cat", w) / 2

    def test_empty_transcript(self):
        with pytest.raises(ValueError):
            dsp.speaking_rate("", sine(200.0))
