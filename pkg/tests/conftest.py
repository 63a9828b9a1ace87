import numpy as np
import pytest
import torch

from spam_metric import datagen, training
from spam_metric.domain import SAMPLE_RATE, Waveform, read_manifest
from spam_metric.model import ModelConfig, SpamModel


def sine(freq, amplitude=0.5, seconds=1.0):
    t = np.arange(int(SAMPLE_RATE * seconds)) / SAMPLE_RATE
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """80-item corpus on disk; shared read-only by many tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    datagen.generate_corpus(datagen.GenerationSpec(n_items=80, seed=3), out)
    return read_manifest(out / "manifest.jsonl")


@pytest.fixture(scope="session")
def small_features(small_corpus):
    return training.compute_features(small_corpus, list(small_corpus))


@pytest.fixture
def tiny_model(small_corpus):
    torch.manual_seed(0)
    tokenizer = training.build_tokenizer(small_corpus.split("train"))
    return SpamModel(ModelConfig(h=16, heads=4, layers=1), tokenizer).eval()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
