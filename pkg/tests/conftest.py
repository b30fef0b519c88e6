from pathlib import Path

import numpy as np
import pytest

from melrvq.dsp import mel_spectrogram
from melrvq.synth import synth_corpus
from melrvq.train import QuantizerConfig, TrainConfig, train

DATA = Path(__file__).parent / "data"

DESK_DIMS = QuantizerConfig(n_stages=4, codebook_size=64, code_dim=16)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def corpus_clips():
    """Ten minutes of synthetic music: 20 clips x 30 s at 24 kHz."""
    return synth_corpus(n_clips=20, seconds=30.0, seed=0)


@pytest.fixture(scope="session")
def corpus_specs(corpus_clips):
    return [mel_spectrogram(c) for c in corpus_clips]


@pytest.fixture(scope="session")
def corpus_frames(corpus_specs):
    return np.concatenate([s.frames for s in corpus_specs])


@pytest.fixture(scope="session")
def desk_rvq(corpus_frames):
    rvq, report = train(corpus_frames, TrainConfig(steps=2000, seed=0), DESK_DIMS)
    return rvq, report


VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, ok, detail)``."""
    lines = request.config.stash.setdefault(VERDICTS, {})

    def record(n, ok, detail):
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
