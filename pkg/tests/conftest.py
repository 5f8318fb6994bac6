import numpy as np
import pytest

from mtn_tmt.config import RunConfig
from mtn_tmt.data import Dataset, SyntheticSpec, build_vocab, generate_synthetic


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """(train dataset, dev dataset, vocabulary) for quick end-to-end runs."""
    root = tmp_path_factory.mktemp("tiny")
    train = Dataset(generate_synthetic(SyntheticSpec(dialogs=6, turns=2), 3, root / "train"))
    dev = Dataset(generate_synthetic(SyntheticSpec(dialogs=3, turns=2), 4, root / "dev"))
    vocab = build_vocab([train.root / "dialogs.jsonl", dev.root / "dialogs.jsonl"])
    return train, dev, vocab


@pytest.fixture
def small_config():
    return RunConfig(d_model=8, heads=2, d_ff=16, vct_depth=1, dst_depth=1, answer_depth=1, qae_depth=1,
                     batch_size=4, epochs=1, video_width=16, audio_width=16)
