import numpy as np
import pytest

from pathlib import Path

from dialtask.corpus import RuleBasedAnnotator, annotate_entities, load_corpus
from dialtask.encoder import EncoderConfig, ReferenceEncoder
from dialtask.trainer import vocab_from_corpus

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def sample_corpus():
    return load_corpus(DATA / "sample_corpus.jsonl")


@pytest.fixture(scope="session")
def annotated_corpus(sample_corpus):
    return annotate_entities(sample_corpus, RuleBasedAnnotator())


@pytest.fixture(scope="session")
def vocab(sample_corpus):
    return vocab_from_corpus(sample_corpus)


@pytest.fixture(scope="session")
def small_encoder(vocab):
    return ReferenceEncoder(
        EncoderConfig(d_model=32, n_layers=2, n_heads=2, max_len=96), vocab, seed=0
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
