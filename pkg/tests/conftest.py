import pytest

from scqa.taskgen import GenConfig
from scqa.synthetic import make_synthetic
from scqa.tensor import tune_allocator
from scqa.tokenizer import build_vocab

tune_allocator()


@pytest.fixture(scope="session")
def small_corpus():
    return make_synthetic(n_dialogues=12, n_turns=10, seed=101)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


@pytest.fixture(scope="session")
def desk_gen_config():
    return GenConfig(k=9, m=2, max_len=128, seed=0)
