import numpy as np
import pytest

from langsamp.corpus import CLS, SEP, Batch, corpus_from_texts
from langsamp.model import ModelConfig, init_params
from langsamp.synthetic import make_parallel_corpus


def toy_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=50, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=64,
                max_seq_len=16, num_languages=3, num_scripts=2, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng, batch=3, seq=16, vocab=50, n_lang=3, n_script=2, pad_tail=0) -> Batch:
    ids = rng.integers(5, vocab, size=(batch, seq))
    ids[:, 0] = CLS
    ids[:, -1] = SEP
    if pad_tail:
        ids[-1, seq - pad_tail:] = 0
    return Batch(ids, rng.integers(0, n_lang, size=batch), rng.integers(0, n_script, size=batch))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    cfg = toy_config()
    return cfg, init_params(cfg)


@pytest.fixture(scope="session")
def small_synthetic():
    return make_parallel_corpus(n_langs=2, n_scripts=2, n_lemmas=30, n_sentences=120,
                                n_heldout=20, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_synthetic):
    return corpus_from_texts(small_synthetic.train, chunk_len=16, val_fraction=0.1)


@pytest.fixture
def corpus_dir(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    (d / "eng_Latn.txt").write_text("the cat sat\nthe dog ran far\n", encoding="utf-8")
    (d / "deu_Latn.txt").write_text("die katze sass\nder hund lief\n", encoding="utf-8")
    (d / "rus_Cyrl.txt").write_text("кошка сидела\nсобака бежала далеко\n", encoding="utf-8")
    return d
