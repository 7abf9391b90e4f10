"""scikit-learn style wrappers so the pipeline composes with sklearn tooling."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import CheckpointManifest, save_checkpoint
from .corpus import corpus_from_texts
from .evaluation import embed_sentences, pca_project
from .model import ModelConfig
from .training import TrainConfig, finetune_classifier, train


def _check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("expected a sequence of sentences, got a single string")
    texts = [str(x) for x in X]
    if not texts:
        raise ValueError("empty input")
    return texts


class LangSAMPEncoder(BaseEstimator, TransformerMixin):
    """MLM pretraining on ``(sentence, "<lang>_<Script>")`` pairs.

    ``fit(X, y)`` takes sentences and their language-script labels; the
    labels only feed the LM-head embeddings. ``transform(X)`` needs no
    labels and returns mean-pooled sentence embeddings from ``layer``.
    """

    def __init__(self, hidden_dim=64, num_layers=2, num_heads=2, ffn_dim=128, chunk_len=32,
                 use_lang_emb=True, use_script_emb=True, init_std=0.05, steps=1000,
                 micro_batch=32, grad_accumulation=1, lr=1e-3, weight_decay=0.01,
                 temperature=0.3, mask_rate=0.15, max_vocab=30000, min_frequency=1,
                 layer=None, random_state=0):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.chunk_len = chunk_len
        self.use_lang_emb = use_lang_emb
        self.use_script_emb = use_script_emb
        self.init_std = init_std
        self.steps = steps
        self.micro_batch = micro_batch
        self.grad_accumulation = grad_accumulation
        self.lr = lr
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.mask_rate = mask_rate
        self.max_vocab = max_vocab
        self.min_frequency = min_frequency
        self.layer = layer
        self.random_state = random_state

    def fit(self, X, y):
        texts = _check_texts(X)
        labels = [str(v) for v in y]
        if len(labels) != len(texts):
            raise ValueError(f"{len(texts)} sentences but {len(labels)} labels")
        grouped: dict[str, list[str]] = defaultdict(list)
        for text, label in zip(texts, labels):
            grouped[label].append(text)
        corpus = corpus_from_texts(grouped, chunk_len=self.chunk_len, max_vocab=self.max_vocab,
                                   min_frequency=self.min_frequency)
        seed = int(self.random_state or 0)
        self.config_ = ModelConfig(
            vocab_size=len(corpus.vocab), hidden_dim=self.hidden_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_dim=self.ffn_dim, max_seq_len=self.chunk_len,
            num_languages=corpus.registry.num_languages, num_scripts=corpus.registry.num_scripts,
            use_lang_emb=self.use_lang_emb, use_script_emb=self.use_script_emb,
            init_std=self.init_std, seed=seed,
        )
        tc = TrainConfig(steps=self.steps, micro_batch=self.micro_batch,
                         grad_accumulation=self.grad_accumulation, checkpoint_every=self.steps,
                         lr=self.lr, weight_decay=self.weight_decay, temperature=self.temperature,
                         mask_rate=self.mask_rate, seed=seed)
        result = train(tc, self.config_, corpus)
        self.params_ = result.params
        self.vocab_ = corpus.vocab
        self.registry_ = corpus.registry
        self.metrics_ = result.metrics
        self.n_features_out_ = self.hidden_dim
        return self

    def _layer(self) -> int:
        return self.num_layers if self.layer is None else self.layer

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed_sentences(self.params_, self.config_, self.vocab_, _check_texts(X), self._layer())

    def save(self, path):
        check_is_fitted(self, "params_")
        manifest = CheckpointManifest(config=self.config_, step=len(self.metrics_), meta={
            "vocab": self.vocab_.to_dict(), "registry": self.registry_.to_dict(),
            "chunk_len": self.chunk_len})
        return save_checkpoint(self.params_, manifest, path)


class LangSAMPClassifier(BaseEstimator, ClassifierMixin):
    """Sentence classifier fine-tuned from a fitted ``LangSAMPEncoder``'s encoder."""

    def __init__(self, encoder=None, lr=1e-5, epochs=40, batch_size=16, random_state=0):
        self.encoder = encoder
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        if self.encoder is None:
            raise ValueError("LangSAMPClassifier needs a fitted encoder")
        check_is_fitted(self.encoder, "params_")
        texts = _check_texts(X)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        self.model_ = finetune_classifier(
            self.encoder.params_, self.encoder.config_, texts, codes, len(self.classes_),
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            seed=int(self.random_state or 0), vocab=self.encoder.vocab_,
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.model_.predict(_check_texts(X))]


class EmbeddingPCA(BaseEstimator, TransformerMixin):
    """PCA with a fixed sign convention (largest loading of each axis positive)."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        res = pca_project(X, self.n_components)
        self.components_ = res.components
        self.mean_ = res.mean
        self.explained_variance_ratio_ = res.explained_variance_ratio
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_.T
