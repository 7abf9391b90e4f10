"""Embedding-space analyses: retrieval, centred similarity, donor choice and PCA."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .corpus import CLS, PAD, SEP, Vocab, corpus_files, parse_corpus_filename, read_sentences
from .model import ModelConfig, Params, hidden_at_layer

logger = logging.getLogger(__name__)

DEFAULT_LAYER = 8


class EvaluationError(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LANGSAMP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class SentenceEmbedding:
    vector: np.ndarray
    layer: int
    lang_id: int | None = None
    script_id: int | None = None


def _check_layer(layer: int, config: ModelConfig) -> None:
    if not 0 <= layer <= config.num_layers:
        raise EvaluationError(f"layer {layer} outside [0, {config.num_layers}]")


def sentence_embedding(params: Params, config: ModelConfig, token_ids: Sequence[int],
                       layer: int = DEFAULT_LAYER, lang_id: int | None = None,
                       script_id: int | None = None) -> SentenceEmbedding:
    """Mean of the layer's activations over non-PAD positions.

    ``lang_id``/``script_id`` are carried along as provenance only.
    """
    _check_layer(layer, config)
    ids = np.asarray(token_ids, dtype=np.int64)
    keep = ids != PAD
    if not keep.any():
        raise EvaluationError("sentence has no non-PAD tokens")
    acts = hidden_at_layer(ids, params, config, layer)
    return SentenceEmbedding(acts[keep].mean(axis=0), layer, lang_id, script_id)


def sentence_ids(vocab: Vocab, sentence: str, max_len: int) -> list[int]:
    ids = [CLS, *vocab.encode(sentence), SEP]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [SEP]
    return ids


def embed_sentences(params: Params, config: ModelConfig, vocab: Vocab, sentences: Sequence[str],
                    layer: int = DEFAULT_LAYER, batch_size: int = 64) -> np.ndarray:
    """(N, D) mean-pooled embeddings; batches are padded and PAD keys masked."""
    _check_layer(layer, config)
    seqs = [sentence_ids(vocab, s, config.max_seq_len) for s in sentences]

    def run(start: int) -> np.ndarray:
        chunk = seqs[start : start + batch_size]
        width = max(len(s) for s in chunk)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for i, s in enumerate(chunk):
            ids[i, : len(s)] = s
        acts = hidden_at_layer(ids, params, config, layer)
        keep = (ids != PAD)[:, :, None]
        return (acts * keep).sum(axis=1) / keep.sum(axis=1)

    starts = range(0, len(seqs), batch_size)
    if not seqs:
        return np.zeros((0, config.hidden_dim))
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EvaluationError(f"zero-norm {what} embedding")
    return x / norms


def retrieval_ranks(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each query's gold target under cosine similarity.

    Ties are broken toward the lower target index.
    """
    q = _unit_rows(queries, "query")
    t = _unit_rows(targets, "target")
    if q.shape != t.shape:
        raise EvaluationError(f"queries {q.shape} and targets {t.shape} are not aligned")
    sim = q @ t.T
    gold = np.diag(sim)[:, None]
    idx = np.arange(len(q))
    ahead = (sim > gold) | ((sim == gold) & (idx[None, :] < idx[:, None]))
    return ahead.sum(axis=1)


def retrieval_topk(queries, targets, k: int = 10) -> float:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    ranks = retrieval_ranks(queries, targets)
    return float((ranks < k).mean()) if ranks.size else 0.0


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"labels": self.labels, "values": self.values.tolist(), "skipped_pairs": self.skipped}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimilarityMatrix":
        return cls(list(d["labels"]), np.asarray(d["values"], dtype=np.float64), int(d.get("skipped_pairs", 0)))

    def pairs(self) -> dict[tuple[str, str], float]:
        out = {}
        for i, a in enumerate(self.labels):
            for j in range(i + 1, len(self.labels)):
                out[(a, self.labels[j])] = float(self.values[i, j])
        return out


def center(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    return e - e.mean(axis=0, keepdims=True)


def centered_pairwise_cosine(embeddings: Mapping[str, np.ndarray]) -> SimilarityMatrix:
    """Mean cosine over aligned sentence pairs after subtracting each language's centroid.

    Pairs where either centred vector has zero norm are skipped and counted.
    """
    labels = list(embeddings)
    mats = [center(embeddings[k]) for k in labels]
    n = mats[0].shape[0] if mats else 0
    if n < 2 or any(m.shape != mats[0].shape for m in mats):
        raise EvaluationError("every language needs the same number (>= 2) of aligned sentences")
    norms = [np.linalg.norm(m, axis=1) for m in mats]
    K = len(labels)
    values = np.eye(K)
    skipped = 0
    for i in range(K):
        for j in range(i + 1, K):
            ok = (norms[i] > 0) & (norms[j] > 0)
            skipped += int((~ok).sum())
            if not ok.any():
                values[i, j] = values[j, i] = np.nan
                continue
            cos = (mats[i][ok] * mats[j][ok]).sum(axis=1) / (norms[i][ok] * norms[j][ok])
            values[i, j] = values[j, i] = cos.mean()
    if skipped:
        logger.warning("skipped %d zero-norm centred pairs", skipped)
    return SimilarityMatrix(labels, values, skipped)


@dataclass
class ImprovementMatrix:
    labels: list[str]
    values: np.ndarray  # percent; NaN where undefined
    undefined: np.ndarray  # bool

    def to_dict(self) -> dict:
        vals = [[None if u else float(v) for v, u in zip(row, urow)]
                for row, urow in zip(self.values, self.undefined)]
        return {"labels": self.labels, "values": vals}


def similarity_improvement(base: SimilarityMatrix, model: SimilarityMatrix) -> ImprovementMatrix:
    """Entrywise ``100 * (model - base) / |base|``; near-zero baselines are flagged undefined."""
    if base.labels != model.labels:
        raise EvaluationError("similarity matrices have different labels")
    b, m = base.values, model.values
    undefined = ~(np.abs(b) >= 1e-9)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(undefined, np.nan, 100.0 * (m - b) / np.abs(b))
    np.fill_diagonal(pct, 0.0)
    np.fill_diagonal(undefined, False)
    return ImprovementMatrix(list(base.labels), pct, undefined)


def cosine_table(table: np.ndarray) -> np.ndarray:
    unit = _unit_rows(table, "language")
    return unit @ unit.T


def donor_select(lang_table: np.ndarray, lang_codes: Sequence[str], target: str,
                 donors: Sequence[str]) -> tuple[str, dict[str, float]]:
    """Donor whose language-embedding row is most cosine-similar to the target's.

    ``lang_codes[i]`` names row ``i``. The target itself is never eligible;
    ties go to the donor registered first.
    """
    index = {c: i for i, c in enumerate(lang_codes)}
    for code in (target, *donors):
        if code not in index:
            raise KeyError(f"unknown language code {code!r}")
    if not donors:
        raise EvaluationError("donor set is empty")
    table = np.asarray(lang_table, dtype=np.float64)
    t = table[index[target]]
    t_norm = np.linalg.norm(t)
    if t_norm == 0:
        raise EvaluationError(f"zero-norm embedding for target {target!r}")
    sims: dict[str, float] = {}
    for code in sorted(set(donors), key=index.__getitem__):
        row = table[index[code]]
        n = np.linalg.norm(row)
        if n == 0:
            raise EvaluationError(f"zero-norm embedding for donor {code!r}")
        sims[code] = float(row @ t / (n * t_norm))
    eligible = [c for c in sims if c != target]
    if not eligible:
        raise EvaluationError("no eligible donor once the target is excluded")
    best = eligible[0]
    for c in eligible[1:]:
        if sims[c] > sims[best]:
            best = c
    return best, sims


def lang_codes_from_registry(registry) -> list[str]:
    codes = [""] * registry.num_languages
    for code, i in registry.lang_ids.items():
        codes[i] = code
    return codes


@dataclass
class PCAResult:
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    all_ratios: np.ndarray = field(repr=False, default=None)


def pca_project(vectors, out_dims: int = 2) -> PCAResult:
    """Project rows onto the top principal axes of the row-centred matrix.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise EvaluationError("pca needs a 2-d array with at least two rows")
    K, D = X.shape
    if not 1 <= out_dims <= min(K - 1, D):
        raise EvaluationError(f"out_dims must be in [1, {min(K - 1, D)}]")
    mu = X.mean(axis=0)
    Xc = X - mu
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2
    if var.sum() <= 0 or np.allclose(Xc, 0):
        raise EvaluationError("all rows identical: zero variance")
    ratios = var / var.sum()
    comps = vt[:out_dims].copy()
    for i, row in enumerate(comps):
        if row[np.argmax(np.abs(row))] < 0:
            comps[i] = -row
    return PCAResult(Xc @ comps.T, ratios[:out_dims], comps, mu, ratios[: min(K - 1, D)])


def pca_svg(coords: np.ndarray, labels: Sequence[str], title: str = "") -> str:
    """Labelled scatter of 2-d coordinates on a fixed 800x600 canvas."""
    W, H, pad = 800, 600, 60
    xy = np.asarray(coords, dtype=np.float64)[:, :2]
    if xy.shape[1] == 1:
        xy = np.column_stack([xy[:, 0], np.zeros(len(xy))])
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    px = pad + (xy[:, 0] - lo[0]) / span[0] * (W - 2 * pad)
    py = H - pad - (xy[:, 1] - lo[1]) / span[1] * (H - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{W // 2}" y="30" text-anchor="middle" font-size="18">{escape(title)}</text>')
    for x, y, lab in zip(px, py, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="12">{escape(str(lab))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def load_parallel(directory, max_pairs: int | None = None) -> dict[str, list[str]]:
    """``<lang>_<script>.txt`` files with line i aligned across files."""
    out: dict[str, list[str]] = {}
    for path in corpus_files(directory):
        lang, script = parse_corpus_filename(path.name)
        out[f"{lang}_{script}"] = read_sentences(path)
    lengths = {len(v) for v in out.values()}
    if len(lengths) != 1:
        raise EvaluationError(f"parallel files differ in length: {sorted(lengths)}")
    if max_pairs is not None:
        out = {k: v[:max_pairs] for k, v in out.items()}
    return out


def crosslingual_retrieval(params: Params, config: ModelConfig, vocab: Vocab,
                           parallel: Mapping[str, Sequence[str]], layer: int, k: int = 1,
                           source: str | None = None) -> float:
    """Mean top-k accuracy retrieving from ``source`` (default: first key) into every other key."""
    keys = list(parallel)
    source = keys[0] if source is None else source
    q = embed_sentences(params, config, vocab, parallel[source], layer)
    accs = [retrieval_topk(q, embed_sentences(params, config, vocab, parallel[key], layer), k)
            for key in keys if key != source]
    return float(np.mean(accs))


def retrieval_table(params: Params, config: ModelConfig, vocab: Vocab,
                    parallel: Mapping[str, Sequence[str]], layer: int, k: int = 10,
                    source: str | None = None) -> dict[str, float]:
    keys = list(parallel)
    source = keys[0] if source is None else source
    if source not in parallel:
        raise KeyError(f"unknown source language {source!r}")
    q = embed_sentences(params, config, vocab, parallel[source], layer)
    return {key: retrieval_topk(q, embed_sentences(params, config, vocab, parallel[key], layer), k)
            for key in keys if key != source}


def similarity_from_model(params: Params, config: ModelConfig, vocab: Vocab,
                          parallel: Mapping[str, Sequence[str]], layer: int,
                          n: int = 100) -> SimilarityMatrix:
    embeddings = {key: embed_sentences(params, config, vocab, list(sents)[:n], layer)
                  for key, sents in parallel.items()}
    return centered_pairwise_cosine(embeddings)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


@dataclass
class EvalReport:
    kind: str
    payload: dict
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None

    KINDS = ("retrieval", "similarity", "improvement", "donor", "pca", "ablation")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown report kind {self.kind!r}")

    def to_json(self) -> str:
        doc = {"kind": self.kind, "payload": _jsonable(self.payload),
               "config": _jsonable(self.config), "checkpoint": self.checkpoint}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["kind"], d["payload"], d.get("config") or {}, d.get("checkpoint"))
