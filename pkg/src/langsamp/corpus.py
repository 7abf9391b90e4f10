"""Language-script tagged corpora: registry, vocabulary, chunking and sampling."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PROTECTED_IDS = frozenset({PAD, CLS, SEP})

_FILENAME = re.compile(r"^([A-Za-z]+)_([A-Za-z]+)\.txt$")


class CorpusError(ValueError):
    """Malformed corpus directory, file name or content."""


@dataclass(frozen=True)
class RegistryEntry:
    lang: str
    script: str
    sentences: int
    tokens: int

    @property
    def key(self) -> str:
        return f"{self.lang}_{self.script}"


@dataclass
class LanguageScriptRegistry:
    entries: list[RegistryEntry]
    lang_ids: dict[str, int] = field(default_factory=dict)
    script_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise CorpusError("registry needs at least one language-script entry")
        if not self.lang_ids:
            for e in self.entries:
                self.lang_ids.setdefault(e.lang, len(self.lang_ids))
                self.script_ids.setdefault(e.script, len(self.script_ids))
        for e in self.entries:
            if e.lang not in self.lang_ids or e.script not in self.script_ids:
                raise CorpusError(f"entry {e.key} does not resolve to registered ids")

    @property
    def num_languages(self) -> int:
        return len(self.lang_ids)

    @property
    def num_scripts(self) -> int:
        return len(self.script_ids)

    def ids(self, index: int) -> tuple[int, int]:
        e = self.entries[index]
        return self.lang_ids[e.lang], self.script_ids[e.script]

    def index_of(self, key: str) -> int:
        for i, e in enumerate(self.entries):
            if e.key == key:
                return i
        raise KeyError(f"unknown language-script {key!r}")

    def lang_id(self, code: str) -> int:
        """Resolve a language code, or a ``lang_Script`` key, to its language id."""
        if code in self.lang_ids:
            return self.lang_ids[code]
        m = _FILENAME.match(code + ".txt")
        if m and m.group(1).lower() in self.lang_ids:
            return self.lang_ids[m.group(1).lower()]
        raise KeyError(f"unknown language {code!r}")

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"lang": e.lang, "script": e.script, "sentences": e.sentences, "tokens": e.tokens}
                for e in self.entries
            ],
            "lang_ids": self.lang_ids,
            "script_ids": self.script_ids,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageScriptRegistry":
        return cls(
            entries=[RegistryEntry(**e) for e in d["entries"]],
            lang_ids=dict(d["lang_ids"]),
            script_ids=dict(d["script_ids"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LanguageScriptRegistry":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def parse_corpus_filename(name: str) -> tuple[str, str]:
    m = _FILENAME.match(name)
    if not m:
        raise CorpusError(f"malformed corpus file name {name!r} (expected <lang>_<Script>.txt)")
    return m.group(1).lower(), m.group(2).capitalize()


def corpus_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CorpusError(f"corpus directory {str(d)!r} does not exist")
    files = sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise CorpusError(f"corpus directory {str(d)!r} is empty")
    return files


def read_sentences(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def register_corpus(directory) -> LanguageScriptRegistry:
    return register_texts({p.name: read_sentences(p) for p in corpus_files(directory)})


def register_texts(texts: Mapping[str, Sequence[str]]) -> LanguageScriptRegistry:
    """Registry from ``{"<lang>_<script>[.txt]": sentences}`` in sorted key order."""
    entries = []
    seen: dict[tuple[str, str], str] = {}
    for name in sorted(texts):
        lang, script = parse_corpus_filename(name if name.endswith(".txt") else name + ".txt")
        if (lang, script) in seen:
            raise CorpusError(f"{name} duplicates {seen[(lang, script)]} after case normalization")
        seen[(lang, script)] = name
        sentences = texts[name]
        entries.append(
            RegistryEntry(lang, script, len(sentences), sum(len(s.split()) for s in sentences))
        )
    if not entries:
        raise CorpusError("no language-script texts given")
    return LanguageScriptRegistry(entries)


def temperature_weights(counts: Sequence[float], temperature: float = 0.3) -> np.ndarray:
    """Multinomial weights ``c_i**T / sum_j c_j**T``; T < 1 flattens toward uniform."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("temperature_weights: counts must be a non-empty vector")
    if not np.all(c > 0) or not np.all(np.isfinite(c)):
        raise ValueError("temperature_weights: counts must be positive and finite")
    if not 0 < temperature <= 1:
        raise ValueError(f"temperature must be in (0, 1], got {temperature}")
    # log-space keeps huge counts from overflowing
    logw = temperature * np.log(c)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def sample_language_script(registry, weights, rng: np.random.Generator) -> tuple[int, int]:
    return registry.ids(sample_entry(weights, rng, len(registry.entries)))


def sample_entry(weights, rng: np.random.Generator, n_entries: int | None = None) -> int:
    w = np.asarray(weights, dtype=np.float64)
    if n_entries is not None and w.shape != (n_entries,):
        raise ValueError(f"{w.size} weights for {n_entries} registry entries")
    cdf = np.cumsum(w)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), w.size - 1))


@dataclass
class Vocab:
    tokens: list[str]
    max_size: int

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise CorpusError("vocab must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocab contains duplicate tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, sentence: str) -> list[int]:
        # special surface strings in raw text are ordinary (unknown) words
        ids = []
        for tok in sentence.split():
            i = self._index.get(tok, UNK)
            ids.append(UNK if i < len(SPECIAL_TOKENS) else i)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise IndexError(f"token id {i} out of range for vocab of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"max_size": self.max_size, "tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tokens=list(d["tokens"]), max_size=int(d["max_size"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_text(vocab: Vocab, sentence: str) -> list[int]:
    return vocab.encode(sentence)


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


def build_vocab(sentences: Iterable[str], max_size: int = 30000, min_frequency: int = 1) -> Vocab:
    """Frequency-ranked whitespace vocabulary; ties go to the lexicographically smaller token."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)} to leave room for specials")
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    freq: Counter[str] = Counter()
    for s in sentences:
        freq.update(s.split())
    if not freq:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(
        (t for t, c in freq.items() if c >= min_frequency and t not in SPECIAL_TOKENS),
        key=lambda t: (-freq[t], t),
    )
    tokens = list(SPECIAL_TOKENS) + ranked[: max_size - len(SPECIAL_TOKENS)]
    return Vocab(tokens=tokens, max_size=max_size)


def build_vocab_from_dir(directory, max_size: int = 30000, min_frequency: int = 1) -> Vocab:
    def sentences():
        for path in corpus_files(directory):
            parse_corpus_filename(path.name)
            yield from read_sentences(path)

    return build_vocab(sentences(), max_size, min_frequency)


@dataclass(frozen=True)
class TrainingInstance:
    token_ids: np.ndarray
    lang_id: int
    script_id: int


def chunk_ids(encoded: Sequence[Sequence[int]], chunk_len: int = 512) -> list[np.ndarray]:
    """``[CLS] s1 [SEP] s2 [SEP] ...`` split into ``chunk_len`` pieces, last one PAD-padded.

    A final ``[SEP]`` that would spill alone into a new chunk is dropped.
    """
    if chunk_len < 8:
        raise ValueError("chunk_len must be >= 8")
    stream = [CLS]
    for ids in encoded:
        if not ids:
            continue
        stream.extend(ids)
        stream.append(SEP)
    if len(stream) == 1:
        return []
    if len(stream) % chunk_len == 1:
        stream.pop()  # a tail chunk holding only [SEP] has nothing to predict
    n = math.ceil(len(stream) / chunk_len)
    out = np.full(n * chunk_len, PAD, dtype=np.int64)
    out[: len(stream)] = stream
    return list(out.reshape(n, chunk_len))


def make_chunks(
    registry: LanguageScriptRegistry,
    vocab: Vocab,
    sentences_by_entry: Sequence[Sequence[str]],
    chunk_len: int = 512,
) -> Iterator[TrainingInstance]:
    """Monolingual training instances, entry by entry in registry order."""
    if len(sentences_by_entry) != len(registry.entries):
        raise ValueError("one sentence list per registry entry is required")
    for idx, sentences in enumerate(sentences_by_entry):
        lang_id, script_id = registry.ids(idx)
        for chunk in chunk_ids([vocab.encode(s) for s in sentences], chunk_len):
            yield TrainingInstance(chunk, lang_id, script_id)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T) int64
    lang_ids: np.ndarray  # (B,)
    script_ids: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def split(self, parts: int) -> list["Batch"]:
        size = len(self) // parts
        return [
            Batch(
                self.token_ids[i * size : (i + 1) * size],
                self.lang_ids[i * size : (i + 1) * size],
                self.script_ids[i * size : (i + 1) * size],
            )
            for i in range(parts)
        ]


def stack_instances(instances: Sequence[TrainingInstance]) -> Batch:
    return Batch(
        np.stack([inst.token_ids for inst in instances]),
        np.array([inst.lang_id for inst in instances], dtype=np.int64),
        np.array([inst.script_id for inst in instances], dtype=np.int64),
    )


@dataclass
class Corpus:
    """Chunked train/validation instances per registry entry."""

    registry: LanguageScriptRegistry
    vocab: Vocab
    train_chunks: list[list[np.ndarray]]
    val_chunks: list[list[np.ndarray]]
    chunk_len: int

    def validation_batch(self, max_instances: int | None = None) -> Batch | None:
        instances = [
            TrainingInstance(c, *self.registry.ids(i))
            for i, chunks in enumerate(self.val_chunks)
            for c in chunks
        ]
        if max_instances is not None:
            instances = instances[:max_instances]
        return stack_instances(instances) if instances else None


def build_corpus(
    registry: LanguageScriptRegistry,
    vocab: Vocab,
    sentences_by_entry: Sequence[Sequence[str]],
    chunk_len: int = 512,
    val_fraction: float = 0.0,
) -> Corpus:
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    train, val = [], []
    for entry, sentences in zip(registry.entries, sentences_by_entry):
        sentences = list(sentences)
        n_val = math.ceil(len(sentences) * val_fraction) if val_fraction and len(sentences) > 1 else 0
        cut = len(sentences) - n_val
        tr = chunk_ids([vocab.encode(s) for s in sentences[:cut]], chunk_len)
        if not tr:
            raise CorpusError(f"entry {entry.key} yields no training tokens")
        train.append(tr)
        val.append(chunk_ids([vocab.encode(s) for s in sentences[cut:]], chunk_len))
    return Corpus(registry, vocab, train, val, chunk_len)


def load_corpus(
    directory,
    vocab: Vocab | None = None,
    chunk_len: int = 512,
    val_fraction: float = 0.0,
    max_vocab: int = 30000,
    min_frequency: int = 1,
) -> Corpus:
    texts = {p.name: read_sentences(p) for p in corpus_files(directory)}
    return corpus_from_texts(texts, vocab, chunk_len, val_fraction, max_vocab, min_frequency)


def corpus_from_texts(
    texts: Mapping[str, Sequence[str]],
    vocab: Vocab | None = None,
    chunk_len: int = 512,
    val_fraction: float = 0.0,
    max_vocab: int = 30000,
    min_frequency: int = 1,
) -> Corpus:
    registry = register_texts(texts)
    sentences = [list(texts[k]) for k in sorted(texts)]
    if vocab is None:
        vocab = build_vocab((s for group in sentences for s in group), max_vocab, min_frequency)
    return build_corpus(registry, vocab, sentences, chunk_len, val_fraction)


class BatchSampler:
    """Draws mixed-language batches of monolingual instances.

    Each instance's language-script is sampled independently from the
    temperature weights; an entry's chunks are consumed in order and wrap
    around once exhausted.
    """

    def __init__(self, corpus: Corpus, temperature: float = 0.3, seed: int = 0,
                 rng: np.random.Generator | None = None):
        self.corpus = corpus
        self.temperature = temperature
        counts = [max(e.tokens, 1) for e in corpus.registry.entries]
        self.weights = temperature_weights(counts, temperature)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.cursors = [0] * len(corpus.train_chunks)

    def next_instance(self) -> TrainingInstance:
        idx = sample_entry(self.weights, self.rng, len(self.cursors))
        chunks = self.corpus.train_chunks[idx]
        chunk = chunks[self.cursors[idx] % len(chunks)]
        self.cursors[idx] = (self.cursors[idx] + 1) % len(chunks)
        return TrainingInstance(chunk, *self.corpus.registry.ids(idx))

    def next_batch(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return stack_instances([self.next_instance() for _ in range(batch_size)])

    def state_dict(self) -> dict:
        return {"cursors": list(self.cursors), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.cursors = list(state["cursors"])
        self.rng.bit_generator.state = state["rng"]


def next_batch(sampler: BatchSampler, batch_size: int) -> Batch:
    return sampler.next_batch(batch_size)
