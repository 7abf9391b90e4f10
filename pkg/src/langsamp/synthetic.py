"""Synthetic multilingual parallel corpora over a shared latent lemma inventory.

Sentences are lemma sequences from a sparse bigram process. Each language
renders lemma ``k`` through its own bijection onto surface words; the first
``n_shared`` lemmas are written identically by every language sharing a
script (cognates / names). Line ``i`` of every language is the same lemma
sequence, so the output doubles as a parallel evaluation set.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticCorpus:
    train: dict[str, list[str]]
    heldout: dict[str, list[str]]
    lang_script: dict[str, tuple[str, str]]

    def write(self, train_dir, heldout_dir=None) -> None:
        for directory, data in ((train_dir, self.train), (heldout_dir, self.heldout)):
            if directory is None:
                continue
            d = Path(directory)
            d.mkdir(parents=True, exist_ok=True)
            for key, sentences in data.items():
                (d / f"{key}.txt").write_text("\n".join(sentences) + "\n", encoding="utf-8")


def _codes(n: int, prefix: str) -> list[str]:
    letters = string.ascii_lowercase
    return [prefix + letters[i // 26] + letters[i % 26] for i in range(n)]


def make_parallel_corpus(
    n_langs: int = 4,
    n_scripts: int = 2,
    n_lemmas: int = 200,
    n_sentences: int = 2000,
    n_heldout: int = 100,
    min_len: int = 6,
    max_len: int = 12,
    successors: int = 3,
    follow_prob: float = 0.8,
    shared_fraction: float = 0.1,
    seed: int = 0,
) -> SyntheticCorpus:
    if n_langs < 1 or n_scripts < 1 or n_scripts > n_langs:
        raise ValueError("need 1 <= n_scripts <= n_langs")
    rng = np.random.default_rng(seed)
    next_lemmas = np.stack([rng.choice(n_lemmas, size=successors, replace=False) for _ in range(n_lemmas)])
    start = 1.0 / np.arange(1, n_lemmas + 1)
    start = rng.permutation(start / start.sum())

    def sentence() -> list[int]:
        length = int(rng.integers(min_len, max_len + 1))
        seq = [int(rng.choice(n_lemmas, p=start))]
        while len(seq) < length:
            if rng.random() < follow_prob:
                seq.append(int(next_lemmas[seq[-1], rng.integers(successors)]))
            else:
                seq.append(int(rng.integers(n_lemmas)))
        return seq

    lemma_sents = [sentence() for _ in range(n_sentences + n_heldout)]
    n_shared = int(round(shared_fraction * n_lemmas))
    lang_codes = _codes(n_langs, "s")
    script_codes = [c.capitalize() for c in _codes(n_scripts, "z")]
    per_script = -(-n_langs // n_scripts)

    train, heldout, lang_script = {}, {}, {}
    for li, lang in enumerate(lang_codes):
        script = script_codes[min(li // per_script, n_scripts - 1)]
        perm = rng.permutation(n_lemmas)
        words = [
            f"{script.lower()}{k}" if k < n_shared else f"{lang}{script.lower()}{perm[k]}"
            for k in range(n_lemmas)
        ]
        rendered = [" ".join(words[k] for k in s) for s in lemma_sents]
        key = f"{lang}_{script}"
        train[key] = rendered[:n_sentences]
        heldout[key] = rendered[n_sentences:]
        lang_script[key] = (lang, script)
    return SyntheticCorpus(train, heldout, lang_script)
