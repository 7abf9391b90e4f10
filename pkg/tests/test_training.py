import json
import math
import warnings

import numpy as np
import pytest

from langsamp.checkpoint import load_checkpoint
from langsamp.corpus import CLS, MASK, PAD, SEP, Batch, corpus_from_texts
from langsamp.model import init_params, strip_tables
from langsamp.training import (
    VARIANTS, MaskedBatch, MaskPolicy, TrainConfig, TrainingError, ablation_run,
    finetune_classifier, mask_tokens, mlm_loss, mlm_loss_and_grads, train,
)

from conftest import random_batch, toy_config


def _tiny_corpus(chunk_len=16):
    return corpus_from_texts({
        "aaa_Latn": ["a b c d e f g h", "b c d a", "h g f e d"] * 6,
        "bbb_Cyrl": ["p q r s t", "s t u v", "v u p q"] * 6,
    }, chunk_len=chunk_len, val_fraction=0.2)


def _cfg_for(corpus, **kw):
    base = dict(vocab_size=len(corpus.vocab), max_seq_len=corpus.chunk_len,
                num_languages=corpus.registry.num_languages, num_scripts=corpus.registry.num_scripts)
    base.update(kw)
    return toy_config(**base)


def _tc(**kw):
    base = dict(steps=6, micro_batch=4, grad_accumulation=1, checkpoint_every=3, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- masking ------------------------------------------------------------------

def test_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(mask_rate=0.0)
    with pytest.raises(ValueError):
        MaskPolicy(mask_prob=0.5, random_prob=0.1, keep_prob=0.1)


def test_masking_statistics(rng):
    ids = rng.integers(5, 1000, size=(200, 100))
    ids[:, 0], ids[:, -1] = CLS, SEP
    ids[:, 60:62] = PAD
    batch = Batch(ids, np.zeros(200, int), np.zeros(200, int))
    mb = mask_tokens(batch, MaskPolicy(), rng, 1000)
    eligible = ~np.isin(ids, [PAD, CLS, SEP])
    n = eligible.sum()
    assert n >= 10_000
    assert 0.13 <= mb.mask[eligible].mean() <= 0.17
    assert not mb.mask[~eligible].any()
    m = mb.num_masked
    # a random replacement equals the original with probability 1/995
    hit = 1 / (1000 - 5)
    sel_in, sel_orig = mb.inputs[mb.mask], ids[mb.mask]
    for count, p in [((sel_in == MASK).sum(), 0.8),
                     (((sel_in != MASK) & (sel_in != sel_orig)).sum(), 0.1 * (1 - hit)),
                     ((sel_in == sel_orig).sum(), 0.1 + 0.1 * hit)]:
        assert abs(count - p * m) <= 3 * math.sqrt(m * p * (1 - p))
    assert (mb.inputs[~mb.mask] == ids[~mb.mask]).all()
    assert (mb.targets == ids).all()


def test_random_replacements_are_ordinary_tokens(rng):
    ids = np.full((50, 50), 9)
    mb = mask_tokens(Batch(ids, np.zeros(50, int), np.zeros(50, int)),
                     MaskPolicy(mask_prob=0.0, random_prob=1.0, keep_prob=0.0), rng, 20)
    replaced = mb.inputs[mb.mask]
    assert replaced.min() >= 5 and replaced.max() < 20


def test_forced_single_mask(rng):
    ids = np.array([[CLS, 7, 8, 9, SEP, PAD]] * 5)
    mb = mask_tokens(Batch(ids, np.zeros(5, int), np.zeros(5, int)), MaskPolicy(mask_rate=1e-9), rng, 50)
    assert (mb.mask.sum(axis=1) == 1).all()
    assert mb.mask[:, 1:4].all(axis=1).sum() == 0 and mb.mask[:, 1:4].any(axis=1).all()


def test_instance_without_maskable_positions(rng):
    ids = np.array([[CLS, SEP, PAD, PAD]])
    with pytest.raises(ValueError):
        mask_tokens(Batch(ids, np.zeros(1, int), np.zeros(1, int)), MaskPolicy(), rng, 50)


# -- loss ---------------------------------------------------------------------

def _masked(rng, batch=3, seq=16, vocab=50):
    return mask_tokens(random_batch(rng, batch, seq, vocab), MaskPolicy(), rng, vocab)


def test_untrained_loss_near_log_v():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = toy_config(seed=seed)
        loss = mlm_loss(init_params(cfg), _masked(rng, batch=8), cfg)
        assert abs(loss - math.log(50)) <= 0.1 * math.log(50)


def test_uniform_logits_give_log_v_exactly(toy, rng):
    cfg, p = toy
    p = {k: (np.zeros_like(v) if k in ("head.weight", "head.bias", "lang_emb", "script_emb") else v)
         for k, v in p.items()}
    ids = rng.integers(5, 50, size=(1, 16))
    mask = np.zeros_like(ids, dtype=bool)
    mask[0, 4] = True
    mb = MaskedBatch(ids, ids, mask, np.array([0]), np.array([0]))
    assert mlm_loss(p, mb, cfg) == pytest.approx(math.log(50), abs=1e-6)


def test_empty_mask_is_an_error(toy):
    cfg, p = toy
    ids = np.full((1, 4), 7)
    with pytest.raises(ValueError):
        mlm_loss(p, MaskedBatch(ids, ids, np.zeros_like(ids, bool), np.array([0]), np.array([0])), cfg)


def test_duplicate_and_order_invariance(toy, rng):
    cfg, p = toy
    mb = _masked(rng, batch=4)
    base = mlm_loss(p, mb, cfg)
    twice = mb.select(np.r_[np.arange(4), np.arange(4)])
    assert mlm_loss(p, twice, cfg) == pytest.approx(base, abs=1e-6)
    assert mlm_loss(p, mb.select(rng.permutation(4)), cfg) == pytest.approx(base, abs=1e-6)


def test_split_gradients_sum_to_full(toy, rng):
    cfg, p = toy
    p64 = {k: v.astype(np.float64) for k, v in p.items()}
    mb = _masked(rng, batch=4)
    full_loss, full = mlm_loss_and_grads(p64, mb, cfg)
    parts = [mlm_loss_and_grads(p64, part, cfg, denominator=mb.num_masked) for part in mb.split(2)]
    assert sum(l for l, _ in parts) == pytest.approx(full_loss, abs=1e-12)
    for k in full:
        np.testing.assert_allclose(parts[0][1][k] + parts[1][1][k], full[k], atol=1e-12)


def test_frozen_tensors_have_no_gradient(toy, rng):
    cfg, p = toy
    _, grads = mlm_loss_and_grads(p, _masked(rng), cfg, frozen=("lang_emb",))
    assert "lang_emb" not in grads and "script_emb" in grads


# -- loop ---------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"steps": 3, "bogus": 1})
    tc = TrainConfig()
    assert (tc.steps, tc.micro_batch, tc.grad_accumulation, tc.checkpoint_every) == (150_000, 32, 8, 5000)
    assert tc.effective_batch == 256 and tc.lr == 5e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_short_training_reduces_loss(seed):
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus, seed=seed, init_std=0.05)
    res = train(_tc(steps=50, micro_batch=8, checkpoint_every=50, seed=seed), cfg, corpus)
    first = np.mean([m["train_loss"] for m in res.metrics[:5]])
    last = np.mean([m["train_loss"] for m in res.metrics[-5:]])
    assert last < first


def test_accumulation_equivalence():
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    a = train(_tc(steps=5, micro_batch=4, grad_accumulation=2), cfg, corpus)
    b = train(_tc(steps=5, micro_batch=8, grad_accumulation=1), cfg, corpus)
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-4)
    for x, y in zip(a.metrics, b.metrics):
        assert x["train_loss"] == pytest.approx(y["train_loss"], abs=1e-5)


def test_metrics_log_and_checkpoints(tmp_path):
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    res = train(_tc(), cfg, corpus, output_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == list(range(1, 7))
    assert set(lines[0]) == {"step", "train_loss", "val_loss", "lr"}
    assert lines[2]["val_loss"] is not None and lines[0]["val_loss"] is None
    assert [p.name for p in res.checkpoints] == ["ckpt_3.lsmp", "ckpt_6.lsmp"]
    _, manifest = load_checkpoint(res.checkpoints[-1])
    assert manifest.step == 6 and manifest.optimizer.step == 6
    assert manifest.meta["vocab"]["tokens"] == corpus.vocab.tokens


def test_train_is_deterministic(tmp_path):
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    train(_tc(), cfg, corpus, output_dir=tmp_path / "a")
    train(_tc(), cfg, corpus, output_dir=tmp_path / "b")
    for name in ("metrics.jsonl", "ckpt_6.lsmp"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_is_bit_exact(tmp_path):
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    tc = _tc(grad_accumulation=2)
    train(tc, cfg, corpus, output_dir=tmp_path / "full")
    train(TrainConfig.from_dict({**tc.to_dict(), "steps": 3}), cfg, corpus, output_dir=tmp_path / "part")
    train(tc, cfg, corpus, output_dir=tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_3.lsmp")
    for name in ("metrics.jsonl", "ckpt_6.lsmp"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_the_step():
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    p = init_params(cfg)
    p["head.bias"][7] = np.inf
    with pytest.raises(TrainingError) as err:
        train(_tc(), cfg, corpus, init=p)
    assert err.value.step == 1 and "step 1" in str(err.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_early_stopping():
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    # a huge learning rate makes validation loss worse after the first evaluation
    res = train(_tc(steps=40, eval_every=1, patience=2, lr=0.5), cfg, corpus)
    assert res.stopped_early and len(res.metrics) < 40
    assert res.best_val_loss == min(m["val_loss"] for m in res.metrics if m["val_loss"] is not None)


def test_model_corpus_mismatch():
    corpus = _tiny_corpus()
    with pytest.raises(ValueError):
        train(_tc(), _cfg_for(corpus, vocab_size=len(corpus.vocab) + 1), corpus)


# -- ablation -----------------------------------------------------------------

def test_ablation_structure():
    corpus = _tiny_corpus()
    cfg = _cfg_for(corpus)
    report = ablation_run(corpus, cfg, _tc(), steps=2)
    assert [r.label for r in report.rows] == ["vanilla", "w-lang", "w-script", "w-both"]
    assert [(r.use_lang_emb, r.use_script_emb) for r in report.rows] == [v[1:] for v in VARIANTS]
    n = {r.label: r.num_params for r in report.rows}
    D, L, S = cfg.hidden_dim, cfg.num_languages, cfg.num_scripts
    assert n["w-lang"] - n["vanilla"] == L * D
    assert n["w-script"] - n["vanilla"] == S * D
    assert n["w-both"] - n["vanilla"] == (L + S) * D
    assert len(report.table().splitlines()) == 5
    assert report.to_dict()["steps"] == 2


def test_ablation_degenerate_tables_are_equivalent():
    corpus = corpus_from_texts({"aaa_Latn": ["a b c d e f", "c d e a b"] * 8}, chunk_len=16, val_fraction=0.2)
    cfg = _cfg_for(corpus, table_init_std=0.0)
    assert (cfg.num_languages, cfg.num_scripts) == (1, 1)
    report = ablation_run(corpus, cfg, _tc(steps=4, frozen=("lang_emb", "script_emb")))
    losses = [r.val_loss for r in report.rows]
    assert max(losses) - min(losses) <= 1e-6


# -- fine-tuning ----------------------------------------------------------------

def _separable(n=24):
    texts = [("a b c a" if i % 2 == 0 else "x y z x") + f" n{i % 3}" for i in range(n)]
    return texts, [i % 2 for i in range(n)]


def _pretrained():
    texts, _ = _separable()
    corpus = corpus_from_texts({"aaa_Latn": texts}, chunk_len=16)
    cfg = _cfg_for(corpus, init_std=0.1)
    return corpus, cfg, init_params(cfg)


def test_finetune_separable_classes():
    corpus, cfg, p = _pretrained()
    texts, labels = _separable()
    clf = finetune_classifier(p, cfg, texts, labels, 2, lr=1e-3, epochs=40, vocab=corpus.vocab)
    assert clf.train_accuracy == 1.0
    assert (clf.predict(texts) == labels).all()


def test_finetune_with_stripped_tables(tmp_path):
    from langsamp.checkpoint import CheckpointManifest, save_checkpoint
    corpus, cfg, p = _pretrained()
    path = save_checkpoint(strip_tables(p), CheckpointManifest(cfg), tmp_path / "s.lsmp")
    q, m = load_checkpoint(path)
    assert "lang_emb" not in q
    texts, labels = _separable()
    clf = finetune_classifier(q, m.config, texts, labels, 2, epochs=2, vocab=corpus.vocab)
    assert len(clf.history) == 2 and all(np.isfinite(clf.history))


def test_finetune_defaults_and_metadata_independence():
    import inspect
    sig = inspect.signature(finetune_classifier).parameters
    assert sig["lr"].default == 1e-5 and sig["batch_size"].default == 16 and sig["epochs"].default == 40
    corpus, cfg, p = _pretrained()
    texts, labels = _separable(8)
    clf = finetune_classifier(p, cfg, texts, labels, 2, epochs=1, vocab=corpus.vocab)
    a = clf.logits([{"text": t, "lang": "aaa", "script": "Latn"} for t in texts])
    b = clf.logits([{"text": t, "lang": "zzz", "script": "Cyrl"} for t in texts])
    assert a.tobytes() == b.tobytes() == clf.logits(texts).tobytes()


def test_finetune_errors():
    corpus, cfg, p = _pretrained()
    with pytest.raises(ValueError):
        finetune_classifier(p, cfg, [], [], 2, vocab=corpus.vocab)
    with pytest.raises(ValueError):
        finetune_classifier(p, cfg, ["a"], [2], 2, vocab=corpus.vocab)
