"""MLM corruption, the language/script-aware MLM loss and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointManifest, checkpoint_name, load_checkpoint, save_checkpoint
from .corpus import CLS, MASK, PAD, PROTECTED_IDS, SEP, SPECIAL_TOKENS, Batch, BatchSampler, Corpus, Vocab
from .model import ModelConfig, Params, count_params, encode_graph, head_weight, init_params, inject, strip_tables
from .numerics import Tensor

logger = logging.getLogger(__name__)

VARIANTS = (
    ("vanilla", False, False),
    ("w-lang", True, False),
    ("w-script", False, True),
    ("w-both", True, True),
)


class TrainingError(RuntimeError):
    """Non-finite loss or an unusable batch during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MaskPolicy:
    mask_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1
    protected: frozenset = PROTECTED_IDS

    def __post_init__(self):
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must be in (0, 1)")
        split = (self.mask_prob, self.random_prob, self.keep_prob)
        if min(split) < 0 or not math.isclose(sum(split), 1.0, abs_tol=1e-12):
            raise ValueError("mask/random/keep probabilities must be non-negative and sum to 1")


@dataclass
class MaskedBatch:
    inputs: np.ndarray  # (B, T) corrupted ids
    targets: np.ndarray  # (B, T) original ids; only read where ``mask`` is set
    mask: np.ndarray  # (B, T) bool, the masked position set
    lang_ids: np.ndarray
    script_ids: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def mask_positions(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.mask]

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    def select(self, rows) -> "MaskedBatch":
        return MaskedBatch(self.inputs[rows], self.targets[rows], self.mask[rows],
                           self.lang_ids[rows], self.script_ids[rows])

    def split(self, parts: int) -> list["MaskedBatch"]:
        size = len(self) // parts
        return [self.select(slice(i * size, (i + 1) * size)) for i in range(parts)]


def mask_tokens(batch: Batch, policy: MaskPolicy, rng: np.random.Generator, vocab_size: int) -> MaskedBatch:
    """BERT-style corruption; every instance ends up with at least one masked position."""
    ids = np.asarray(batch.token_ids, dtype=np.int64)
    protected = np.isin(ids, list(policy.protected))
    eligible = ~protected
    if not eligible.any(axis=1).all():
        bad = int(np.flatnonzero(~eligible.any(axis=1))[0])
        raise ValueError(f"instance {bad} has no maskable positions")
    n_special = len(SPECIAL_TOKENS)
    if vocab_size <= n_special:
        raise ValueError("vocab has no ordinary tokens to draw random replacements from")

    selected = (rng.random(ids.shape) < policy.mask_rate) & eligible
    for row in np.flatnonzero(~selected.any(axis=1)):
        candidates = np.flatnonzero(eligible[row])
        selected[row, candidates[rng.integers(candidates.size)]] = True

    action = rng.random(ids.shape)
    random_ids = rng.integers(n_special, vocab_size, size=ids.shape)
    inputs = ids.copy()
    to_mask = selected & (action < policy.mask_prob)
    to_random = selected & (action >= policy.mask_prob) & (action < policy.mask_prob + policy.random_prob)
    inputs[to_mask] = MASK
    inputs[to_random] = random_ids[to_random]
    return MaskedBatch(inputs, ids, selected, np.asarray(batch.lang_ids), np.asarray(batch.script_ids))


def mlm_loss_graph(tensors: Mapping[str, Tensor], mb: MaskedBatch, config: ModelConfig,
                   denominator: float | None = None) -> Tensor:
    """Summed cross-entropy over masked positions divided by ``denominator`` (default |M|).

    The encoder sees only token ids; each masked row gets its instance's
    language/script vectors added just before the affine LM head.
    """
    n = mb.num_masked
    if n == 0:
        raise ValueError("masked batch has no masked positions")
    states = encode_graph(tensors, mb.inputs, config)
    B, T, D = states[-1].shape
    flat = nx.reshape(states[-1], (B * T, D))
    idx = np.flatnonzero(mb.mask)
    rows = idx // T
    o = inject(nx.gather(flat, idx), mb.lang_ids[rows], mb.script_ids[rows], tensors,
               config.use_lang_emb, config.use_script_emb)
    logits = nx.add(nx.matmul(o, head_weight(tensors)), tensors["head.bias"])
    total = nx.cross_entropy(logits, mb.targets.reshape(-1)[idx], reduction="sum")
    return nx.scale(total, 1.0 / (n if denominator is None else denominator))


def mlm_loss(params: Mapping[str, np.ndarray], mb: MaskedBatch, config: ModelConfig) -> float:
    tensors = {k: Tensor(v) for k, v in params.items()}
    return float(mlm_loss_graph(tensors, mb, config).data)


def mlm_loss_and_grads(params: Mapping[str, np.ndarray], mb: MaskedBatch, config: ModelConfig,
                       denominator: float | None = None,
                       frozen: Sequence[str] = ()) -> tuple[float, dict[str, np.ndarray]]:
    tensors = {k: Tensor(v, requires_grad=k not in frozen) for k, v in params.items()}
    loss = mlm_loss_graph(tensors, mb, config, denominator)
    loss.backward()
    grads = {}
    for k, t in tensors.items():
        if k in frozen:
            continue
        grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data), grads


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 150_000
    micro_batch: int = 32
    grad_accumulation: int = 8
    checkpoint_every: int = 5_000
    eval_every: int | None = None  # defaults to checkpoint_every
    patience: int | None = None  # evaluations without improvement before stopping
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    temperature: float = 0.3
    mask_rate: float = 0.15
    val_max_instances: int | None = 64
    frozen: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "micro_batch", "grad_accumulation", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        object.__setattr__(self, "frozen", tuple(self.frozen))

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accumulation

    @property
    def evaluate_every(self) -> int:
        return self.eval_every or self.checkpoint_every

    def mask_policy(self) -> MaskPolicy:
        return MaskPolicy(mask_rate=self.mask_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: Params
    metrics: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    best_step: int | None = None
    best_val_loss: float | None = None
    best_params: Params | None = None
    stopped_early: bool = False


def _validation_set(corpus: Corpus, tc: TrainConfig, vocab_size: int) -> MaskedBatch | None:
    batch = corpus.validation_batch(tc.val_max_instances)
    if batch is None:
        return None
    return mask_tokens(batch, tc.mask_policy(), np.random.default_rng([tc.seed, 7919]), vocab_size)


def _checkpoint_meta(corpus: Corpus, tc: TrainConfig, tracker: dict) -> dict:
    return {
        "vocab": corpus.vocab.to_dict(),
        "registry": corpus.registry.to_dict(),
        "train_config": tc.to_dict(),
        "chunk_len": corpus.chunk_len,
        "early_stopping": tracker,
    }


def _write_metric(log_path: Path | None, record: dict) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    tc: TrainConfig,
    model_config: ModelConfig,
    corpus: Corpus,
    output_dir=None,
    resume_from=None,
    init: Params | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Effective-batch AdamW loop with periodic validation and checkpoints.

    Each step draws ``micro_batch * grad_accumulation`` instances, masks them
    together, then back-propagates the micro-batches one at a time with the
    loss normalised by the whole step's |M|, so the summed gradient equals
    the single large-batch gradient.
    """
    V = model_config.vocab_size
    if V != len(corpus.vocab):
        raise ValueError(f"model vocab_size {V} != corpus vocab size {len(corpus.vocab)}")
    if corpus.registry.num_languages > model_config.num_languages or \
            corpus.registry.num_scripts > model_config.num_scripts:
        raise ValueError("model has fewer language/script rows than the corpus registry")
    if corpus.chunk_len > model_config.max_seq_len:
        raise ValueError("chunk_len exceeds the model's max_seq_len")

    out = Path(output_dir) if output_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"

    sampler = BatchSampler(corpus, tc.temperature, seed=tc.seed)
    policy = tc.mask_policy()
    hyper = dict(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, weight_decay=tc.weight_decay)
    tracker = {"best_step": None, "best_val_loss": None, "bad_evals": 0}

    if resume_from is not None:
        params, manifest = load_checkpoint(resume_from)
        opt = manifest.optimizer if manifest.optimizer is not None else nx.adamw_init(params, **hyper)
        sampler.load_state_dict(manifest.rng_state)
        tracker = dict(manifest.meta.get("early_stopping", tracker))
        start = manifest.step
        if log_path is not None and log_path.exists():
            # records past the checkpoint belong to the run being replaced
            kept = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["step"] <= start]
            log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    else:
        params = dict(init) if init is not None else init_params(model_config)
        opt = nx.adamw_init(params, **hyper)
        start = 0
        if log_path is not None and log_path.exists():
            log_path.unlink()

    val = _validation_set(corpus, tc, V)
    result = TrainResult(params=params, metrics=[])
    best_params = None

    for step in range(start + 1, tc.steps + 1):
        batch = sampler.next_batch(tc.effective_batch)
        mb = mask_tokens(batch, policy, sampler.rng, V)
        total = mb.num_masked
        loss = 0.0
        grads: dict[str, np.ndarray] = {}
        try:
            for part in mb.split(tc.grad_accumulation):
                if part.num_masked == 0:
                    continue
                part_loss, part_grads = mlm_loss_and_grads(params, part, model_config, total, tc.frozen)
                loss += part_loss
                for k, g in part_grads.items():
                    grads[k] = g if k not in grads else grads[k] + g
        except nx.NumericError as exc:
            raise TrainingError(f"non-finite value in forward/backward ({exc})", step) from exc
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss {loss}", step)
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise TrainingError(f"non-finite gradient for {bad[0]}", step)
        params, opt = nx.adamw_step(params, grads, opt)

        val_loss = None
        if val is not None and (step % tc.evaluate_every == 0 or step == tc.steps):
            val_loss = mlm_loss(params, val, model_config)
            if not math.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss {val_loss}", step)
            if tracker["best_val_loss"] is None or val_loss < tracker["best_val_loss"]:
                tracker.update(best_step=step, best_val_loss=val_loss, bad_evals=0)
                best_params = params
            else:
                tracker["bad_evals"] += 1

        record = {"step": step, "train_loss": loss, "val_loss": val_loss, "lr": tc.lr}
        result.metrics.append(record)
        _write_metric(log_path, record)
        if on_step is not None:
            on_step(record)

        if out is not None and step % tc.checkpoint_every == 0:
            manifest = CheckpointManifest(
                config=model_config, step=step, rng_state=sampler.state_dict(),
                optimizer=opt, meta=_checkpoint_meta(corpus, tc, tracker),
            )
            result.checkpoints.append(save_checkpoint(params, manifest, out / checkpoint_name(step)))

        if tc.patience is not None and tracker["bad_evals"] >= tc.patience:
            logger.info("early stopping at step %d (best step %s)", step, tracker["best_step"])
            result.stopped_early = True
            break

    result.params = params
    result.best_step = tracker["best_step"]
    result.best_val_loss = tracker["best_val_loss"]
    result.best_params = best_params
    return result


@dataclass
class AblationRow:
    label: str
    use_lang_emb: bool
    use_script_emb: bool
    num_params: int
    val_loss: float | None
    retrieval_top1: float | None = None
    retrieval_topk: float | None = None


@dataclass
class AblationReport:
    rows: list[AblationRow]
    steps: int
    seed: int
    # label -> trained params, filled only when ``keep_params`` is set
    params: dict = field(default_factory=dict, repr=False)

    def table(self) -> str:
        lines = [f"{'variant':<10} {'params':>9} {'val_loss':>9} {'top1':>7} {'topk':>7}"]
        for r in self.rows:
            def fmt(x):
                return "-" if x is None else f"{x:.4f}"
            lines.append(f"{r.label:<10} {r.num_params:>9} {fmt(r.val_loss):>9} "
                         f"{fmt(r.retrieval_top1):>7} {fmt(r.retrieval_topk):>7}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "seed": self.seed, "rows": [asdict(r) for r in self.rows]}


def ablation_run(
    corpus: Corpus,
    base_config: ModelConfig,
    tc: TrainConfig,
    steps: int | None = None,
    parallel: Mapping[str, Sequence[str]] | None = None,
    layer: int | None = None,
    k: int = 10,
    keep_params: bool = False,
    variants: Sequence[str] | None = None,
) -> AblationReport:
    """Train the four flag variants on identical batch streams.

    ``variants`` restricts the run to a subset of labels (table order is kept).

    When ``parallel`` (language-script key -> aligned sentences) is given,
    each row also reports retrieval accuracy from the first key to every
    other key, averaged.
    """
    from .evaluation import crosslingual_retrieval

    if steps is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "steps": steps})
    labels = [v[0] for v in VARIANTS]
    if variants is not None and not set(variants) <= set(labels):
        raise ValueError(f"unknown variants {sorted(set(variants) - set(labels))}; choose from {labels}")
    rows, kept = [], {}
    for label, use_lang, use_script in VARIANTS:
        if variants is not None and label not in variants:
            continue
        cfg = base_config.variant(use_lang, use_script)
        res = train(tc, cfg, corpus)
        params = res.best_params if res.best_params is not None else res.params
        top1 = topk = None
        if parallel is not None:
            lay = cfg.num_layers if layer is None else layer
            top1 = crosslingual_retrieval(params, cfg, corpus.vocab, parallel, lay, k=1)
            topk = crosslingual_retrieval(params, cfg, corpus.vocab, parallel, lay, k=k)
        rows.append(AblationRow(label, use_lang, use_script, count_params(params),
                                res.best_val_loss, top1, topk))
        if keep_params:
            kept[label] = params
    return AblationReport(rows, tc.steps, tc.seed, kept)


def pad_sequences(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> np.ndarray:
    longest = max(len(s) for s in seqs)
    if max_len is not None and longest > max_len:
        raise ValueError(f"sequence of length {longest} exceeds {max_len}")
    out = np.full((len(seqs), longest), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def record_ids(record, vocab: Vocab | None) -> list[int]:
    """Token ids for a classifier input; language/script metadata is ignored."""
    if isinstance(record, Mapping):
        record = record["ids"] if "ids" in record else record["text"]
    if isinstance(record, str):
        if vocab is None:
            raise ValueError("text input needs a vocab")
        return [CLS, *vocab.encode(record), SEP]
    return [int(i) for i in record]


@dataclass
class SentenceClassifier:
    params: Params
    config: ModelConfig
    num_classes: int
    vocab: Vocab | None = None
    history: list[float] = field(default_factory=list)
    train_accuracy: float | None = None

    def logits(self, records) -> np.ndarray:
        ids = pad_sequences([record_ids(r, self.vocab) for r in records], self.config.max_seq_len)
        tensors = {k: Tensor(v) for k, v in self.params.items()}
        return _classifier_graph(tensors, ids, self.config).data

    def predict(self, records) -> np.ndarray:
        return self.logits(records).argmax(axis=1)


def _classifier_graph(tensors, ids: np.ndarray, config: ModelConfig) -> Tensor:
    H = encode_graph(tensors, ids, config)[-1]
    B, T, D = H.shape
    cls_rows = nx.gather(nx.reshape(H, (B * T, D)), np.arange(B) * T)
    return nx.add(nx.matmul(cls_rows, tensors["cls.weight"]), tensors["cls.bias"])


def finetune_classifier(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    records: Sequence,
    labels: Sequence[int],
    num_classes: int,
    lr: float = 1e-5,
    epochs: int = 40,
    batch_size: int = 16,
    seed: int = 0,
    vocab: Vocab | None = None,
    weight_decay: float = 0.01,
) -> SentenceClassifier:
    """Sequence classification from the [CLS] position of the encoder output.

    Only encoder tensors are used; the LM head and the language/script
    tables are dropped, so a checkpoint without them works unchanged.
    """
    if len(records) == 0:
        raise ValueError("empty training set")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(records),):
        raise ValueError("one label per record is required")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")

    encoder = {k: np.array(v) for k, v in strip_tables(params).items() if not k.startswith("head.")}
    rng = np.random.default_rng(seed)
    D = config.hidden_dim
    dtype = encoder["tok_emb"].dtype
    encoder["cls.weight"] = (rng.normal(0.0, 1.0, (D, num_classes)) * config.init_std).astype(dtype)
    encoder["cls.bias"] = np.zeros(num_classes, dtype=dtype)

    seqs = [record_ids(r, vocab) for r in records]
    opt = nx.adamw_init(encoder, lr=lr, weight_decay=weight_decay)
    clf = SentenceClassifier(encoder, config, num_classes, vocab)
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            rows = order[start : start + batch_size]
            ids = pad_sequences([seqs[i] for i in rows], config.max_seq_len)
            tensors = {k: Tensor(v, requires_grad=True) for k, v in clf.params.items()}
            loss = nx.cross_entropy(_classifier_graph(tensors, ids, config), labels[rows])
            loss.backward()
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tensors.items()}
            clf.params, opt = nx.adamw_step(clf.params, grads, opt)
            epoch_loss += float(loss.data) * len(rows)
        clf.history.append(epoch_loss / len(seqs))
        clf.train_accuracy = float((clf.predict(seqs) == labels).mean())
        if clf.train_accuracy == 1.0:
            break
    return clf


def clone_params(params: Mapping[str, np.ndarray]) -> Params:
    return copy.deepcopy(dict(params))
