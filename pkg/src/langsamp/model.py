"""Pre-norm transformer encoder with an additive language/script LM head.

The encoder maps token ids to hidden states and never sees a language or
script id. Only the LM head path adds ``E_lang[l] + E_script[s]`` to the
final hidden states before an affine decoder.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import numerics as nx
from .corpus import PAD
from .numerics import Tensor

Params = dict[str, np.ndarray]

_MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 256
    max_seq_len: int = 512
    num_languages: int = 1
    num_scripts: int = 1
    use_lang_emb: bool = True
    use_script_emb: bool = True
    init_std: float = 0.02
    # None falls back to init_std; 0.0 gives all-zero tables
    table_init_std: float | None = None
    tie_weights: bool = False
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        positive = ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim",
                    "max_seq_len", "num_languages", "num_scripts")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.init_std < 0 or (self.table_init_std is not None and self.table_init_std < 0):
            raise ConfigError("init std must be non-negative")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def variant(self, use_lang_emb: bool, use_script_emb: bool) -> "ModelConfig":
        d = asdict(self)
        d.update(use_lang_emb=use_lang_emb, use_script_emb=use_script_emb)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


_BLOCK_TENSORS = (
    "ln1.gamma", "ln1.beta",
    "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of ``config``, in canonical order."""
    V, D, F = config.vocab_size, config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, D),
        "pos_emb": (config.max_seq_len, D),
    }
    block = {
        "ln1.gamma": (D,), "ln1.beta": (D,),
        "attn.wq": (D, D), "attn.bq": (D,), "attn.wk": (D, D),
        "attn.wv": (D, D), "attn.bv": (D,), "attn.wo": (D, D), "attn.bo": (D,),
        "ln2.gamma": (D,), "ln2.beta": (D,),
        "ffn.w1": (D, F), "ffn.b1": (F,), "ffn.w2": (F, D), "ffn.b2": (D,),
    }
    for i in range(config.num_layers):
        for name in _BLOCK_TENSORS:
            shapes[f"blocks.{i}.{name}"] = block[name]
    if config.use_lang_emb:
        shapes["lang_emb"] = (config.num_languages, D)
    if config.use_script_emb:
        shapes["script_emb"] = (config.num_scripts, D)
    if not config.tie_weights:
        shapes["head.weight"] = (D, V)
    shapes["head.bias"] = (V,)
    return shapes


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    # per-tensor streams: adding or dropping a table leaves every other tensor unchanged
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("beta", "bias", "bq", "bv", "bo", "b1", "b2")


def init_params(config: ModelConfig, dtype=np.float32) -> Params:
    """Normal(0, init_std) weights, zero biases, unit layer-norm gains."""
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif _is_bias(name):
            arr = np.zeros(shape)
        else:
            std = config.init_std
            if name in ("lang_emb", "script_emb") and config.table_init_std is not None:
                std = config.table_init_std
            arr = _tensor_rng(config.seed, name).normal(0.0, 1.0, size=shape) * std
        params[name] = arr.astype(dtype)
    return params


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


@dataclass
class HiddenStates:
    """Activations per layer; index 0 is the embedding sum, the last is H."""

    layers: list[np.ndarray]

    @property
    def H(self) -> np.ndarray:
        return self.layers[-1]

    def __len__(self) -> int:
        return len(self.layers)


def _check_ids(ids: np.ndarray, config: ModelConfig) -> None:
    if ids.shape[-1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range for vocab of size {config.vocab_size}")


def _block(x: Tensor, p: Mapping[str, Tensor], i: int, config: ModelConfig,
           key_mask: np.ndarray | None) -> Tensor:
    B, T, D = x.shape
    Hn, dh = config.num_heads, config.head_dim
    pre = f"blocks.{i}."

    h = nx.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], config.ln_eps)

    def heads(w, b=None):
        y = nx.matmul(h, p[pre + w])
        if b is not None:
            y = nx.add(y, p[pre + b])
        return nx.transpose(nx.reshape(y, (B, T, Hn, dh)), (0, 2, 1, 3))

    # no key bias: it shifts each query's scores by a constant, which softmax ignores
    q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk"), heads("attn.wv", "attn.bv")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, mask=key_mask)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    x = nx.add(x, nx.add(nx.matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"]))

    h = nx.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], config.ln_eps)
    h = nx.gelu(nx.add(nx.matmul(h, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
    return nx.add(x, nx.add(nx.matmul(h, p[pre + "ffn.w2"]), p[pre + "ffn.b2"]))


def encode_graph(tensors: Mapping[str, Tensor], token_ids: np.ndarray, config: ModelConfig,
                 upto: int | None = None) -> list[Tensor]:
    """Differentiable encoder over a (B, T) id batch; PAD keys are masked out of attention."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("encode_graph expects a (batch, seq) id array")
    _check_ids(ids, config)
    B, T = ids.shape
    D = config.hidden_dim
    tok = nx.gather(tensors["tok_emb"], ids)
    pos = nx.reshape(nx.gather(tensors["pos_emb"], np.arange(T)), (1, T, D))
    x = nx.add(tok, nx.broadcast_to(pos, (B, T, D)))
    key_mask = None
    pad = ids == PAD
    if pad.any():
        key_mask = np.where(pad, _MASK_VALUE, 0.0).astype(x.dtype)[:, None, None, :]
    states = [x]
    last = config.num_layers if upto is None else upto
    for i in range(last):
        x = _block(x, tensors, i, config, key_mask)
        states.append(x)
    return states


def _as_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def encode(token_ids, params: Params, config: ModelConfig) -> HiddenStates:
    """Forward pass for one sequence (T,) or a batch (B, T); no language input."""
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    states = encode_graph(_as_tensors(params), ids[None] if single else ids, config)
    return HiddenStates([s.data[0] if single else s.data for s in states])


def hidden_at_layer(token_ids, params: Params, config: ModelConfig, layer_index: int) -> np.ndarray:
    if not 0 <= layer_index <= config.num_layers:
        raise IndexError(f"layer {layer_index} outside [0, {config.num_layers}]")
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    states = encode_graph(_as_tensors(params), ids[None] if single else ids, config, upto=layer_index)
    out = states[layer_index].data
    return out[0] if single else out


def head_weight(tensors: Mapping[str, Tensor]) -> Tensor:
    if "head.weight" in tensors:
        return tensors["head.weight"]
    return nx.transpose(tensors["tok_emb"], (1, 0))


def inject(hidden: Tensor, lang_ids, script_ids, tensors: Mapping[str, Tensor],
           use_lang: bool, use_script: bool) -> Tensor:
    """``o = h + E_lang[l] + E_script[s]`` for (N, D) rows with per-row ids."""
    out = hidden
    if use_lang:
        out = nx.add(out, nx.gather(tensors["lang_emb"], np.asarray(lang_ids, dtype=np.int64)))
    if use_script:
        out = nx.add(out, nx.gather(tensors["script_emb"], np.asarray(script_ids, dtype=np.int64)))
    return out


def _resolve_flags(params, use_lang, use_script):
    if use_lang is None:
        use_lang = "lang_emb" in params
    if use_script is None:
        use_script = "script_emb" in params
    if use_lang and "lang_emb" not in params:
        raise KeyError("language embeddings requested but the model has no lang_emb table")
    if use_script and "script_emb" not in params:
        raise KeyError("script embeddings requested but the model has no script_emb table")
    return use_lang, use_script


def lm_forward(H, lang_id: int, script_id: int, params: Params,
               use_lang: bool | None = None, use_script: bool | None = None) -> np.ndarray:
    """Logits (T, V) from final hidden states of one sequence.

    Flags default to whichever embedding tables ``params`` carries.
    """
    use_lang, use_script = _resolve_flags(params, use_lang, use_script)
    H = np.asarray(H)
    if use_lang and not 0 <= lang_id < params["lang_emb"].shape[0]:
        raise IndexError(f"lang_id {lang_id} out of range")
    if use_script and not 0 <= script_id < params["script_emb"].shape[0]:
        raise IndexError(f"script_id {script_id} out of range")
    tensors = _as_tensors(params)
    o = Tensor(H)
    if use_lang:
        o = nx.add(o, tensors["lang_emb"].data[lang_id])
    if use_script:
        o = nx.add(o, tensors["script_emb"].data[script_id])
    logits = nx.add(nx.matmul(o, head_weight(tensors)), tensors["head.bias"])
    return logits.data


def strip_tables(params: Mapping[str, np.ndarray]) -> Params:
    """Copy of ``params`` without the language/script tables (encoder-only use)."""
    return {k: v for k, v in params.items() if k not in ("lang_emb", "script_emb")}
