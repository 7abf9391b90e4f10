import json
import struct

import numpy as np
import pytest

from langsamp.checkpoint import (
    MAGIC, CheckpointError, CheckpointManifest, checkpoint_name, dumps_checkpoint,
    load_checkpoint, loads_checkpoint, read_header, save_checkpoint,
)
from langsamp.model import encode, init_params, lm_forward
from langsamp.numerics import adamw_init, adamw_step

from conftest import toy_config


def _saved(tmp_path, with_opt=False):
    cfg = toy_config()
    p = init_params(cfg)
    opt = None
    if with_opt:
        opt = adamw_init(p, lr=1e-3)
        _, opt = adamw_step(p, {k: np.ones_like(v) for k, v in p.items()}, opt)
    rng = np.random.default_rng(5)
    m = CheckpointManifest(cfg, step=7, rng_state={"rng": rng.bit_generator.state, "cursors": [1, 2]},
                           optimizer=opt, meta={"note": "x"})
    return cfg, p, m, save_checkpoint(p, m, tmp_path / checkpoint_name(7))


def test_name():
    assert checkpoint_name(5000) == "ckpt_5000.lsmp"


def test_layout(tmp_path):
    _, p, _, path = _saved(tmp_path)
    data = path.read_bytes()
    assert data[:8] == MAGIC
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    assert [t["name"] for t in header["tensors"]] == list(p)
    first = header["tensors"][0]
    raw = data[16 + n + first["offset"] : 16 + n + first["offset"] + first["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(first["shape"]), p["tok_emb"])
    assert read_header(path)[0]["config"]["vocab_size"] == 50


def test_round_trip_bytes_and_forward(tmp_path, rng):
    cfg, p, m, path = _saved(tmp_path, with_opt=True)
    q, m2 = load_checkpoint(path)
    assert dumps_checkpoint(q, m2) == path.read_bytes()
    assert m2.config == cfg and m2.step == 7 and m2.meta == {"note": "x"}
    assert m2.rng_state["cursors"] == [1, 2]
    r = np.random.default_rng()
    r.bit_generator.state = m2.rng_state["rng"]
    assert r.random() == np.random.default_rng(5).random()
    assert m2.optimizer.step == 1 and m2.optimizer.lr == 1e-3
    ids = rng.integers(5, 50, size=16)
    Ha, Hb = encode(ids, p, cfg).H, encode(ids, q, cfg).H
    assert Ha.tobytes() == Hb.tobytes()
    assert lm_forward(Ha, 1, 1, p).tobytes() == lm_forward(Hb, 1, 1, q).tobytes()


def test_float64_round_trip(tmp_path):
    cfg = toy_config()
    p = init_params(cfg, dtype=np.float64)
    path = save_checkpoint(p, CheckpointManifest(cfg), tmp_path / "a.lsmp")
    q, _ = load_checkpoint(path)
    assert all(q[k].dtype == np.float64 and q[k].tobytes() == p[k].tobytes() for k in p)


def test_corruption_names_the_tensor(tmp_path):
    _, p, _, path = _saved(tmp_path)
    header, start = read_header(path)
    entry = next(t for t in header["tensors"] if t["name"] == "blocks.1.ffn.w1")
    data = bytearray(path.read_bytes())
    data[start + entry["offset"] + 3] ^= 0xFF
    with pytest.raises(CheckpointError) as err:
        loads_checkpoint(bytes(data))
    assert err.value.tensor == "blocks.1.ffn.w1"
    assert "blocks.1.ffn.w1" in str(err.value)


def test_truncation_and_bad_magic(tmp_path):
    _, _, _, path = _saved(tmp_path)
    data = path.read_bytes()
    with pytest.raises(CheckpointError) as err:
        loads_checkpoint(data[:-10])
    assert err.value.tensor == "head.bias"
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"XXXX0001" + data[8:])
    with pytest.raises(CheckpointError):
        loads_checkpoint(data[:20])


def test_stripped_tables_load(tmp_path):
    cfg = toy_config()
    p = {k: v for k, v in init_params(cfg).items() if k not in ("lang_emb", "script_emb")}
    q, _ = load_checkpoint(save_checkpoint(p, CheckpointManifest(cfg), tmp_path / "s.lsmp"))
    assert set(q) == set(p)


def test_unsupported_dtype(tmp_path):
    cfg = toy_config()
    with pytest.raises(CheckpointError):
        dumps_checkpoint({"x": np.zeros(2, np.int32)}, CheckpointManifest(cfg))
