import numpy as np
import pytest

from semaug.checkpoint import (
    MAGIC,
    CheckpointError,
    load_model,
    load_router,
    load_tensors,
    save_model,
    save_router,
    save_tensors,
)
from semaug.detector import AdapterSet
from semaug.model import ModelSpec, ToyOVModel
from semaug.numerics import SeededRng
from semaug.router import DDASRouter, SemanticAwareRouter


def _model():
    return ToyOVModel(["a", "b", "c"], ModelSpec(dim=8, n_queries=4, head_hidden=8),
                      SeededRng(2))


def test_tensor_round_trip(tmp_path):
    t = {"x": np.arange(6.0).reshape(2, 3), "y": np.array([1.5])}
    save_tensors(tmp_path / "t.bin", t, {"k": 1})
    back, meta = load_tensors(tmp_path / "t.bin")
    assert meta == {"k": 1}
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
    assert (tmp_path / "t.bin").read_bytes().startswith(MAGIC)


def test_bytes_deterministic(tmp_path):
    t = {"b": np.ones(3), "a": np.zeros((2, 2))}
    save_tensors(tmp_path / "1", t, {"z": 1, "a": 2})
    save_tensors(tmp_path / "2", dict(reversed(list(t.items()))), {"a": 2, "z": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_tensors(tmp_path / "nope")
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "junk")
    save_tensors(tmp_path / "ok", {"x": np.ones(100)}, {})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(tmp_path / "cut")


def test_model_round_trip(tmp_path):
    m = _model()
    m.freeze()
    ad = AdapterSet(m, SeededRng(1), 2, 4.0, 5, 3, 3)
    ad.lora[0].B.value[...] = 0.25
    save_model(tmp_path / "m.ckpt", m, ad)
    m2, ad2, meta = load_model(tmp_path / "m.ckpt")
    assert m2.parameter_hash() == m.parameter_hash()
    assert m2.frozen and m2.vocabulary == m.vocabulary
    for k, p in ad.named_parameters().items():
        np.testing.assert_array_equal(ad2.named_parameters()[k].value, p.value)
    assert meta["adapters"] == {"r": 2, "alpha": 4.0, "n_select": 3}


def test_model_without_adapters(tmp_path):
    save_model(tmp_path / "m.ckpt", _model())
    _, ad, _ = load_model(tmp_path / "m.ckpt")
    assert ad is None


def test_missing_tensor(tmp_path):
    m = _model()
    tensors = {k: p.value for k, p in m.named_parameters().items() if k != "tokens"}
    save_tensors(tmp_path / "m.ckpt", tensors, {"architecture": m.architecture()})
    with pytest.raises(CheckpointError, match="tokens"):
        load_model(tmp_path / "m.ckpt")


@pytest.mark.parametrize("cls", [SemanticAwareRouter, DDASRouter])
def test_router_round_trip(tmp_path, rng, cls):
    imgs = rng.uniform(0, 1, (4, 16, 16, 3))
    r = cls(epochs=2, tau=0.2, random_state=5).fit(imgs)
    save_router(tmp_path / "r.ckpt", r)
    back = load_router(tmp_path / "r.ckpt")
    assert type(back) is cls and back.get_params() == r.get_params()
    np.testing.assert_array_equal(back.score_samples(imgs), r.score_samples(imgs))


def test_model_checkpoint_is_not_router(tmp_path):
    save_model(tmp_path / "m.ckpt", _model())
    with pytest.raises(CheckpointError):
        load_router(tmp_path / "m.ckpt")
