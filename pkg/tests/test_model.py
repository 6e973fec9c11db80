import numpy as np
import pytest

from semaug.model import (
    DetectionHead,
    LoraAdapter,
    ModelSpec,
    PyramidEncoder,
    ShapeError,
    TextEncoder,
    ToyOVModel,
    flatten_pyramid,
    lora_forward,
    pyramid_positions,
)
from semaug.numerics import SeededRng


class TestLora:
    def test_zero_b_is_exact(self, rng):
        W = rng.normal((5, 7))
        ad = LoraAdapter(7, 5, 2, 8.0, rng.child("a"))
        x = rng.normal(7)
        np.testing.assert_array_equal(lora_forward(W, ad, x), x @ W.T)

    def test_realizes_chosen_delta(self, rng):
        r = 3
        W, dW = rng.normal((r, r)), rng.normal((r, r))
        ad = LoraAdapter(r, r, r, float(r))
        ad.A.value = np.eye(r)
        ad.B.value = dW.copy()
        x = rng.normal(r)
        np.testing.assert_allclose(lora_forward(W, ad, x), W @ x + dW @ x, atol=1e-12)

    def test_shape_mismatch(self, rng):
        ad = LoraAdapter(4, 3, 2)
        with pytest.raises(ShapeError):
            lora_forward(np.zeros((3, 5)), ad, np.zeros(5))
        with pytest.raises(ShapeError):
            LoraAdapter(4, 3, 5)


class TestEncoder:
    def test_pyramid_shapes(self, rng):
        enc = PyramidEncoder(rng, dim=32, n_stages=3)
        maps, _ = enc.forward(rng.uniform(0, 1, (64, 64, 3)))
        assert [m.shape[1:] for m in maps] == [(16, 16, 32), (8, 8, 32), (4, 4, 32)]
        assert flatten_pyramid([m[0] for m in maps]).shape == (336, 32)

    def test_zero_b_adapters_identical(self, rng):
        enc = PyramidEncoder(rng.child("e"), dim=8, n_stages=3)
        enc.attach_adapters([LoraAdapter(d_in, d_out, 2, 8.0, rng.child(str(i)))
                             for i, (d_out, d_in) in enumerate(enc.stage_dims())])
        x = rng.uniform(0, 1, (2, 32, 32, 3))
        plain, _ = enc.forward(x, use_adapters=False)
        adapted, _ = enc.forward(x, use_adapters=True)
        for a, b in zip(plain, adapted):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        x = SeededRng(1).uniform(0, 1, (1, 16, 16, 3))
        a = PyramidEncoder(SeededRng(2), 8, 2).forward(x)[0]
        b = PyramidEncoder(SeededRng(2), 8, 2).forward(x)[0]
        for m, n in zip(a, b):
            np.testing.assert_array_equal(m, n)

    def test_bad_divisibility(self, rng):
        with pytest.raises(ShapeError):
            PyramidEncoder(rng, 8, 3).forward(np.zeros((1, 30, 32, 3)))

    def test_adapter_count(self, rng):
        with pytest.raises(ShapeError):
            PyramidEncoder(rng, 8, 3).attach_adapters([LoraAdapter(48, 8, 2)])


def test_flatten_single_cell():
    v = np.arange(4.0).reshape(1, 1, 4)
    np.testing.assert_array_equal(flatten_pyramid([v]), [np.arange(4.0)])


def test_positions_are_cell_centres():
    pos = pyramid_positions([(2, 2), (1, 1)])
    np.testing.assert_allclose(pos, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75],
                                     [0.5, 0.5]])


class TestTextEncoder:
    def test_order_sensitive(self, rng):
        enc = TextEncoder(rng, dim=6, max_len=8)
        seq = rng.normal((3, 6))
        assert not np.allclose(enc.forward(seq)[0], enc.forward(seq[::-1])[0])

    def test_length_limits(self, rng):
        enc = TextEncoder(rng, dim=4, max_len=3)
        with pytest.raises(ShapeError):
            enc.forward(np.zeros((0, 4)))
        with pytest.raises(ShapeError):
            enc.forward(np.zeros((4, 4)))

    def test_batch_matches_single(self, rng):
        enc = TextEncoder(rng, dim=4, max_len=6)
        seqs = rng.normal((3, 5, 4))
        batch = enc.forward(seqs)[0]
        for i in range(3):
            np.testing.assert_allclose(enc.forward(seqs[i])[0], batch[i], atol=1e-14)


class TestHead:
    def test_shapes(self, rng):
        head = DetectionHead(rng, dim=8, n_queries=5, hidden=6)
        P = pyramid_positions([(4, 4), (2, 2)])
        O, boxes, C, _ = head.forward(rng.normal((2, 20, 8)), rng.normal((1, 8)), P)
        assert O.shape == (2, 5, 8) and boxes.shape == (2, 5, 4) and C.shape == (2, 5, 1)
        assert np.all((boxes > 0) & (boxes < 1))


class TestModel:
    def test_hash_tracks_parameters(self):
        m = ToyOVModel(["a", "b"], ModelSpec(dim=8, n_queries=4, head_hidden=8), SeededRng(0))
        h = m.parameter_hash()
        assert h == ToyOVModel(["a", "b"], ModelSpec(dim=8, n_queries=4, head_hidden=8),
                               SeededRng(0)).parameter_hash()
        m.token_table.value[0, 0] += 1e-12
        assert m.parameter_hash() != h

    def test_freeze(self):
        m = ToyOVModel(["a"], ModelSpec(dim=8, n_queries=4, head_hidden=8))
        m.freeze()
        assert m.frozen
        m.unfreeze()
        assert not m.frozen

    def test_unknown_token(self):
        with pytest.raises(KeyError):
            ToyOVModel(["a"], ModelSpec(dim=8)).token_ids(["b"])
