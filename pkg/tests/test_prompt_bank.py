import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semaug.numerics import NumericsError, SeededRng
from semaug.prompt_bank import (
    PromptBank,
    compose_prompt_sequence,
    matching_loss,
    matching_loss_batch,
    orthogonal_loss,
    pooled_scale_features,
    select_keys,
    select_keys_batch,
)


def _bank(keys, M=2):
    keys = np.asarray(keys, dtype=float)
    return PromptBank(keys, np.ones((len(keys), M, keys.shape[1])))


def _scan(features, keys):
    """Reference selection: explicit loop, first maximum wins."""
    out = []
    for z in features:
        best, best_i = -np.inf, -1
        for i, k in enumerate(keys):
            c = z @ k / (np.linalg.norm(z) * np.linalg.norm(k))
            if c > best:
                best, best_i = c, i
        out.append(best_i)
    return out


class TestSelectKeys:
    def test_worked_example(self):
        sel = select_keys([[0.0, 1.0]], _bank([[1, 0], [0, 1], [0.6, 0.8]]))
        assert sel.indices == [1]
        assert sel.similarities[0] == pytest.approx(1.0)

    def test_identical_keys_tie_to_zero(self):
        sel = select_keys(np.eye(3), _bank(np.ones((4, 3))))
        assert sel.indices == [0, 0, 0]

    def test_matches_exhaustive_scan(self):
        rng = SeededRng(7)
        for i in range(1000):
            r = rng.child(str(i))
            n, s, d = int(r.integers(1, 12)), int(r.integers(1, 5)), int(r.integers(2, 9))
            keys, feats = r.normal((n, d)), r.normal((s, d))
            assert select_keys(feats, _bank(keys)).indices == _scan(feats, keys)

    def test_batch_agrees(self, rng):
        keys = rng.normal((6, 4))
        feats = rng.normal((5, 3, 4))
        got = select_keys_batch(feats, keys)
        for b in range(5):
            assert got[b].tolist() == select_keys(feats[b], _bank(keys)).indices

    def test_dim_mismatch(self):
        with pytest.raises(NumericsError):
            select_keys([[1.0, 0.0, 0.0]], _bank([[1, 0]]))


class TestBank:
    def test_initialize_shapes(self, rng):
        bank = PromptBank.initialize(rng, 10, 12, 32)
        assert bank.keys.shape == (10, 32) and bank.prompts.shape == (10, 12, 32)
        np.testing.assert_allclose(np.linalg.norm(bank.keys.value, axis=1), 1.0)

    def test_zero_key_rejected(self):
        with pytest.raises(NumericsError):
            PromptBank(np.zeros((2, 3)), np.ones((2, 1, 3)))

    def test_shape_disagreement(self):
        with pytest.raises(NumericsError):
            PromptBank(np.ones((2, 3)), np.ones((3, 1, 3)))


class TestCompose:
    def test_default_length(self, rng):
        bank = PromptBank.initialize(rng, 10, 12, 8)
        seq = compose_prompt_sequence([3, 0, 3], bank, np.ones(8))
        assert seq.shape == (37, 8)
        np.testing.assert_array_equal(seq[:12], bank.prompts.value[3])
        np.testing.assert_array_equal(seq[-1], 1.0)

    def test_empty_selection(self, rng):
        bank = PromptBank.initialize(rng, 2, 3, 4)
        np.testing.assert_array_equal(compose_prompt_sequence([], bank, np.arange(4.0)),
                                      [np.arange(4.0)])

    def test_too_long(self, rng):
        bank = PromptBank.initialize(rng, 2, 12, 4)
        with pytest.raises(NumericsError):
            compose_prompt_sequence([0, 1, 0], bank, np.ones(4), max_len=36)


class TestMatchingLoss:
    def test_aligned_is_zero(self):
        feats = np.array([[1.0, 2.0], [0.0, 3.0]])
        loss, _ = matching_loss(feats, [0, 1], _bank(2.5 * feats))
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_equals_scale_count(self):
        feats = np.eye(3)
        keys = np.roll(np.eye(3), 1, axis=0)
        loss, _ = matching_loss(feats, [0, 1, 2], _bank(keys))
        assert loss == 3.0

    def test_gradient_only_on_selected_rows(self, rng):
        bank = PromptBank(rng.normal((5, 4)), rng.normal((5, 1, 4)))
        _, grad = matching_loss(rng.normal((2, 4)), [1, 3], bank)
        assert np.all(grad[[0, 2, 4]] == 0)

    def test_batch_is_mean_of_single(self, rng):
        keys = rng.normal((6, 4))
        feats = rng.normal((3, 2, 4))
        idx = select_keys_batch(feats, keys)
        lb, gb = matching_loss_batch(feats, idx, keys)
        singles = [matching_loss(feats[b], idx[b].tolist(), _bank(keys)) for b in range(3)]
        assert lb == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
        np.testing.assert_allclose(gb, sum(s[1] for s in singles) / 3, atol=1e-12)


class TestOrthogonalLoss:
    def test_two_identical(self):
        P = np.ones((2, 3, 4))
        assert orthogonal_loss(P)[0] == pytest.approx(0.5, abs=1e-12)

    def test_orthogonal_prompts(self):
        P = np.eye(6).reshape(6, 2, 3)
        assert orthogonal_loss(P)[0] == 0.0

    def test_single_prompt(self):
        loss, grad = orthogonal_loss(np.ones((1, 2, 2)))
        assert loss == 0.0 and not grad.any()

    def test_zero_prompt_raises(self):
        with pytest.raises(NumericsError):
            orthogonal_loss(np.zeros((2, 1, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_matches_pairwise_loop(self, n, seed):
        P = SeededRng(seed).normal((n, 2, 3))
        V = P.reshape(n, -1)
        ref = sum(abs(V[a] @ V[b] / np.linalg.norm(V[a]) / np.linalg.norm(V[b]))
                  for a, b in itertools.combinations(range(n), 2)) / (n * (n - 1))
        assert orthogonal_loss(P)[0] == pytest.approx(ref, abs=1e-12)


def test_pooled_scale_features():
    maps = [np.full((4, 4, 3), 2.0), np.full((2, 2, 3), 0.5), np.full((1, 1, 3), 1.0)]
    feats = pooled_scale_features(maps)
    assert len(feats) == 3
    for f in feats:
        np.testing.assert_allclose(f, np.full(3, 1 / np.sqrt(3)), atol=1e-12)
    with pytest.raises(NumericsError):
        pooled_scale_features([np.zeros((2, 2, 3))])
