import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from semaug.data import general_domain, make_dataset, vertical_domain
from semaug.detector import (
    AdapterSet,
    OpenVocabDetector,
    PromptAugmentedDetector,
    augment,
    backward,
    forward,
    predict_arm,
    translate,
)
from semaug.model import ModelSpec, ToyOVModel
from semaug.numerics import SeededRng, finite_difference_gradient, relative_error

SMALL = dict(dim=8, n_queries=4, head_hidden=8, max_text_len=10)


@pytest.fixture(scope="module")
def data():
    g, v = general_domain(), vertical_domain()
    return make_dataset(g, 6, 0), make_dataset(v, 6, 0), v


def _base(data, **kw):
    gen, vert, v = data
    params = dict(vocabulary=tuple(gen.categories) + tuple(vert.categories),
                  token_parents=vert.fine_to_coarse, epochs=2, batch_size=4, **SMALL)
    params.update(kw)
    return OpenVocabDetector(**params)


class TestPipelineGradients:
    @pytest.mark.parametrize("augmented", [False, True])
    def test_matches_finite_differences(self, augmented):
        rng = SeededRng(8)
        model = ToyOVModel(["a", "b", "c"], ModelSpec(**SMALL), rng.child("m"))
        ads = AdapterSet(model, rng.child("ad"), 2, 4.0, 3, 2, 3)
        for ad in ads.lora:
            ad.B.value[...] = rng.child("B").normal(ad.B.value.shape, 0.0, 0.3)
        X = rng.uniform(0, 1, (2, 16, 16, 3))
        G1, G2 = rng.normal((2, 4, 4)), rng.normal((2, 4, 2))
        ctx = None if augmented else rng.normal((2, 8), 0.0, 0.1)

        def loss():
            f = forward(model, X, [2, 0], ads, augmented=augmented, text_context=ctx)
            return float((G1 * f.boxes).sum() + (G2 * f.logits).sum())

        params = dict(model.named_parameters())
        if augmented:
            params.update({k: p for k, p in ads.named_parameters().items() if k != "bank.keys"})
        for p in params.values():
            p.zero_grad()
        fwd = forward(model, X, [2, 0], ads, augmented=augmented, text_context=ctx)
        backward(model, fwd, G1, G2, ads)
        for name in ("tokens", "encoder.W0", "text.pos", "head.Wq0", "lora1.A", "lora2.B",
                     "bank.prompts"):
            if name not in params:
                continue
            p = params[name]

            def f(v, p=p):
                old = p.value.copy()
                p.value[...] = v
                try:
                    return loss()
                finally:
                    p.value[...] = old

            num = finite_difference_gradient(f, p.value.copy(), 1e-5)
            assert relative_error(p.grad, num) < 1e-4, name


class TestPretrain:
    def test_lr_zero_keeps_parameters(self, data):
        gen = data[0]
        det = OpenVocabDetector(vocabulary=tuple(gen.categories), lr=0.0, epochs=2, **SMALL)
        before = det._build().parameter_hash()
        det.fit(gen.images, gen.annotations, gen.categories)
        assert det.model_.parameter_hash() == before
        curve = [c["total"] for c in det.loss_curve_]
        assert curve[0] == pytest.approx(curve[1], rel=0.5)

    def test_repeatable(self, data):
        gen = data[0]
        a = _base(data).fit(gen.images, gen.annotations, gen.categories)
        b = _base(data).fit(gen.images, gen.annotations, gen.categories)
        assert a.model_.parameter_hash() == b.model_.parameter_hash()
        assert a.model_.frozen

    def test_unseen_tokens_keep_parent_norm(self, data):
        gen, vert, _ = data
        det = _base(data, epochs=1).fit(gen.images, gen.annotations, gen.categories)
        table = det.model_.token_table.value
        for fine, parent in vert.fine_to_coarse.items():
            i, j = det.model_.token_ids([fine, parent])
            assert np.linalg.norm(table[i]) == pytest.approx(np.linalg.norm(table[j]))
            assert not np.allclose(table[i], table[j])

    def test_get_params_and_clone(self, data):
        det = _base(data, lr=0.01)
        assert clone(det).get_params()["lr"] == 0.01

    def test_unfitted(self, data):
        with pytest.raises(NotFittedError):
            _base(data).predict(data[0].images, data[0].categories)


@pytest.fixture(scope="module")
def fitted(data):
    gen, vert, _ = data
    base = _base(data).fit(gen.images, gen.annotations, gen.categories)
    h = base.model_.parameter_hash()
    peft = PromptAugmentedDetector(base=base, n_prompts=4, prompt_len=2, epochs=2,
                                   batch_size=4).fit(vert.images, vert.annotations,
                                                     vert.categories)
    return base, peft, h


class TestPeft:
    def test_base_hash_unchanged(self, fitted):
        base, _, h = fitted
        assert base.model_.parameter_hash() == h

    def test_adapters_moved(self, fitted):
        _, peft, _ = fitted
        assert any(np.abs(ad.B.value).max() > 0 for ad in peft.adapters_.lora)

    def test_zero_b_reproduces_zero_shot(self, fitted, data):
        base, _, _ = fitted
        vert = data[1]
        fresh = AdapterSet(base.model_, SeededRng(3), 4, 8.0, 4, 2, 3)
        plain = predict_arm(base.model_, None, vert.images, vert.categories, "pretrained")
        lora = predict_arm(base.model_, fresh, vert.images, vert.categories, "augmented",
                           use_prompts=False)
        for (l1, s1, b1), (l2, s2, b2) in zip(plain, lora):
            np.testing.assert_array_equal(s1, s2)
            np.testing.assert_array_equal(b1, b2)

    def test_routed_arm_composes(self, fitted, data):
        base, peft, _ = fitted
        vert = data[1]
        decisions = np.array([1, 0, 1, 0, 0, 1])
        routed = predict_arm(base.model_, peft.adapters_, vert.images, vert.categories,
                             "routed", decisions=decisions)
        pre = peft.predict(vert.images, vert.categories, arm="pretrained")
        aug = peft.predict(vert.images, vert.categories, arm="augmented")
        for d, r, p, a in zip(decisions, routed, pre, aug):
            np.testing.assert_array_equal(r[1], (a if d else p)[1])

    def test_requires_frozen_base(self, data):
        gen, vert, _ = data
        base = _base(data, epochs=1).fit(gen.images, gen.annotations, gen.categories)
        base.model_.unfreeze()
        with pytest.raises(ValueError, match="frozen"):
            PromptAugmentedDetector(base=base, n_prompts=2, prompt_len=2, epochs=1).fit(
                vert.images, vert.annotations, vert.categories)

    def test_unknown_arm(self, fitted, data):
        with pytest.raises(ValueError):
            fitted[1].predict(data[1].images, data[1].categories, arm="both")


class TestAugmentation:
    def test_flips_keep_boxes_on_objects(self, data):
        gen = data[0]
        x, y = augment(gen.images, gen.annotations, SeededRng(0))
        for img, (labels, boxes), (l0, _) in zip(x, y, gen.annotations):
            np.testing.assert_array_equal(labels, l0)
            assert np.all((boxes[:, :2] > 0) & (boxes[:, :2] < 1))

    def test_translate_moves_content_with_boxes(self):
        img = np.zeros((1, 32, 32, 3))
        img[0, 10:14, 8:12] = 1.0
        box = np.array([[10 / 32, 12 / 32, 4 / 32, 4 / 32]])
        x, y = translate(img, [(np.array([0]), box)], SeededRng(2), 6)
        cx, cy = y[0][1][0, :2] * 32
        rows, cols = np.nonzero(x[0, :, :, 0] > 0.5)
        assert cols.mean() + 0.5 == pytest.approx(cx)
        assert rows.mean() + 0.5 == pytest.approx(cy)
