"""Analytic-vs-finite-difference gradient suites.

Each suite draws ``instances`` random problems from a seed and reports the
largest relative error between the hand-written backward pass and central
differences over every differentiable input and parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import DetectionWeights, bipartite_match, detection_loss, focal_loss_elementwise, matching_cost
from .model import DetectionHead, LoraAdapter, PyramidEncoder, TextEncoder, pyramid_positions
from .numerics import Parameter, SeededRng, finite_difference_gradient, relative_error
from .prompt_bank import PromptBank, matching_loss, orthogonal_loss, select_keys

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _param_errors(params: dict[str, Parameter], loss: Callable[[], float]) -> list[float]:
    errs = []
    for p in params.values():
        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            try:
                return loss()
            finally:
                p.value[...] = old
        errs.append(relative_error(p.grad, finite_difference_gradient(f, p.value.copy(), FD_STEP)))
    return errs


def _matching(rng: SeededRng) -> float:
    S, D, N = 3, 6, 5
    bank = PromptBank(rng.normal((N, D)), rng.normal((N, 2, D)))
    feats = rng.normal((S, D))
    sel = select_keys(feats, bank)
    _, grad = matching_loss(feats, sel, bank)

    def f(keys):
        return matching_loss(feats, sel, PromptBank(keys, bank.prompts.value))[0]

    return relative_error(grad, finite_difference_gradient(f, bank.keys.value.copy(), FD_STEP))


def _orthogonal(rng: SeededRng) -> float:
    P = rng.normal((4, 3, 5))
    _, grad = orthogonal_loss(P)
    return relative_error(grad, finite_difference_gradient(lambda x: orthogonal_loss(x)[0], P, FD_STEP))


def _focal(rng: SeededRng) -> float:
    x = rng.uniform(-4.0, 4.0, (6, 3))
    t = (rng.uniform(0.0, 1.0, (6, 3)) < 0.3).astype(float)
    _, dx = focal_loss_elementwise(x, t, 0.25, 2.0)
    num = finite_difference_gradient(lambda z: focal_loss_elementwise(z, t, 0.25, 2.0)[0].sum(), x,
                                     FD_STEP)
    return relative_error(dx, num)


def _random_boxes(rng: SeededRng, n: int) -> np.ndarray:
    c = rng.uniform(0.25, 0.75, (n, 2))
    s = rng.uniform(0.1, 0.4, (n, 2))
    return np.concatenate([c, s], axis=1)


def _detection(rng: SeededRng) -> float:
    Q, K, G = 5, 3, 2
    boxes = _random_boxes(rng, Q)
    logits = rng.normal((Q, K))
    labels = rng.integers(0, K, G)
    gt = _random_boxes(rng, G)
    w = DetectionWeights()
    assignment = bipartite_match(matching_cost(boxes, logits, labels, gt, w))
    out = detection_loss(boxes, logits, labels, gt, w, assignment)

    def fb(b):
        return detection_loss(b, logits, labels, gt, w, assignment).total

    def fl(z):
        return detection_loss(boxes, z, labels, gt, w, assignment).total

    return max(relative_error(out.d_boxes, finite_difference_gradient(fb, boxes.copy(), FD_STEP)),
               relative_error(out.d_logits, finite_difference_gradient(fl, logits.copy(), FD_STEP)))


def _text_encoder(rng: SeededRng) -> float:
    enc = TextEncoder(rng.child("enc"), dim=6, max_len=8)
    X = rng.normal((3, 5, 6))
    G = rng.normal((3, 6))

    def loss():
        return float((G * enc.forward(X)[0]).sum())

    for p in enc.params.values():
        p.zero_grad()
    _, cache = enc.forward(X)
    dX = enc.backward(cache, G)

    def fx(x):
        return float((G * enc.forward(x)[0]).sum())

    errs = [relative_error(dX, finite_difference_gradient(fx, X.copy(), FD_STEP))]
    return max(errs + _param_errors(enc.params, loss))


def _detection_head(rng: SeededRng) -> float:
    head = DetectionHead(rng.child("head"), dim=6, n_queries=4, hidden=5, n_layers=2)
    shapes = [(4, 4), (2, 2)]
    P = pyramid_positions(shapes)
    E = rng.normal((2, len(P), 6))
    T = rng.normal((3, 6))
    G1, G2 = rng.normal((2, 4, 4)), rng.normal((2, 4, 3))

    def loss_of(e, t):
        _, boxes, C, _ = head.forward(e, t, P)
        return float((G1 * boxes).sum() + (G2 * C).sum())

    for p in head.params.values():
        p.zero_grad()
    _, _, _, cache = head.forward(E, T, P)
    dE, dT = head.backward(cache, G1, G2)
    errs = [relative_error(dE, finite_difference_gradient(lambda e: loss_of(e, T), E.copy(), FD_STEP)),
            relative_error(dT, finite_difference_gradient(lambda t: loss_of(E, t), T.copy(), FD_STEP))]
    return max(errs + _param_errors(head.params, lambda: loss_of(E, T)))


def _encoder_lora(rng: SeededRng) -> float:
    enc = PyramidEncoder(rng.child("enc"), dim=4, n_stages=2)
    adapters = [LoraAdapter(d_in, d_out, 2, 4.0, rng.child(f"lora{s}"))
                for s, (d_out, d_in) in enumerate(enc.stage_dims())]
    for ad in adapters:
        ad.B.value[...] = rng.normal(ad.B.value.shape, 0.0, 0.3)
    enc.attach_adapters(adapters)
    X = rng.uniform(0.0, 1.0, (1, 8, 8, 3))
    maps0, _ = enc.forward(X, use_adapters=True)
    Gs = [rng.normal(m.shape) for m in maps0]

    def loss():
        maps, _ = enc.forward(X, use_adapters=True)
        return float(sum((g * m).sum() for g, m in zip(Gs, maps)))

    params = dict(enc.params)
    for s, ad in enumerate(adapters):
        params[f"A{s}"], params[f"B{s}"] = ad.A, ad.B
    for p in params.values():
        p.zero_grad()
    _, cache = enc.forward(X, use_adapters=True)
    enc.backward(cache, Gs)
    return max(_param_errors(params, loss))


SUITES: dict[str, Callable[[SeededRng], float]] = {
    "matching_loss": _matching,
    "orthogonal_loss": _orthogonal,
    "focal_loss": _focal,
    "detection_loss": _detection,
    "text_encoder": _text_encoder,
    "detection_head": _detection_head,
    "encoder_lora": _encoder_lora,
}


def run_suite(name: str, seed: int = 0, instances: int = 20) -> SuiteResult:
    fn = SUITES[name]
    base = SeededRng(seed).child("gradcheck").child(name)
    worst = max(fn(base.child(str(i))) for i in range(instances))
    return SuiteResult(name, instances, float(worst))


def run_all(seed: int = 0, instances: int = 20) -> list[SuiteResult]:
    return [run_suite(name, seed, instances) for name in SUITES]


def format_table(results: list[SuiteResult]) -> str:
    lines = [f"{'suite':<18} {'n':>4} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.instances:>4} {r.max_rel_error:>12.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
