"""Forward/backward wiring of the full detector and the sklearn-style estimators.

Two inference arms exist. The *pretrained* arm runs the frozen model with
plain category tokens. The *augmented* arm switches on the LoRA adapters and
prepends bank-selected prompts to every category token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import DetectionWeights, LossBreakdown, detection_loss
from .model import LoraAdapter, ModelSpec, ToyOVModel, flatten_pyramid, unflatten_tokens
from .numerics import AdamW, Parameter, SeededRng, sigmoid
from .prompt_bank import (
    PromptBank,
    matching_loss_batch,
    orthogonal_loss,
    pooled_scale_features_batch,
    select_keys_batch,
)
from .validation import check_annotations, check_images


class TrainingDivergedError(RuntimeError):
    pass


class AdapterSet:
    """Trainable additions on top of a frozen base: one LoRA adapter per
    encoder stage plus the prompt bank."""

    def __init__(self, model: ToyOVModel, rng: SeededRng, rank: int = 4, alpha: float = 8.0,
                 n_pairs: int = 10, prompt_len: int = 12, n_select: int | None = None):
        self.lora = [LoraAdapter(d_in, d_out, rank, alpha, rng.child(f"lora{s}"))
                     for s, (d_out, d_in) in enumerate(model.encoder.stage_dims())]
        self.bank = PromptBank.initialize(rng.child("bank"), n_pairs, prompt_len, model.spec.dim)
        self.n_select = n_select or model.spec.n_stages
        if self.n_select > model.spec.n_stages:
            raise ValueError("cannot select prompts from more scales than the encoder has")
        seq_len = self.n_select * prompt_len + 1
        if seq_len > model.spec.max_text_len:
            raise ValueError(f"prompt sequence length {seq_len} exceeds text encoder max "
                             f"{model.spec.max_text_len}")

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for s, ad in enumerate(self.lora):
            out[f"lora{s}.A"] = ad.A
            out[f"lora{s}.B"] = ad.B
        out["bank.keys"] = self.bank.keys
        out["bank.prompts"] = self.bank.prompts
        return out


@dataclass
class ForwardResult:
    O: np.ndarray
    boxes: np.ndarray
    logits: np.ndarray
    selection: np.ndarray | None
    pooled: np.ndarray | None
    caches: dict


def forward(model: ToyOVModel, images: np.ndarray, cat_ids: list[int],
            adapters: AdapterSet | None = None, augmented: bool = False,
            use_adapters: bool | None = None, use_prompts: bool | None = None,
            text_context: np.ndarray | None = None,
            extra_tokens: np.ndarray | None = None) -> ForwardResult:
    """Batched forward pass. ``augmented`` switches both adapters and prompts on;
    the two can be toggled separately for ablations. ``text_context`` (L, D) is
    a constant prefix for every class token when prompts are off;
    ``extra_tokens`` (E, D) are appended after the vocabulary classes."""
    use_adapters = augmented if use_adapters is None else use_adapters
    use_prompts = augmented if use_prompts is None else use_prompts
    if (use_adapters or use_prompts) and adapters is None:
        raise ValueError("augmented forward requires an AdapterSet")
    model.encoder.attach_adapters(adapters.lora if adapters is not None else None)
    maps, enc_cache = model.encoder.forward(images, use_adapters=use_adapters)
    shapes = [m.shape[1:3] for m in maps]
    tokens = flatten_pyramid(maps)
    B = tokens.shape[0]
    cls = model.token_table.value[cat_ids]
    if extra_tokens is not None:
        cls = np.concatenate([cls, extra_tokens], axis=0)
    K = len(cls)
    selection = pooled = None
    if use_prompts:
        S = adapters.n_select
        pooled = pooled_scale_features_batch(maps[:S])
        selection = select_keys_batch(pooled, adapters.bank.keys.value)
        P = adapters.bank.prompts.value[selection]  # (B, S, M, D)
        prefix = P.reshape(B, -1, P.shape[-1])
        L = prefix.shape[1] + 1
        seqs = np.concatenate(
            [np.broadcast_to(prefix[:, None], (B, K) + prefix.shape[1:]),
             np.broadcast_to(cls[None, :, None, :], (B, K, 1, cls.shape[-1]))], axis=2)
        w, t_cache = model.text_encoder.forward(seqs.reshape(B * K, L, -1))
        text = w.reshape(B, K, -1)
    else:
        seqs = cls[:, None, :]
        if text_context is not None:
            ctx = np.broadcast_to(text_context, (K,) + text_context.shape)
            seqs = np.concatenate([ctx, seqs], axis=1)
        w, t_cache = model.text_encoder.forward(seqs)
        text = w
    O, boxes, logits, h_cache = model.head.forward(tokens, text, model.positions_for(shapes))
    caches = dict(enc=enc_cache, text=t_cache, head=h_cache, shapes=shapes, cat_ids=list(cat_ids),
                  use_prompts=use_prompts, K=K, B=B)
    return ForwardResult(O, boxes, logits, selection, pooled, caches)


def backward(model: ToyOVModel, fwd: ForwardResult, d_boxes: np.ndarray, d_logits: np.ndarray,
             adapters: AdapterSet | None = None) -> None:
    c = fwd.caches
    dE, dtext = model.head.backward(c["head"], d_boxes, d_logits)
    B, K = c["B"], c["K"]
    if c["use_prompts"]:
        dseq = model.text_encoder.backward(c["text"], dtext.reshape(B * K, -1))
        dseq = dseq.reshape(B, K, dseq.shape[-2], dseq.shape[-1])
        bank = adapters.bank
        if not bank.prompts.frozen:
            S, M = fwd.selection.shape[1], bank.prompt_len
            dP = dseq[:, :, :-1].sum(axis=1).reshape(B, S, M, -1)
            np.add.at(bank.prompts.grad, fwd.selection.reshape(-1), dP.reshape(B * S, M, -1))
        dcls = dseq[:, :, -1].sum(axis=0)
    else:
        dcls = model.text_encoder.backward(c["text"], dtext)[:, -1]
    if not model.token_table.frozen:
        np.add.at(model.token_table.grad, c["cat_ids"], dcls[:len(c["cat_ids"])])
    model.encoder.backward(c["enc"], unflatten_tokens(dE, c["shapes"]))


def batch_detection_loss(fwd: ForwardResult, targets, weights: DetectionWeights):
    """Mean over images of the per-image detection loss; returns the mean
    breakdown plus batch gradients for boxes and logits."""
    B = fwd.boxes.shape[0]
    d_boxes = np.zeros_like(fwd.boxes)
    d_logits = np.zeros_like(fwd.logits)
    agg = LossBreakdown()
    for i, (labels, gboxes) in enumerate(targets):
        lb = detection_loss(fwd.boxes[i], fwd.logits[i], labels, gboxes, weights)
        d_boxes[i] = lb.d_boxes / B
        d_logits[i] = lb.d_logits / B
        agg.l_cls += lb.l_cls / B
        agg.l_box += lb.l_box / B
        agg.l_giou += lb.l_giou / B
    agg.total = agg.detection_total(weights)
    return agg, d_boxes, d_logits


def predictions_from_forward(fwd: ForwardResult):
    """Every (query, category) pair becomes a scored prediction."""
    out = []
    scores = sigmoid(fwd.logits)
    B, Q, K = scores.shape
    labels = np.tile(np.arange(K), Q)
    for i in range(B):
        out.append((labels.copy(), scores[i].reshape(-1), np.repeat(fwd.boxes[i], K, axis=0)))
    return out


def _batches(n: int, batch_size: int, rng: SeededRng | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def augment(images: np.ndarray, targets, rng: SeededRng, dihedral: bool = True,
            channels: bool = False):
    """Random label-preserving transforms per image: one of the 8 square
    symmetries (or a left-right flip only) and optionally an RGB permutation."""
    images = images.copy()
    n_codes = (8 if images.shape[1] == images.shape[2] else 4) if dihedral else 2
    out = []
    for i, (labels, boxes) in enumerate(targets):
        r = rng.child(str(i))
        code = int(r.integers(0, n_codes))
        img, b = images[i], boxes.copy()
        if code & 1:
            img = img[:, ::-1]
            b[:, 0] = 1.0 - b[:, 0]
        if code & 2:
            img = img[::-1]
            b[:, 1] = 1.0 - b[:, 1]
        if code & 4:
            img = img.transpose(1, 0, 2)
            b = b[:, [1, 0, 3, 2]]
        if channels:
            img = img[:, :, r.permutation(3)]
        images[i] = img
        out.append((labels, b))
    return images, out


def translate(images: np.ndarray, targets, rng: SeededRng, max_shift: int):
    """Shift each image by up to ``max_shift`` pixels per axis, never pushing a
    box across the border; uncovered pixels replicate the nearest edge."""
    images = images.copy()
    _, H, W, _ = images.shape
    out = []
    for i, (labels, boxes) in enumerate(targets):
        r = rng.child(str(i))
        b = boxes.copy()
        if len(b):
            x0, x1 = (b[:, 0] - b[:, 2] / 2).min() * W, (b[:, 0] + b[:, 2] / 2).max() * W
            y0, y1 = (b[:, 1] - b[:, 3] / 2).min() * H, (b[:, 1] + b[:, 3] / 2).max() * H
            lo_x, hi_x = max(-max_shift, -int(np.floor(x0))), min(max_shift, int(np.floor(W - x1)))
            lo_y, hi_y = max(-max_shift, -int(np.floor(y0))), min(max_shift, int(np.floor(H - y1)))
        else:
            lo_x = lo_y = -max_shift
            hi_x = hi_y = max_shift
        dx = int(r.integers(lo_x, hi_x + 1)) if hi_x >= lo_x else 0
        dy = int(r.integers(lo_y, hi_y + 1)) if hi_y >= lo_y else 0
        padded = np.pad(images[i], ((max_shift, max_shift), (max_shift, max_shift), (0, 0)),
                        mode="edge")
        images[i] = padded[max_shift - dy:max_shift - dy + H, max_shift - dx:max_shift - dx + W]
        b[:, 0] += dx / W
        b[:, 1] += dy / H
        out.append((labels, b))
    return images, out


def _check_finite(value: float, phase: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{phase}: non-finite loss at epoch {epoch}")


# -- estimators ---------------------------------------------------------------------


class OpenVocabDetector(BaseEstimator):
    """Toy open-vocabulary detector trained from scratch on general-domain data.

    ``fit`` trains every parameter and then freezes the model. Category tokens
    listed in ``token_parents`` never appear in training; they are derived from
    their parent token plus noise of relative size ``fine_token_noise``.
    """

    def __init__(self, vocabulary=("disk", "square", "triangle"), token_parents=None,
                 fine_token_noise: float = 1.0, dim: int = 32, n_stages: int = 3,
                 n_queries: int = 16, head_hidden: int = 64, head_layers: int = 2,
                 max_text_len: int = 40,
                 attn_radius: float = 0.15, epochs: int = 30, batch_size: int = 16,
                 lr: float = 3e-3, weight_decay: float = 1e-4, w_cls: float = 1.0,
                 w_box: float = 5.0, w_giou: float = 2.0, focal_alpha: float = 0.25,
                 focal_gamma: float = 2.0, augment: bool = False,
                 context_augment: float = 0.5, context_std: float = 0.02,
                 n_negative_tokens: int = 4, shift: int = 0, random_state: int = 0):
        self.vocabulary = vocabulary
        self.token_parents = token_parents
        self.fine_token_noise = fine_token_noise
        self.dim = dim
        self.n_stages = n_stages
        self.n_queries = n_queries
        self.head_hidden = head_hidden
        self.head_layers = head_layers
        self.max_text_len = max_text_len
        self.attn_radius = attn_radius
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.w_cls = w_cls
        self.w_box = w_box
        self.w_giou = w_giou
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.augment = augment
        self.context_augment = context_augment
        self.context_std = context_std
        self.n_negative_tokens = n_negative_tokens
        self.shift = shift
        self.random_state = random_state

    @property
    def detection_weights(self) -> DetectionWeights:
        return DetectionWeights(self.w_cls, self.w_box, self.w_giou, self.focal_alpha,
                                self.focal_gamma)

    def _build(self) -> ToyOVModel:
        spec = ModelSpec(dim=self.dim, n_stages=self.n_stages, n_queries=self.n_queries,
                         head_hidden=self.head_hidden, max_text_len=self.max_text_len,
                         attn_radius=self.attn_radius, head_layers=self.head_layers)
        return ToyOVModel(list(self.vocabulary), spec, SeededRng(self.random_state).child("model"))

    def fit(self, X, y, categories):
        """Train on images ``X`` with annotations ``y`` over ``categories`` names."""
        model = self._build()
        X = check_images(X, divisible_by=model.encoder.total_stride)
        y = check_annotations(y, len(X), len(categories))
        cat_ids = model.token_ids(list(categories))
        params = list(model.named_parameters().values())
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        rng = SeededRng(self.random_state).child("pretrain")
        weights = self.detection_weights
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            tot, n = np.zeros(4), 0
            erng = rng.child(f"epoch{epoch}")
            for b, idx in enumerate(_batches(len(X), self.batch_size, erng)):
                opt.zero_grad()
                xb, yb = X[idx], [y[i] for i in idx]
                if self.augment:
                    xb, yb = augment(xb, yb, erng.child(f"aug{b}"))
                if self.shift:
                    xb, yb = translate(xb, yb, erng.child(f"shift{b}"), self.shift)
                fwd = forward(model, xb, cat_ids,
                              text_context=self._context(model, erng.child(f"ctx{b}")),
                              extra_tokens=self._negatives(model, erng.child(f"neg{b}")))
                lb, db, dl = batch_detection_loss(fwd, yb, weights)
                _check_finite(lb.total, "pretrain", epoch)
                backward(model, fwd, db, dl)
                opt.step()
                tot += len(idx) * np.array([lb.total, lb.l_cls, lb.l_box, lb.l_giou])
                n += len(idx)
            self.loss_curve_.append(dict(zip(("total", "l_cls", "l_box", "l_giou"), (tot / n).tolist())))
        self._derive_unseen_tokens(model)
        model.freeze()
        self.model_ = model
        return self

    def _context(self, model: ToyOVModel, rng: SeededRng) -> np.ndarray | None:
        """Random prefix so the frozen text encoder later tolerates prompts."""
        if rng.uniform(0.0, 1.0) >= self.context_augment:
            return None
        n = int(rng.integers(1, model.text_encoder.max_len))
        return rng.normal((n, model.text_encoder.dim), 0.0, self.context_std)

    def _negatives(self, model: ToyOVModel, rng: SeededRng) -> np.ndarray | None:
        """Tokens drawn from the embedding prior that never own an object."""
        if self.n_negative_tokens == 0:
            return None
        return rng.normal((self.n_negative_tokens, model.token_table.value.shape[1]))

    def _derive_unseen_tokens(self, model: ToyOVModel) -> None:
        if not self.token_parents:
            return
        rng = SeededRng(self.random_state).child("unseen-tokens")
        table = model.token_table.value
        for name, parent in sorted(self.token_parents.items()):
            i, j = model.token_ids([name, parent])
            noise = rng.child(name).normal(table.shape[1])
            noise /= np.linalg.norm(noise)
            norm = np.linalg.norm(table[j])
            mixed = table[j] + self.fine_token_noise * norm * noise
            table[i] = norm * mixed / np.linalg.norm(mixed)

    def predict(self, X, categories, batch_size: int = 32):
        check_is_fitted(self, "model_")
        return predict_arm(self.model_, None, X, categories, "pretrained", batch_size=batch_size)

    def score(self, X, y, categories) -> float:
        from .metrics import mean_average_precision

        return mean_average_precision(self.predict(X, categories), y, len(categories))


class PromptAugmentedDetector(BaseEstimator):
    """Parameter-efficient adaptation of a frozen :class:`OpenVocabDetector`.

    Trains LoRA adapters and a multi-scale prompt bank under
    ``detection + lambda_m * matching + lambda_p * orthogonality``. With a
    fitted router attached, :meth:`predict` picks an arm per image.
    """

    def __init__(self, base=None, n_prompts: int = 10, prompt_len: int = 12,
                 n_select: int = 3, lora_rank: int = 4, lora_alpha: float = 8.0,
                 lambda_m: float = 0.7, lambda_p: float = 0.3, epochs: int = 24,
                 batch_size: int = 16, lr: float = 1e-3, weight_decay: float = 1e-4,
                 augment: bool = True, shift: int = 0, router=None, random_state: int = 0):
        self.base = base
        self.n_prompts = n_prompts
        self.prompt_len = prompt_len
        self.n_select = n_select
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lambda_m = lambda_m
        self.lambda_p = lambda_p
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.shift = shift
        self.router = router
        self.random_state = random_state

    def fit(self, X, y, categories):
        check_is_fitted(self.base, "model_")
        model = self.base.model_
        if not model.frozen:
            raise ValueError("the base model must be frozen before adaptation")
        X = check_images(X, divisible_by=model.encoder.total_stride)
        y = check_annotations(y, len(X), len(categories))
        cat_ids = model.token_ids(list(categories))
        rng = SeededRng(self.random_state).child("peft")
        adapters = AdapterSet(model, rng.child("init"), self.lora_rank, self.lora_alpha,
                              self.n_prompts, self.prompt_len, self.n_select)
        base_hash = model.parameter_hash()
        opt = AdamW(adapters.named_parameters().values(), lr=self.lr,
                    weight_decay=self.weight_decay)
        weights = self.base.detection_weights
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            tot, n = np.zeros(6), 0
            erng = rng.child(f"epoch{epoch}")
            for b, idx in enumerate(_batches(len(X), self.batch_size, erng)):
                opt.zero_grad()
                xb, yb = X[idx], [y[i] for i in idx]
                if self.augment:
                    xb, yb = augment(xb, yb, erng.child(f"aug{b}"))
                if self.shift:
                    xb, yb = translate(xb, yb, erng.child(f"shift{b}"), self.shift)
                fwd = forward(model, xb, cat_ids, adapters, augmented=True)
                lb, db, dl = batch_detection_loss(fwd, yb, weights)
                l_m, dkeys = matching_loss_batch(fwd.pooled, fwd.selection,
                                                 adapters.bank.keys.value)
                l_p, dprompts = orthogonal_loss(adapters.bank)
                total = lb.total + self.lambda_m * l_m + self.lambda_p * l_p
                _check_finite(total, "peft", epoch)
                backward(model, fwd, db, dl, adapters)
                adapters.bank.keys.grad += self.lambda_m * dkeys
                adapters.bank.prompts.grad += self.lambda_p * dprompts
                opt.step()
                tot += len(idx) * np.array([total, lb.l_cls, lb.l_box, lb.l_giou, l_m, l_p])
                n += len(idx)
            self.loss_curve_.append(
                dict(zip(("total", "l_cls", "l_box", "l_giou", "l_m", "l_p"), (tot / n).tolist())))
        if model.parameter_hash() != base_hash:
            raise RuntimeError("frozen base parameters changed during adaptation")
        self.adapters_ = adapters
        return self

    def predict(self, X, categories, arm: str | None = None, batch_size: int = 32):
        """``arm`` is 'augmented', 'pretrained' or 'routed' (default: routed when
        a router is attached, augmented otherwise)."""
        check_is_fitted(self, "adapters_")
        if arm is None:
            arm = "routed" if self.router is not None else "augmented"
        return predict_arm(self.base.model_, self.adapters_, X, categories, arm,
                           router=self.router, batch_size=batch_size)

    def score(self, X, y, categories, arm: str | None = None) -> float:
        from .metrics import mean_average_precision

        return mean_average_precision(self.predict(X, categories, arm), y, len(categories))


def predict_arm(model: ToyOVModel, adapters: AdapterSet | None, X, categories, arm: str,
                router=None, decisions: np.ndarray | None = None, batch_size: int = 32,
                use_adapters: bool | None = None, use_prompts: bool | None = None):
    """Predictions for every image under one arm; 'routed' consults ``router``
    (or precomputed per-image ``decisions``, 1 = augmented)."""
    X = check_images(X, divisible_by=model.encoder.total_stride)
    cat_ids = model.token_ids(list(categories))
    if arm == "routed":
        if decisions is None:
            if router is None:
                raise ValueError("routed prediction needs a router or decisions")
            decisions = router.predict(X)
        aug = np.asarray(decisions, dtype=bool)
    elif arm == "augmented":
        aug = np.ones(len(X), dtype=bool)
    elif arm == "pretrained":
        aug = np.zeros(len(X), dtype=bool)
    else:
        raise ValueError(f"unknown arm {arm!r}")
    preds: list = [None] * len(X)
    for flag in (False, True):
        sel = np.flatnonzero(aug == flag)
        for start in range(0, len(sel), batch_size):
            idx = sel[start:start + batch_size]
            fwd = forward(model, X[idx], cat_ids, adapters, augmented=flag,
                          use_adapters=use_adapters if flag else None,
                          use_prompts=use_prompts if flag else None)
            for i, p in zip(idx, predictions_from_forward(fwd)):
                preds[i] = p
    return preds
