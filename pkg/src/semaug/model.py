"""Toy open-vocabulary detector: pyramid image encoder with LoRA, text encoder,
stacked cross-attention detection head.

Every layer exposes ``forward`` returning ``(outputs, cache)`` and a matching
``backward`` that accumulates parameter gradients (skipped for frozen
parameters) and returns gradients for the layer inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DTYPE,
    NumericsError,
    Parameter,
    SeededRng,
    gelu,
    gelu_grad,
    sample_gaussian,
    sigmoid,
    softmax,
    softmax_backward,
)


class ShapeError(NumericsError):
    pass


def _acc(p: Parameter, g: np.ndarray) -> None:
    if not p.frozen:
        p.grad += g


def _init_linear(rng: SeededRng, d_out: int, d_in: int) -> np.ndarray:
    return sample_gaussian(rng, (d_out, d_in), 0.0, 1.0 / np.sqrt(d_in))


# -- LoRA ---------------------------------------------------------------------


class LoraAdapter:
    """Low-rank delta ``(alpha / rank) * B @ A`` added to a frozen weight."""

    def __init__(self, d_in: int, d_out: int, rank: int = 4, alpha: float = 8.0,
                 rng: SeededRng | None = None, init_std: float = 0.02):
        if rank < 1 or rank > min(d_in, d_out):
            raise ShapeError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}]")
        self.d_in, self.d_out, self.rank, self.alpha = d_in, d_out, rank, float(alpha)
        a0 = (sample_gaussian(rng, (rank, d_in), 0.0, init_std) if rng is not None
              else np.zeros((rank, d_in)))
        self.A = Parameter(a0)
        self.B = Parameter(np.zeros((d_out, rank)))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> dict[str, Parameter]:
        return {"A": self.A, "B": self.B}


def lora_forward(W: np.ndarray, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if W.shape != (adapter.d_out, adapter.d_in) or x.shape[-1] != adapter.d_in:
        raise ShapeError(
            f"shape mismatch: W {W.shape}, adapter ({adapter.d_out}, {adapter.d_in}), x {x.shape}"
        )
    return x @ W.T + adapter.scale * ((x @ adapter.A.value.T) @ adapter.B.value.T)


# -- image encoder ------------------------------------------------------------


def _space_to_depth(x: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = x.shape
    return (x.reshape(b, h // p, p, w // p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, h // p, w // p, p * p * c))


def _depth_to_space(x: np.ndarray, p: int, c: int) -> np.ndarray:
    b, h, w, _ = x.shape
    return (x.reshape(b, h, w, p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, h * p, w * p, c))


class PyramidEncoder:
    """Patch projection (stride 4) followed by 2x2 patch-merging stages."""

    def __init__(self, rng: SeededRng, dim: int = 32, n_stages: int = 3,
                 patch: int = 4, in_channels: int = 3):
        self.dim, self.n_stages, self.patch, self.in_channels = dim, n_stages, patch, in_channels
        self.params: dict[str, Parameter] = {}
        for s in range(n_stages):
            d_in = patch * patch * in_channels if s == 0 else 4 * dim
            self.params[f"W{s}"] = Parameter(_init_linear(rng.child(f"W{s}"), dim, d_in))
            self.params[f"b{s}"] = Parameter(np.zeros(dim))
        self.adapters: list[LoraAdapter] | None = None

    @property
    def total_stride(self) -> int:
        return self.patch * 2 ** (self.n_stages - 1)

    def stage_dims(self) -> list[tuple[int, int]]:
        return [(self.dim, self.patch * self.patch * self.in_channels if s == 0 else 4 * self.dim)
                for s in range(self.n_stages)]

    def attach_adapters(self, adapters: list[LoraAdapter] | None) -> None:
        if adapters is not None and len(adapters) != self.n_stages:
            raise ShapeError("one adapter per stage is required")
        self.adapters = adapters

    def forward(self, images: np.ndarray, use_adapters: bool = False):
        x = np.asarray(images, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        b, h, w, c = x.shape
        stride = self.total_stride
        if h % stride or w % stride:
            raise ShapeError(f"image size {h}x{w} not divisible by {stride}")
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        use = use_adapters and self.adapters is not None
        maps, caches = [], []
        cur = x
        for s in range(self.n_stages):
            inp = _space_to_depth(cur, self.patch if s == 0 else 2)
            W, bias = self.params[f"W{s}"].value, self.params[f"b{s}"].value
            pre = inp @ W.T + bias
            u = None
            if use:
                ad = self.adapters[s]
                u = inp @ ad.A.value.T
                pre = pre + ad.scale * (u @ ad.B.value.T)
            z = gelu(pre)
            maps.append(z)
            caches.append((inp, pre, u))
            cur = z
        return maps, {"stages": caches, "use": use, "in_shape": x.shape}

    def backward(self, cache, dmaps: list[np.ndarray | None]) -> None:
        use = cache["use"]
        carry = None
        for s in reversed(range(self.n_stages)):
            inp, pre, u = cache["stages"][s]
            dz = dmaps[s]
            if carry is not None:
                dz = carry if dz is None else dz + carry
            if dz is None:
                carry = None
                continue
            dpre = dz * gelu_grad(pre)
            W = self.params[f"W{s}"]
            flat_d = dpre.reshape(-1, dpre.shape[-1])
            flat_in = inp.reshape(-1, inp.shape[-1])
            if not W.frozen:
                W.grad += flat_d.T @ flat_in
            _acc(self.params[f"b{s}"], flat_d.sum(axis=0))
            need_input = s > 0
            du = None
            if use:
                ad = self.adapters[s]
                if not ad.B.frozen:
                    ad.B.grad += ad.scale * (flat_d.T @ u.reshape(-1, u.shape[-1]))
                du = ad.scale * (dpre @ ad.B.value)
                if not ad.A.frozen:
                    ad.A.grad += du.reshape(-1, du.shape[-1]).T @ flat_in
            if need_input:
                dinp = dpre @ W.value
                if du is not None:
                    dinp = dinp + du @ self.adapters[s].A.value
                carry = _depth_to_space(dinp, 2, self.dim)
            else:
                carry = None


def flatten_pyramid(maps: list[np.ndarray]) -> np.ndarray:
    """Concatenate maps scale-major, each row-major, into a token matrix.

    Accepts unbatched (H, W, D) or batched (B, H, W, D) maps.
    """
    if not maps:
        raise ShapeError("empty pyramid")
    dims = {m.shape[-1] for m in maps}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent channel dims {sorted(dims)}")
    if maps[0].ndim == 3:
        return np.concatenate([m.reshape(-1, m.shape[-1]) for m in maps], axis=0)
    return np.concatenate([m.reshape(m.shape[0], -1, m.shape[-1]) for m in maps], axis=1)


def unflatten_tokens(d_tokens: np.ndarray, shapes: list[tuple[int, int]]) -> list[np.ndarray]:
    out, start = [], 0
    b, _, d = d_tokens.shape
    for h, w in shapes:
        out.append(d_tokens[:, start:start + h * w].reshape(b, h, w, d))
        start += h * w
    return out


def pyramid_positions(shapes: list[tuple[int, int]]) -> np.ndarray:
    """Normalized (x, y) cell centres for every flattened token."""
    pos = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pos.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return np.concatenate(pos, axis=0)


# -- text encoder -------------------------------------------------------------


class TextEncoder:
    """Positional embeddings, one single-head self-attention block, read-out at
    the last token, output projection.

    Positions count back from the end of the sequence, so the final (class)
    token always sees ``pos[0]`` whatever is prepended to it.
    """

    def __init__(self, rng: SeededRng, dim: int = 32, max_len: int = 40):
        self.dim, self.max_len = dim, max_len
        p = {}
        p["pos"] = Parameter(sample_gaussian(rng.child("pos"), (max_len, dim), 0.0, 0.1))
        for name in ("Wq", "Wk", "Wv", "Wo", "Wp"):
            p[name] = Parameter(_init_linear(rng.child(name), dim, dim))
        p["bo"] = Parameter(np.zeros(dim))
        p["bp"] = Parameter(np.zeros(dim))
        self.params = p

    def forward(self, seqs: np.ndarray):
        """``seqs`` is (n, L, D) or a single (L, D) sequence."""
        X = np.asarray(seqs, dtype=DTYPE)
        single = X.ndim == 2
        if single:
            X = X[None]
        n, L, d = X.shape
        if L < 1 or L > self.max_len:
            raise ShapeError(f"sequence length {L} outside [1, {self.max_len}]")
        if d != self.dim:
            raise ShapeError(f"token dim {d} != {self.dim}")
        p = self.params
        x = X + p["pos"].value[:L][::-1]
        q = x @ p["Wq"].value.T
        k = x @ p["Wk"].value.T
        v = x @ p["Wv"].value.T
        att = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
        ctx = att @ v
        h = x + ctx @ p["Wo"].value.T + p["bo"].value
        pooled = h[:, -1]
        w = pooled @ p["Wp"].value.T + p["bp"].value
        cache = (x, q, k, v, att, ctx, pooled, single)
        return (w[0] if single else w), cache

    def backward(self, cache, dw: np.ndarray) -> np.ndarray:
        x, q, k, v, att, ctx, pooled, single = cache
        p = self.params
        if single:
            dw = dw[None]
        n, L, d = x.shape
        _acc(p["Wp"], dw.T @ pooled)
        _acc(p["bp"], dw.sum(axis=0))
        dpooled = dw @ p["Wp"].value
        dh = np.zeros_like(x)
        dh[:, -1] = dpooled
        _acc(p["Wo"], np.einsum("nld,nle->de", dh, ctx))
        _acc(p["bo"], dh.sum(axis=(0, 1)))
        dctx = dh @ p["Wo"].value
        datt = dctx @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ dctx
        ds = softmax_backward(att, datt) / np.sqrt(d)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        _acc(p["Wq"], np.einsum("nld,nle->de", dq, x))
        _acc(p["Wk"], np.einsum("nld,nle->de", dk, x))
        _acc(p["Wv"], np.einsum("nld,nle->de", dv, x))
        dx = dh + dq @ p["Wq"].value + dk @ p["Wk"].value + dv @ p["Wv"].value
        if not p["pos"].frozen:
            p["pos"].grad[:L] += dx.sum(axis=0)[::-1]
        return dx[0] if single else dx


# -- detection head -----------------------------------------------------------


class DetectionHead:
    """Stacked cross-attention decoder over image tokens.

    Layer 0 attends from learnable query vectors around learnable anchors;
    each later layer attends from the previous layer's query features around
    the location the previous layer looked at. Boxes come from a 2-layer
    perceptron refining the last attention-weighted location and spread; class
    scores are inner products with text embeddings.
    """

    _LAYER_PARAMS = ("Wq", "Wk", "Wv", "Wo", "bo", "Wg", "Wf1", "cf1", "Wf2", "cf2")

    def __init__(self, rng: SeededRng, dim: int = 32, n_queries: int = 16,
                 hidden: int = 64, attn_radius: float = 0.15, size_prior: float = 3.5,
                 n_layers: int = 2):
        if n_layers < 1:
            raise ShapeError("the head needs at least one layer")
        self.dim, self.n_queries, self.hidden = dim, n_queries, hidden
        self.attn_radius, self.size_prior, self.n_layers = attn_radius, size_prior, n_layers
        g = int(np.ceil(np.sqrt(n_queries)))
        cells = [((i % g) + 0.5) / g for i in range(n_queries)], [((i // g) + 0.5) / g for i in range(n_queries)]
        anchors = np.stack(cells, axis=1)
        p = {}
        p["queries"] = Parameter(sample_gaussian(rng.child("queries"), (n_queries, dim), 0.0, 1.0))
        p["anchors"] = Parameter(np.log(anchors / (1.0 - anchors)))
        for l in range(n_layers):
            r = rng.child(f"layer{l}")
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{name}{l}"] = Parameter(_init_linear(r.child(name), dim, dim))
            p[f"bo{l}"] = Parameter(np.zeros(dim))
            p[f"Wg{l}"] = Parameter(_init_linear(r.child("Wg"), dim, 4))
            p[f"Wf1{l}"] = Parameter(_init_linear(r.child("Wf1"), hidden, dim))
            p[f"cf1{l}"] = Parameter(np.zeros(hidden))
            p[f"Wf2{l}"] = Parameter(_init_linear(r.child("Wf2"), dim, hidden) * 0.5)
            p[f"cf2{l}"] = Parameter(np.zeros(dim))
        p["Wb1"] = Parameter(_init_linear(rng.child("Wb1"), hidden, dim))
        p["db1"] = Parameter(np.zeros(hidden))
        p["Wb2"] = Parameter(_init_linear(rng.child("Wb2"), 4, hidden) * 0.1)
        p["db2"] = Parameter(np.zeros(4))
        self.params = p

    def _layer(self, l: int, X: np.ndarray, centre: np.ndarray, E: np.ndarray, P: np.ndarray):
        p = {k: self.params[f"{k}{l}"].value for k in self._LAYER_PARAMS}
        d = self.dim
        Kt = E @ p["Wk"].T
        Vt = E @ p["Wv"].T
        qv = X @ p["Wq"].T
        diff = P[None, None] - centre[:, :, None, :]
        logits = (np.einsum("bqd,btd->bqt", qv, Kt) / np.sqrt(d)
                  - (diff**2).sum(-1) / (2 * self.attn_radius**2))
        att = softmax(logits)
        ctx = att @ Vt
        m = att @ P
        var = att @ (P**2) - m**2
        s = np.sqrt(np.maximum(var, 0.0) + 1e-6)
        # where the query actually looked, relative to where it started
        geo = np.concatenate([m - centre, s], axis=-1)
        h = X + ctx @ p["Wo"].T + p["bo"] + geo @ p["Wg"].T
        f1 = h @ p["Wf1"].T + p["cf1"]
        g1 = gelu(f1)
        O = h + g1 @ p["Wf2"].T + p["cf2"]
        cache = dict(X=X, centre=centre, Kt=Kt, Vt=Vt, qv=qv, diff=diff, att=att, ctx=ctx,
                     m=m, var=var, s=s, geo=geo, h=h, f1=f1, g1=g1)
        return O, m, s, cache

    def _layer_backward(self, l: int, c: dict, dO, dm, ds, E, P):
        """Returns (dX, dcentre, dE)."""
        prm = {k: self.params[f"{k}{l}"] for k in self._LAYER_PARAMS}
        d = self.dim
        _acc(prm["Wf2"], np.einsum("bqd,bqh->dh", dO, c["g1"]))
        _acc(prm["cf2"], dO.sum(axis=(0, 1)))
        df1 = (dO @ prm["Wf2"].value) * gelu_grad(c["f1"])
        _acc(prm["Wf1"], np.einsum("bqh,bqd->hd", df1, c["h"]))
        _acc(prm["cf1"], df1.sum(axis=(0, 1)))
        dh = dO + df1 @ prm["Wf1"].value
        _acc(prm["Wg"], np.einsum("bqd,bqg->dg", dh, c["geo"]))
        dgeo = dh @ prm["Wg"].value
        dm = dm + dgeo[..., :2]
        ds = ds + dgeo[..., 2:]
        dcentre = -dgeo[..., :2]
        m, s, att = c["m"], c["s"], c["att"]
        dvar = np.where(c["var"] > 0, ds / (2.0 * s), 0.0)
        dm = dm - 2.0 * m * dvar
        datt = dm @ P.T + dvar @ (P**2).T
        _acc(prm["Wo"], np.einsum("bqd,bqe->de", dh, c["ctx"]))
        _acc(prm["bo"], dh.sum(axis=(0, 1)))
        dctx = dh @ prm["Wo"].value
        datt += dctx @ c["Vt"].transpose(0, 2, 1)
        dVt = att.transpose(0, 2, 1) @ dctx
        dlogits = softmax_backward(att, datt)
        dqv = dlogits @ c["Kt"] / np.sqrt(d)
        dKt = dlogits.transpose(0, 2, 1) @ c["qv"] / np.sqrt(d)
        dcentre += np.einsum("bqt,bqtc->bqc", dlogits, c["diff"]) / self.attn_radius**2
        _acc(prm["Wq"], np.einsum("bqd,bqe->de", dqv, c["X"]))
        dX = dh + dqv @ prm["Wq"].value
        _acc(prm["Wk"], np.einsum("btd,bte->de", dKt, E))
        _acc(prm["Wv"], np.einsum("btd,bte->de", dVt, E))
        dE = dKt @ prm["Wk"].value + dVt @ prm["Wv"].value
        return dX, dcentre, dE

    def forward(self, tokens: np.ndarray, text: np.ndarray, positions: np.ndarray):
        """tokens (B, T, D), text (K, D) or (B, K, D), positions (T, 2).

        Returns O (B, Q, D), boxes (B, Q, 4) as (cx, cy, w, h), scores C (B, Q, K).
        """
        E = np.asarray(tokens, dtype=DTYPE)
        Et = np.asarray(text, dtype=DTYPE)
        if Et.shape[-2] < 1:
            raise ShapeError("at least one category embedding is required")
        p = self.params
        B = E.shape[0]
        P = positions
        anc = sigmoid(p["anchors"].value)
        X = np.broadcast_to(p["queries"].value, (B,) + p["queries"].value.shape)
        centre = np.broadcast_to(anc, (B,) + anc.shape)
        layers = []
        for l in range(self.n_layers):
            X, centre, s, lc = self._layer(l, X, centre, E, P)
            layers.append(lc)
        O, m = X, centre
        u1 = O @ p["Wb1"].value.T + p["db1"].value
        gu = gelu(u1)
        delta = gu @ p["Wb2"].value.T + p["db2"].value
        box_logits = np.concatenate(
            [np.log(m / (1.0 - m)) + delta[..., :2],
             np.log(self.size_prior * s) + delta[..., 2:]], axis=-1)
        boxes = sigmoid(box_logits)
        # keep strictly inside (0, 1) in float64
        boxes = np.clip(boxes, 1e-12, 1.0 - 1e-12)
        if Et.ndim == 2:
            C = O @ Et.T
        else:
            C = np.einsum("bqd,bkd->bqk", O, Et)
        cache = dict(E=E, Et=Et, anc=anc, layers=layers, O=O, m=m, s=s, u1=u1, gu=gu,
                     boxes=boxes, positions=P)
        return O, boxes, C, cache

    def backward(self, cache, dboxes: np.ndarray | None, dC: np.ndarray | None,
                 dO_extra: np.ndarray | None = None):
        """Returns (d tokens, d text) with d text shaped like the text input."""
        p = self.params
        c = cache
        O, Et, E, P = c["O"], c["Et"], c["E"], c["positions"]
        dO = np.zeros_like(O) if dO_extra is None else dO_extra.copy()
        dEt = np.zeros_like(Et)
        if dC is not None:
            if Et.ndim == 2:
                dEt = np.einsum("bqk,bqd->kd", dC, O)
                dO += dC @ Et
            else:
                dEt = np.einsum("bqk,bqd->bkd", dC, O)
                dO += np.einsum("bqk,bkd->bqd", dC, Et)
        m, s = c["m"], c["s"]
        dm = np.zeros_like(m)
        ds = np.zeros_like(s)
        if dboxes is not None:
            bx = c["boxes"]
            dlog = dboxes * bx * (1.0 - bx)
            dm += dlog[..., :2] / (m * (1.0 - m))
            ds += dlog[..., 2:] / s
            _acc(p["Wb2"], np.einsum("bqo,bqh->oh", dlog, c["gu"]))
            _acc(p["db2"], dlog.sum(axis=(0, 1)))
            du1 = (dlog @ p["Wb2"].value) * gelu_grad(c["u1"])
            _acc(p["Wb1"], np.einsum("bqh,bqd->hd", du1, O))
            _acc(p["db1"], du1.sum(axis=(0, 1)))
            dO += du1 @ p["Wb1"].value
        dE = np.zeros_like(E)
        dX, dcentre = dO, dm
        for l in reversed(range(self.n_layers)):
            dX, dcentre, dE_l = self._layer_backward(l, c["layers"][l], dX, dcentre, ds, E, P)
            dE += dE_l
            ds = np.zeros_like(ds)
        _acc(p["queries"], dX.sum(axis=0))
        anc = c["anc"]
        _acc(p["anchors"], dcentre.sum(axis=0) * anc * (1.0 - anc))
        return dE, dEt


# -- the frozen base model ----------------------------------------------------


@dataclass
class ModelSpec:
    dim: int = 32
    n_stages: int = 3
    n_queries: int = 16
    head_hidden: int = 64
    max_text_len: int = 40
    attn_radius: float = 0.15
    size_prior: float = 3.5
    head_layers: int = 2


class ToyOVModel:
    """Image encoder, text encoder, detection head and category token table."""

    def __init__(self, vocabulary: list[str], spec: ModelSpec | None = None,
                 rng: SeededRng | None = None):
        self.spec = spec or ModelSpec()
        rng = rng or SeededRng(0)
        s = self.spec
        self.vocabulary = list(vocabulary)
        self.encoder = PyramidEncoder(rng.child("encoder"), dim=s.dim, n_stages=s.n_stages)
        self.text_encoder = TextEncoder(rng.child("text"), dim=s.dim, max_len=s.max_text_len)
        self.head = DetectionHead(rng.child("head"), dim=s.dim, n_queries=s.n_queries,
                                  hidden=s.head_hidden, attn_radius=s.attn_radius,
                                  size_prior=s.size_prior, n_layers=s.head_layers)
        self.token_table = Parameter(
            sample_gaussian(rng.child("tokens"), (len(vocabulary), s.dim), 0.0, 1.0))
        self._positions: dict[tuple, np.ndarray] = {}

    def token_ids(self, names: list[str]) -> list[int]:
        try:
            return [self.vocabulary.index(n) for n in names]
        except ValueError as exc:
            raise KeyError(f"unknown category name: {exc}") from None

    def named_parameters(self) -> dict[str, Parameter]:
        out = {"tokens": self.token_table}
        for prefix, mod in (("encoder", self.encoder), ("text", self.text_encoder),
                            ("head", self.head)):
            for k, v in mod.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def freeze(self) -> None:
        for p in self.named_parameters().values():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.named_parameters().values():
            p.frozen = False

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.named_parameters().values())

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def positions_for(self, shapes: list[tuple[int, int]]) -> np.ndarray:
        key = tuple(shapes)
        if key not in self._positions:
            self._positions[key] = pyramid_positions(shapes)
        return self._positions[key]

    def architecture(self) -> dict:
        s = self.spec
        return {"S": s.n_stages, "D": s.dim, "Q": s.n_queries, "head_hidden": s.head_hidden,
                "max_text_len": s.max_text_len, "attn_radius": s.attn_radius,
                "size_prior": s.size_prior, "head_layers": s.head_layers,
                "vocabulary": self.vocabulary}
