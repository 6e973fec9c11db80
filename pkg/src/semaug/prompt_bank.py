"""Multi-scale prompt bank: per-scale key selection, prompt composition and the
key-matching / prompt-orthogonality losses with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DTYPE,
    NumericsError,
    Parameter,
    SeededRng,
    global_average_pool,
    l2_normalize,
    sample_gaussian,
)


class PromptBank:
    """``n_pairs`` (key, prompt) pairs; each prompt is ``prompt_len`` D-vectors."""

    def __init__(self, keys, prompts):
        keys = np.asarray(keys, dtype=DTYPE)
        prompts = np.asarray(prompts, dtype=DTYPE)
        if keys.ndim != 2 or prompts.ndim != 3:
            raise NumericsError("keys must be (N, D) and prompts (N, M, D)")
        if keys.shape[0] < 1 or prompts.shape[1] < 1:
            raise NumericsError("bank needs N >= 1 and M >= 1")
        if keys.shape[0] != prompts.shape[0] or keys.shape[1] != prompts.shape[2]:
            raise NumericsError(f"keys {keys.shape} and prompts {prompts.shape} disagree")
        if np.any(np.linalg.norm(keys, axis=1) == 0):
            raise NumericsError("every key must have nonzero norm")
        self.keys = Parameter(keys)
        self.prompts = Parameter(prompts)

    @classmethod
    def initialize(cls, rng: SeededRng, n_pairs: int = 10, prompt_len: int = 12,
                   dim: int = 32, prompt_std: float = 0.02) -> "PromptBank":
        keys = sample_gaussian(rng.child("keys"), (n_pairs, dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        prompts = sample_gaussian(rng.child("prompts"), (n_pairs, prompt_len, dim), 0.0, prompt_std)
        return cls(keys, prompts)

    @property
    def n_pairs(self) -> int:
        return self.keys.value.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.value.shape[1]

    @property
    def dim(self) -> int:
        return self.keys.value.shape[1]

    def parameters(self) -> dict[str, Parameter]:
        return {"keys": self.keys, "prompts": self.prompts}


@dataclass
class Selection:
    indices: list[int]
    similarities: list[float]


def pooled_scale_features(pyramid) -> list[np.ndarray]:
    """Unit-norm global average of each (H, W, D) map."""
    if len(pyramid) < 1:
        raise NumericsError("pyramid must contain at least one scale")
    return [l2_normalize(global_average_pool(z)) for z in pyramid]


def pooled_scale_features_batch(maps: list[np.ndarray]) -> np.ndarray:
    """Batched variant: maps of shape (B, H, W, D) -> (B, S, D)."""
    pooled = np.stack([m.mean(axis=(1, 2)) for m in maps], axis=1)
    norms = np.linalg.norm(pooled, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericsError("pooled feature with zero norm")
    return pooled / norms


def similarity_table(features: np.ndarray, keys: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=DTYPE)
    k = np.asarray(keys, dtype=DTYPE)
    fn = f / np.linalg.norm(f, axis=-1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=-1, keepdims=True)
    return fn @ kn.T


def select_keys(features, bank: PromptBank) -> Selection:
    """Per-scale argmax of cosine similarity; ``np.argmax`` returns the lowest
    index among ties."""
    f = np.atleast_2d(np.asarray(features, dtype=DTYPE))
    if f.shape[0] == 0:
        return Selection([], [])
    if f.shape[1] != bank.dim:
        raise NumericsError(f"feature dim {f.shape[1]} != key dim {bank.dim}")
    sims = similarity_table(f, bank.keys.value)
    idx = sims.argmax(axis=1)
    return Selection(idx.tolist(), sims[np.arange(len(idx)), idx].tolist())


def select_keys_batch(features: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(B, S, D) features -> (B, S) selected indices."""
    return similarity_table(features, keys).argmax(axis=-1)


def compose_prompt_sequence(selection: Selection | list[int], bank: PromptBank, class_embedding,
                            max_len: int | None = None) -> np.ndarray:
    """Selected prompts in scale order followed by the class embedding: (S*M + 1, D)."""
    idx = selection.indices if isinstance(selection, Selection) else list(selection)
    cls = np.asarray(class_embedding, dtype=DTYPE).reshape(1, -1)
    if any(i < 0 or i >= bank.n_pairs for i in idx):
        raise NumericsError("selection index out of range for bank")
    parts = [bank.prompts.value[i] for i in idx] + [cls]
    seq = np.concatenate(parts, axis=0)
    if max_len is not None and seq.shape[0] > max_len:
        raise NumericsError(f"sequence length {seq.shape[0]} exceeds text encoder max {max_len}")
    return seq


def matching_loss(features, selection: Selection | list[int], bank: PromptBank,
                  ) -> tuple[float, np.ndarray]:
    """Sum over scales of ``1 - cos(feature_s, key_selected_s)``.

    Features are treated as constants; the gradient is w.r.t. the key matrix
    and is nonzero only on selected rows.
    """
    idx = selection.indices if isinstance(selection, Selection) else list(selection)
    f = np.atleast_2d(np.asarray(features, dtype=DTYPE))
    keys = bank.keys.value
    grad = np.zeros_like(keys)
    loss = 0.0
    for s, i in enumerate(idx):
        z, k = f[s], keys[i]
        nz, nk = np.linalg.norm(z), np.linalg.norm(k)
        if nz == 0 or nk == 0:
            raise NumericsError("zero-norm feature or key")
        cos = z @ k / (nz * nk)
        loss += 1.0 - cos
        grad[i] -= z / (nz * nk) - cos * k / nk**2
    return float(loss), grad


def matching_loss_batch(features: np.ndarray, indices: np.ndarray, keys: np.ndarray):
    """Mean over the batch of the per-image matching loss; returns (loss, d keys)."""
    b, s, _ = features.shape
    k = keys[indices]
    nz = np.linalg.norm(features, axis=-1)
    nk = np.linalg.norm(k, axis=-1)
    cos = (features * k).sum(-1) / (nz * nk)
    loss = (1.0 - cos).sum() / b
    dk = -(features / (nz * nk)[..., None] - cos[..., None] * k / (nk**2)[..., None]) / b
    grad = np.zeros_like(keys)
    np.add.at(grad, indices.reshape(-1), dk.reshape(-1, keys.shape[1]))
    return float(loss), grad


def orthogonal_loss(bank_or_prompts) -> tuple[float, np.ndarray]:
    """``1/(N(N-1)) * sum_{n<m} |cos(vec P_n, vec P_m)|`` and its gradient
    w.r.t. the (N, M, D) prompt tensor. Zero for a single prompt."""
    P = (bank_or_prompts.prompts.value if isinstance(bank_or_prompts, PromptBank)
         else np.asarray(bank_or_prompts, dtype=DTYPE))
    n = P.shape[0]
    V = P.reshape(n, -1)
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise NumericsError("zero-norm prompt in orthogonality loss")
    if n == 1:
        return 0.0, np.zeros_like(P)
    U = V / norms[:, None]
    cos = U @ U.T
    iu = np.triu_indices(n, k=1)
    scale = 1.0 / (n * (n - 1))
    loss = scale * np.abs(cos[iu]).sum()
    sgn = np.sign(cos)
    np.fill_diagonal(sgn, 0.0)
    # d|cos_nm|/dv_n = sign * (u_m - cos_nm u_n) / |v_n|; both orders of each pair
    gU = sgn @ U - (sgn * cos).sum(axis=1, keepdims=True) * U
    grad = scale * gU / norms[:, None]
    return float(loss), grad.reshape(P.shape)


def mean_abs_pairwise_cosine(prompts) -> float:
    P = np.asarray(prompts, dtype=DTYPE)
    n = P.shape[0]
    if n < 2:
        return 0.0
    U = P.reshape(n, -1)
    U = U / np.linalg.norm(U, axis=1, keepdims=True)
    iu = np.triu_indices(n, k=1)
    return float(np.abs((U @ U.T)[iu]).mean())
