"""Reconstruction-error routing between augmented and pretrained semantics.

The semantic-aware router strips the scalar mean / standard deviation from a
pooled image feature, reconstructs the normalized content with a small
autoencoder, re-applies the statistics and thresholds the mean squared error.
The DDAS-style baseline reconstructs the raw pooled feature instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .numerics import DTYPE, NumericsError, Parameter, SeededRng, SGD, sample_gaussian
from .validation import check_images


class RouterTrainingError(RuntimeError):
    pass


class Route(enum.Enum):
    AUGMENTED = "augmented"
    PRETRAINED = "pretrained"


@dataclass(frozen=True)
class RouteDecision:
    route: Route
    d_err: float

    @property
    def augmented(self) -> bool:
        return self.route is Route.AUGMENTED


@dataclass(frozen=True)
class DomainStats:
    mu: float
    sigma: float


# -- feature extractor ----------------------------------------------------------


def _conv3x3_s2(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1. x (B, H, W, C), W (C_out, 3, 3, C)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # (B, h, w, C, 3, 3)
    return np.einsum("bhwcij,oijc->bhwo", win, W, optimize=True) + b


class ConvFeatureExtractor:
    """Two stride-2 3x3 convolutions with ReLU, global average pooling.

    Weights are drawn once from the seed and never trained.
    """

    def __init__(self, seed: int = 0, out_dim: int = 32, hidden_channels: int = 16,
                 in_channels: int = 3):
        rng = SeededRng(seed).child("router-extractor")
        self.out_dim = out_dim
        self.W1 = sample_gaussian(rng.child("W1"), (hidden_channels, 3, 3, in_channels), 0.0,
                                  np.sqrt(2.0 / (9 * in_channels)))
        self.b1 = sample_gaussian(rng.child("b1"), (hidden_channels,), 0.0, 0.1)
        self.W2 = sample_gaussian(rng.child("W2"), (out_dim, 3, 3, hidden_channels), 0.0,
                                  np.sqrt(2.0 / (9 * hidden_channels)))
        self.b2 = sample_gaussian(rng.child("b2"), (out_dim,), 0.0, 0.1)

    def feature_map(self, images: np.ndarray) -> np.ndarray:
        x = check_images(images, min_size=4)
        h = np.maximum(_conv3x3_s2(x, self.W1, self.b1), 0.0)
        return np.maximum(_conv3x3_s2(h, self.W2, self.b2), 0.0)

    def pooled(self, images: np.ndarray) -> np.ndarray:
        single = np.asarray(images).ndim == 3
        out = self.feature_map(images).mean(axis=(1, 2))
        return out[0] if single else out


# -- content / domain decomposition ---------------------------------------------


def domain_stats(f) -> DomainStats:
    f = np.asarray(f, dtype=DTYPE).ravel()
    if f.size < 1:
        raise NumericsError("feature must have at least one coordinate")
    return DomainStats(float(f.mean()), float(f.std()))


def content_embedding(f, stats: DomainStats, epsilon: float = 1e-5) -> np.ndarray:
    if epsilon <= 0:
        raise NumericsError("epsilon must be positive")
    return (np.asarray(f, dtype=DTYPE) - stats.mu) / (stats.sigma + epsilon)


def restore_domain(c_hat, stats: DomainStats) -> np.ndarray:
    return np.asarray(c_hat, dtype=DTYPE) * stats.sigma + stats.mu


def reconstruction_error(f_hat, f) -> float:
    f_hat = np.asarray(f_hat, dtype=DTYPE).ravel()
    f = np.asarray(f, dtype=DTYPE).ravel()
    if f_hat.shape != f.shape:
        raise NumericsError("reconstruction and target lengths differ")
    return float(np.mean((f_hat - f) ** 2))


def route(d_err: float, tau: float) -> RouteDecision:
    if tau <= 0:
        raise NumericsError("tau must be positive")
    return RouteDecision(Route.AUGMENTED if d_err < tau else Route.PRETRAINED, float(d_err))


def _batch_stats(F: np.ndarray, epsilon: float):
    mu = F.mean(axis=1, keepdims=True)
    sigma = F.std(axis=1, keepdims=True)
    return mu, sigma, (F - mu) / (sigma + epsilon)


# -- autoencoder ------------------------------------------------------------------


class ContentAutoencoder:
    """Tanh perceptron ``D -> D/2 -> D/4 -> D/2 -> D`` with a linear output layer."""

    def __init__(self, dim: int = 32, rng: SeededRng | None = None, hidden: int | None = None,
                 bottleneck: int | None = None):
        rng = rng or SeededRng(0)
        hidden = hidden or max(1, dim // 2)
        bottleneck = bottleneck or max(1, dim // 4)
        self.sizes = [dim, hidden, bottleneck, hidden, dim]
        self.params: list[tuple[Parameter, Parameter]] = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W = sample_gaussian(rng.child(f"W{i}"), (b, a), 0.0, 1.0 / np.sqrt(a))
            self.params.append((Parameter(W), Parameter(np.zeros(b))))

    @property
    def dim(self) -> int:
        return self.sizes[0]

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.params for p in pair]

    def forward(self, x: np.ndarray):
        acts = [np.asarray(x, dtype=DTYPE)]
        h = acts[0]
        last = len(self.params) - 1
        for i, (W, b) in enumerate(self.params):
            h = h @ W.value.T + b.value
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> None:
        d = dout
        last = len(self.params) - 1
        for i in reversed(range(len(self.params))):
            W, b = self.params[i]
            if i < last:
                d = d * (1.0 - acts[i + 1] ** 2)
            inp = acts[i]
            W.grad += d.T @ inp if d.ndim == 2 else np.outer(d, inp)
            b.grad += d.sum(axis=0) if d.ndim == 2 else d
            d = d @ W.value

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.params):
            out[f"W{i}"] = W.value
            out[f"b{i}"] = b.value
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, (W, b) in enumerate(self.params):
            W.value = np.array(state[f"W{i}"], dtype=DTYPE)
            b.value = np.array(state[f"b{i}"], dtype=DTYPE)
            W.grad = np.zeros_like(W.value)
            b.grad = np.zeros_like(b.value)


class IdentityAutoencoder:
    """Exact identity map, used to check the routing algebra."""

    def reconstruct(self, x):
        return np.array(x, dtype=DTYPE, copy=True)


# -- error pipelines ----------------------------------------------------------------


def sar_errors_from_features(F: np.ndarray, autoencoder, epsilon: float = 1e-5) -> np.ndarray:
    F = np.atleast_2d(np.asarray(F, dtype=DTYPE))
    mu, sigma, c = _batch_stats(F, epsilon)
    f_hat = autoencoder.reconstruct(c) * sigma + mu
    return np.mean((f_hat - F) ** 2, axis=1)


def ddas_errors_from_features(F: np.ndarray, autoencoder) -> np.ndarray:
    F = np.atleast_2d(np.asarray(F, dtype=DTYPE))
    return np.mean((autoencoder.reconstruct(F) - F) ** 2, axis=1)


@dataclass
class RouterState:
    extractor: ConvFeatureExtractor
    autoencoder: object
    tau: float = 0.039
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon <= 0:
            raise NumericsError("tau and epsilon must be positive")


def extract_pooled_feature(image, router: RouterState) -> np.ndarray:
    return router.extractor.pooled(image)


def sar_error(image, router: RouterState) -> float:
    f = extract_pooled_feature(image, router)
    stats = domain_stats(f)
    c = content_embedding(f, stats, router.epsilon)
    f_hat = restore_domain(router.autoencoder.reconstruct(c[None])[0], stats)
    return reconstruction_error(f_hat, f)


def ddas_error(image, router: RouterState) -> float:
    f = extract_pooled_feature(image, router)
    return reconstruction_error(router.autoencoder.reconstruct(f[None])[0], f)


def train_autoencoder(autoencoder: ContentAutoencoder, features: np.ndarray, epochs: int = 24,
                      lr: float = 1e-3, mode: str = "sar", epsilon: float = 1e-5,
                      batch_size: int = 1, rng: SeededRng | None = None) -> list[float]:
    """SGD on mean squared reconstruction error; returns per-epoch mean loss.

    SAR reconstructs the content embedding, DDAS the raw pooled feature.
    """
    if mode not in ("sar", "ddas"):
        raise ValueError(f"unknown router mode {mode!r}")
    F = np.atleast_2d(np.asarray(features, dtype=DTYPE))
    if F.shape[0] == 0:
        raise ValueError("cannot train a router on an empty dataset")
    targets = _batch_stats(F, epsilon)[2] if mode == "sar" else F
    rng = rng or SeededRng(0)
    opt = SGD(autoencoder.parameters(), lr=lr)
    history = []
    n = targets.shape[0]
    for epoch in range(epochs):
        order = rng.child(f"epoch{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            xb = targets[order[start:start + batch_size]]
            opt.zero_grad()
            out, acts = autoencoder.forward(xb)
            diff = out - xb
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise RouterTrainingError(
                    f"{mode} autoencoder diverged at epoch {epoch}, batch {start}: loss={loss}, "
                    f"lr={lr}, |x|max={np.abs(xb).max():.3g}")
            autoencoder.backward(acts, 2.0 * diff / diff.size)
            opt.step()
            total += loss * len(xb)
        history.append(total / n)
    return history


# -- sklearn-style estimators ---------------------------------------------------------


class SemanticAwareRouter(BaseEstimator):
    """Routes an image to augmented semantics when its content reconstruction
    error falls below ``tau``.

    ``fit`` trains the autoencoder on in-domain images, ``score_samples``
    returns d_err, ``predict`` returns 1 for augmented and 0 for pretrained.
    """

    mode = "sar"

    def __init__(self, tau: float = 0.039, epsilon: float = 1e-5, feature_dim: int = 32,
                 extractor_channels: int = 16, epochs: int = 24, lr: float = 1e-3,
                 batch_size: int = 1, random_state: int = 0):
        self.tau = tau
        self.epsilon = epsilon
        self.feature_dim = feature_dim
        self.extractor_channels = extractor_channels
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _extractor(self) -> ConvFeatureExtractor:
        return ConvFeatureExtractor(self.random_state, self.feature_dim, self.extractor_channels)

    def fit(self, X, y=None, features: np.ndarray | None = None):
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        self.extractor_ = self._extractor()
        F = self.extractor_.pooled(X) if features is None else np.asarray(features, dtype=DTYPE)
        rng = SeededRng(self.random_state).child(f"router-{self.mode}")
        self.autoencoder_ = ContentAutoencoder(self.feature_dim, rng.child("init"))
        self.loss_curve_ = train_autoencoder(self.autoencoder_, F, self.epochs, self.lr,
                                             self.mode, self.epsilon, self.batch_size,
                                             rng.child("shuffle"))
        return self

    def pooled_features(self, X) -> np.ndarray:
        check_is_fitted(self, "autoencoder_")
        return self.extractor_.pooled(X)

    def errors_from_features(self, F: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "autoencoder_")
        return sar_errors_from_features(F, self.autoencoder_, self.epsilon)

    def score_samples(self, X) -> np.ndarray:
        return self.errors_from_features(self.pooled_features(X))

    def decision_function(self, X) -> np.ndarray:
        return self.tau - self.score_samples(X)

    def predict(self, X) -> np.ndarray:
        return (self.score_samples(X) < self.tau).astype(int)

    def route_one(self, image) -> RouteDecision:
        return route(float(self.score_samples(np.asarray(image)[None])[0]), self.tau)

    def state(self) -> RouterState:
        check_is_fitted(self, "autoencoder_")
        return RouterState(self.extractor_, self.autoencoder_, self.tau, self.epsilon)


class DDASRouter(SemanticAwareRouter):
    """Baseline that reconstructs the raw pooled feature."""

    mode = "ddas"

    def errors_from_features(self, F: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "autoencoder_")
        return ddas_errors_from_features(F, self.autoencoder_)
