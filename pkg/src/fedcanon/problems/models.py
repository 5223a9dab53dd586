"""Smooth loss models with analytic gradients.

Parameters are always a flat float64 vector so the federated algorithms can
treat every model as a point in ``R^d``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SmoothnessEstimate:
    L: float
    method: str  # "analytic" | "power-iteration" | "empirical"


def power_iteration(matvec, n: int, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as ``matvec``."""
    v = np.random.default_rng(seed).normal(size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            # one more Rayleigh quotient on the refined vector
            return max(lam_new, float(v @ matvec(v)))
        lam = lam_new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def gram_lambda_max(X: np.ndarray, tol: float = 1e-8) -> float:
    m = X.shape[0]
    return power_iteration(lambda v: X.T @ (X @ v) / m, X.shape[1], tol=tol)


class Model:
    """Base class; subclasses define ``dim``, ``loss``, ``grad`` and ``predict``."""

    name = "model"
    dim: int

    def loss(self, w, X, y) -> float:
        raise NotImplementedError

    def grad(self, w, X, y) -> np.ndarray:
        raise NotImplementedError

    def predict(self, w, X) -> np.ndarray:
        raise NotImplementedError

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.dim)

    def smoothness(self, X) -> SmoothnessEstimate:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"model": self.name}

    def _check(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"parameter vector has shape {w.shape}, expected ({self.dim},)")
        return w


class LeastSquares(Model):
    """``f(w) = ||X w - y||^2 / (2 m)``."""

    name = "quadratic"

    def __init__(self, n_features: int):
        self.dim = n_features

    def loss(self, w, X, y):
        r = X @ self._check(w) - y
        return 0.5 * float(r @ r) / len(y)

    def grad(self, w, X, y):
        return X.T @ (X @ self._check(w) - y) / len(y)

    def predict(self, w, X):
        return X @ w

    def smoothness(self, X):
        return SmoothnessEstimate(gram_lambda_max(X), "power-iteration")


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Logistic(Model):
    """Binary logistic (sigmoid) or multinomial (softmax) regression.

    The binary model has one weight per feature and labels in ``{0, 1}``.  The
    multinomial model stores a ``(n_features, n_classes)`` weight matrix
    flattened row-major.  No bias term: append a constant feature instead.
    """

    name = "logistic"

    def __init__(self, n_features: int, n_classes: int = 2):
        self.n_features = n_features
        self.n_classes = n_classes
        self.dim = n_features if n_classes == 2 else n_features * n_classes

    def to_dict(self):
        return {"model": self.name, "n_classes": self.n_classes}

    def _logits(self, w, X):
        return X @ w.reshape(self.n_features, self.n_classes)

    def loss(self, w, X, y):
        w = self._check(w)
        if self.n_classes == 2:
            t = X @ w
            return float(np.mean(np.logaddexp(0.0, t) - y * t))
        logp = _log_softmax(self._logits(w, X))
        return float(-np.mean(logp[np.arange(len(y)), y]))

    def grad(self, w, X, y):
        w = self._check(w)
        if self.n_classes == 2:
            p = 0.5 * (1.0 + np.tanh(0.5 * (X @ w)))
            return X.T @ (p - y) / len(y)
        P = np.exp(_log_softmax(self._logits(w, X)))
        P[np.arange(len(y)), y] -= 1.0
        return (X.T @ P).ravel() / len(y)

    def predict(self, w, X):
        if self.n_classes == 2:
            return (X @ w > 0).astype(np.int64)
        return np.argmax(self._logits(w, X), axis=1)

    def smoothness(self, X):
        # sigmoid'' <= 1/4; softmax Hessian block diag(p) - p p^T has norm <= 1/2
        factor = 0.25 if self.n_classes == 2 else 0.5
        return SmoothnessEstimate(factor * gram_lambda_max(X), "analytic")


class MLP(Model):
    """Fully connected tanh network with a softmax cross-entropy head.

    tanh keeps the loss twice differentiable, so the Lipschitz-gradient
    probes are meaningful; the curvature constant is only estimated.
    """

    name = "mlp"

    def __init__(self, n_features: int, hidden: tuple[int, ...], n_classes: int):
        self.widths = (n_features, *hidden, n_classes)
        self.shapes = [(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])]
        self.dim = sum(a * b + b for a, b in self.shapes)

    def to_dict(self):
        return {"model": self.name, "hidden": list(self.widths[1:-1]), "n_classes": self.widths[-1]}

    def _unpack(self, w):
        layers, pos = [], 0
        for a, b in self.shapes:
            W = w[pos:pos + a * b].reshape(a, b)
            pos += a * b
            layers.append((W, w[pos:pos + b]))
            pos += b
        return layers

    def _forward(self, w, X):
        acts = [X]
        layers = self._unpack(w)
        for W, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ W + b))
        W, b = layers[-1]
        return acts, acts[-1] @ W + b

    def init_params(self, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        parts = []
        for a, b in self.shapes:
            parts.append(rng.normal(scale=np.sqrt(1.0 / a), size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def loss(self, w, X, y):
        _, logits = self._forward(self._check(w), X)
        return float(-np.mean(_log_softmax(logits)[np.arange(len(y)), y]))

    def grad(self, w, X, y):
        w = self._check(w)
        acts, logits = self._forward(w, X)
        delta = np.exp(_log_softmax(logits))
        delta[np.arange(len(y)), y] -= 1.0
        delta /= len(y)
        grads = []
        layers = self._unpack(w)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            grads.append(delta.sum(axis=0))
            grads.append((acts[k].T @ delta).ravel())
            if k:
                delta = (delta @ W.T) * (1.0 - acts[k] ** 2)
        return np.concatenate(grads[::-1])

    def predict(self, w, X):
        return np.argmax(self._forward(w, X)[1], axis=1)

    def smoothness(self, X, y=None, pairs: int = 100, seed: int = 0, radius: float = 1.0):
        """Largest sampled ratio ``||grad(u) - grad(v)|| / ||u - v||``."""
        rng = np.random.default_rng(seed)
        if y is None:
            y = np.zeros(len(X), dtype=np.int64)
        best = 0.0
        for _ in range(pairs):
            u = self.init_params(rng)
            v = u + radius * rng.normal(size=self.dim) / np.sqrt(self.dim)
            best = max(best, np.linalg.norm(self.grad(u, X, y) - self.grad(v, X, y)) / np.linalg.norm(u - v))
        return SmoothnessEstimate(float(best), "empirical")


def make_model(spec: dict, n_features: int, n_classes: int) -> Model:
    kind = spec.get("model", "logistic")
    if kind == "quadratic":
        return LeastSquares(n_features)
    if kind == "logistic":
        return Logistic(n_features, n_classes)
    if kind == "mlp":
        return MLP(n_features, tuple(spec.get("hidden", (32,))), n_classes)
    raise ValueError(f"unknown model {kind!r}")
