"""Deterministic numerical substrate: seeded RNG, stable log-domain helpers,
dense MLP with analytic gradients, and a library-free symmetric eigensolver.

Everything here operates on float64 numpy arrays and is pure: no function
mutates its inputs except where the name says so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError


@dataclass(frozen=True)
class RngState:
    """Seed + named algorithm; same seed yields a bit-identical draw stream."""

    seed: int
    algorithm: str = "pcg64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ConfigurationError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64(self.seed))


def make_rng(seed: int) -> np.random.Generator:
    return RngState(seed).generator()


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent child generators, deterministic in (seed, n)."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class DenseMatrix:
    """Row-major dense matrix; the wire/value form used at module boundaries."""

    rows: int
    cols: int
    values: np.ndarray  # flat, length rows * cols

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.rows * self.cols:
            raise ConfigurationError(
                f"values length {self.values.size} != {self.rows}x{self.cols}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("non-finite entries in DenseMatrix")

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.rows, self.cols)

    @classmethod
    def from_array(cls, a) -> "DenseMatrix":
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape[0], a.shape[1], a.ravel().copy())


def l2_normalize(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Project onto the unit sphere. Raises on (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= eps or n == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / n


def log_sum_exp(values) -> float:
    """log(sum(exp(v))) with max subtraction; safe for entries up to ~1e3."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DegenerateInputError("log_sum_exp of empty sequence")
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def sample_unit_sphere(rng: np.random.Generator, d: int) -> np.ndarray:
    """Rotation-invariant draw: standard Gaussian, then normalized."""
    if d < 1:
        raise ConfigurationError("dimension must be >= 1")
    while True:
        g = rng.standard_normal(d)
        n = np.linalg.norm(g)
        if n > 1e-12:
            return g / n


# ---------------------------------------------------------------------------
# MLP with analytic gradients
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "linear")


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "linear":
        return x
    raise ConfigurationError(f"unknown activation {name!r}")


def _act_grad(name, y):
    # derivative expressed through the activation output y
    if name == "tanh":
        return 1.0 - y * y
    if name == "linear":
        return np.ones_like(y)
    raise ConfigurationError(f"unknown activation {name!r}")


def mlp_forward(params, x, activation="tanh"):
    """Forward pass through dense layers [(W, b), ...].

    Returns (output, cache); the cache holds per-layer inputs and outputs and
    is exactly what mlp_backward needs for the analytic gradient.
    """
    if activation not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    h = np.asarray(x, dtype=np.float64)
    layers = []
    for W, b in params:
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.shape[1] != h.shape[0] or b.shape[0] != W.shape[0]:
            raise ConfigurationError(
                f"layer shape {W.shape} incompatible with input of size {h.shape[0]}"
            )
        pre = W @ h + b
        out = _act(activation, pre)
        layers.append({"input": h, "out": out})
        h = out
    if not np.all(np.isfinite(h)):
        raise ConfigurationError("non-finite MLP output")
    return h, {"layers": layers, "activation": activation}


def mlp_backward(params, cache, upstream_grad):
    """Exact gradients of the forward map.

    Returns (param_grads, input_grad) where param_grads mirrors params as a
    list of (dW, db).
    """
    layers = cache["layers"]
    activation = cache["activation"]
    if len(layers) != len(params):
        raise ConfigurationError("cache does not match params")
    g = np.asarray(upstream_grad, dtype=np.float64)
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        W, _b = params[i]
        rec = layers[i]
        if g.shape[0] != rec["out"].shape[0]:
            raise ConfigurationError("upstream gradient shape mismatch")
        gpre = g * _act_grad(activation, rec["out"])
        grads[i] = (np.outer(gpre, rec["input"]), gpre.copy())
        g = np.asarray(W, dtype=np.float64).T @ gpre
    return grads, g


# ---------------------------------------------------------------------------
# Symmetric eigensolver (cyclic Jacobi) -- intentionally library-free so it
# can serve as an independent oracle for library-backed spectral code.
# ---------------------------------------------------------------------------


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns). Adequate for
    n <= 256; quadratic convergence once off-diagonals are small.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigurationError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ConfigurationError("matrix must be symmetric")
    if n > 256:
        raise ConfigurationError("jacobi_eigh limited to n <= 256")
    v = np.eye(n)
    scale = max(1.0, np.max(np.abs(a)))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def dense_symmetric_eigenvalues(m) -> np.ndarray:
    """Ascending eigenvalues of a symmetric DenseMatrix (or square array)."""
    a = m.to_array() if isinstance(m, DenseMatrix) else np.asarray(m, dtype=np.float64)
    w, _ = jacobi_eigh(a)
    return w
