"""Dense float64 numerics underneath every model in the package.

Provides named parameters with gradient and Adam buffers, the two fixed
differentiable building blocks (affine layer, two-layer tanh MLP), the
softmax cross-entropy loss, a central-difference gradient checker, the
inverse normal CDF used by confidence bounds, and checkpoint IO.

There is deliberately no general autodiff graph: every architecture in this
package backpropagates by hand through these blocks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    ParseError,
)

_MASK64 = (1 << 64) - 1
CHECKPOINT_MAGIC = b"CMLCKPT1"


def _splitmix64(x: int) -> int:
    """One round of splitmix64; used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Deterministic random stream addressed by (seed, stream_id).

    Identical (seed, stream_id) pairs replay identical draw sequences.
    ``child(k)`` derives an independent stream for sub-computations so that
    consumers never share or reorder draws.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.default_rng(ss)

    def child(self, key: int) -> "Rng":
        return Rng(self.seed, _splitmix64(self.stream_id ^ _splitmix64(int(key) + 1)))

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name}: expected 1-d, got shape {arr.shape}")
    return check_finite(name, arr)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-d, got shape {arr.shape}")
    return check_finite(name, arr)


@dataclass
class Param:
    """A named trainable tensor with gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def create(cls, name: str, value) -> "Param":
        v = np.array(value, dtype=np.float64)
        check_finite(name, v)
        return cls(
            name=name,
            value=v,
            grad=np.zeros_like(v),
            adam_m=np.zeros_like(v),
            adam_v=np.zeros_like(v),
        )

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def clone(self) -> "Param":
        """Copy of the value with fresh (zeroed) grad/Adam state."""
        return Param.create(self.name, self.value.copy())


class Linear:
    """Affine map y = W x + b with cached input for the backward pass.

    Accepts a single vector (d_in,) or a batch (B, d_in). ``backward`` must
    follow the matching ``forward``; each forward overwrites the cache.
    """

    def __init__(self, w: Param, b: Param):
        if w.value.ndim != 2 or b.value.ndim != 1:
            raise DimensionError("Linear expects 2-d weight and 1-d bias")
        if w.value.shape[0] != b.value.shape[0]:
            raise DimensionError(
                f"bias length {b.value.shape[0]} != output dim {w.value.shape[0]}"
            )
        self.w = w
        self.b = b
        self._x: np.ndarray | None = None

    @classmethod
    def create(cls, name: str, d_in: int, d_out: int, rng: Rng) -> "Linear":
        scale = 1.0 / math.sqrt(d_in)
        w = Param.create(f"{name}.w", rng.generator.normal(0.0, scale, (d_out, d_in)))
        b = Param.create(f"{name}.b", np.zeros(d_out))
        return cls(w, b)

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.value.shape[1]:
            raise DimensionError(
                f"{self.w.name}: input dim {x.shape[-1]} != {self.w.value.shape[1]}"
            )
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise NumericError(f"{self.w.name}: backward before forward")
        x = self._x
        if grad_out.ndim == 1:
            self.w.grad += np.outer(grad_out, x)
            self.b.grad += grad_out
        else:
            self.w.grad += grad_out.T @ x
            self.b.grad += grad_out.sum(axis=0)
        return grad_out @ self.w.value


class Mlp2:
    """Two-layer perceptron: linear -> tanh -> linear (no output activation)."""

    def __init__(self, l1: Linear, l2: Linear):
        self.l1 = l1
        self.l2 = l2
        self._t: np.ndarray | None = None

    @classmethod
    def create(cls, name: str, d_in: int, d_hidden: int, d_out: int, rng: Rng) -> "Mlp2":
        return cls(
            Linear.create(f"{name}.l1", d_in, d_hidden, rng.child(1)),
            Linear.create(f"{name}.l2", d_hidden, d_out, rng.child(2)),
        )

    def params(self) -> list[Param]:
        return self.l1.params() + self.l2.params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        t = np.tanh(self.l1.forward(x))
        self._t = t
        return self.l2.forward(t)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._t is None:
            raise NumericError("Mlp2: backward before forward")
        dt = self.l2.backward(grad_out)
        dz = dt * (1.0 - self._t * self._t)
        return self.l1.backward(dz)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_loss(logits, target_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a one-hot target.

    Returns (loss, probs) where loss = -log probs[target_index].
    """
    v = as_vector(logits, "logits")
    if not 0 <= target_index < v.shape[0]:
        raise ConfigError(
            f"target index {target_index} out of range for {v.shape[0]} logits"
        )
    z = v - v.max()
    logsumexp = math.log(np.exp(z).sum())
    probs = np.exp(z - logsumexp)
    return logsumexp - z[target_index], probs


def softmax_ce_grad(probs: np.ndarray, target_index: int) -> np.ndarray:
    """d(loss)/d(logits) given the probs returned by softmax_ce_loss."""
    g = probs.copy()
    g[target_index] -= 1.0
    return g


def adam_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update; zeroes gradients afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
        t = p.step_count + 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.step_count = t
        p.zero_grad()


def cosine_similarity(a, b) -> float:
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise DimensionError(f"cosine: shapes {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(va @ vb) / (na * nb)


def finite_diff_check(
    loss_and_grad: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_and_grad`` must deterministically return the scalar loss for the
    current parameter values and accumulate d(loss)/d(param) into each
    param's grad buffer. Returns the max over all coordinates of
    |g_analytic - g_fd| / max(|g_analytic|, |g_fd|, floor). The floor keeps
    coordinates whose true gradient sits below central-difference noise
    (machine_eps * |loss| / h) from dominating the ratio.
    """
    for p in params:
        p.zero_grad()
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]

    max_err = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_and_grad()
            flat[i] = orig - h
            lm = loss_and_grad()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor)
            max_err = max(max_err, err)
    for p in params:
        p.zero_grad()
    return max_err


def normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


# Coefficients of Acklam's rational approximation to the inverse normal CDF.
_ICDF_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ICDF_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ICDF_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ICDF_D = (
    7.784695709041462e-03, 3.224671290700398e-01,
    2.445134137142996e00, 3.754408661907416e00,
)
_ICDF_P_LOW = 0.02425


def inverse_normal_cdf(p: float) -> float:
    """Quantile z with Phi(z) = p, for p in (0, 1).

    Acklam's rational approximation followed by one Halley refinement
    against the erfc-based CDF; absolute error well below 1e-9.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"inverse_normal_cdf requires 0 < p < 1, got {p}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    elif p <= 1.0 - _ICDF_P_LOW:
        q = p - 0.5
        r = q * q
        z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        z = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    # Halley refinement: e = Phi(z) - p, u = e / pdf(z).
    e = normal_cdf(z) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(z * z / 2.0)
    return z - u / (1.0 + z * u / 2.0)


def save_checkpoint(path, params: Sequence[Param]) -> None:
    """Write params to a single versioned file.

    Layout: magic "CMLCKPT1", little-endian uint64 manifest length, UTF-8
    JSON manifest (names, shapes, step counts), then each param's values as
    a flat little-endian float64 blob in manifest order.
    """
    manifest = {
        "params": [
            {"name": p.name, "shape": list(p.value.shape), "step_count": p.step_count}
            for p in params
        ]
    }
    mj = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(mj)))
        fh.write(mj)
        for p in params:
            check_finite(p.name, p.value)
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> list[Param]:
    """Read a checkpoint written by save_checkpoint; grads/moments fresh."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a CMLCKPT1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint manifest: {exc}") from exc
    off += mlen
    params = []
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        p = Param.create(entry["name"], vals.astype(np.float64))
        p.step_count = int(entry["step_count"])
        params.append(p)
    if off != len(raw):
        raise ParseError(f"{path}: trailing bytes after parameter data")
    return params
