"""Two-branch projector with hand-written gradients and Adam.

The projector maps a segmentation feature ``f`` to

    f_proj = SiLU(f @ W1 + b1) @ W2 + b2 + f @ Wr + br

with inverted dropout on the SiLU activation during training. Matrices act
on row vectors (``(n, d_in) @ (d_in, d_out)``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError, NumericalError, StructuralError, UsageError

PARAM_NAMES = ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "res_w", "res_b")


def expit(x):
    # Clipping keeps exp finite; sigmoid is saturated to float64 precision there.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700.0, 700.0)))


def silu(x):
    return x * expit(x)


def silu_grad(x, s=None):
    s = expit(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


@dataclass
class ProjectorParams:
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    res_w: np.ndarray
    res_b: np.ndarray
    dropout_p: float = 0.2

    def __post_init__(self):
        d_in, hidden = self.mlp_w1.shape
        out = self.mlp_w2.shape[1]
        expected = {"mlp_w1": (d_in, hidden), "mlp_b1": (hidden,), "mlp_w2": (hidden, out),
                    "mlp_b2": (out,), "res_w": (d_in, out), "res_b": (out,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise StructuralError(f"{name} has shape {getattr(self, name).shape}, "
                                      f"expected {shape}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise StructuralError("dropout_p must lie in [0, 1)")

    @classmethod
    def init(cls, d_in, hidden=None, out=None, *, dropout_p=0.2, rng=None):
        """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        hidden = d_in if hidden is None else hidden
        out = d_in if out is None else out
        rng = np.random.default_rng(rng)

        def u(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        return cls(u(d_in, (d_in, hidden)), np.zeros(hidden), u(hidden, (hidden, out)),
                   np.zeros(out), u(d_in, (d_in, out)), np.zeros(out), dropout_p)

    @classmethod
    def zeros(cls, d_in, hidden=None, out=None, dropout_p=0.0):
        hidden = d_in if hidden is None else hidden
        out = d_in if out is None else out
        z = np.zeros
        return cls(z((d_in, hidden)), z(hidden), z((hidden, out)), z(out),
                   z((d_in, out)), z(out), dropout_p)

    @property
    def d_in(self):
        return self.mlp_w1.shape[0]

    @property
    def hidden_dim(self):
        return self.mlp_w1.shape[1]

    @property
    def out_dim(self):
        return self.mlp_w2.shape[1]

    def arrays(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self):
        return ProjectorParams(*(getattr(self, k).copy() for k in PARAM_NAMES),
                               dropout_p=self.dropout_p)

    def with_arrays(self, arrays):
        return ProjectorParams(*(np.asarray(arrays[k]) for k in PARAM_NAMES),
                               dropout_p=self.dropout_p)

    def to_bytes(self) -> bytes:
        """``d_in, hidden, out`` as u32, dropout f32, then row-major f32 arrays."""
        head = struct.pack("<IIIf", self.d_in, self.hidden_dim, self.out_dim, self.dropout_p)
        body = b"".join(np.ascontiguousarray(getattr(self, k), "<f4").tobytes()
                        for k in PARAM_NAMES)
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ProjectorParams":
        if len(buf) < 16:
            raise FormatError("projector blob shorter than its header", 0)
        d_in, hidden, out, p = struct.unpack_from("<IIIf", buf, 0)
        shapes = [(d_in, hidden), (hidden,), (hidden, out), (out,), (d_in, out), (out,)]
        pos = 16
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) * 4
            if pos + n > len(buf):
                raise FormatError("truncated projector blob", pos)
            arrays.append(np.frombuffer(buf, "<f4", int(np.prod(shape)), pos)
                          .reshape(shape).astype(np.float64))
            pos += n
        if pos != len(buf):
            raise FormatError("trailing bytes in projector blob", pos)
        return cls(*arrays, dropout_p=float(p))


@dataclass
class ForwardCache:
    f: np.ndarray
    pre: np.ndarray
    sig: np.ndarray
    act: np.ndarray
    mask: np.ndarray | None
    scale: float
    used: bool = False


def project(params: ProjectorParams, f, training=False, rng=None, *, return_cache=False):
    """Forward pass. Returns ``f_proj`` or ``(f_proj, cache)``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != params.d_in:
        raise StructuralError(f"expected features of shape (n, {params.d_in}), got {f.shape}")
    pre = f @ params.mlp_w1 + params.mlp_b1
    sig = expit(pre)
    act = pre * sig
    mask, scale = None, 1.0
    if training and params.dropout_p > 0:
        rng = np.random.default_rng(rng)
        mask = rng.random(act.shape) >= params.dropout_p
        scale = 1.0 / (1.0 - params.dropout_p)
        hidden = act * mask * scale
    else:
        hidden = act
    out = hidden @ params.mlp_w2 + params.mlp_b2 + f @ params.res_w + params.res_b
    if return_cache:
        return out, ForwardCache(f, pre, sig, act, mask, scale)
    return out


def backward(params: ProjectorParams, cache: ForwardCache, grad_out):
    """Gradients of a scalar loss given ``grad_out = dL/df_proj``.

    Returns ``(param_grads, grad_input)``. A cache can be consumed once.
    """
    if cache is None or cache.used:
        raise UsageError("backward needs a fresh cache from project(..., return_cache=True)")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (cache.f.shape[0], params.out_dim):
        raise StructuralError("grad_out shape does not match the forward batch")
    cache.used = True
    f = cache.f
    hidden = cache.act if cache.mask is None else cache.act * cache.mask * cache.scale
    d_hidden = g @ params.mlp_w2.T
    d_act = d_hidden if cache.mask is None else d_hidden * cache.mask * cache.scale
    d_pre = d_act * silu_grad(cache.pre, cache.sig)
    grads = {
        "mlp_w1": f.T @ d_pre,
        "mlp_b1": d_pre.sum(axis=0),
        "mlp_w2": hidden.T @ g,
        "mlp_b2": g.sum(axis=0),
        "res_w": f.T @ g,
        "res_b": g.sum(axis=0),
    }
    grad_input = d_pre @ params.mlp_w1.T + g @ params.res_w.T
    return grads, grad_input


def lr_at(epoch, total_epochs, lr_start=1e-2, lr_end=1e-4):
    """Exponential decay from ``lr_start`` at epoch 0 to ``lr_end`` at ``total_epochs``."""
    if total_epochs <= 0:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (epoch / total_epochs)


@dataclass
class OptimizerState:
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    total_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise StructuralError("learning rates must be positive")
        if self.total_epochs < 1:
            raise StructuralError("total_epochs must be >= 1")


def adam_step(params: ProjectorParams, grads: dict, state: OptimizerState, epoch=None):
    """One bias-corrected Adam update; returns new params and mutates ``state``.

    The learning rate follows :func:`lr_at` at ``epoch`` (default: the step
    index before this update).
    """
    for k in PARAM_NAMES:
        g = grads[k]
        if g.shape != getattr(params, k).shape:
            raise StructuralError(f"gradient for {k} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}; step rejected")
    epoch = state.step if epoch is None else epoch
    lr = lr_at(epoch, state.total_epochs, state.lr_start, state.lr_end)
    state.step += 1
    t = state.step
    new = {}
    for k in PARAM_NAMES:
        g = grads[k]
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new[k] = getattr(params, k) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_arrays(new)


__all__ = [
    "ProjectorParams", "ForwardCache", "OptimizerState", "project", "backward",
    "adam_step", "lr_at", "silu", "silu_grad",
]
