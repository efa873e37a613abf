"""Small deterministic numeric core.

Everything here works on float64 numpy arrays. MLPs carry an explicit tape
from the forward pass so that the backward pass is exact and cheap; there is
no general autodiff, only the fixed graphs the rest of the package needs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights are stored (out, in) so a layer computes ``x @ W.T + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self):
        self.activations = tuple(self.activations)
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("an MLP needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} input dim {w.shape[1]} != layer {i - 1} output dim "
                    f"{self.weights[i - 1].shape[0]}"
                )
        if self.activations[-1] != "identity":
            raise ShapeError("final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def array_names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out += [f"layer{i}.weight", f"layer{i}.bias"]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(arrays[0::2], arrays[1::2], self.activations)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


# Gradients of an MlpParams live in an MlpParams of the same shape.
Grads = MlpParams


def init_mlp(rng: "Rng", dims: Sequence[int], hidden: str = "tanh") -> MlpParams:
    """He-style init, sigma = sqrt(2 / fan_in), zero biases."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        sigma = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(fan_out * fan_in, sigma).reshape(fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    acts = (hidden,) * (len(dims) - 2) + ("identity",)
    return MlpParams(weights, biases, acts)


# --------------------------------------------------------------------------
# MLP forward / backward
# --------------------------------------------------------------------------


@dataclass
class Tape:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]  # post-activation
    signature: tuple
    batched: bool


def _signature(params: MlpParams) -> tuple:
    return tuple(w.shape for w in params.weights) + (params.activations,)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run ``x`` (a vector or a batch of row vectors) through the network."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with in_dim {params.in_dim}")
    inputs, outputs = [], []
    a = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(a)
        a = _act(act, a @ w.T + b)
        outputs.append(a)
    return a, Tape(inputs, outputs, _signature(params), batched)


def mlp_backward(params: MlpParams, tape: Tape, dy: np.ndarray) -> tuple[Grads, np.ndarray]:
    """Exact gradients of ``sum(dy * y)`` wrt parameters and input.

    For a batched forward the parameter gradients are summed over rows.
    """
    if tape.signature != _signature(params):
        raise ShapeError("tape was recorded for a different network")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != tape.outputs[-1].shape:
        raise ShapeError(f"cotangent shape {dy.shape} != output shape {tape.outputs[-1].shape}")
    dws, dbs = [], []
    g = dy
    for i in reversed(range(params.n_layers)):
        act, y = params.activations[i], tape.outputs[i]
        if act == "tanh":
            g = g * (1.0 - y * y)
        elif act == "relu":
            g = g * (y > 0)
        a_in = tape.inputs[i]
        if tape.batched:
            dws.append(g.T @ a_in)
            dbs.append(g.sum(axis=0))
        else:
            dws.append(np.outer(g, a_in))
            dbs.append(g.copy())
        g = g @ params.weights[i]
    return MlpParams(dws[::-1], dbs[::-1], params.activations), g


# --------------------------------------------------------------------------
# similarities and losses
# --------------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal 1-d shapes, got {a.shape}, {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


def _row_normalize(a: np.ndarray):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("cosine similarity of a zero-norm vector")
    return a / norms, norms


def l2_normalize(a: np.ndarray):
    """Unit rows plus the norms needed by :func:`l2_normalize_backward`."""
    return _row_normalize(a)


def l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * np.sum(d_unit * unit, axis=-1, keepdims=True)) / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray):
    """Pairwise cosine similarities of rows; returns (S, cache for backward).

    Leading batch axes are allowed on both sides as long as they broadcast,
    e.g. a: (G, N, D), b: (G, K, D) -> S: (G, N, K).
    """
    an, na = _row_normalize(a)
    bn, nb = _row_normalize(b)
    s = an @ np.swapaxes(bn, -1, -2)
    return s, (an, na, bn, nb)


def cosine_matrix_backward(cache, ds: np.ndarray, need_a: bool = True):
    """Gradients wrt both row sets; ``da`` is None when ``need_a`` is false."""
    an, na, bn, nb = cache
    db = l2_normalize_backward(bn, nb, np.swapaxes(ds, -1, -2) @ an)
    if not need_a:
        return None, db
    return l2_normalize_backward(an, na, ds @ bn), db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    losses, dlogits = softmax_cross_entropy_batch(logits[None, :], np.array([label]))
    return float(losses[0]), dlogits[0]


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Per-row CE losses and per-row gradients (not averaged).

    ``logits`` has shape (..., K) and ``labels`` the matching leading shape.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")
    z = logits.reshape(-1, k)
    z = z - z.max(axis=1, keepdims=True)
    if not np.isfinite(z.sum()):
        raise NumericError("non-finite logits")
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(len(z))
    flat = labels.reshape(-1)
    losses = np.log(s) - z[rows, flat]
    d = e / s[:, None]
    d[rows, flat] -= 1.0
    return losses.reshape(labels.shape), d.reshape(logits.shape)


def mean_rows(batch) -> np.ndarray:
    batch = [np.asarray(r, dtype=np.float64) for r in batch] if not isinstance(batch, np.ndarray) else batch
    if len(batch) == 0:
        raise ContractError("mean of an empty batch")
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("rows must be equal-length vectors")
    return arr.mean(axis=0)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def _leaves(obj) -> list[np.ndarray]:
    if isinstance(obj, np.ndarray):
        return [obj]
    if isinstance(obj, (list, tuple)):
        return list(obj)
    return obj.arrays()


def _rebuild(template, arrays):
    if isinstance(template, np.ndarray):
        return arrays[0]
    if isinstance(template, (list, tuple)):
        return type(template)(arrays)
    return template.with_arrays(arrays)


def _names(obj, n):
    if hasattr(obj, "array_names"):
        return obj.array_names()
    return [f"array{i}" for i in range(n)]


@dataclass(frozen=True)
class OptimizerState:
    lr: float
    momentum: float
    velocity: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def init_optimizer(params, lr: float, momentum: float) -> OptimizerState:
    return OptimizerState(lr, momentum, tuple(np.zeros_like(a) for a in _leaves(params)))


def sgd_momentum_step(params, grads, state: OptimizerState):
    """Heavy-ball momentum: v <- mu*v + g ; theta <- theta - lr*v.

    Returns new (params, state); inputs are not modified.
    """
    ps, gs = _leaves(params), _leaves(grads)
    if len(ps) != len(gs) or len(ps) != len(state.velocity):
        raise ShapeError("params, grads and optimizer state are not congruent")
    names = _names(params, len(ps))
    new_p, new_v = [], []
    for name, p, g, v in zip(names, ps, gs, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"{name}: shape mismatch {p.shape} / {g.shape} / {v.shape}")
        if not np.isfinite(g.sum()):
            raise NumericError(f"non-finite gradient in {name}")
        v2 = state.momentum * v + g
        new_v.append(v2)
        new_p.append(p - state.lr * v2)
    return _rebuild(params, new_p), OptimizerState(state.lr, state.momentum, tuple(new_v))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def grad_check(fn: Callable, params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(value, grads)`` with ``grads`` shaped like
    ``params``. The error per entry is ``|a - c| / max(1, |c|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    v1, analytic = fn(params)
    v2, _ = fn(params)
    if v1 != v2:
        raise ContractError("function is not deterministic")
    leaves = [a.copy() for a in _leaves(params)]
    agrads = _leaves(analytic)
    worst = 0.0
    for li, leaf in enumerate(leaves):
        flat = leaf.reshape(-1)
        aflat = np.asarray(agrads[li]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(_rebuild(params, leaves))[0]
            flat[j] = orig - h
            fm = fn(_rebuild(params, leaves))[0]
            flat[j] = orig
            c = (fp - fm) / (2 * h)
            worst = max(worst, abs(aflat[j] - c) / max(1.0, abs(c)))
    return worst


# --------------------------------------------------------------------------
# seeded randomness
# --------------------------------------------------------------------------


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class Rng:
    """Seeded stream identified by (seed, stream path).

    Distinct stream paths under one seed give independent generators; a
    child stream is derived by name with :meth:`spawn`, never from the
    parent's state, so derivation order does not matter.
    """

    seed: int
    stream: tuple = ()
    counter: int = field(default=0, init=False)

    def __post_init__(self):
        self.stream = tuple(self.stream)
        entropy = [_key(self.seed)] + [_key(p) for p in self.stream]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def spawn(self, *names) -> "Rng":
        return Rng(self.seed, self.stream + tuple(names))

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        return self._gen.random(size)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if lo > hi:
            raise ValueError("lo must not exceed hi")
        return lo + (hi - lo) * self.random(size)

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """Box-Muller on the uniform stream."""
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return sigma * z

    def integers(self, low: int, high: int, size=None):
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


def rng_normal(rng: Rng, n: int, sigma: float) -> np.ndarray:
    return rng.normal(n, sigma)


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.isfinite(np.sum(a)):
            raise NumericError(f"non-finite values in {name}")
