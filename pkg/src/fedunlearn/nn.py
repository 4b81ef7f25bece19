"""Minimal numpy MLP engine: flat parameter vectors, exact backprop, AdamW,
targeted l2-PGD and MAS importance.

A model is an :class:`Arch` plus a flat float64 vector. The trunk is a stack
of ReLU layers shared by every task; each task owns one linear head.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden: tuple[int, ...] = (256, 128)
    heads: tuple[int, ...] = (10,)

    def __post_init__(self) -> None:
        if self.input_dim < 1 or any(h < 1 for h in self.hidden) or not self.heads or any(h < 1 for h in self.heads):
            raise ValueError(f"invalid architecture {self}")

    @property
    def trunk_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def num_params(self) -> int:
        n = sum(i * o + o for i, o in self.trunk_dims)
        return n + sum(self.feature_dim * c + c for c in self.heads)

    def layout(self) -> "Layout":
        return _layout(self)


@dataclass(frozen=True)
class LayerSlice:
    w: slice
    b: slice
    shape: tuple[int, int]  # (fan_in, fan_out)


@dataclass(frozen=True)
class Layout:
    trunk: tuple[LayerSlice, ...]
    heads: tuple[LayerSlice, ...]
    size: int


def _layout(arch: Arch) -> Layout:
    off = 0
    trunk, heads = [], []
    for fan_in, fan_out in arch.trunk_dims:
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        trunk.append(LayerSlice(w, b, (fan_in, fan_out)))
    for c in arch.heads:
        f = arch.feature_dim
        w = slice(off, off + f * c)
        off += f * c
        b = slice(off, off + c)
        off += c
        heads.append(LayerSlice(w, b, (f, c)))
    return Layout(tuple(trunk), tuple(heads), off)


@dataclass
class ModelParams:
    arch: Arch
    theta: np.ndarray
    _layout: Layout = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self._layout = self.arch.layout()
        if self.theta.shape != (self._layout.size,):
            raise DimensionMismatch(f"theta has shape {self.theta.shape}, arch needs ({self._layout.size},)")

    @property
    def layout(self) -> Layout:
        return self._layout

    @property
    def dim(self) -> int:
        return self._layout.size

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, np.array(theta, dtype=np.float64))

    def copy(self) -> "ModelParams":
        return self.with_theta(self.theta.copy())

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) for the trunk layers followed by the heads."""
        out = []
        for ls in (*self._layout.trunk, *self._layout.heads):
            out.append((self.theta[ls.w].reshape(ls.shape), self.theta[ls.b]))
        return out


def flatten(arch: Arch, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers]).astype(np.float64)


def init_model(arch: Arch, seed: int = 0) -> ModelParams:
    """Uniform fan-in initialisation: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    theta = np.empty(arch.num_params, dtype=np.float64)
    layout = arch.layout()
    for ls in (*layout.trunk, *layout.heads):
        bound = 1.0 / np.sqrt(ls.shape[0])
        theta[ls.w] = rng.uniform(-bound, bound, size=ls.w.stop - ls.w.start)
        theta[ls.b] = rng.uniform(-bound, bound, size=ls.b.stop - ls.b.start)
    return ModelParams(arch, theta)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    task: int = 0


# ---------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(model: ModelParams, x: np.ndarray, task: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise DimensionMismatch(f"expected inputs of shape (B, {model.arch.input_dim}), got {x.shape}")
    if not 0 <= task < len(model.arch.heads):
        raise DimensionMismatch(f"task {task} out of range")
    layers = model.unflatten()
    n_trunk = len(model.arch.hidden)
    acts = [x]
    h = x
    for w, b in layers[:n_trunk]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = layers[n_trunk + task]
    logits = h @ w + b
    return layers, acts, logits


def forward(model: ModelParams, x: np.ndarray, task: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, softmax probabilities)."""
    _, _, logits = _forward_cache(model, x, task)
    return logits, softmax(logits)


def _backward(model: ModelParams, layers, acts, dlogits: np.ndarray, task: int, abs_per_sample: bool = False):
    """Gradient of sum_i <dlogits_i, logits_i> w.r.t. theta, plus d/dx.

    With ``abs_per_sample`` the result is instead sum_i |per-sample gradient|,
    computed exactly per layer as |a|^T |delta| since each per-sample weight
    gradient is an outer product.
    """
    layout = model.layout
    grad = np.zeros(model.dim, dtype=np.float64)
    n_trunk = len(model.arch.hidden)
    head = layout.heads[task]
    h = acts[-1]
    delta = dlogits
    if abs_per_sample:
        grad[head.w] = (np.abs(h).T @ np.abs(delta)).ravel()
        grad[head.b] = np.abs(delta).sum(axis=0)
    else:
        grad[head.w] = (h.T @ delta).ravel()
        grad[head.b] = delta.sum(axis=0)
    back = delta @ layers[n_trunk + task][0].T
    for li in range(n_trunk - 1, -1, -1):
        delta = back * (acts[li + 1] > 0)
        a = acts[li]
        ls = layout.trunk[li]
        if abs_per_sample:
            grad[ls.w] = (np.abs(a).T @ np.abs(delta)).ravel()
            grad[ls.b] = np.abs(delta).sum(axis=0)
        else:
            grad[ls.w] = (a.T @ delta).ravel()
            grad[ls.b] = delta.sum(axis=0)
        back = delta @ layers[li][0].T
    return grad, back


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    p = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.clip(p, 1e-300, None))))


def _onehot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def grad_ce(model: ModelParams, batch: Batch) -> tuple[np.ndarray, float]:
    """Exact gradient and value of the mean cross-entropy over the batch."""
    y = np.asarray(batch.y, dtype=np.int64)
    layers, acts, logits = _forward_cache(model, batch.x, batch.task)
    probs = softmax(logits)
    dlogits = (probs - _onehot(y, logits.shape[1])) / len(y)
    grad, _ = _backward(model, layers, acts, dlogits, batch.task)
    return grad, cross_entropy(probs, y)


def ce_loss(model: ModelParams, batch: Batch) -> float:
    _, probs = forward(model, batch.x, batch.task)
    return cross_entropy(probs, np.asarray(batch.y, dtype=np.int64))


def input_grad_ce(model: ModelParams, x: np.ndarray, y: np.ndarray, task: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample d CE_i / d x_i and the per-sample losses."""
    y = np.asarray(y, dtype=np.int64)
    layers, acts, logits = _forward_cache(model, x, task)
    probs = softmax(logits)
    dlogits = probs - _onehot(y, logits.shape[1])
    _, dx = _backward(model, layers, acts, dlogits, task)
    losses = -np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))
    return dx, losses


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdamState":
        return cls(np.zeros(d), np.zeros(d), 0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 1e-3,
    weight_decay: float = 1e-2,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW step (decoupled weight decay). Returns new arrays; inputs untouched."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise DimensionMismatch("theta, gradient and optimizer state must share a shape")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = theta * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# adversarial examples


@dataclass
class AdversarialSet:
    x_adv: np.ndarray
    x_orig: np.ndarray
    y_orig: np.ndarray
    y_target: np.ndarray
    epsilon: float
    alpha: float
    steps: int
    task: int = 0

    def __len__(self) -> int:
        return int(self.x_adv.shape[0])


def _project_l2(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    diff = x - x0
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    out = x0 + diff * scale
    # rounding can leave the norm a few ulps above eps; shrink until it is not
    for _ in range(8):
        over = np.linalg.norm(out - x0, axis=1) > eps
        if not over.any():
            break
        scale[over] = np.nextafter(scale[over] * (1 - 1e-12), 0)
        out = x0 + diff * scale
    return out


def pgd_l2_targeted(
    model: ModelParams,
    x: np.ndarray,
    targets: np.ndarray,
    epsilon: float = 1.0,
    alpha: float = 0.25,
    steps: int = 10,
    seed: Optional[int] = None,
    task: int = 0,
    y_true: Optional[np.ndarray] = None,
    random_start: bool = False,
) -> AdversarialSet:
    """Targeted l2-PGD: descend CE toward ``targets`` inside the eps-ball and [0, 1] box.

    Each step: x <- Proj_ball(clip_[0,1](x - alpha * g / ||g||)). Clipping is
    re-applied after the projection; for x0 in the box this never increases the
    distance to x0, so both constraints hold exactly on output.
    """
    x0 = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if y_true is not None and np.any(np.asarray(y_true) == targets):
        raise ValueError("targets must differ from the true labels")
    adv = x0.copy()
    if random_start and epsilon > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(size=x0.shape)
        noise *= (epsilon * rng.uniform(size=(len(x0), 1))) / np.maximum(
            np.linalg.norm(noise, axis=1, keepdims=True), 1e-12
        )
        adv = np.clip(_project_l2(np.clip(x0 + noise, 0, 1), x0, epsilon), 0.0, 1.0)
    for _ in range(steps):
        g, _ = input_grad_ce(model, adv, targets, task)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        step = np.where(gn > 0, g / np.maximum(gn, 1e-300), 0.0)
        adv = np.clip(adv - alpha * step, 0.0, 1.0)
        adv = np.clip(_project_l2(adv, x0, epsilon), 0.0, 1.0)
    y_orig = np.asarray(y_true, dtype=np.int64) if y_true is not None else np.full(len(x0), -1)
    return AdversarialSet(adv, x0, y_orig, targets, float(epsilon), float(alpha), int(steps), task)


# ---------------------------------------------------------------------------
# importance


@dataclass
class ImportanceScores:
    raw: np.ndarray
    normalized: np.ndarray

    @property
    def inverted(self) -> np.ndarray:
        return 1.0 - self.normalized


def output_norm_grad(model: ModelParams, x: np.ndarray, task: int = 0, per_sample_abs: bool = False) -> np.ndarray:
    """Gradient of sum_i ||softmax(f(x_i))||^2; per-sample absolute values if asked."""
    layers, acts, logits = _forward_cache(model, x, task)
    p = softmax(logits)
    # d||p||^2/dz = J^T (2p), J = diag(p) - p p^T
    g = 2.0 * p
    dlogits = p * (g - np.sum(p * g, axis=1, keepdims=True))
    grad, _ = _backward(model, layers, acts, dlogits, task, abs_per_sample=per_sample_abs)
    return grad


def mas_importance(model: ModelParams, x: np.ndarray, task: int = 0, batch_size: int = 256) -> ImportanceScores:
    """Omega_j = mean_i |d ||p(x_i)||^2 / d theta_j|, then divided by its max."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("importance needs at least one sample")
    total = np.zeros(model.dim)
    for start in range(0, x.shape[0], batch_size):
        total += output_norm_grad(model, x[start : start + batch_size], task, per_sample_abs=True)
    raw = total / x.shape[0]
    peak = raw.max()
    normalized = raw / peak if peak > 0 else np.zeros_like(raw)
    return ImportanceScores(raw, normalized)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: ModelParams, x: np.ndarray, task: int = 0) -> np.ndarray:
    logits, _ = forward(model, x, task)
    return np.argmax(logits, axis=1)


def evaluate_accuracy(
    model: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    task: int = 0,
    classes: Optional[Sequence[int]] = None,
) -> float:
    """Argmax accuracy (ties go to the lower class), optionally on a class subset.

    Returns nan when the filter leaves no samples.
    """
    y = np.asarray(y, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    if classes is not None:
        keep = np.isin(y, np.asarray(list(classes)))
        x, y = x[keep], y[keep]
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x, task) == y))


# ---------------------------------------------------------------------------
# checkpoints: <u32 count> count * <u32> descriptor, then theta as <f4


def arch_descriptor(arch: Arch) -> list[int]:
    return [arch.input_dim, len(arch.hidden), *arch.hidden, len(arch.heads), *arch.heads]


def arch_from_descriptor(desc: Sequence[int]) -> Arch:
    try:
        input_dim, nh = desc[0], desc[1]
        hidden = tuple(desc[2 : 2 + nh])
        nheads = desc[2 + nh]
        heads = tuple(desc[3 + nh : 3 + nh + nheads])
        if len(hidden) != nh or len(heads) != nheads or len(desc) != 3 + nh + nheads:
            raise IndexError
    except IndexError:
        raise CheckpointError(f"malformed architecture descriptor {list(desc)}") from None
    return Arch(int(input_dim), tuple(int(h) for h in hidden), tuple(int(h) for h in heads))


def checkpoint_bytes(model: ModelParams) -> bytes:
    desc = arch_descriptor(model.arch)
    header = struct.pack(f"<I{len(desc)}I", len(desc), *desc)
    return header + model.theta.astype("<f4").tobytes()


def model_from_bytes(data: bytes) -> ModelParams:
    if len(data) < 4:
        raise CheckpointError("truncated checkpoint")
    (count,) = struct.unpack_from("<I", data, 0)
    if len(data) < 4 + 4 * count:
        raise CheckpointError("truncated checkpoint header")
    desc = struct.unpack_from(f"<{count}I", data, 4)
    arch = arch_from_descriptor(desc)
    body = data[4 + 4 * count :]
    if len(body) != 4 * arch.num_params:
        raise CheckpointError(f"expected {arch.num_params} float32 values, got {len(body) / 4:g}")
    theta = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return ModelParams(arch, theta)


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())


def model_digest(model: ModelParams | np.ndarray) -> str:
    theta = model.theta if isinstance(model, ModelParams) else np.asarray(model, dtype=np.float64)
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()
