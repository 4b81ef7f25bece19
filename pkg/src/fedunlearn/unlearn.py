"""Client-side forgetting: forget-set construction, the composite unlearning
objective, local update procedures and a small strategy registry.

The composite loss on a forget batch ``b`` with its paired adversarial batch
``b_adv`` is

    L_UN = -lf * CE(b) + la * CE(b_adv) + ld * sum_j Omega_bar_j (theta_j - theta_tilde_j)^2

where ``b_adv`` carries the randomly drawn incorrect target labels used to
craft it, ``theta_tilde`` is the model snapshot taken when unlearning starts
and ``Omega_bar = 1 - Omega`` is the inverted MAS importance on the forget set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import (
    AdamState,
    AdversarialSet,
    Batch,
    ModelParams,
    adam_step,
    ce_loss,
    grad_ce,
    mas_importance,
    pgd_l2_targeted,
)

log = logging.getLogger(__name__)

SAMPLE, CLASS, TASK = "sample", "class", "task"
MODES = (SAMPLE, CLASS, TASK)


class EmptyForgetSet(ValueError):
    pass


class ContextDimensionMismatch(ValueError):
    pass


class UnknownStrategy(KeyError):
    pass


# ---------------------------------------------------------------------------
# forget specification


@dataclass(frozen=True)
class ForgetSpec:
    """What to forget.

    ``mode`` is "sample" (random fraction of each client's samples), "class"
    (every sample of ceil(fraction * C) classes) or "task" (a whole task head).
    For class mode ``classes`` pins the concrete list; when empty the classes
    are drawn with ``seed``.
    """

    mode: str = SAMPLE
    fraction: float = 0.1
    classes: tuple[int, ...] = ()
    task: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in (SAMPLE, CLASS) and not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.mode == TASK and self.task < 0:
            raise ValueError("task id must be non-negative")
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    def forgotten_classes(self, num_classes: int) -> tuple[int, ...]:
        if self.mode != CLASS:
            return ()
        k = math.ceil(self.fraction * num_classes - 1e-9)
        if self.classes:
            if len(self.classes) != k:
                raise ValueError(f"fraction {self.fraction} of {num_classes} classes is {k}, got {len(self.classes)}")
            if any(c < 0 or c >= num_classes for c in self.classes):
                raise ValueError("forgotten class outside the label range")
            return tuple(sorted(self.classes))
        rng = np.random.default_rng(self.seed)
        return tuple(sorted(int(c) for c in rng.choice(num_classes, k, replace=False)))


@dataclass
class ClientSplit:
    """Retain set D^l and forget set D^u of one client.

    In task mode both hold the full local data: the forget set is read through
    the forgotten head, the retain set through the remaining heads.
    """

    retain: Dataset
    forget: Dataset
    forget_task: int = 0
    retain_tasks: tuple[int, ...] = ()


def _split_one(ds: Dataset, spec: ForgetSpec, classes: tuple[int, ...], rng: np.random.Generator) -> ClientSplit:
    n = len(ds)
    if spec.mode == SAMPLE:
        k = int(round(spec.fraction * n))
        forget_idx = np.sort(rng.choice(n, k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    elif spec.mode == CLASS:
        forget_idx = np.flatnonzero(np.isin(ds.labels(0), np.asarray(classes)))
    else:
        if spec.task >= ds.num_tasks:
            raise ValueError(f"task {spec.task} not present (data has {ds.num_tasks} tasks)")
        others = tuple(t for t in range(ds.num_tasks) if t != spec.task)
        return ClientSplit(ds, ds, spec.task, others)
    mask = np.zeros(n, dtype=bool)
    mask[forget_idx] = True
    task = 0
    return ClientSplit(ds.subset(np.flatnonzero(~mask)), ds.subset(forget_idx), task, ())


def build_forget_sets(
    datasets: Sequence[Dataset],
    spec: ForgetSpec,
    num_classes: int,
    strict: bool = True,
) -> list[ClientSplit]:
    """Split every client's data into (D^l, D^u).

    Selection is seeded per client from ``spec.seed``. With ``strict`` a
    client holding no matching sample raises EmptyForgetSet; otherwise it gets
    an empty forget set.
    """
    classes = spec.forgotten_classes(num_classes)
    out = []
    for i, ds in enumerate(datasets):
        rng = np.random.default_rng([spec.seed, i])
        split = _split_one(ds, spec, classes, rng)
        if strict and len(split.forget) == 0:
            raise EmptyForgetSet(f"client {i} holds no samples to forget")
        out.append(split)
    return out


# ---------------------------------------------------------------------------
# adversarial forget set and context


@dataclass(frozen=True)
class PGDConfig:
    epsilon: float = 1.0
    alpha: float = 0.25
    steps: int = 10


@dataclass(frozen=True)
class LossWeights:
    forget: float = 1.0
    adv: float = 1.0
    drift: float = 1.0


def gen_adv_forget_set(
    model: ModelParams,
    forget: Dataset,
    num_classes: int,
    pgd: PGDConfig = PGDConfig(),
    seed: int = 0,
    task: int = 0,
) -> AdversarialSet:
    """One targeted l2-PGD sample per forget sample, each aimed at a random wrong label."""
    if len(forget) == 0:
        raise EmptyForgetSet("cannot build adversarial examples from an empty forget set")
    if num_classes < 2:
        raise ValueError("targeted attacks need at least two classes")
    rng = np.random.default_rng(seed)
    y = forget.labels(task)
    targets = (y + rng.integers(1, num_classes, size=len(y))) % num_classes
    return pgd_l2_targeted(
        model, forget.x, targets, pgd.epsilon, pgd.alpha, pgd.steps, seed=seed, task=task, y_true=y
    )


@dataclass(frozen=True)
class UnlearnContext:
    theta_tilde: np.ndarray
    omega_bar: np.ndarray
    adv: AdversarialSet
    weights: LossWeights = LossWeights()
    retain_tasks: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.theta_tilde.shape != self.omega_bar.shape:
            raise ContextDimensionMismatch("snapshot and importance lengths differ")
        if self.omega_bar.size and (self.omega_bar.min() < 0 or self.omega_bar.max() > 1):
            raise ValueError("inverted importance must lie in [0, 1]")

    @property
    def task(self) -> int:
        return self.adv.task


def build_context(
    model: ModelParams,
    split: ClientSplit,
    num_classes: int,
    pgd: PGDConfig = PGDConfig(),
    weights: LossWeights = LossWeights(),
    seed: int = 0,
) -> UnlearnContext:
    """Snapshot theta, MAS importance on D^u and the adversarial set, computed once."""
    task = split.forget_task
    imp = mas_importance(model, split.forget.x, task)
    adv = gen_adv_forget_set(model, split.forget, num_classes, pgd, seed, task)
    return UnlearnContext(model.theta.copy(), imp.inverted, adv, weights, split.retain_tasks)


# ---------------------------------------------------------------------------
# composite objective


def _check_ctx(model: ModelParams, ctx: UnlearnContext) -> None:
    if ctx.theta_tilde.shape[0] != model.dim:
        raise ContextDimensionMismatch(f"context has {ctx.theta_tilde.shape[0]} entries, model has {model.dim}")


def unlearn_grad(model: ModelParams, forget: Batch, adv: Batch, ctx: UnlearnContext) -> tuple[np.ndarray, float]:
    """Gradient and value of the composite loss. Terms with zero weight are skipped."""
    _check_ctx(model, ctx)
    w = ctx.weights
    grad = np.zeros(model.dim)
    loss = 0.0
    if w.forget:
        g, l = grad_ce(model, forget)
        grad -= w.forget * g
        loss -= w.forget * l
    if w.adv:
        g, l = grad_ce(model, adv)
        grad += w.adv * g
        loss += w.adv * l
    if w.drift:
        diff = model.theta - ctx.theta_tilde
        grad += 2.0 * w.drift * ctx.omega_bar * diff
        loss += w.drift * float(np.sum(ctx.omega_bar * diff * diff))
    return grad, loss


def unlearn_loss(model: ModelParams, forget: Batch, adv: Batch, ctx: UnlearnContext) -> float:
    """Scalar composite loss computed by forward passes only (finite-difference oracle)."""
    _check_ctx(model, ctx)
    w = ctx.weights
    diff = model.theta - ctx.theta_tilde
    return (
        -w.forget * ce_loss(model, forget)
        + w.adv * ce_loss(model, adv)
        + w.drift * float(np.sum(ctx.omega_bar * diff * diff))
    )


# ---------------------------------------------------------------------------
# local procedures


@dataclass(frozen=True)
class LocalTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64
    epochs_learn: int = 1
    epochs_unlearn: int = 5


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _multi_task_grad(model: ModelParams, ds: Dataset, idx: np.ndarray, tasks: Sequence[int]) -> np.ndarray:
    grad = np.zeros(model.dim)
    for t in tasks:
        g, _ = grad_ce(model, Batch(ds.x[idx], ds.labels(t)[idx], t))
        grad += g
    return grad


def local_train(
    model: ModelParams,
    data: Dataset,
    epochs: int,
    cfg: LocalTrainConfig = LocalTrainConfig(),
    seed: int = 0,
    tasks: Sequence[int] = (0,),
) -> np.ndarray:
    """Plain local learning: minibatch AdamW on the summed CE of ``tasks``."""
    theta = model.theta.copy()
    if len(data) == 0:
        return theta
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(model.dim)
    cur = model.with_theta(theta)
    for _ in range(epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            g = _multi_task_grad(cur, data, idx, tasks)
            theta, state = adam_step(theta, g, state, cfg.lr, cfg.weight_decay)
            cur = model.with_theta(theta)
    return theta


def _composite_train(
    model: ModelParams,
    split: ClientSplit,
    ctx: UnlearnContext,
    epochs: int,
    cfg: LocalTrainConfig,
    seed: int,
) -> np.ndarray:
    forget = split.forget
    if len(ctx.adv) != len(forget):
        raise ContextDimensionMismatch("adversarial set is not paired with the forget set")
    task = ctx.task
    theta = model.theta.copy()
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(model.dim)
    cur = model.with_theta(theta)
    for _ in range(epochs):
        for idx in _batches(len(forget), cfg.batch_size, rng):
            fb = Batch(forget.x[idx], forget.labels(task)[idx], task)
            ab = Batch(ctx.adv.x_adv[idx], ctx.adv.y_target[idx], task)
            g, _ = unlearn_grad(cur, fb, ab, ctx)
            if ctx.retain_tasks:
                # task-level forgetting co-optimises CE on the kept heads over the same batch
                g = g + _multi_task_grad(cur, forget, idx, ctx.retain_tasks)
            theta, state = adam_step(theta, g, state, cfg.lr, cfg.weight_decay)
            cur = model.with_theta(theta)
    return theta


# A strategy maps (global model, client split, context, epochs, config, seed) to
# a plain parameter vector; everything downstream is strategy-agnostic.
Strategy = Callable[[ModelParams, ClientSplit, UnlearnContext, int, LocalTrainConfig, int], np.ndarray]

_STRATEGIES: dict[str, Strategy] = {}


def register_strategy(name: str) -> Callable[[Strategy], Strategy]:
    def deco(fn: Strategy) -> Strategy:
        _STRATEGIES[name] = fn
        return fn

    return deco


def get_strategy(name: str) -> Strategy:
    try:
        return _STRATEGIES[name]
    except KeyError:
        raise UnknownStrategy(f"unknown strategy {name!r}; known: {sorted(_STRATEGIES)}") from None


def strategy_names() -> list[str]:
    return sorted(_STRATEGIES)


@register_strategy("efu")
def efu_update(model, split, ctx, epochs, cfg=LocalTrainConfig(), seed=0) -> np.ndarray:
    return _composite_train(model, split, ctx, epochs, cfg, seed)


@register_strategy("gradient_ascent")
def plain_ga_update(model, split, ctx, epochs, cfg=LocalTrainConfig(), seed=0) -> np.ndarray:
    """Negated CE on the forget set only; adversarial and drift terms switched off."""
    ga_ctx = UnlearnContext(ctx.theta_tilde, ctx.omega_bar, ctx.adv, LossWeights(ctx.weights.forget, 0.0, 0.0), ctx.retain_tasks)
    return _composite_train(model, split, ga_ctx, epochs, cfg, seed)


def client_update(
    model: ModelParams,
    split: ClientSplit,
    ctx: Optional[UnlearnContext],
    epochs: int,
    cfg: LocalTrainConfig = LocalTrainConfig(),
    seed: int = 0,
    strategy: str = "efu",
    tasks: Sequence[int] = (0,),
) -> np.ndarray:
    """One client's local step.

    With an empty forget set (or no context) this is plain learning on D^l;
    otherwise the named strategy runs over the paired forget/adversarial batches.
    """
    if ctx is None or len(split.forget) == 0:
        return local_train(model, split.retain, epochs, cfg, seed, tasks)
    return get_strategy(strategy)(model, split, ctx, epochs, cfg, seed)
