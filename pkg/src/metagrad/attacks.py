"""Composable sign-gradient attacks over a shared state.

Every method here is one configuration of the same pipeline:

    gradient = attack_gradient(target, state, y, config, alpha, rng)
    state    = attack_step(state, gradient, alpha, config, anchor, budget)

`MethodConfig` selects the base scheme (plain/momentum/Nesterov
lookahead), an optional random resize-pad input transform, an optional
Gaussian gradient smoothing, and an optional scale-copy loss average.
The meta-attack in `meta.py` hosts any of these unchanged.

Reductions are bitwise: a single step of size epsilon is the one-step
sign attack, momentum decay 0 recovers the plain iterative attack, and
identity transforms leave the gradient untouched bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

BASE_METHODS = ("FGSM", "BIM", "MIM", "NI")


@dataclass(frozen=True)
class AttackBudget:
    """L-inf budget in 0-255 pixel units."""

    epsilon: float
    pixel_min: float = 0.0
    pixel_max: float = 255.0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 255.0:
            raise ConfigError(
                f"epsilon must lie in (0,255], got {self.epsilon}"
            )


@dataclass(frozen=True)
class DimTransform:
    """Random nearest-neighbor resize plus zero-pad back to full size."""

    probability: float = 0.7
    min_resize_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(
                f"transform probability must lie in [0,1], got {self.probability}"
            )
        if not 0.0 < self.min_resize_fraction <= 1.0:
            raise ConfigError(
                f"min_resize_fraction must lie in (0,1], got "
                f"{self.min_resize_fraction}"
            )


@dataclass(frozen=True)
class TimTransform:
    """Depthwise Gaussian smoothing of the raw gradient."""

    kernel_size: int = 7
    sigma: float | None = None  # defaults to kernel_size / 3

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(
                f"smoothing kernel size must be odd, got {self.kernel_size}"
            )

    def resolved_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.kernel_size / 3.0


@dataclass(frozen=True)
class SimAggregation:
    """Average the loss over scale copies x / 2^i, i = 0..copies-1."""

    copies: int = 5

    def __post_init__(self):
        if self.copies < 1:
            raise ConfigError(f"scale copies must be >= 1, got {self.copies}")


@dataclass(frozen=True)
class MethodConfig:
    base: str = "BIM"
    input_transform: DimTransform | None = None
    gradient_transform: TimTransform | None = None
    loss_aggregation: SimAggregation | None = None
    momentum_decay: float = 0.0

    def __post_init__(self):
        if self.base not in BASE_METHODS:
            raise ConfigError(
                f"unknown base method {self.base!r}; expected one of {BASE_METHODS}"
            )
        if self.momentum_decay < 0:
            raise ConfigError(
                f"momentum decay must be >= 0, got {self.momentum_decay}"
            )


# Named presets for the CLI and harness.  The Nesterov+scale-copies
# baseline stays standalone; the meta attack refuses to host it.
METHOD_PRESETS = {
    "fgsm": MethodConfig(base="FGSM"),
    "bim": MethodConfig(base="BIM"),
    "mim": MethodConfig(base="MIM", momentum_decay=1.0),
    "dim": MethodConfig(
        base="MIM", momentum_decay=1.0, input_transform=DimTransform()
    ),
    "tim": MethodConfig(
        base="MIM", momentum_decay=1.0, gradient_transform=TimTransform()
    ),
    "ti-dim": MethodConfig(
        base="MIM",
        momentum_decay=1.0,
        input_transform=DimTransform(),
        gradient_transform=TimTransform(),
    ),
    "sim": MethodConfig(
        base="MIM", momentum_decay=1.0, loss_aggregation=SimAggregation()
    ),
    "si-ni": MethodConfig(
        base="NI", momentum_decay=1.0, loss_aggregation=SimAggregation()
    ),
}


def get_method(name_or_config) -> MethodConfig:
    if isinstance(name_or_config, MethodConfig):
        return name_or_config
    try:
        return METHOD_PRESETS[name_or_config]
    except KeyError:
        raise ConfigError(
            f"unknown attack method {name_or_config!r}; known: "
            f"{sorted(METHOD_PRESETS)}"
        ) from None


@dataclass
class AttackState:
    """Current iterate, momentum accumulator, and step counter."""

    x_adv: ad.Tensor
    g: ad.Tensor
    t: int = 0
    degenerate: bool = False  # last step saw an identically-zero gradient


@dataclass
class RunLog:
    """Per-run telemetry: constraint margins and degenerate steps."""

    steps: int = 0
    degenerate_steps: int = 0
    max_linf: float = 0.0


def initial_state(x: ad.Tensor) -> AttackState:
    return AttackState(
        x_adv=ad.Tensor(x.data.copy()),
        g=ad.Tensor(np.zeros_like(x.data)),
        t=0,
    )


# ---------------------------------------------------------------------------
# constraint projection
# ---------------------------------------------------------------------------


def clip_to_ball(x, anchor, budget: AttackBudget):
    """Clamp to [anchor-eps, anchor+eps] intersected with pixel bounds.

    Accepts Tensors or arrays and returns the same kind.  For integer
    anchors and dyadic budgets every bound is exactly representable, so
    the constraints hold exactly rather than to rounding.
    """
    xa = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    aa = anchor.data if isinstance(anchor, ad.Tensor) else np.asarray(anchor)
    if xa.shape != aa.shape:
        raise ShapeError(
            f"clip_to_ball shapes differ: {xa.shape} vs {aa.shape}"
        )
    eps = np.float32(budget.epsilon)
    lo = np.maximum(aa - eps, np.float32(budget.pixel_min))
    hi = np.minimum(aa + eps, np.float32(budget.pixel_max))
    out = np.clip(xa, lo, hi)
    return ad.Tensor(out) if isinstance(x, ad.Tensor) else out


def check_state(state: AttackState, anchor: ad.Tensor, budget: AttackBudget) -> float:
    """Verify the ball and pixel-range invariants; returns the current
    L-inf distance (computed in 64-bit, which is exact for float32
    operands)."""
    delta = state.x_adv.data.astype(np.float64) - anchor.data.astype(np.float64)
    linf = float(np.abs(delta).max()) if delta.size else 0.0
    if linf > budget.epsilon:
        raise RuntimeError(
            f"attack state escaped the ball: {linf} > {budget.epsilon}"
        )
    lo, hi = state.x_adv.data.min(), state.x_adv.data.max()
    if lo < budget.pixel_min or hi > budget.pixel_max:
        raise RuntimeError(
            f"attack state escaped pixel range: [{lo},{hi}]"
        )
    return linf


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def dim_transform(
    x: ad.Tensor, p: float, min_fraction: float, rng: np.random.Generator
) -> ad.Tensor:
    """With probability p, nearest-resize to a random side and zero-pad
    back at a random offset; otherwise identity.  Differentiation passes
    through the resize/pad as the exact linear map.

    Draw order is part of the contract: fire check, then side, then top,
    then left offset.  p <= 0 consumes nothing from the stream.
    """
    if p <= 0.0:
        return x
    if rng.random() >= p:
        return x
    side = x.data.shape[2]
    if x.data.shape[3] != side:
        raise ShapeError(
            f"resize-pad transform expects square images, got {x.data.shape}"
        )
    r_lo = math.ceil(min_fraction * side)
    r = int(rng.integers(r_lo, side + 1))
    top = int(rng.integers(0, side - r + 1))
    left = int(rng.integers(0, side - r + 1))
    return ad.pad2d(ad.nn_resize(x, r), top, left, side, side)


@lru_cache(maxsize=16)
def _gaussian_kernel_array(k: int, sigma: float) -> np.ndarray:
    half = k // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    grid = coords[:, None] ** 2 + coords[None, :] ** 2
    kernel = np.exp(-grid / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    return kernel.astype(np.float32)


def gaussian_kernel(k: int, sigma: float) -> ad.Tensor:
    """Discrete 2-d Gaussian normalized to sum 1."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"Gaussian kernel size must be odd, got {k}")
    if sigma <= 0:
        raise ConfigError(f"Gaussian sigma must be positive, got {sigma}")
    return ad.Tensor(_gaussian_kernel_array(k, float(sigma)))


def tim_smooth(gradient, kernel) -> np.ndarray | ad.Tensor:
    """Depthwise same-padding convolution of the gradient with a 2-d
    kernel.  Applied to raw gradients after the backward sweep, so this
    is a plain array transform, not a recorded op."""
    garr = gradient.data if isinstance(gradient, ad.Tensor) else np.asarray(gradient)
    karr = kernel.data if isinstance(kernel, ad.Tensor) else np.asarray(kernel)
    k = karr.shape[0]
    if karr.shape != (k, k) or k % 2 == 0:
        raise ShapeError(f"smoothing kernel must be odd square, got {karr.shape}")
    if k == 1:
        out = garr if karr[0, 0] == 1.0 else garr * karr[0, 0]
        return ad.Tensor(out) if isinstance(gradient, ad.Tensor) else out
    b, c, h, w = garr.shape
    half = k // 2
    padded = np.zeros((b, c, h + 2 * half, w + 2 * half), dtype=garr.dtype)
    padded[:, :, half : half + h, half : half + w] = garr
    sb, sc, sh, sw = padded.strides
    win = np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, c, h, w, k, k),
        strides=(sb, sc, sh, sw, sh, sw),
        writeable=False,
    )
    # Symmetric kernel: correlation equals convolution.
    out = win.reshape(b * c * h * w, k * k) @ karr.reshape(k * k)
    out = out.reshape(b, c, h, w)
    return ad.Tensor(out) if isinstance(gradient, ad.Tensor) else out


# ---------------------------------------------------------------------------
# losses and ensembles
# ---------------------------------------------------------------------------


class LogitEnsemble:
    """Convex fusion of member logits: sum_s w_s * l_s(x)."""

    def __init__(self, models, weights):
        weights = [float(w) for w in weights]
        if len(weights) != len(models):
            raise ConfigError(
                f"{len(models)} models but {len(weights)} weights"
            )
        if not models:
            raise ConfigError("ensemble needs at least one model")
        if any(w < 0 for w in weights):
            raise ConfigError(f"ensemble weights must be >= 0, got {weights}")
        total = sum(weights)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(
                f"ensemble weights must sum to 1 (got {total!r})"
            )
        self.models = list(models)
        self.weights = weights

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        if len(self.models) == 1:
            member = self.models[0].logits(x)
            return member if self.weights[0] == 1.0 else ad.scale(member, self.weights[0])
        return ad.weighted_sum(
            [m.logits(x) for m in self.models], self.weights
        )


def ensemble_logits(models, weights, x: ad.Tensor) -> ad.Tensor:
    return LogitEnsemble(models, weights).logits(x)


def sim_loss(target, x: ad.Tensor, labels, m: int) -> ad.Tensor:
    """(1/m) sum_i CE(f(x / 2^i), labels) over i = 0..m-1."""
    if m < 1:
        raise ConfigError(f"scale copies must be >= 1, got {m}")
    losses = []
    for i in range(m):
        xi = x if i == 0 else ad.scale(x, 0.5**i)
        losses.append(ad.softmax_cross_entropy(target.logits(xi), labels))
    if m == 1:
        return losses[0]
    return ad.weighted_sum(losses, [1.0 / m] * m)


# ---------------------------------------------------------------------------
# the attack pipeline
# ---------------------------------------------------------------------------


def attack_gradient(
    target,
    state: AttackState,
    y,
    config: MethodConfig,
    alpha: float,
    rng: np.random.Generator,
    targeted: bool = False,
    target_labels=None,
    loss_out: list | None = None,
) -> np.ndarray:
    """Gradient of the configured loss at the configured point.

    The Nesterov base evaluates at the lookahead x_adv + alpha*mu*g;
    the input transform (if any) is applied first, scale copies average
    the loss, smoothing convolves the raw gradient afterwards.  In
    targeted mode the result is the negated gradient of cross-entropy
    toward the target label, so callers always ascend what they get.
    When `loss_out` is given the scalar loss is appended to it, saving
    callers a second forward pass for telemetry.
    """
    if targeted:
        if target_labels is None:
            raise ConfigError("targeted attack requires target labels")
        labels = target_labels
    else:
        labels = y
    mu = np.float32(config.momentum_decay)
    if config.base == "NI" and config.momentum_decay > 0:
        eval_point = state.x_adv.data + np.float32(alpha) * mu * state.g.data
    else:
        eval_point = state.x_adv.data
    leaf = ad.Tensor(eval_point, requires_grad=True)
    with ad.ComputationRecord() as rec:
        xin = leaf
        if config.input_transform is not None:
            dim = config.input_transform
            xin = dim_transform(leaf, dim.probability, dim.min_resize_fraction, rng)
        if config.loss_aggregation is not None:
            loss = sim_loss(target, xin, labels, config.loss_aggregation.copies)
        else:
            loss = ad.softmax_cross_entropy(target.logits(xin), labels)
    ad.backward(rec, loss)
    if loss_out is not None:
        loss_out.append(loss.item())
    grad = leaf.grad
    if targeted:
        grad = -grad
    if config.gradient_transform is not None:
        tim = config.gradient_transform
        grad = tim_smooth(
            grad, gaussian_kernel(tim.kernel_size, tim.resolved_sigma())
        )
    return grad


def attack_step(
    state: AttackState,
    raw_gradient: np.ndarray,
    alpha: float,
    config: MethodConfig,
    anchor: ad.Tensor,
    budget: AttackBudget,
    log: RunLog | None = None,
) -> AttackState:
    """One sign update: momentum accumulation when mu > 0, plain sign of
    the raw gradient otherwise, then projection back into the ball.

    An identically-zero gradient stalls the position (momentum decays,
    the iterate stays put) and is flagged in the run log.
    """
    if alpha <= 0:
        raise ConfigError(f"step size must be positive, got {alpha}")
    mu = np.float32(config.momentum_decay)
    degenerate = not raw_gradient.any()
    if config.momentum_decay > 0:
        normalized, _ = ad.l1_normalize(raw_gradient)
        g_new = mu * state.g.data + normalized
        direction = np.sign(g_new)
    else:
        g_new = state.g.data
        direction = np.sign(raw_gradient)
    if degenerate:
        x_new = state.x_adv.data
    else:
        stepped = state.x_adv.data + np.float32(alpha) * direction
        x_new = clip_to_ball(stepped, anchor.data, budget)
    new_state = AttackState(
        x_adv=ad.Tensor(x_new),
        g=ad.Tensor(g_new),
        t=state.t + 1,
        degenerate=degenerate,
    )
    linf = check_state(new_state, anchor, budget)
    if log is not None:
        log.steps += 1
        log.degenerate_steps += int(degenerate)
        log.max_linf = max(log.max_linf, linf)
    return new_state


def run_attack(
    target,
    x,
    y,
    config: MethodConfig,
    steps: int,
    alpha: float,
    budget: AttackBudget,
    rng: np.random.Generator,
    targeted: bool = False,
    target_labels=None,
    log: RunLog | None = None,
) -> ad.Tensor:
    """T rounds of attack_gradient + attack_step from the benign anchor."""
    if steps < 1:
        raise ConfigError(f"attack needs at least one step, got {steps}")
    anchor = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    state = initial_state(anchor)
    for _ in range(steps):
        grad = attack_gradient(
            target, state, y, config, alpha, rng,
            targeted=targeted, target_labels=target_labels,
        )
        state = attack_step(state, grad, alpha, config, anchor, budget, log=log)
    return state.x_adv


def fgsm(model, x, y, epsilon: float, budget: AttackBudget | None = None) -> ad.Tensor:
    """One sign step of size epsilon: the single-step special case."""
    if budget is None:
        budget = AttackBudget(epsilon)
    rng = np.random.default_rng(0)  # plain config consumes no randomness
    return run_attack(
        model, x, y, METHOD_PRESETS["fgsm"], steps=1, alpha=epsilon,
        budget=budget, rng=rng,
    )
