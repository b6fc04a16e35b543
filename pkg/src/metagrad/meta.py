"""Meta-iteration over sampled model tasks.

Each of T outer iterations draws a task: n + 1 distinct white-box
models, n forming an equally-weighted logit ensemble and one held out
as a simulated black box.  The inner loop takes K sign steps against
the ensemble (meta-train), then a single momentum-free step of size
beta against the held-out model (meta-test), and finally only the
held-out step's delta is added onto the running iterate before
projecting back into the budget ball (perturbation transfer).

Any `MethodConfig` can host the inner loop unchanged; the held-out step
always uses the plain cross-entropy gradient of the single test model,
momentum-free and transform-free, matching its definition.

Design choices that are not forced by the update equations:

- Inner iterates are projected to the budget ball around the *benign*
  anchor after every step, so every gradient evaluation happens inside
  the certified constraint region.
- The momentum buffer persists across the K inner steps of one task and
  resets between tasks.
- Ensemble weights are equal (1/n).
- The random-resize input transform, when configured, redraws fresh
  randomness at every gradient evaluation.
- Tasks are drawn without replacement within a task and with
  replacement across tasks.
- `plain_meta_train=True` switches the inner loop to the plain sign
  gradient (no momentum, no transforms) for comparison; the default
  applies the host method faithfully.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import autodiff as ad
from .errors import ConfigError
from .validation import check_single_image

# The held-out step and the strict inner mode both use this: one plain
# sign-gradient step, no momentum, no transforms.
PLAIN_STEP = atk.MethodConfig(base="BIM")

# Plain configurations never consume randomness (verified by test), so a
# shared throwaway generator satisfies the gradient signature.
_INERT_RNG = np.random.default_rng(0)


@dataclass(frozen=True)
class MgaaConfig:
    """Outer-loop shape and step sizes.

    `alpha=0` is allowed and makes meta-train a position no-op, which is
    the degenerate setting under which the attack collapses to the plain
    iterative attack with step `beta`; `beta` defaults to epsilon / T.
    """

    budget: atk.AttackBudget
    method: atk.MethodConfig = PLAIN_STEP
    T: int = 40
    K: int = 5
    n: int = 5
    alpha: float = 1.0
    beta: float | None = None
    targeted: bool = False
    seed: int = 0
    plain_meta_train: bool = False

    def __post_init__(self):
        if self.T < 1 or self.K < 1:
            raise ConfigError(f"T and K must be >= 1, got T={self.T} K={self.K}")
        if self.n < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.n}")
        if self.alpha < 0:
            raise ConfigError(f"meta-train step size must be >= 0, got {self.alpha}")
        if self.beta is not None and self.beta <= 0:
            raise ConfigError(f"meta-test step size must be > 0, got {self.beta}")
        if self.method.base == "NI":
            raise ConfigError(
                "Nesterov-lookahead methods are standalone baselines and "
                "cannot host the meta attack"
            )

    def resolved_beta(self) -> float:
        return self.beta if self.beta is not None else self.budget.epsilon / self.T

    def inner_method(self) -> atk.MethodConfig:
        return PLAIN_STEP if self.plain_meta_train else self.method


@dataclass(frozen=True)
class MetaTask:
    """n ensemble members plus one held-out model, all white-box."""

    train_indices: tuple
    test_index: int
    weights: tuple

    def __post_init__(self):
        members = set(self.train_indices) | {self.test_index}
        if len(members) != len(self.train_indices) + 1:
            raise ConfigError(
                f"task indices must be distinct, got train={self.train_indices} "
                f"test={self.test_index}"
            )
        if len(self.weights) != len(self.train_indices):
            raise ConfigError(
                f"{len(self.train_indices)} ensemble members but "
                f"{len(self.weights)} weights"
            )


@dataclass
class TaskRecord:
    task: MetaTask
    test_delta_linf: float
    meta_train_losses: list
    meta_test_loss: float
    transfer_clipped: bool


@dataclass
class MgaaTrace:
    """Per-task telemetry plus the final adversarial tensor."""

    records: list = field(default_factory=list)
    adversarial: ad.Tensor | None = None

    def any_transfer_clipped(self) -> bool:
        return any(r.transfer_clipped for r in self.records)


def sample_task(zoo, n: int, rng: np.random.Generator) -> MetaTask:
    """Uniformly draw n + 1 distinct white-box members; the last one is
    held out, the first n share equal ensemble weight."""
    pool = zoo.white_box_indices
    if len(pool) < n + 1:
        raise ConfigError(
            f"task needs {n + 1} distinct white-box models but the zoo "
            f"has {len(pool)}"
        )
    picks = rng.choice(np.asarray(pool), size=n + 1, replace=False)
    return MetaTask(
        train_indices=tuple(int(k) for k in picks[:n]),
        test_index=int(picks[n]),
        weights=(1.0 / n,) * n,
    )


def meta_train(
    x_i: ad.Tensor,
    task: MetaTask,
    zoo,
    K: int,
    alpha: float,
    method: atk.MethodConfig,
    y,
    budget: atk.AttackBudget,
    rng: np.random.Generator,
    anchor: ad.Tensor,
    targeted: bool = False,
    target_labels=None,
    loss_out: list | None = None,
) -> atk.AttackState:
    """K host-method steps against the task ensemble, from x_i, each
    projected to the budget ball around the benign anchor.  Returns the
    final state (iterate plus carried momentum).  K=0 or alpha=0 leaves
    the iterate untouched."""
    state = atk.initial_state(x_i)
    if K == 0 or alpha == 0:
        return state
    ensemble = atk.LogitEnsemble(
        [zoo.models[k] for k in task.train_indices], list(task.weights)
    )
    for _ in range(K):
        grad = atk.attack_gradient(
            ensemble, state, y, method, alpha, rng,
            targeted=targeted, target_labels=target_labels,
            loss_out=loss_out,
        )
        state = atk.attack_step(state, grad, alpha, method, anchor, budget)
    return state


def meta_test(
    x_k: ad.Tensor,
    test_model,
    beta: float,
    y,
    budget: atk.AttackBudget,
    anchor: ad.Tensor,
    targeted: bool = False,
    target_labels=None,
    loss_out: list | None = None,
) -> ad.Tensor:
    """One plain sign step of size beta against the held-out model.

    No momentum carries into or out of this step and no input or
    gradient transform applies; beta=0 returns the iterate unchanged.
    """
    if beta == 0:
        return x_k
    state = atk.initial_state(x_k)
    grad = atk.attack_gradient(
        test_model, state, y, PLAIN_STEP, beta, _INERT_RNG,
        targeted=targeted, target_labels=target_labels, loss_out=loss_out,
    )
    state = atk.attack_step(state, grad, beta, PLAIN_STEP, anchor, budget)
    return state.x_adv


def perturbation_transfer(
    x_i: ad.Tensor,
    x_k: ad.Tensor,
    x_mt: ad.Tensor,
    anchor: ad.Tensor,
    budget: atk.AttackBudget,
) -> ad.Tensor:
    """x_{i+1} = clip(x_i + (x_mt - x_k)): only the held-out step's
    delta transfers onto the running iterate."""
    raw = x_i.data + (x_mt.data - x_k.data)
    return atk.clip_to_ball(ad.Tensor(raw), anchor, budget)


def _resolve_rngs(config: MgaaConfig, task_rng, transform_rng):
    if (task_rng is None) != (transform_rng is None):
        raise ConfigError("pass both task_rng and transform_rng or neither")
    if task_rng is None:
        streams = np.random.SeedSequence([config.seed]).spawn(2)
        task_rng = np.random.default_rng(streams[0])
        transform_rng = np.random.default_rng(streams[1])
    return task_rng, transform_rng


def _outer_loop(
    x,
    y,
    zoo,
    config: MgaaConfig,
    inner_steps: int,
    target_labels,
    task_rng,
    transform_rng,
):
    if config.targeted and target_labels is None:
        raise ConfigError("targeted attack requires target labels")
    if len(zoo.white_box_indices) < config.n + 1:
        raise ConfigError(
            f"config needs n+1={config.n + 1} white-box models but the zoo "
            f"has {len(zoo.white_box_indices)}"
        )
    task_rng, transform_rng = _resolve_rngs(config, task_rng, transform_rng)
    arr = x.data if isinstance(x, ad.Tensor) else x
    anchor = ad.Tensor(check_single_image(arr).copy())
    beta = config.resolved_beta()
    inner = config.inner_method()

    x_i = ad.Tensor(anchor.data.copy())
    trace = MgaaTrace()
    for _ in range(config.T):
        task = sample_task(zoo, config.n, task_rng)
        train_losses: list = []
        state_k = meta_train(
            x_i, task, zoo, inner_steps, config.alpha, inner, y,
            config.budget, transform_rng, anchor,
            targeted=config.targeted, target_labels=target_labels,
            loss_out=train_losses,
        )
        x_k = state_k.x_adv
        test_losses: list = []
        x_mt = meta_test(
            x_k, zoo.models[task.test_index], beta, y, config.budget, anchor,
            targeted=config.targeted, target_labels=target_labels,
            loss_out=test_losses,
        )
        raw = x_i.data + (x_mt.data - x_k.data)
        x_next = perturbation_transfer(x_i, x_k, x_mt, anchor, config.budget)
        delta64 = x_mt.data.astype(np.float64) - x_k.data.astype(np.float64)
        trace.records.append(
            TaskRecord(
                task=task,
                test_delta_linf=float(np.abs(delta64).max()),
                meta_train_losses=train_losses,
                meta_test_loss=test_losses[0] if test_losses else float("nan"),
                transfer_clipped=not np.array_equal(x_next.data, raw),
            )
        )
        x_i = x_next
    trace.adversarial = x_i
    return x_i, trace


def mgaa_attack(
    x,
    y,
    zoo,
    config: MgaaConfig,
    target_labels=None,
    task_rng: np.random.Generator | None = None,
    transform_rng: np.random.Generator | None = None,
):
    """T rounds of sample_task, meta_train, meta_test, and perturbation
    transfer; returns (adversarial tensor, trace).

    Deterministic given (config, seed, zoo, image): when the rng pair is
    omitted it derives from config.seed, split into separate
    task-sampling and input-transform streams so toggling the transform
    never changes which tasks get drawn.
    """
    return _outer_loop(
        x, y, zoo, config, config.K, target_labels, task_rng, transform_rng
    )


def mgaa_without_meta_train(
    x,
    y,
    zoo,
    config: MgaaConfig,
    target_labels=None,
    task_rng: np.random.Generator | None = None,
    transform_rng: np.random.Generator | None = None,
):
    """Ablation: skip the ensemble inner loop and take each task's
    single beta-step against its held-out model only.

    Tasks are drawn exactly as in the full attack, so matched seeds face
    the same held-out model sequence with and without meta-train.
    """
    return _outer_loop(
        x, y, zoo, config, 0, target_labels, task_rng, transform_rng
    )


def ensemble_baseline(
    x,
    y,
    zoo,
    method,
    T: int,
    budget: atk.AttackBudget,
    rng: np.random.Generator | None = None,
    alpha: float | None = None,
    targeted: bool = False,
    target_labels=None,
    log: atk.RunLog | None = None,
) -> ad.Tensor:
    """The non-meta reference: run the host method for T steps against
    the equal-weight logit ensemble of all white-box models, with step
    size epsilon / T unless overridden.  This is also exactly the
    attack with the held-out step disabled."""
    models = zoo.white_models
    fused = atk.LogitEnsemble(models, [1.0 / len(models)] * len(models))
    if alpha is None:
        alpha = budget.epsilon / T
    if rng is None:
        rng = np.random.default_rng(0)
    arr = x.data if isinstance(x, ad.Tensor) else x
    arr = check_single_image(arr)
    return atk.run_attack(
        fused, arr, y, atk.get_method(method), T, alpha, budget, rng,
        targeted=targeted, target_labels=target_labels, log=log,
    )
