"""Weighted multi-level loss, epoch-indexed schedules, RMSprop, and the
repeated-run training protocol.

The combined loss is sum_k w_k * CE_k over the K levels, with the weight
vector stepping from coarse-heavy to fine-only at fixed epochs.  Flat
models reuse the identical loop with the degenerate single-level schedule
[1.0].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .dataset import ArraySet, make_batches
from .hierarchy import ClassHierarchy
from .metrics import PredictionBundle
from .models import ForwardContext, ModelSpec, Network, build_family


@dataclass(frozen=True)
class LossWeightSchedule:
    """Piecewise-constant per-level loss weights keyed by 1-based epoch."""

    anchors: tuple  # ((epoch, (w1..wK)), ...)

    def __post_init__(self):
        if not self.anchors:
            raise ValueError("schedule needs at least one anchor")
        if self.anchors[0][0] != 1:
            raise ValueError("first anchor must sit at epoch 1")
        k = len(self.anchors[0][1])
        last = 0
        for epoch, weights in self.anchors:
            if epoch <= last:
                raise ValueError(f"anchor epochs must strictly increase (saw {epoch} after {last})")
            last = epoch
            if len(weights) != k:
                raise ValueError("all anchors must carry the same number of levels")
            if any(w < 0 for w in weights):
                raise ValueError(f"negative loss weight at epoch {epoch}")
            if abs(sum(weights) - 1.0) > 1e-9:
                raise ValueError(f"weights at epoch {epoch} sum to {sum(weights)}, not 1")

    @property
    def levels(self) -> int:
        return len(self.anchors[0][1])


def default_loss_weight_schedule() -> LossWeightSchedule:
    return LossWeightSchedule(anchors=(
        (1, (0.98, 0.02)),
        (5, (0.30, 0.70)),
        (10, (0.10, 0.90)),
        (15, (0.00, 1.00)),
    ))


def flat_loss_weight_schedule() -> LossWeightSchedule:
    """Single-level schedule for the flat family: fine loss only."""
    return LossWeightSchedule(anchors=((1, (1.0,)),))


def weights_at(schedule: LossWeightSchedule, epoch: int) -> tuple:
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    current = schedule.anchors[0][1]
    for anchor_epoch, weights in schedule.anchors:
        if anchor_epoch <= epoch:
            current = weights
        else:
            break
    return tuple(current)


@dataclass(frozen=True)
class LrSchedule:
    anchors: tuple = ((1, 1e-3), (11, 5e-4), (16, 1e-4))

    def __post_init__(self):
        if not self.anchors or self.anchors[0][0] != 1:
            raise ValueError("learning-rate schedule must start at epoch 1")
        last = 0
        for epoch, rate in self.anchors:
            if epoch <= last:
                raise ValueError("anchor epochs must strictly increase")
            if rate <= 0:
                raise ValueError(f"non-positive learning rate {rate} at epoch {epoch}")
            last = epoch


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    current = schedule.anchors[0][1]
    for anchor_epoch, rate in schedule.anchors:
        if anchor_epoch <= epoch:
            current = rate
        else:
            break
    return float(current)


class RmsPropState:
    """Per-parameter squared-gradient accumulators; no momentum."""

    def __init__(self, rho: float = 0.9, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.acc: dict = {}


def rmsprop_step(named_params, state: RmsPropState, lr: float) -> None:
    """acc <- rho*acc + (1-rho)*g^2; param <- param - lr*g/(sqrt(acc)+eps)."""
    for name, param in named_params:
        g = param.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter {name!r}")
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(param.data)
        acc = state.rho * acc + (1.0 - state.rho) * g * g
        state.acc[name] = acc
        param.data = param.data - lr * g / (np.sqrt(acc) + state.eps)


def hierarchical_loss(heads: Sequence[T.Tensor], targets: Sequence[np.ndarray],
                      weights: Sequence[float]) -> T.Tensor:
    """Weighted sum over levels of mean softmax cross-entropy."""
    if not (len(heads) == len(targets) == len(weights)):
        raise ValueError(
            f"level count mismatch: {len(heads)} heads, {len(targets)} targets, "
            f"{len(weights)} weights")
    total = None
    for head, target, w in zip(heads, targets, weights):
        term = T.scale(T.cross_entropy(head, np.asarray(target)), float(w))
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class TrainConfig:
    epochs: int = 20
    runs: int = 10
    batch_size: int = 32
    seed: int = 0
    loss_weight_schedule: LossWeightSchedule = field(default_factory=default_loss_weight_schedule)
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    preset: str = "desk"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm constraint)")


def _check_hierarchy_consistency(data: ArraySet, hierarchy: ClassHierarchy) -> None:
    expected = hierarchy.lift_indices(data.fine)
    bad = np.flatnonzero(expected != data.coarse)
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"example {i}: fine label {data.fine[i]} implies coarse "
            f"{expected[i]}, got {data.coarse[i]} ({bad.size} inconsistent total)")


def _forward_loss(net: Network, x: T.Tensor, coarse_t, fine_t, weights, ctx):
    coarse_logits, fine_logits = net.forward(x, ctx)
    if net.family == "hier":
        heads = [coarse_logits, fine_logits]
        targets = [coarse_t, fine_t]
    else:
        heads = [fine_logits]
        targets = [fine_t]
        if len(weights) != 1:
            raise ValueError("flat family trains with the single-level schedule")
    return hierarchical_loss(heads, targets, weights)


def train(net: Network, train_set: ArraySet, config: TrainConfig,
          rng: np.random.Generator, dev_set: Optional[ArraySet] = None,
          run_index: int = 0, log_sink=None) -> list:
    """Epoch loop over seeded batches; returns the per-epoch log records."""
    if train_set.n < 1:
        raise ValueError("empty training set")
    if dev_set is None:
        import warnings

        warnings.warn("no development set provided; per-epoch dev accuracy "
                      "will be logged as null", stacklevel=2)
    _check_hierarchy_consistency(train_set, net.hierarchy)
    schedule = (config.loss_weight_schedule if net.family == "hier"
                else flat_loss_weight_schedule())
    opt = RmsPropState()
    params = net.params()
    logs = []
    dtype = params[0][1].data.dtype
    for epoch in range(1, config.epochs + 1):
        weights = weights_at(schedule, epoch)
        lr = lr_at(config.lr_schedule, epoch)
        epoch_losses = []
        for batch_idx in make_batches(train_set.n, config.batch_size, rng):
            x = T.Tensor(train_set.images[batch_idx].astype(dtype, copy=False))
            ctx = ForwardContext(training=True, rng=rng)
            with T.Tape() as tape:
                loss = _forward_loss(net, x, train_set.coarse[batch_idx],
                                     train_set.fine[batch_idx], weights, ctx)
            net.zero_grads()
            T.backward(tape, loss)
            rmsprop_step(params, opt, lr)
            epoch_losses.append(loss.item())
        record = {
            "run": run_index,
            "epoch": epoch,
            "lr": lr,
            "loss_weights": list(weights),
            "train_loss": float(np.mean(epoch_losses)),
        }
        if dev_set is not None and dev_set.n > 0:
            bundle = evaluate(net, dev_set, config.eval_batch_size)
            record["dev_coarse_acc"] = float(np.mean(bundle.coarse_pred == bundle.coarse_true))
            record["dev_fine_acc"] = float(np.mean(bundle.fine_pred == bundle.fine_true))
        else:
            record["dev_coarse_acc"] = None
            record["dev_fine_acc"] = None
        logs.append(record)
        if log_sink is not None:
            log_sink(record)
    return logs


def evaluate(net: Network, data: ArraySet, batch_size: int = 64) -> PredictionBundle:
    """Inference pass producing softmax probabilities at both levels.

    Flat-family coarse probabilities are the fine probabilities lifted
    through the hierarchy.
    """
    if data.n < 1:
        raise ValueError("empty evaluation set")
    ctx = ForwardContext(training=False)
    dtype = net.params()[0][1].data.dtype
    fine_rows = []
    coarse_rows = []
    for start in range(0, data.n, batch_size):
        x = T.Tensor(data.images[start:start + batch_size].astype(dtype, copy=False))
        coarse_logits, fine_logits = net.forward(x, ctx)
        fine_probs = T.softmax(fine_logits).data
        fine_rows.append(np.asarray(fine_probs, dtype=np.float64))
        if net.family == "hier":
            coarse_rows.append(np.asarray(T.softmax(coarse_logits).data, dtype=np.float64))
        else:
            coarse_rows.append(net.hierarchy.lift_probs(np.asarray(fine_probs, dtype=np.float64)))
    return PredictionBundle(
        fine_probs=np.concatenate(fine_rows, axis=0),
        coarse_probs=np.concatenate(coarse_rows, axis=0),
        fine_true=data.fine.copy(),
        coarse_true=data.coarse.copy(),
    )


@dataclass
class RunResult:
    seed: int
    family: str
    net: Network
    logs: list
    bundle: Optional[PredictionBundle]


def multi_run(family: str, spec: ModelSpec, train_set: ArraySet,
              config: TrainConfig, dev_set: Optional[ArraySet] = None,
              test_set: Optional[ArraySet] = None,
              hierarchy: Optional[ClassHierarchy] = None,
              log_sink=None, run_sink=None) -> list:
    """`config.runs` independent train(+test-evaluate) cycles.

    Run i uses seed config.seed + i for both initialization and the
    training pass.  Failures abort with the offending seed named.
    `run_sink(i, result)` fires as each run completes so callers can
    persist checkpoints before later runs have a chance to fail.
    """
    results = []
    for i in range(config.runs):
        seed = config.seed + i
        try:
            rng = np.random.default_rng(seed)
            net = build_family(family, spec, rng, hierarchy)
            logs = train(net, train_set, config, rng, dev_set=dev_set,
                         run_index=i, log_sink=log_sink)
            bundle = evaluate(net, test_set, config.eval_batch_size) if test_set is not None else None
            results.append(RunResult(seed=seed, family=family, net=net,
                                     logs=logs, bundle=bundle))
            if run_sink is not None:
                run_sink(i, results[-1])
        except Exception as exc:
            raise RuntimeError(f"run {i} (seed {seed}, family {family}) failed: {exc}") from exc
    return results
