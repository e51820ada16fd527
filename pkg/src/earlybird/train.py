"""EB Train: search for an early ticket, prune it, retrain it; plus the one-shot LT baseline."""

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .detector import EBDetectionResult, EBDetector
from .errors import ConfigError, NumericError, TrainingError
from .model import CostReport, build_network, count_flops
from .optim import OptimizerState, sgd_step
from .pruning import apply_mask, network_mask

log = logging.getLogger(__name__)

PRECISIONS = ("fp32", "sim8")
WEIGHT_MODES = ("inherit", "reinit")
MAX_BAD_STEPS = 3


# --------------------------------------------------------------------------
# Schedules and quantisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    initial: float = 0.1
    milestones: tuple = (80, 120)
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.initial < 0:
            raise ConfigError("initial learning rate must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and not 0 < self.factor < 1:
            raise ConfigError(f"decay factor must lie in (0, 1), got {self.factor}")

    @classmethod
    def scaled(cls, epochs, initial=0.1, fractions=(0.5, 0.75), factor=0.1):
        """Step schedule with milestones at the given fractions of ``epochs`` (160 -> [80, 120])."""
        ms = sorted({int(round(f * epochs)) for f in fractions if 0 < round(f * epochs) < epochs})
        return cls(initial, tuple(ms), factor)


def lr_at_epoch(schedule, t):
    """Learning rate for zero-based epoch ``t``."""
    passed = sum(1 for m in schedule.milestones if m <= t)
    return schedule.initial * schedule.factor ** passed


def quantize_sim(x, bits=8):
    """Symmetric per-tensor quantise-dequantise with ``2^(bits-1) - 1`` levels per sign.

    Halves round up, so ``-0.5`` at 8 bits maps to ``-63/127``.
    """
    if bits < 2:
        raise ConfigError("bits must be >= 2")
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise NumericError("quantize_sim input contains non-finite values")
    peak = np.abs(x).max() if x.size else 0
    if peak == 0:
        return x.copy()
    levels = 2 ** (bits - 1) - 1
    scale = peak / levels
    if scale == 0:  # subnormal peak: nothing representable to quantise against
        return x.copy()
    # round half up, the same convention as the pruning count
    q = np.clip(np.floor(x / scale + 0.5), -levels, levels)
    return (q * scale).astype(x.dtype, copy=False)


# --------------------------------------------------------------------------
# Configuration and records
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    search_epochs: int = 20  # t_max; also the dense length of the LT baseline
    retrain_epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    milestones: tuple = (0.5, 0.75)  # fractions of each phase's epochs
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    l1_gamma: float = 1e-4
    p: float = 0.3
    epsilon: float = 0.1
    window: int = 5
    precision: str = "fp32"  # search phase only; retraining is always fp32
    weight_mode: str = "inherit"
    seed: int = 0
    data_seed: int = 0

    def validate(self):
        if not 0 < self.p < 1:
            raise ConfigError(f"p must lie in (0, 1), got {self.p}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.search_epochs < self.window + 1:
            raise ConfigError(f"search_epochs ({self.search_epochs}) must be >= window + 1 ({self.window + 1})")
        if self.retrain_epochs < 0:
            raise ConfigError("retrain_epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.l1_gamma < 0:
            raise ConfigError("lr, momentum, weight_decay and l1_gamma must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}")
        self.schedule(self.search_epochs)
        return self

    def schedule(self, epochs):
        return LRSchedule.scaled(epochs, self.lr, tuple(self.milestones), self.lr_factor)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


METRIC_COLUMNS = ("phase", "epoch", "lr", "train_loss", "val_loss", "test_acc", "mask_distance", "cumulative_flops")


@dataclass
class PhaseState:
    """Everything needed to continue a training phase from the end of an epoch."""

    phase: str
    network: object
    optimizer: OptimizerState
    epochs: int
    precision: str = "fp32"
    epoch: int = 0  # completed epochs
    detector: Optional[EBDetector] = None
    metrics: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    flops: int = 0
    overhead_seconds: float = 0.0
    train_seconds: float = 0.0


@dataclass
class ExperimentReport:
    name: str
    config: dict
    ticket: EBDetectionResult
    search: Optional[PhaseState]
    retrain: Optional[PhaseState]
    cost: CostReport
    final_accuracy: float
    dense_accuracy: Optional[float] = None
    pruned_accuracy_before_retrain: Optional[float] = None
    overhead: dict = field(default_factory=dict)

    @property
    def metrics(self):
        rows = list(self.search.metrics) if self.search else []
        return rows + (list(self.retrain.metrics) if self.retrain else [])

    def summary(self):
        return {
            "name": self.name,
            "triggered": self.ticket.triggered,
            "fallback": self.ticket.fallback,
            "ticket_epoch": self.ticket.epoch,
            "final_accuracy": self.final_accuracy,
            "dense_accuracy": self.dense_accuracy,
            "pruned_accuracy_before_retrain": self.pruned_accuracy_before_retrain,
            "cost": self.cost.to_dict(),
            "overhead": dict(self.overhead),
        }


# --------------------------------------------------------------------------
# Epoch loop
# --------------------------------------------------------------------------

def _phase_code(phase):
    return zlib.crc32(phase.encode("ascii"))


def epoch_permutation(n, data_seed, phase, epoch):
    # Derived per (seed, phase, epoch) so resuming never needs a stored RNG stream.
    rng = np.random.Generator(np.random.PCG64([data_seed, _phase_code(phase), epoch]))
    return rng.permutation(n)


def evaluate(network, data, batch_size=500):
    """``(mean loss, accuracy)`` in eval mode."""
    if len(data) == 0:
        return float("nan"), float("nan")
    logits = network.predict(data.x, batch_size)
    loss, _ = ops.softmax_cross_entropy(logits.astype(np.float64), data.y)
    acc = float(np.mean(logits.argmax(axis=1) == data.y))
    return loss, acc


def train_epoch(state, splits, config, schedule):
    """Run one epoch of ``state`` in place and append its metrics row.

    Returns the detection result when ``state.detector`` is set, else None.
    """
    net = state.network
    train = splits.train
    if len(train) == 0:
        raise TrainingError("empty training split", state.epoch + 1)
    if config.batch_size > len(train):
        raise ConfigError(f"batch size {config.batch_size} exceeds training split size {len(train)}")
    t = state.epoch
    lr = lr_at_epoch(schedule, t)
    state.optimizer.lr = lr
    q = (lambda a: quantize_sim(a, 8)) if state.precision == "sim8" else None
    gamma_names = net.gamma_names

    start = time.perf_counter()
    order = epoch_permutation(len(train), config.data_seed, state.phase, t)
    total_loss, seen, bad = 0.0, 0, 0
    for i in range(0, len(order), config.batch_size):
        idx = order[i : i + config.batch_size]
        if idx.size < 2:
            continue
        try:
            # overflow is caught below as NumericError; numpy's warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net.forward(train.x[idx], train=True, quantize=q)
                loss, grad = ops.softmax_cross_entropy(logits, train.y[idx])
                if not math.isfinite(loss):
                    raise NumericError("non-finite loss")
                grads = net.backward(grad, quantize=q)
        except NumericError as exc:
            bad += 1
            log.warning("%s epoch %d: skipped step (%s)", state.phase, t + 1, exc)
            if bad >= MAX_BAD_STEPS:
                raise TrainingError(f"{bad} consecutive non-finite steps in phase {state.phase}", t + 1) from exc
            continue
        bad = 0
        sgd_step(net.params, grads, state.optimizer, config.l1_gamma, gamma_names)
        total_loss += loss * idx.size
        seen += idx.size
    state.train_seconds += time.perf_counter() - start

    state.epoch += 1
    state.flops += count_flops(net).train_flops * seen

    distance, result = None, None
    if state.detector is not None:
        t0 = time.perf_counter()
        mask = network_mask(net, config.p, source_epoch=state.epoch)
        distance, result = state.detector.step(mask)
        state.overhead_seconds += time.perf_counter() - t0
        state.masks.append(mask)

    val_loss, _ = evaluate(net, splits.val)
    _, test_acc = evaluate(net, splits.test)
    state.metrics.append({
        "phase": state.phase,
        "epoch": state.epoch,
        "lr": lr,
        "train_loss": total_loss / max(seen, 1),
        "val_loss": val_loss,
        "test_acc": test_acc,
        "mask_distance": distance,
        "cumulative_flops": state.flops,
    })
    if not math.isfinite(state.metrics[-1]["train_loss"]):
        raise TrainingError("non-finite training loss", state.epoch)
    return result


# --------------------------------------------------------------------------
# Phases
# --------------------------------------------------------------------------

def new_phase(phase, network, config, epochs, precision="fp32", detector=False):
    opt = OptimizerState(lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    det = EBDetector(config.epsilon, config.window) if detector else None
    return PhaseState(phase, network, opt, epochs, precision, detector=det)


def run_phase(state, splits, config, on_epoch=None, stop_on_trigger=False):
    """Train ``state`` to ``state.epochs``; returns the first detection result (if any).

    With ``stop_on_trigger`` the loop exits at detection; otherwise the phase
    runs to completion and the network at detection is snapshotted into
    ``result.network``.
    """
    schedule = config.schedule(state.epochs)
    first = None
    while state.epoch < state.epochs:
        result = train_epoch(state, splits, config, schedule)
        if result is not None and result.triggered and first is None:
            first = result
            first.network = state.network.copy()  # weights at the detection epoch
            log.info("EB ticket detected at epoch %d", result.epoch)
        if on_epoch is not None:
            on_epoch(state)
        if first is not None and stop_on_trigger:
            break
    return first


def eb_search(splits, spec, config, state=None, on_epoch=None, stop_on_trigger=True):
    """Train the dense network with the detector until it fires or ``search_epochs`` pass.

    Returns ``(result, state)``.  Without a trigger the mask of the final
    epoch is taken and ``result.fallback`` is set.
    """
    config.validate()
    if state is None:
        state = new_phase("dense", build_network(spec, config.seed), config,
                          config.search_epochs, config.precision, detector=True)
    result = run_phase(state, splits, config, on_epoch, stop_on_trigger)
    if result is None:
        log.warning("no EB ticket within %d epochs; falling back to the final mask", state.epochs)
        result = EBDetectionResult(False, state.epoch, state.masks[-1], network=state.network.copy(), fallback=True)
    return result, state


def _overhead(search, total_channels):
    # Sort + Hamming comparison per epoch, against the epoch's training FLOPs.
    c = max(total_channels, 2)
    ops_per_epoch = c * math.ceil(math.log2(c)) + c
    train_per_epoch = search.flops / max(search.epoch, 1)
    return {
        "mask_ops_per_epoch": ops_per_epoch,
        "mask_flops_fraction": ops_per_epoch / train_per_epoch if train_per_epoch else 0.0,
        "mask_seconds": search.overhead_seconds,
        "mask_time_fraction": search.overhead_seconds / search.train_seconds if search.train_seconds else 0.0,
    }


def retrain_ticket(ticket_net, mask, splits, config, phase, weight_mode=None, seed=None):
    """Prune ``ticket_net`` with ``mask`` and retrain the result in full precision."""
    weight_mode = weight_mode or config.weight_mode
    seed = config.seed + 1 if seed is None else seed
    pruned = apply_mask(ticket_net, mask, weight_mode, seed)
    _, acc0 = evaluate(pruned, splits.test)
    state = new_phase(phase, pruned, config, config.retrain_epochs)
    run_phase(state, splits, config)
    return state, acc0


def _final_acc(state, fallback_acc):
    return state.metrics[-1]["test_acc"] if state.metrics else fallback_acc


def _phase_cost(cost, phase, rows):
    prev = 0
    for r in rows:
        cost.add_epoch(phase, r["cumulative_flops"] - prev)
        prev = r["cumulative_flops"]


def _empty_cost(spec):
    c = count_flops(spec)
    return CostReport(forward_flops=c.forward_flops, train_flops=c.train_flops, params=c.params)


def eb_train(splits, spec, config, search=None):
    """Search, prune at the detection epoch, retrain.

    ``search`` may pass in an ``(result, state)`` pair from :func:`eb_search`;
    if that dense run continued past detection, only the epochs up to the
    detection epoch are charged to the search phase.
    """
    config.validate()
    result, sstate = search if search is not None else eb_search(splits, spec, config)
    rows = [r for r in sstate.metrics if r["epoch"] <= result.epoch]
    search_view = PhaseState(
        sstate.phase, result.network, sstate.optimizer, sstate.epochs, sstate.precision,
        result.epoch, sstate.detector, rows, sstate.masks[: result.epoch],
        rows[-1]["cumulative_flops"], sstate.overhead_seconds, sstate.train_seconds,
    )
    cost = _empty_cost(spec)
    _phase_cost(cost, "search", rows)
    rstate, acc0 = retrain_ticket(result.network, result.mask, splits, config, f"retrain-{config.weight_mode}")
    _phase_cost(cost, "retrain", rstate.metrics)
    return ExperimentReport(
        name="eb_train",
        config=config.to_dict(),
        ticket=result,
        search=search_view,
        retrain=rstate,
        cost=cost,
        final_accuracy=_final_acc(rstate, acc0),
        dense_accuracy=rows[-1]["test_acc"],
        pruned_accuracy_before_retrain=acc0,
        overhead=_overhead(search_view, result.network.total_channels),
    )


def baseline_lt(splits, spec, config, dense=None):
    """Train dense for ``search_epochs``, prune once at the end, retrain (one-shot LT)."""
    config.validate()
    if dense is None:
        state = new_phase("dense", build_network(spec, config.seed), config, config.search_epochs, "fp32", detector=True)
        run_phase(state, splits, config)
    else:
        state = dense
    mask = state.masks[-1] if state.masks else network_mask(state.network, config.p, state.epoch)
    cost = _empty_cost(spec)
    _phase_cost(cost, "baseline_train", state.metrics)
    rstate, acc0 = retrain_ticket(state.network, mask, splits, config, f"lt-retrain-{config.weight_mode}")
    _phase_cost(cost, "baseline_retrain", rstate.metrics)
    ticket = EBDetectionResult(False, state.epoch, mask, network=state.network)
    return ExperimentReport(
        name="baseline_lt",
        config=config.to_dict(),
        ticket=ticket,
        search=state,
        retrain=rstate,
        cost=cost,
        final_accuracy=_final_acc(rstate, acc0),
        dense_accuracy=state.metrics[-1]["test_acc"],
        pruned_accuracy_before_retrain=acc0,
    )
