"""Supervised training: cross-entropy + L2, Adam, schedules, stopping.

One epoch is a full seeded-shuffle pass over the training set in
mini-batches (last partial batch kept). Per batch the loss is the mean
per-sample cross entropy plus the L2 penalty over kernel weights; Adam
updates follow every batch. The learning rate drops by the decay factor
after `lr_patience` epochs without training-loss improvement, training
stops after `early_stop_patience` epochs without validation-loss
improvement, and the parameters with the smallest validation loss are
the result. Everything is driven by one seed: weight init, shuffling,
and augmentation draw from independent child streams, so a fixed seed
reproduces the checkpoint bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluate
from .augment import Augmenter, AugmentRanges
from .autodiff import RawExec
from .data import resample_samples
from .errors import ConfigError, ContractError, DivergenceError
from .model import (AggNetConfig, forward_on_executor, init_params, is_bias,
                    tape_loss)
from .ops import log_softmax_nll

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Strict improvement means a relative decrease beyond this.
IMPROVEMENT_RTOL = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_patience: int = 10
    early_stop_patience: int = 10
    l2_lambda: float = 1e-5
    max_epochs: int = 500
    seed: int = 0
    augment: bool = True
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    gsd: float = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch_size and max_epochs must be >= 1")
        if self.initial_lr <= 0 or not 0 < self.lr_decay_factor < 1:
            raise ContractError("initial_lr must be > 0 and decay factor in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ContractError("patience values must be >= 1")
        if self.l2_lambda < 0:
            raise ContractError("l2_lambda must be >= 0")
        if self.gsd is not None and self.gsd <= 0:
            raise ContractError("gsd must be positive when given")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_oa: float
    lr: float


@dataclass(frozen=True)
class TrainResult:
    params: dict
    model_config: AggNetConfig
    history: tuple
    best_epoch: int
    best_val_loss: float
    stop_reason: str


def cross_entropy(probabilities, one_hot):
    """-log of the probability the one-hot vector selects; always >= 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    b = np.asarray(one_hot, dtype=np.float64)
    if p.shape != b.shape or p.ndim != 1:
        raise ContractError(
            f"shape mismatch: probabilities {p.shape} vs one-hot {b.shape}")
    ones = np.flatnonzero(b == 1.0)
    if len(ones) != 1 or not np.all((b == 0.0) | (b == 1.0)):
        raise ContractError("one-hot vector must have exactly one 1 and else 0")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("probabilities are not on the simplex")
    p_true = p[ones[0]]
    if p_true <= 0.0:
        return np.inf
    return float(-np.log(p_true))


def l2_penalty(params, lam):
    """lam times the squared-norm of all kernel weights; biases excluded."""
    if lam < 0:
        raise ContractError(f"l2 factor must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    return float(lam * sum(
        float(np.square(v).sum()) for k, v in params.items() if not is_bias(k)))


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update. Returns fresh params; state mutates."""
    if params.keys() != grads.keys():
        raise ContractError("parameter and gradient tables disagree")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {k!r}")
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[k] / (1.0 - ADAM_BETA1 ** t)
        v_hat = state.v[k] / (1.0 - ADAM_BETA2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out, state


def batch_loss_and_grads(params, model_config, images, true_indices, l2_lambda):
    """Mean cross entropy over the batch plus L2, with exact gradients.

    `true_indices` are 0-based. Per-sample tapes run in list order and
    gradients accumulate in that fixed order, keeping results identical
    across runs.
    """
    if len(images) != len(true_indices) or not images:
        raise ContractError("batch images and labels must align and be nonempty")
    total = 0.0
    grads = None
    for img, idx in zip(images, true_indices):
        tape, loss = tape_loss(img, idx, params, model_config)
        total += float(loss.value)
        g = tape.backward(loss)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    n = len(images)
    for k in grads:
        grads[k] /= n
    loss = total / n + l2_penalty(params, l2_lambda)
    if l2_lambda > 0:
        for k, p in params.items():
            if not is_bias(k):
                grads[k] = grads[k] + 2.0 * l2_lambda * p
    return loss, grads


def _improved(best, new):
    if not np.isfinite(best):
        return np.isfinite(new)
    return (best - new) > IMPROVEMENT_RTOL * abs(best)


def _validate(params, model_config, samples):
    """Mean cross entropy (no penalty) and accuracy over a sample list."""
    total, correct = 0.0, 0
    for smp in samples:
        scores, _ = _scores(params, model_config, smp.image.pixels)
        idx = smp.label.index - 1
        total += log_softmax_nll(scores, idx)
        if int(np.argmax(scores)) == idx:
            correct += 1
    n = len(samples)
    return total / n, 100.0 * correct / n


def _scores(params, model_config, pixels):
    return forward_on_executor(RawExec(), pixels, params, model_config)


def train(model_config: AggNetConfig, train_samples, val_samples,
          tcfg: TrainConfig):
    """Full training run; returns the min-validation-loss parameters.

    Aborts with the last good parameters if the loss leaves the finite
    range. Validation samples are never augmented (checked each epoch
    via the augmenter's call counter).
    """
    if not train_samples or not val_samples:
        raise ContractError("train and validation sets must be nonempty")
    overlap = {id(s) for s in train_samples} & {id(s) for s in val_samples}
    if overlap:
        raise ContractError("train and validation sets share samples")
    if tcfg.gsd is not None:
        train_samples = resample_samples(train_samples, tcfg.gsd)
        val_samples = resample_samples(val_samples, tcfg.gsd)

    init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(tcfg.seed).spawn(3)
    params = init_params(model_config, np.random.Generator(np.random.PCG64(init_ss)))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    augmenter = Augmenter(tcfg.ranges, np.random.Generator(np.random.PCG64(aug_ss)))

    state = AdamState.for_params(params)
    lr = tcfg.initial_lr
    best_train = np.inf
    best_val = np.inf
    best_epoch = 0
    best_params = {k: v.copy() for k, v in params.items()}
    train_stall = 0
    val_stall = 0
    history = []
    stop_reason = "max_epochs"

    for epoch in range(1, tcfg.max_epochs + 1):
        lr_this_epoch = lr
        order = shuffle_rng.permutation(len(train_samples))
        batch_losses = []
        aborted = False
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + tcfg.batch_size]]
            images = [augmenter(s.image.pixels) if tcfg.augment else s.image.pixels
                      for s in batch]
            labels = [s.label.index - 1 for s in batch]
            try:
                loss, grads = batch_loss_and_grads(
                    params, model_config, images, labels, tcfg.l2_lambda)
                if not np.isfinite(loss):
                    raise DivergenceError(f"training loss became {loss}")
                batch_losses.append(loss)
                params, state = adam_step(params, grads, state, lr)
            except DivergenceError:
                aborted = True
                break
            except ContractError as exc:
                # Overflow inside the forward pass surfaces as a non-finite
                # feature map; that is divergence, not caller misuse.
                if "non-finite" not in str(exc):
                    raise
                aborted = True
                break
        if aborted or not batch_losses:
            stop_reason = "diverged"
            break
        train_loss = float(np.mean(batch_losses))

        calls_before_val = augmenter.calls
        try:
            val_loss, val_oa = _validate(params, model_config, val_samples)
        except ContractError:
            stop_reason = "diverged"
            break
        if augmenter.calls != calls_before_val:
            raise ContractError("augmentation ran on the validation path")
        history.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_loss=float(val_loss), val_oa=float(val_oa),
                                  lr=lr_this_epoch))

        if not np.isfinite(val_loss):
            stop_reason = "diverged"
            break
        if _improved(best_val, val_loss):
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            val_stall = 0
        else:
            val_stall += 1
            if val_stall >= tcfg.early_stop_patience:
                stop_reason = "early_stop"
                break
        if _improved(best_train, train_loss):
            best_train = train_loss
            train_stall = 0
        else:
            train_stall += 1
            if train_stall >= tcfg.lr_patience:
                lr *= tcfg.lr_decay_factor
                train_stall = 0

    if best_epoch == 0 and history:
        # No epoch beat +inf only if val_loss was non-finite from the start.
        best_epoch = history[0].epoch
    return TrainResult(params=best_params, model_config=model_config,
                       history=tuple(history), best_epoch=best_epoch,
                       best_val_loss=float(best_val), stop_reason=stop_reason)


@dataclass(frozen=True)
class RepeatedResult:
    runs: tuple
    run_reports: tuple
    aggregate: "evaluate.MetricsReport"


def run_repeated(model_config, train_samples, val_samples, test_samples,
                 tcfg: TrainConfig, k=5, seeds=None):
    """k trainings from scratch, scored on the test set and aggregated.

    Default seeds are tcfg.seed, tcfg.seed + 1, ...; pass `seeds`
    explicitly to control them (e.g. identical seeds give sigma = 0).
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if seeds is None:
        seeds = [tcfg.seed + r for r in range(k)]
    if len(seeds) != k:
        raise ContractError(f"expected {k} seeds, got {len(seeds)}")
    runs, reports = [], []
    for s in seeds:
        result = train(model_config, train_samples, val_samples,
                       dataclasses.replace(tcfg, seed=int(s)))
        runs.append(result)
        reports.append(evaluate.score_samples(
            result.params, model_config, test_samples, gsd=tcfg.gsd))
    aggregate = evaluate.aggregate_runs(reports)
    return RepeatedResult(runs=tuple(runs), run_reports=tuple(reports),
                          aggregate=aggregate)


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_oa", "lr"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss),
                             repr(row.val_oa), repr(row.lr)])


def read_history(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochStats(
                epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                val_loss=float(row["val_loss"]), val_oa=float(row["val_oa"]),
                lr=float(row["lr"])))
    return tuple(out)


def _interval(value, name):
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(x, (int, float)) for x in value)):
        raise ConfigError(f"augment.{name} must be a [low, high] pair")
    return tuple(float(x) for x in value)


def load_train_config(path):
    """Parse the TOML config; returns (model kwargs, TrainConfig).

    Recognized tables: [model] variant/stem_depth/module_depths,
    [train] mirroring TrainConfig scalars, [augment] mirroring the
    sampling ranges. Unknown keys are rejected so typos cannot silently
    fall back to defaults.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known_tables = {"model", "train", "augment"}
    unknown = set(doc) - known_tables
    if unknown:
        raise ConfigError(f"{path}: unknown config tables {sorted(unknown)}")

    model_kwargs = {}
    m = doc.get("model", {})
    if not isinstance(m, dict):
        raise ConfigError(f"{path}: [model] must be a table")
    for key in m:
        if key == "variant":
            model_kwargs["variant"] = m[key]
        elif key == "stem_depth":
            model_kwargs["stem_depth"] = int(m[key])
        elif key == "module_depths":
            model_kwargs["module_depths"] = tuple(int(d) for d in m[key])
        elif key == "input_channels":
            model_kwargs["input_channels"] = int(m[key])
        elif key == "class_count":
            model_kwargs["class_count"] = int(m[key])
        else:
            raise ConfigError(f"{path}: unknown model key {key!r}")

    ranges_kwargs = {}
    a = doc.get("augment", {})
    if not isinstance(a, dict):
        raise ConfigError(f"{path}: [augment] must be a table")
    for key in a:
        if key in ("alpha", "beta", "gamma", "tau_deg"):
            ranges_kwargs[key] = _interval(a[key], key)
        elif key == "flip_prob":
            ranges_kwargs["flip_prob"] = float(a[key])
        else:
            raise ConfigError(f"{path}: unknown augment key {key!r}")

    train_kwargs = {}
    t = doc.get("train", {})
    if not isinstance(t, dict):
        raise ConfigError(f"{path}: [train] must be a table")
    scalars = {
        "batch_size": int, "initial_lr": float, "lr_decay_factor": float,
        "lr_patience": int, "early_stop_patience": int, "l2_lambda": float,
        "max_epochs": int, "seed": int, "augment": bool, "gsd": float,
    }
    for key in t:
        if key not in scalars:
            raise ConfigError(f"{path}: unknown train key {key!r}")
        try:
            train_kwargs[key] = scalars[key](t[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad value for train.{key}: {exc}") from exc
    try:
        tcfg = TrainConfig(ranges=AugmentRanges(**ranges_kwargs), **train_kwargs)
    except ContractError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return model_kwargs, tcfg
