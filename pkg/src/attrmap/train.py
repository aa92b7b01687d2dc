"""Mini-batch multi-task training with Adam or SGD-momentum.

Each epoch draws its shuffle and flip decisions from ``seeded_rng(seed, epoch)``
so any epoch can be replayed from a checkpoint of the one before it.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import stack
from .evaluation import report_from_predictions, predict
from .model import ConfigError, TapNet, load_checkpoint, save
from .tensor import mse_loss, seeded_rng

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    flip_augment: bool = True
    seed: int = 0
    loss_weights: tuple | None = None      # None means all ones

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, learning_rate and weight_decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose from {', '.join(OPTIMIZERS)}")

    @classmethod
    def from_strings(cls, values: dict) -> "TrainConfig":
        """Build from ``key -> text`` pairs (config files, flags); unknown keys raise."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, text in values.items():
            if key not in types:
                raise ConfigError(f"unknown training key {key!r}")
            try:
                if key == "loss_weights":
                    kwargs[key] = tuple(float(v) for v in text.split(","))
                elif types[key] == "bool":
                    if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(text)
                    kwargs[key] = text.lower() in ("1", "true", "yes")
                elif types[key] == "int":
                    kwargs[key] = int(text)
                elif types[key] == "float":
                    kwargs[key] = float(text)
                else:
                    kwargs[key] = text
            except ValueError:
                raise ConfigError(f"bad value for {key}: {text!r}") from None
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    step: int = 0
    slots: dict = field(default_factory=dict)   # "m/<param>", "v/<param>"

    def to_extra(self) -> dict:
        extra = {"optim/step": [self.step]}
        extra.update({"optim/" + k: v for k, v in self.slots.items()})
        return extra

    @classmethod
    def from_extra(cls, extra: dict) -> "OptimState":
        step = int(extra["optim/step"][0]) if "optim/step" in extra else 0
        slots = {k[len("optim/"):]: v.copy() for k, v in extra.items()
                 if k.startswith("optim/") and k != "optim/step"}
        return cls(step, slots)


def optimizer_step(params: dict, grads: dict, state: OptimState, config: TrainConfig) -> OptimState:
    """Update ``params`` in place; weight decay is decoupled from the gradient."""
    state.step += 1
    lr, wd = config.learning_rate, config.weight_decay
    for name, g in grads.items():
        p = params[name]
        if config.optimizer == "sgd_momentum":
            v = state.slots.setdefault("v/" + name, np.zeros_like(p))
            v *= config.momentum
            v += g
            update = lr * v
        else:
            m = state.slots.setdefault("m/" + name, np.zeros_like(p))
            v = state.slots.setdefault("v/" + name, np.zeros_like(p))
            b1, b2 = config.beta1, config.beta2
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            update = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        p -= (update + lr * wd * p).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    batches: int
    dropped: int


def _loss_weights(config: TrainConfig, num_outputs: int):
    if config.loss_weights is None:
        return None
    if len(config.loss_weights) != num_outputs:
        raise ConfigError(f"loss_weights has {len(config.loss_weights)} entries, net has {num_outputs} outputs")
    return np.asarray(config.loss_weights, np.float32)


def batch_step(net: TapNet, images, labels, state: OptimState, config: TrainConfig) -> float:
    """Forward (train mode), weighted MSE, backward and one optimizer step."""
    cache = net.forward(images, train=True)
    loss, grad = mse_loss(cache.predictions, labels.astype(cache.predictions.dtype),
                          _loss_weights(config, net.config.num_outputs))
    optimizer_step(net.params, net.backward(cache, grad), state, config)
    return loss


def train_epoch(net: TapNet, images, labels, config: TrainConfig, state: OptimState, epoch: int) -> EpochStats:
    """One pass over a seeded shuffle of ``images`` / ``labels``."""
    n = len(images)
    if n == 0:
        raise ValueError("no training samples")
    rng = seeded_rng(config.seed, epoch)
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5
    losses, dropped = [], 0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        if len(idx) < 2:
            dropped = len(idx)
            log.info("epoch %d: dropped tail batch of %d sample(s)", epoch, len(idx))
            continue
        x = images[idx]
        if config.flip_augment:
            x = np.where(flips[idx, None, None, None], x[..., ::-1], x)
        losses.append(batch_step(net, x, labels[idx], state, config))
    return EpochStats(float(np.mean(losses)) if losses else float("nan"), len(losses), dropped)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    names: tuple
    rows: list = field(default_factory=list)    # dicts, one per completed epoch

    def header(self) -> list:
        return ["epoch", "train_loss", "val_loss", *(f"rho_{a}" for a in self.names), "seconds"]

    def to_csv(self) -> str:
        lines = [",".join(self.header())]
        for r in self.rows:
            rhos = [repr(float(v)) for v in r["rho"]]
            lines.append(",".join([str(r["epoch"]), repr(r["train_loss"]), repr(r["val_loss"]),
                                   *rhos, f"{r['seconds']:.3f}"]))
        return "\n".join(lines) + "\n"


@dataclass
class FitResult:
    log: TrainLog
    best_epoch: int
    best_score: float


def validation(net: TapNet, images, labels, config: TrainConfig):
    preds = predict(net, images)
    loss, _ = mse_loss(preds, labels.astype(preds.dtype), _loss_weights(config, net.config.num_outputs))
    return loss, report_from_predictions(preds, labels, net.config.attribute_names)


def fit(net: TapNet, train, val, config: TrainConfig, out_dir=None,
        state: OptimState | None = None, start_epoch: int = 0, best_score: float = -np.inf,
        history: TrainLog | None = None) -> FitResult:
    """Train for epochs ``start_epoch + 1 .. config.epochs``.

    With ``out_dir`` set, writes ``log.csv``, ``last.tapn`` (with optimizer
    state) after every epoch and ``best.tapn`` for the best validation mean rho.
    """
    train_x, train_y = stack(train)
    val_x, val_y = stack(val)
    if train_x.shape[2] != net.config.input_size:
        raise ConfigError(f"samples are {train_x.shape[2]} px, model expects {net.config.input_size}")
    state = state or OptimState()
    history = history or TrainLog(net.config.attribute_names)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            save(net, out / "best.tapn", extra={"epoch": [0]})
            (out / "log.csv").write_text(history.to_csv())
    best_epoch = 0
    for epoch in range(start_epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        stats = train_epoch(net, train_x, train_y, config, state, epoch)
        val_loss, report = validation(net, val_x, val_y, config)
        rhos = [np.nan if r.rho is None else r.rho for r in report.rows]
        history.rows.append({"epoch": epoch, "train_loss": stats.loss, "val_loss": val_loss,
                             "rho": rhos, "seconds": time.perf_counter() - t0})
        score = report.mean_rho()
        log.info("epoch %d train %.5f val %.5f mean rho %.4f", epoch, stats.loss, val_loss, score)
        improved = np.isfinite(score) and score > best_score
        if improved:
            best_score, best_epoch = score, epoch
        if out is not None:
            extra = {"epoch": [epoch], "best_score": [best_score], **state.to_extra()}
            save(net, out / "last.tapn", extra=extra)
            if improved:
                save(net, out / "best.tapn", extra={"epoch": [epoch]})
            (out / "log.csv").write_text(history.to_csv())
    return FitResult(history, best_epoch, best_score)


def read_log(path, names) -> TrainLog:
    history = TrainLog(tuple(names))
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        cells = line.split(",")
        history.rows.append({"epoch": int(cells[0]), "train_loss": float(cells[1]),
                             "val_loss": float(cells[2]), "rho": [float(c) for c in cells[3:-1]],
                             "seconds": float(cells[-1])})
    return history


def resume(checkpoint, train, val, config: TrainConfig, out_dir=None) -> tuple[TapNet, FitResult]:
    """Continue a run from a ``last.tapn`` checkpoint written by ``fit``."""
    net, extra = load_checkpoint(checkpoint)
    start = int(extra["epoch"][0]) if "epoch" in extra else 0
    best = float(extra["best_score"][0]) if "best_score" in extra else -np.inf
    history = None
    if out_dir is not None and (Path(out_dir) / "log.csv").exists():
        history = read_log(Path(out_dir) / "log.csv", net.config.attribute_names)
        history.rows = [r for r in history.rows if r["epoch"] <= start]
    result = fit(net, train, val, config, out_dir, OptimState.from_extra(extra), start, best, history)
    return net, result
