"""Training loop: AdamW, step-halving learning rate, accumulation, early stopping."""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import numcore as nc
from .dockq import dockq_class
from .errors import DataEmpty, FormatError, NumericError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch", "lr", "train_L", "train_LC", "train_LR",
    "train_eval_L", "val_L", "val_LC", "val_LR", "optimizer_steps",
)


@dataclass
class TrainConfig:
    lr: float = 0.005
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.002
    lr_halve_every: int = 16
    early_stop_patience: int = 15
    batch_size: int = 8
    grad_accum_steps: int = 4
    max_epochs: int = 100
    seed: int = 0
    shuffle: bool = True
    freeze_bn: bool = False
    # stop as soon as the eval-mode training loss drops below this value
    target_train_loss: float = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("lr and weight_decay must be >= 0 and eps > 0")
        for name in ("lr_halve_every", "early_stop_patience", "batch_size", "grad_accum_steps", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
            setattr(self, name, int(getattr(self, name)))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def lr_schedule(epoch, config):
    """Initial rate halved once per ``lr_halve_every`` completed epochs."""
    return config.lr * 0.5 ** (int(epoch) // config.lr_halve_every)


def adamw_step(params, grads, state, config, lr=None):
    """One bias-corrected AdamW update with decoupled weight decay, in place.

    Every new value is computed and checked before any parameter changes, so
    a non-finite update leaves ``params`` and ``state`` untouched.
    """
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updates = {}
    for name, p in params.params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        new = p.data - lr * config.weight_decay * p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new = new.astype(p.data.dtype)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite AdamW update for {name}")
        updates[name] = (new, m, v)
    for name, (new, m, v) in updates.items():
        params.params[name].data = new
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return params, state


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Example:
    graph: object
    dockq: float

    @property
    def quality_class(self):
        return int(dockq_class(self.dockq))


def _batches(examples, size):
    for start in range(0, len(examples), size):
        yield examples[start:start + size]


def _batch_loss(chunk, params, config, mode, step, update_stats):
    batch = M.collate([ex.graph for ex in chunk], dtype=params.dtype)
    out = M.forward(batch, params, config, mode=mode, step=step, update_stats=update_stats)
    return M.compute_losses(out, [ex.dockq for ex in chunk], [ex.quality_class for ex in chunk], config)


def evaluate_loss(examples, params, config, batch_size=8):
    """Eval-mode ``(L, L_C, L_R)`` averaged over ``examples``."""
    if not examples:
        raise DataEmpty("no examples to evaluate")
    totals = np.zeros(3)
    with nc.no_grad():
        for chunk in _batches(list(examples), batch_size):
            losses = _batch_loss(chunk, params, config, "eval", 0, False)
            totals += len(chunk) * np.array([float(x.data) for x in losses])
    return tuple(float(x) for x in totals / len(examples))


def accumulate_gradients(groups, params, config, step=0, update_stats=True):
    """Train-mode gradients of the size-weighted mean loss over micro-batches.

    Each micro-batch loss is scaled by its share of the examples, so the
    accumulated gradient equals that of one batch holding all of them
    (BatchNorm statistics aside).  Returns the weighted ``(L, L_C, L_R)``.
    """
    total = sum(len(g) for g in groups)
    sums = np.zeros(3)
    for k, chunk in enumerate(groups):
        losses = _batch_loss(chunk, params, config, "train", step + k, update_stats)
        weight = len(chunk) / total
        nc.backward(nc.scale(losses[0], weight))
        sums += weight * np.array([float(x.data) for x in losses])
    return tuple(float(x) for x in sums)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: object
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool = False
    aborted: bool = False
    error: str = ""


def _fmt(value):
    return "" if value is None else repr(float(value)) if not isinstance(value, int) else str(value)


class _MetricsLog:
    def __init__(self, path):
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def append(self, row):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def train(train_set, val_set, model_config, train_config, out_dir=None, params=None):
    """Fit a model and keep the parameters with the lowest validation loss.

    Without a validation set the eval-mode training loss is used for
    selection and early stopping.  When ``out_dir`` is given, ``metrics.csv``
    is written after every epoch and ``best.ckpt`` whenever the selection
    loss improves.  A :class:`NumericError` during an epoch ends training;
    the result then carries ``aborted=True`` and the last good parameters.
    """
    train_set = list(train_set)
    val_set = list(val_set or [])
    if not train_set:
        raise DataEmpty("training set is empty")
    cfg = train_config
    if params is None:
        params = M.init_params(model_config, seed=cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _MetricsLog(out_dir / "metrics.csv" if out_dir is not None else None)
    state = OptimState()
    best = params.copy()
    best_loss = math.inf
    best_epoch = -1
    bad_epochs = 0
    history = []
    result = TrainResult(best, history, best_epoch, best_loss)

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = np.arange(len(train_set))
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        micro = list(_batches([train_set[i] for i in order], cfg.batch_size))
        sums = np.zeros(3)
        try:
            for start in range(0, len(micro), cfg.grad_accum_steps):
                groups = micro[start:start + cfg.grad_accum_steps]
                params.zero_grad()
                losses = accumulate_gradients(groups, params, model_config, params.counter,
                                              update_stats=not cfg.freeze_bn)
                params.counter += len(groups)
                adamw_step(params, params.grads(), state, cfg, lr=lr)
                sums += sum(len(g) for g in groups) * np.array(losses)
            train_losses = sums / len(train_set)
            train_eval = evaluate_loss(train_set, params, model_config, cfg.batch_size)[0]
            val = evaluate_loss(val_set, params, model_config, cfg.batch_size) if val_set else (None,) * 3
        except NumericError as exc:
            logger.error("epoch %d: %s; keeping parameters from epoch %d", epoch, exc, best_epoch)
            result.aborted = True
            result.error = str(exc)
            break
        row = {
            "epoch": epoch, "lr": lr,
            "train_L": train_losses[0], "train_LC": train_losses[1], "train_LR": train_losses[2],
            "train_eval_L": train_eval,
            "val_L": val[0], "val_LC": val[1], "val_LR": val[2],
            "optimizer_steps": state.step,
        }
        history.append(row)
        log.append(row)
        select = val[0] if val_set else train_eval
        if select < best_loss:
            best_loss, best_epoch, bad_epochs = select, epoch, 0
            best = params.copy()
            if out_dir is not None:
                M.save_checkpoint(out_dir / "best.ckpt", best, model_config,
                                  extra={"epoch": epoch, "selection_loss": select})
        else:
            bad_epochs += 1
        if cfg.target_train_loss is not None and train_eval < cfg.target_train_loss:
            break
        if bad_epochs >= cfg.early_stop_patience:
            result.stopped_early = True
            break

    result.params = best
    result.best_epoch = best_epoch
    result.best_val_loss = best_loss
    return result


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def load_config(path):
    """``(ModelConfig, TrainConfig, raw_dict)`` from a TOML or JSON file.

    Keys may sit at top level or under ``[model]`` / ``[train]`` tables.
    ``COMPLEXQA_SEED`` in the environment overrides the seed.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    model_keys = dict(data.get("model", {}))
    train_keys = dict(data.get("train", {}))
    unknown = set()
    for k, v in data.items():
        if k in ("model", "train") and isinstance(v, dict):
            continue
        if k in M.ModelConfig.__dataclass_fields__:
            model_keys.setdefault(k, v)
        elif k in TrainConfig.__dataclass_fields__:
            train_keys.setdefault(k, v)
        else:
            unknown.add(k)
    unknown |= (set(model_keys) - set(M.ModelConfig.__dataclass_fields__)) | (
        set(train_keys) - set(TrainConfig.__dataclass_fields__))
    if unknown:
        raise FormatError(f"{path}: unknown config keys {sorted(unknown)}")
    env_seed = os.environ.get("COMPLEXQA_SEED")
    if env_seed:
        train_keys["seed"] = int(env_seed)
    try:
        return M.ModelConfig(**model_keys), TrainConfig(**train_keys), data
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
