"""Losses, Adam, dataset splitting, and the training loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .grid import PatchSet
from . import metrics
from .unet import TASKS, UNetConfig, UNetModel, forward_with_grad, init_params

RGB_ROLES = ("naip_red", "naip_green", "naip_blue")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements; returns (value, d value/d pred)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    value = float(np.mean(diff ** 2))
    grad = (2.0 / diff.size) * diff
    return value, grad


def jaccard_loss(
    pred: np.ndarray, target: np.ndarray, smooth: float = 1.0
) -> tuple[float, np.ndarray]:
    """Soft Jaccard distance L = 1 - (sum(p*y) + s) / (sum(p) + sum(y) - sum(p*y) + s).

    The sums run over the whole array, so a batch is scored as one pooled
    mask. Returns (value, d value/d pred).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if smooth <= 0:
        raise ConfigError(f"smooth must be > 0, got {smooth}")
    p = pred.astype(np.float64, copy=False)
    y = target.astype(np.float64, copy=False)
    inter = float((p * y).sum())
    union = float(p.sum()) + float(y.sum()) - inter
    denom = union + smooth
    value = 1.0 - (inter + smooth) / denom
    # d inter/dp = y ; d denom/dp = 1 - y
    grad = -((y * denom - (inter + smooth) * (1.0 - y)) / denom ** 2)
    return float(value), grad.astype(pred.dtype)


@dataclass(frozen=True)
class LossWeights:
    w_tree: float = 1.0
    w_height: float = 0.5
    w_aux: float = 0.25

    def __post_init__(self) -> None:
        ws = (self.w_tree, self.w_height, self.w_aux)
        if any(w < 0 for w in ws):
            raise ConfigError(f"loss weights must be non-negative, got {ws}")
        if all(w == 0 for w in ws):
            raise ConfigError("at least one loss weight must be positive")

    def for_task(self, task: str) -> float:
        return {"tree_mask": self.w_tree, "pixel_height": self.w_height,
                "aux_mask": self.w_aux}[task]


_TASK_LOSS = {"tree_mask": jaccard_loss, "pixel_height": mse_loss, "aux_mask": jaccard_loss}


def multitask_loss(
    outputs: dict[str, np.ndarray],
    targets: dict[str, np.ndarray],
    weights: LossWeights,
    smooth: float = 1.0,
) -> tuple[float, dict[str, float], dict[str, np.ndarray]]:
    """Weighted sum of per-task losses over the tasks present in outputs.

    Returns (total, per-task unweighted values, per-task gradients w.r.t. the
    outputs, already weighted).
    """
    total = 0.0
    values: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    for task, out in outputs.items():
        if task not in targets:
            raise ValueError(f"no target supplied for task {task!r}")
        if task == "pixel_height":
            v, g = mse_loss(out, targets[task])
        else:
            v, g = jaccard_loss(out, targets[task], smooth)
        w = weights.for_task(task)
        total += w * v
        values[task] = v
        grads[task] = w * g
    return total, values, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def init_adam(params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(lr, beta1, beta2, eps, 0, m, v)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Functional: returns fresh params/state."""
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g ** 2
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


# ---------------------------------------------------------------------------
# Dataset split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int


def split_dataset(n: int, test_fraction: float = 0.25, seed: int = 0) -> DatasetSplit:
    """Uniform random split; |test| = round(test_fraction * n), half up."""
    if n < 4:
        raise ConfigError(f"need at least 4 samples to split, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(n * test_fraction + 0.5)
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(np.sort(perm[n_test:]), np.sort(perm[:n_test]), seed)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    variant: str = "fully_shared"
    tasks: tuple[str, ...] = TASKS
    bands: str = "all"
    depth: int = 4
    base_channels: int = 32
    weights: LossWeights = LossWeights()
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    test_fraction: float = 0.25
    smooth: float = 1.0

    def __post_init__(self) -> None:
        if self.bands not in ("all", "rgb"):
            raise ConfigError(f"bands must be 'all' or 'rgb', got {self.bands!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(
                f"test_fraction must be in [0, 1); 0 disables the holdout. got {self.test_fraction}"
            )


@dataclass(frozen=True)
class HistoryRecord:
    epoch: int
    train_loss: float
    tree_loss: float | None
    height_loss: float | None
    aux_loss: float | None
    test_tree_iou: float | None
    test_height_mae: float | None
    test_aux_iou: float | None


_HISTORY_COLUMNS = ("epoch", "train_loss", "tree_loss", "height_loss", "aux_loss",
                    "test_tree_iou", "test_height_mae", "test_aux_iou")


def history_csv(history: list[HistoryRecord]) -> str:
    lines = [",".join(_HISTORY_COLUMNS)]
    for rec in history:
        cells = [str(rec.epoch)]
        for name in _HISTORY_COLUMNS[1:]:
            value = getattr(rec, name)
            cells.append("" if value is None else repr(float(value)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def select_bands(patches: PatchSet, bands: str) -> PatchSet:
    """Subset the input bands: "all" passes through, "rgb" keeps the three
    NAIP visible bands (looked up by role)."""
    if bands == "all":
        return patches
    if bands != "rgb":
        raise ConfigError(f"bands must be 'all' or 'rgb', got {bands!r}")
    try:
        idx = [patches.band_roles.index(r) for r in RGB_ROLES]
    except ValueError:
        raise DataError(
            f"patch set lacks the NAIP visible bands {RGB_ROLES}; roles are {patches.band_roles}"
        ) from None
    return PatchSet(
        np.ascontiguousarray(patches.inputs[:, idx]),
        patches.tree_mask,
        patches.height,
        patches.aux_mask,
        RGB_ROLES,
    )


def _batch_targets(patches: PatchSet, idx: np.ndarray, tasks: tuple[str, ...], dtype):
    source = {"tree_mask": patches.tree_mask, "pixel_height": patches.height,
              "aux_mask": patches.aux_mask}
    return {t: source[t][idx][:, None].astype(dtype) for t in tasks}


def _checkpoint_score(row: metrics.MetricsRow) -> float:
    """Model-selection score: test tree-mask IoU when the task is trained,
    otherwise the best available stand-in."""
    if row.tree_iou is not None:
        return row.tree_iou
    if row.aux_iou is not None:
        return row.aux_iou
    return -row.height_mae


def train(
    patches: PatchSet,
    config: TrainConfig,
    stop_when: Callable[[HistoryRecord], bool] | None = None,
) -> tuple[UNetModel, list[HistoryRecord]]:
    """Train a UNet on the patch set.

    The holdout split, shuffling, and initialization all derive from
    config.seed, so two runs with the same inputs are bit-identical. The
    returned model is the checkpoint with the best test score (train() keeps
    a copy each time the score improves), not necessarily the last epoch.
    With test_fraction=0 there is no holdout and the per-epoch metrics are
    computed on the training set itself (overfitting experiments).

    stop_when is an instrumentation hook: called on each epoch's record, a
    truthy return ends training early. Default None trains all epochs.
    """
    if len(patches) < 1:
        raise DataError("training needs at least one patch")
    data = select_bands(patches, config.bands)
    net_config = UNetConfig(
        variant=config.variant,
        tasks=config.tasks,
        in_bands=data.in_bands,
        depth=config.depth,
        base_channels=config.base_channels,
    )
    model = init_params(net_config, config.seed, dtype=np.float32)
    if config.epochs == 0:
        return model, []

    n = len(data)
    if config.test_fraction > 0:
        split = split_dataset(n, config.test_fraction, config.seed)
        train_idx, eval_idx = split.train_indices, split.test_indices
    else:
        train_idx = eval_idx = np.arange(n)
    eval_set = data.subset(eval_idx)

    state = init_adam(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history: list[HistoryRecord] = []
    best_params = None
    best_score = -np.inf

    for epoch in range(1, config.epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        task_totals = {t: 0.0 for t in config.tasks}
        params = model.params
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = data.inputs[idx].astype(np.float32)
            targets = _batch_targets(data, idx, config.tasks, np.float32)
            outputs, backward = forward_with_grad(UNetModel(net_config, params), x)
            loss, values, d_outputs = multitask_loss(
                outputs, targets, config.weights, config.smooth
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = backward(d_outputs)
            try:
                params, state = adam_step(params, grads, state)
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from exc
            total += loss * len(idx)
            for t, v in values.items():
                task_totals[t] += v * len(idx)
        model = UNetModel(net_config, params)

        row = metrics.evaluate(model, eval_set, batch_size=config.batch_size)

        def task_mean(task: str) -> float | None:
            return task_totals[task] / len(perm) if task in config.tasks else None

        record = HistoryRecord(
            epoch=epoch,
            train_loss=total / len(perm),
            tree_loss=task_mean("tree_mask"),
            height_loss=task_mean("pixel_height"),
            aux_loss=task_mean("aux_mask"),
            test_tree_iou=row.tree_iou,
            test_height_mae=row.height_mae,
            test_aux_iou=row.aux_iou,
        )
        history.append(record)
        score = _checkpoint_score(row)
        if score > best_score:
            best_score = score
            best_params = copy.deepcopy(params)
        if stop_when is not None and stop_when(record):
            break

    return UNetModel(net_config, best_params), history
