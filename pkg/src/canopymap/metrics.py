"""IoU and MAE metrics plus the multi-model comparison report.

The report schema is fixed: columns "Model, Bands Used, Tree Mask IoU,
Height MAE, Auxiliary IoU", one row per (model, bands) combination, "-" for
tasks a model does not produce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .grid import PatchSet
from .unet import UNetModel, forward


def iou(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized prediction and the truth mask.

    pred is binarized at >= threshold; truth is taken as nonzero. Two empty
    masks agree vacuously: 1.0.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p = np.asarray(pred) >= threshold
    y = np.asarray(truth) != 0
    union = np.logical_or(p, y).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, y).sum() / union)


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute difference over all pixels."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))))


@dataclass(frozen=True)
class MetricsRow:
    """One report row; metric fields are None for tasks the model lacks."""

    model_label: str
    bands_label: str
    tree_iou: float | None = None
    height_mae: float | None = None
    aux_iou: float | None = None


def variant_label(variant: str, tasks: tuple[str, ...]) -> str:
    if variant == "fully_shared":
        return "MT Fully Shared"
    if variant == "partially_shared":
        return "MT Partially Shared"
    if variant == "single_task":
        return {
            "tree_mask": "Tree Mask Alone",
            "pixel_height": "Pixel Height Alone",
            "aux_mask": "Auxiliary Mask",
        }[tasks[0]]
    raise ConfigError(f"unknown variant {variant!r}")


def bands_label(in_bands: int) -> str:
    if in_bands == 3:
        return "RGB Only"
    if in_bands == 14:
        return "14 MS Bands"
    return f"{in_bands} Bands"


def evaluate(model: UNetModel, patches: PatchSet, batch_size: int = 4) -> MetricsRow:
    """Score a model on a patch set: per-patch metrics averaged unweighted
    over patches, for exactly the model's configured tasks."""
    if len(patches) == 0:
        raise DataError("evaluate needs at least one patch")
    cfg = model.config
    if patches.in_bands != cfg.in_bands:
        raise DataError(
            f"patch set has {patches.in_bands} bands, model expects {cfg.in_bands}"
        )
    sums = {t: 0.0 for t in cfg.tasks}
    n = len(patches)
    for start in range(0, n, batch_size):
        x = patches.inputs[start : start + batch_size].astype(np.float32)
        outputs = forward(model, x)
        for task in cfg.tasks:
            out = outputs[task][:, 0]
            for j in range(out.shape[0]):
                i = start + j
                if task == "tree_mask":
                    sums[task] += iou(out[j], patches.tree_mask[i])
                elif task == "pixel_height":
                    sums[task] += mae(out[j], patches.height[i])
                else:
                    sums[task] += iou(out[j], patches.aux_mask[i])
    return MetricsRow(
        model_label=variant_label(cfg.variant, cfg.tasks),
        bands_label=bands_label(cfg.in_bands),
        tree_iou=sums["tree_mask"] / n if "tree_mask" in cfg.tasks else None,
        height_mae=sums["pixel_height"] / n if "pixel_height" in cfg.tasks else None,
        aux_iou=sums["aux_mask"] / n if "aux_mask" in cfg.tasks else None,
    )


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

_COLUMNS = ("Model", "Bands Used", "Tree Mask IoU", "Height MAE", "Auxiliary IoU")

_MODEL_ORDER = (
    "MT Fully Shared",
    "MT Partially Shared",
    "Tree Mask Alone",
    "Pixel Height Alone",
    "Auxiliary Mask",
)
_BANDS_ORDER = ("RGB Only", "14 MS Bands")


def _sort_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    def key(row: MetricsRow):
        mi = _MODEL_ORDER.index(row.model_label) if row.model_label in _MODEL_ORDER else len(_MODEL_ORDER)
        bi = _BANDS_ORDER.index(row.bands_label) if row.bands_label in _BANDS_ORDER else len(_BANDS_ORDER)
        return (mi, bi, row.model_label, row.bands_label)

    seen = set()
    for row in rows:
        k = (row.model_label, row.bands_label)
        if k in seen:
            raise ConfigError(f"duplicate report row for {k}")
        seen.add(k)
    return sorted(rows, key=key)


def _cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def results_csv(rows: list[MetricsRow]) -> str:
    lines = [",".join(_COLUMNS)]
    for row in _sort_rows(rows):
        lines.append(",".join([
            row.model_label, row.bands_label,
            _cell(row.tree_iou), _cell(row.height_mae), _cell(row.aux_iou),
        ]))
    return "\n".join(lines) + "\n"


def results_table(rows: list[MetricsRow]) -> str:
    """Aligned markdown table with the same content as results_csv."""
    cells = [list(_COLUMNS)]
    for row in _sort_rows(rows):
        cells.append([
            row.model_label, row.bands_label,
            _cell(row.tree_iou), _cell(row.height_mae), _cell(row.aux_iou),
        ])
    widths = [max(len(r[i]) for r in cells) for i in range(len(_COLUMNS))]
    out = []
    for ri, r in enumerate(cells):
        out.append("| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |")
        if ri == 0:
            out.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(out) + "\n"
