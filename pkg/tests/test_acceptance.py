"""Acceptance suite: one test and one printed pass/fail line per criterion.

Each criterion is exercised at its stated tolerance; details (measured
errors, runtimes, epochs) go into the printed line so a log of this suite
documents the run.
"""

import json
import time

import numpy as np
import pytest

from canopymap.aggregate import (
    citywide_cover, format_percent, zonal_stats, zone_membership,
)
from canopymap.geo import band_stats
from canopymap.grid import NODATA_FLOAT, GridGeometry, Raster, RasterStack
from canopymap.las_io import write_las, read_las
from canopymap.lidar import PointCloud, naive_chm, pitfree_chm
from canopymap.metrics import evaluate, iou, mae
from canopymap.nn_ops import conv2d, relu, sigmoid
from canopymap.pipeline import ground_truth
from canopymap.raster_io import (
    read_ascii_grid, read_geotiff, read_patch_file,
    write_ascii_grid, write_geotiff, write_patch_file,
)
from canopymap.synth import SynthParams, generate_scene, make_patch_set
from canopymap.train import (
    TrainConfig, adam_step, init_adam, jaccard_loss, mse_loss,
    multitask_loss, LossWeights, train,
)
from canopymap.unet import (
    UNetConfig, forward, forward_with_grad, init_params, load_model,
    parameter_count, save_model,
)


def report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def patch8():
    """The 8-patch 240x240 synthetic training set used by the overfit runs."""
    return make_patch_set(n_patches=8, seed=0, patch_size=240)


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def test_gradient_suite():
    """conv2d, activations, losses, and the full multi-task depth-2 UNet vs
    central differences: h=1e-5, 64-bit, rel err <= 1e-4, >= 1000 params."""
    t0 = time.perf_counter()
    h = 1e-5
    worst = 0.0
    checked = 0
    rng = np.random.default_rng(0)

    def rel(analytic, numeric):
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)

    def sweep(loss_fn, arr, grad):
        nonlocal worst, checked
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            hi = loss_fn()
            flat[k] = orig - h
            lo = loss_fn()
            flat[k] = orig
            worst = max(worst, rel(gflat[k], (hi - lo) / (2 * h)))
            checked += 1

    # conv2d: dx, dw, db against a random linear probe
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    b = rng.normal(size=4) * 0.1
    probe = rng.normal(size=(2, 4, 6, 6))
    y, back = conv2d(x, w, b)
    dx, dw, db = back(probe)
    sweep(lambda: float((conv2d(x, w, b)[0] * probe).sum()), x, dx)
    sweep(lambda: float((conv2d(x, w, b)[0] * probe).sum()), w, dw)
    sweep(lambda: float((conv2d(x, w, b)[0] * probe).sum()), b, db)

    # activations
    a = rng.normal(size=(4, 16))
    pr = rng.normal(size=(4, 16))
    _, back_r = relu(a + 0.01 * np.sign(a))  # keep clear of the kink
    shifted = a + 0.01 * np.sign(a)
    _, back_r = relu(shifted)
    sweep(lambda: float((relu(shifted)[0] * pr).sum()), shifted, back_r(pr))
    _, back_s = sigmoid(a)
    sweep(lambda: float((sigmoid(a)[0] * pr).sum()), a, back_s(pr))

    # scalar losses
    pred = rng.uniform(0.05, 0.95, size=(4, 8))
    target = (rng.uniform(size=(4, 8)) < 0.5).astype(float)
    sweep(lambda: jaccard_loss(pred, target)[0], pred, jaccard_loss(pred, target)[1])
    hp = rng.normal(size=(4, 8))
    ht = rng.normal(size=(4, 8))
    sweep(lambda: mse_loss(hp, ht)[0], hp, mse_loss(hp, ht)[1])

    # full multitask loss through a depth-2 UNet, sampled parameters
    tasks = ("tree_mask", "pixel_height", "aux_mask")
    cfg = UNetConfig("fully_shared", tasks, in_bands=4, depth=2, base_channels=8)
    model = init_params(cfg, seed=1, dtype=np.float64)
    for name, arr in model.params.items():
        if name.endswith("_b"):
            # zero biases put relu pre-activations exactly at the kink where
            # the subgradient and a central difference legitimately differ
            arr += rng.normal(scale=0.05, size=arr.shape)
    xin = rng.normal(size=(2, 4, 16, 16))
    weights = LossWeights(1.0, 0.5, 0.25)
    targets = {
        "tree_mask": (rng.uniform(size=(2, 1, 16, 16)) < 0.3).astype(float),
        "pixel_height": rng.uniform(0, 1, size=(2, 1, 16, 16)),
        "aux_mask": (rng.uniform(size=(2, 1, 16, 16)) < 0.2).astype(float),
    }

    def model_loss():
        out = forward(model, xin)
        return multitask_loss(out, targets, weights)[0]

    outputs, backward = forward_with_grad(model, xin)
    _, _, d_outputs = multitask_loss(outputs, targets, weights)
    grads = backward(d_outputs)
    pick = np.random.default_rng(2)
    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for k in pick.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + h
            hi = model_loss()
            flat[k] = orig - h
            lo = model_loss()
            flat[k] = orig
            worst = max(worst, rel(gflat[int(k)], (hi - lo) / (2 * h)))
            checked += 1

    elapsed = time.perf_counter() - t0
    report(
        "gradient-suite",
        worst <= 1e-4 and checked >= 1000 and elapsed < 120,
        f"max rel err {worst:.2e} over {checked} params in {elapsed:.1f} s",
    )


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def test_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        pred = rng.uniform(size=(16, 16))
        truth = (rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        inter = union = 0
        for p, y in zip(pred.reshape(-1), truth.reshape(-1)):
            a_, b_ = p >= 0.5, y != 0
            inter += a_ and b_
            union += a_ or b_
        brute = inter / union if union else 1.0
        worst = max(worst, abs(iou(pred, truth) - brute))

        hp = rng.normal(size=(16, 16))
        ht = rng.normal(size=(16, 16))
        brute_mae = sum(abs(float(a) - float(b))
                        for a, b in zip(hp.reshape(-1), ht.reshape(-1))) / hp.size
        worst = max(worst, abs(mae(hp, ht) - brute_mae))
    report("metric-oracles", worst <= 1e-12,
           f"max |metric - brute force| {worst:.2e} over 200 pairs each")


# ---------------------------------------------------------------------------
# loss and optimizer examples
# ---------------------------------------------------------------------------

def test_loss_and_adam_examples():
    ident, _ = jaccard_loss(np.array([1.0, 0.0, 1.0]), np.array([1.0, 0.0, 1.0]))
    empty, _ = jaccard_loss(np.zeros(4), np.zeros(4))
    half, _ = jaccard_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), smooth=1.0)

    params = {"w": np.array([1.0])}
    state = init_adam(params, lr=0.1)
    params, _ = adam_step(params, {"w": np.array([2.0])}, state)
    w1 = float(params["w"][0])

    ok = (abs(ident) < 1e-15 and abs(empty) < 1e-15
          and abs(half - 0.4) < 1e-15 and abs(w1 - 0.9) < 1e-3)
    report("loss-and-adam-examples", ok,
           f"jaccard ({ident:g}, {empty:g}, {half:g}), adam first step w={w1:.6f}")


# ---------------------------------------------------------------------------
# pit removal
# ---------------------------------------------------------------------------

def test_pitfree_dominates_naive():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = np.inf
    pixels = 0
    for _ in range(50):
        n = int(rng.integers(200, 600))
        xy = rng.uniform(0, 20, size=(n, 2))
        cx, cy = rng.uniform(5, 15, size=2)
        z = np.maximum(
            40.0 * (1 - np.hypot(xy[:, 0] - cx, xy[:, 1] - cy) / 12.0), 0.0
        ) + rng.uniform(0, 2, size=n)
        pits = rng.uniform(size=n) < 0.05
        z[pits] *= rng.uniform(0.2, 0.6, size=int(pits.sum()))
        cloud = PointCloud(np.column_stack([xy, z]))
        geom = GridGeometry(0.0, 20.0, 1.0, 20, 20, "local")
        pf = pitfree_chm(cloud, geom)
        nv = naive_chm(cloud, geom)
        both = pf.valid_mask()[0] & nv.valid_mask()[0]
        diff = pf.values[0][both] - nv.values[0][both]
        worst = min(worst, float(diff.min()))
        pixels += int(both.sum())
    elapsed = time.perf_counter() - t0
    report("pitfree-dominates-naive", worst >= 0.0,
           f"min(pitfree - naive) {worst:.2e} over {pixels} pixels, 50 clouds, "
           f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# segmentation oracle
# ---------------------------------------------------------------------------

def test_segmentation_oracle():
    t0 = time.perf_counter()
    scene = generate_scene(SynthParams(seed=0))
    n_points = len(scene.cloud)
    tree_mask, _height, chm, tops, _crowns = ground_truth([scene.cloud], scene.naip)

    n_tops = len(tops)
    pos_err = 0.0
    h_err = 0.0
    for t in scene.trees:
        best = min(tops, key=lambda top: (top.row - t.row) ** 2 + (top.col - t.col) ** 2)
        pos_err = max(pos_err, float(np.hypot(best.row - t.row, best.col - t.col)))
        h_err = max(h_err, abs(best.height - t.apex_height_ft))
    mask_iou = iou(tree_mask.data.astype(float), scene.truth_mask.data)
    elapsed = time.perf_counter() - t0

    ok = (n_tops == 5 and pos_err <= 1.0 and h_err <= 0.5
          and mask_iou >= 0.8 and elapsed < 60)
    report(
        "segmentation-oracle", ok,
        f"{n_points} points, {n_tops} tops, pos err {pos_err:.2f} px, "
        f"height err {h_err:.3f} ft, mask IoU {mask_iou:.3f}, {elapsed:.1f} s",
    )


# ---------------------------------------------------------------------------
# overfit experiment
# ---------------------------------------------------------------------------

def overfit_run(patches, variant, tasks, bars):
    """Train until every bar holds on the training set; returns details."""
    def hit(rec):
        checks = []
        if "tree" in bars:
            checks.append(rec.test_tree_iou is not None and rec.test_tree_iou >= bars["tree"])
        if "mae" in bars:
            checks.append(rec.test_height_mae is not None and rec.test_height_mae <= bars["mae"])
        if "aux" in bars:
            checks.append(rec.test_aux_iou is not None and rec.test_aux_iou >= bars["aux"])
        return all(checks)

    config = TrainConfig(
        variant=variant, tasks=tasks, depth=2, base_channels=16,
        lr=3e-3, batch_size=2, epochs=200, seed=0, test_fraction=0.0,
    )
    t0 = time.perf_counter()
    _model, history = train(patches, config, stop_when=hit)
    elapsed = time.perf_counter() - t0
    last = history[-1]
    return hit(last), len(history), elapsed, last


def test_overfit_fully_shared_and_single_task(patch8):
    runs = [
        ("fully_shared", ("tree_mask", "pixel_height", "aux_mask"),
         {"tree": 0.90, "mae": 0.05}),
        ("single_task", ("tree_mask",), {"tree": 0.90}),
        ("single_task", ("pixel_height",), {"mae": 0.05}),
        ("single_task", ("aux_mask",), {"aux": 0.90}),
    ]
    details = []
    ok = True
    for variant, tasks, bars in runs:
        hit, epochs, elapsed, last = overfit_run(patch8, variant, tasks, bars)
        ok = ok and hit and epochs <= 200 and elapsed < 600
        label = variant if variant != "single_task" else tasks[0]
        scores = []
        if last.test_tree_iou is not None:
            scores.append(f"iou {last.test_tree_iou:.3f}")
        if last.test_height_mae is not None:
            scores.append(f"mae {last.test_height_mae:.3f}")
        if last.test_aux_iou is not None:
            scores.append(f"aux {last.test_aux_iou:.3f}")
        details.append(f"{label}: ep{epochs} {' '.join(scores)} {elapsed:.0f}s")
    report("overfit-8-patches", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# variant structure
# ---------------------------------------------------------------------------

def test_variant_structure():
    tasks = ("tree_mask", "pixel_height", "aux_mask")
    kw = dict(tasks=tasks, in_bands=14, depth=4, base_channels=32)
    n_full = parameter_count(UNetConfig(variant="fully_shared", **kw))
    n_part = parameter_count(UNetConfig(variant="partially_shared", **kw))

    cfg = UNetConfig("fully_shared", tasks, in_bands=14, depth=2, base_channels=8)
    model = init_params(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 14, 240, 240)).astype(np.float32)
    outputs = forward(model, x)
    shapes_ok = (set(outputs) == set(tasks)
                 and all(outputs[t].shape == (2, 1, 240, 240) for t in tasks))

    cfg1 = UNetConfig("single_task", ("pixel_height",), in_bands=14,
                      depth=2, base_channels=8)
    out1 = forward(init_params(cfg1, seed=0), x)
    shapes_ok = shapes_ok and set(out1) == {"pixel_height"}

    report(
        "variant-structure",
        n_part > n_full and shapes_ok,
        f"params partial {n_part:,} > full {n_full:,} "
        f"(x{n_part / n_full:.2f}); heads emit (B,1,240,240)",
    )


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_train_command_is_deterministic(tmp_path):
    from canopymap.cli import main

    patches = make_patch_set(n_patches=2, seed=3, patch_size=40)
    patch_file = tmp_path / "patches.bin"
    write_patch_file(patch_file, patches)
    args = [
        "train", "--patches", str(patch_file),
        "--depth", "2", "--base-channels", "4", "--epochs", "3",
        "--batch-size", "1", "--test-fraction", "0", "--seed", "5",
    ]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    model_same = (tmp_path / "a" / "model.bin").read_bytes() == (
        tmp_path / "b" / "model.bin"
    ).read_bytes()
    history_same = (tmp_path / "a" / "history.csv").read_bytes() == (
        tmp_path / "b" / "history.csv"
    ).read_bytes()
    report("train-determinism", model_same and history_same,
           "model.bin and history.csv bit-identical across two runs")


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_aggregation_invariants():
    scene = generate_scene(SynthParams(seed=4), with_cloud=False)

    counts = np.zeros(scene.geometry.shape, dtype=int)
    for zone in scene.zones:
        counts += zone_membership(zone, scene.geometry).astype(int)
    partition_exact = (counts == 1).all()

    height = Raster(scene.geometry, scene.truth_height.data, NODATA_FLOAT)
    mask = Raster(scene.geometry, scene.truth_mask.data, nodata=255)
    stats = zonal_stats(mask, height, scene.zones)
    total = sum(s.pixel_count for s in stats)
    sums_exact = total == scene.geometry.width * scene.geometry.height

    cover = citywide_cover(mask)
    cover_err = abs(cover - scene.manifest["planted_cover_fraction"])

    percent = format_percent(59 / 1000)

    ok = partition_exact and sums_exact and cover_err <= 1e-12 and percent == "5.9%"
    report(
        "aggregation", ok,
        f"zone counts sum {total} = {scene.geometry.width * scene.geometry.height}, "
        f"cover err {cover_err:.1e}, 59/1000 -> {percent!r}",
    )


# ---------------------------------------------------------------------------
# i/o round trips
# ---------------------------------------------------------------------------

def test_io_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    geom = GridGeometry(443000.0, 4637000.0, 1.0, 32, 24, "epsg:26916")
    ok = True
    notes = []

    values = rng.normal(size=(3, 24, 32)).astype(np.float32)
    stack = RasterStack(geom, values, NODATA_FLOAT, ("a", "b", "c"))
    write_geotiff(tmp_path / "f.tif", stack)
    back = read_geotiff(tmp_path / "f.tif")
    tif_ok = (np.array_equal(back.values, values)
              and back.geometry == geom and back.nodata == NODATA_FLOAT)
    ok = ok and tif_ok
    notes.append(f"geotiff {'exact' if tif_ok else 'MISMATCH'}")

    r = Raster(geom, rng.normal(size=(24, 32)).astype(np.float32), NODATA_FLOAT)
    write_ascii_grid(tmp_path / "g.asc", r)
    back_a = read_ascii_grid(tmp_path / "g.asc")
    asc_ok = np.array_equal(back_a.values[0], r.data)
    ok = ok and asc_ok
    notes.append(f"ascii-grid {'exact' if asc_ok else 'MISMATCH'}")

    patches = make_patch_set(n_patches=2, seed=1, patch_size=40)
    write_patch_file(tmp_path / "p.bin", patches)
    back_p = read_patch_file(tmp_path / "p.bin", band_roles=patches.band_roles)
    patch_ok = (np.array_equal(back_p.inputs, patches.inputs)
                and np.array_equal(back_p.tree_mask, patches.tree_mask)
                and np.array_equal(back_p.height, patches.height)
                and np.array_equal(back_p.aux_mask, patches.aux_mask))
    ok = ok and patch_ok
    notes.append(f"patch-container {'exact' if patch_ok else 'MISMATCH'}")

    cfg = UNetConfig("partially_shared", ("tree_mask", "aux_mask"),
                     in_bands=14, depth=2, base_channels=4)
    model = init_params(cfg, seed=2)
    save_model(tmp_path / "m.bin", model)
    back_m = load_model(tmp_path / "m.bin")
    model_ok = back_m.config == cfg and all(
        np.array_equal(back_m.params[k], model.params[k]) for k in model.params
    )
    ok = ok and model_ok
    notes.append(f"model-file {'exact' if model_ok else 'MISMATCH'}")

    report("io-round-trips", ok, ", ".join(notes))
