"""UNet encoder-decoder with three task heads and its sharing variants.

The architecture is the classic two-convs-per-level UNet: channels double at
each of `depth` encoder levels, a two-conv bottleneck sits at the bottom, and
each decoder level upsamples, concatenates the encoder skip, and applies two
convs. Variants differ only in what is shared:

  fully_shared      one encoder, one decoder, one 1x1 head per task
  partially_shared  one encoder, a separate decoder (and head) per task
  single_task       one encoder, one decoder, one head, exactly one task

Parameters live in a flat name->array dict whose insertion order is the
serialization order of the model file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .nn_ops import conv2d, linear, maxpool2, relu, sigmoid, upsample_concat

TASKS = ("tree_mask", "pixel_height", "aux_mask")
HEAD_ACTIVATIONS = {"tree_mask": sigmoid, "pixel_height": linear, "aux_mask": sigmoid}
VARIANTS = ("fully_shared", "partially_shared", "single_task")

_MODEL_MAGIC = b"CNPM1"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    variant: str
    tasks: tuple[str, ...]
    in_bands: int
    depth: int = 4
    base_channels: int = 32

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        tasks = tuple(self.tasks)
        if not tasks:
            raise ConfigError("config needs at least one task")
        for t in tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; expected one of {TASKS}")
        if len(set(tasks)) != len(tasks):
            raise ConfigError(f"duplicate tasks in {tasks}")
        if self.variant == "single_task" and len(tasks) != 1:
            raise ConfigError(f"single_task takes exactly one task, got {tasks}")
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        object.__setattr__(self, "tasks", tasks)

    @property
    def decoder_owners(self) -> tuple[str, ...]:
        """Name prefixes of the decoder stacks: one shared "" decoder, or one
        per task for partially_shared."""
        if self.variant == "partially_shared":
            return tuple(f"{t}_" for t in self.tasks)
        return ("",)

    def head_owner(self, task: str) -> str:
        return f"{task}_" if self.variant == "partially_shared" else ""

    def level_channels(self, i: int) -> int:
        return self.base_channels * 2 ** (i - 1)


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration (= serialization) order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name: str, cin: int, cout: int, k: int = 3) -> None:
        shapes[f"{name}_w"] = (cout, cin, k, k)
        shapes[f"{name}_b"] = (cout,)

    cin = config.in_bands
    for i in range(1, config.depth + 1):
        ch = config.level_channels(i)
        conv(f"enc{i}_conv1", cin, ch)
        conv(f"enc{i}_conv2", ch, ch)
        cin = ch
    cb = config.base_channels * 2 ** config.depth
    conv("bott_conv1", cin, cb)
    conv("bott_conv2", cb, cb)
    for owner in config.decoder_owners:
        cur = cb
        for i in range(config.depth, 0, -1):
            ch = config.level_channels(i)
            conv(f"{owner}dec{i}_conv1", cur + ch, ch)
            conv(f"{owner}dec{i}_conv2", ch, ch)
            cur = ch
    for task in config.tasks:
        conv(f"{task}_head", config.base_channels, 1, k=1)
    return shapes


def parameter_count(config: "UNetConfig | UNetModel") -> int:
    if isinstance(config, UNetModel):
        config = config.config
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        shapes = parameter_shapes(self.config)
        if list(self.params) != list(shapes):
            raise ConfigError("parameter names do not match the config's declaration order")
        for name, shape in shapes.items():
            if tuple(self.params[name].shape) != shape:
                raise ConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )


def init_params(config: UNetConfig, seed: int, dtype=np.float32) -> UNetModel:
    """He-initialized kernels (std sqrt(2/fan_in)), zero biases; draws happen
    in declaration order so a seed pins every value."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return UNetModel(config, params)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward_with_grad(model: UNetModel, x: np.ndarray):
    """Run the network and build its reverse pass.

    Args:
        x: batch (B, in_bands, H, W) with H and W divisible by 2**depth.

    Returns:
        (outputs, backward): outputs maps each configured task to a
        (B, 1, H, W) array; backward(d_outputs) maps output gradients to a
        parameter-gradient dict (same keys as model.params).
    """
    cfg = model.config
    p = model.params
    if x.ndim != 4:
        raise DataError(f"batch must be 4-d (B, C, H, W), got shape {x.shape}")
    if x.shape[1] != cfg.in_bands:
        raise DataError(f"batch has {x.shape[1]} bands, model expects {cfg.in_bands}")
    if x.shape[2] % 2 ** cfg.depth or x.shape[3] % 2 ** cfg.depth:
        raise DataError(
            f"spatial dims {x.shape[2:]} must divide by 2**depth = {2 ** cfg.depth}"
        )

    def conv_relu_pair(name: str, inp: np.ndarray):
        tape = []
        cur = inp
        for j in (1, 2):
            y, back_c = conv2d(cur, p[f"{name}_conv{j}_w"], p[f"{name}_conv{j}_b"])
            a, back_r = relu(y)
            tape.append((back_c, f"{name}_conv{j}"))
            tape.append((back_r, None))
            cur = a
        return cur, tape

    def run_tape_back(tape, d, grads):
        for back, pname in reversed(tape):
            if pname is None:
                d = back(d)
            else:
                d, dw, db = back(d)
                grads[f"{pname}_w"] += dw
                grads[f"{pname}_b"] += db
        return d

    # encoder
    skips = []
    pools = []
    enc_tapes = []
    cur = x
    for i in range(1, cfg.depth + 1):
        a, tape = conv_relu_pair(f"enc{i}", cur)
        skips.append(a)
        pooled, back_pool = maxpool2(a)
        enc_tapes.append(tape)
        pools.append(back_pool)
        cur = pooled
    bott_out, bott_tape = conv_relu_pair("bott", cur)

    # decoder stack(s)
    dec_records: dict[str, list] = {}
    dec_out: dict[str, np.ndarray] = {}
    for owner in cfg.decoder_owners:
        cur_d = bott_out
        records = []
        for i in range(cfg.depth, 0, -1):
            merged, back_up = upsample_concat(cur_d, skips[i - 1])
            out, tape = conv_relu_pair(f"{owner}dec{i}", merged)
            records.append((back_up, tape, i))
            cur_d = out
        dec_records[owner] = records
        dec_out[owner] = cur_d

    # heads
    outputs: dict[str, np.ndarray] = {}
    head_backs: dict[str, tuple] = {}
    for task in cfg.tasks:
        owner = cfg.head_owner(task)
        y, back_c = conv2d(dec_out[owner], p[f"{task}_head_w"], p[f"{task}_head_b"])
        out, back_a = HEAD_ACTIVATIONS[task](y)
        outputs[task] = out
        head_backs[task] = (back_c, back_a, owner)

    def backward(d_outputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        d_dec_out = {owner: None for owner in cfg.decoder_owners}
        for task in cfg.tasks:
            if task not in d_outputs:
                continue
            back_c, back_a, owner = head_backs[task]
            d, dw, db = back_c(back_a(d_outputs[task]))
            grads[f"{task}_head_w"] += dw
            grads[f"{task}_head_b"] += db
            d_dec_out[owner] = d if d_dec_out[owner] is None else d_dec_out[owner] + d

        d_bott = None
        d_skips: list = [None] * cfg.depth
        for owner in cfg.decoder_owners:
            d = d_dec_out[owner]
            if d is None:
                continue
            for back_up, tape, i in reversed(dec_records[owner]):
                d = run_tape_back(tape, d, grads)
                d, d_skip = back_up(d)
                d_skips[i - 1] = d_skip if d_skips[i - 1] is None else d_skips[i - 1] + d_skip
            d_bott = d if d_bott is None else d_bott + d

        if d_bott is None:
            return grads
        d = run_tape_back(bott_tape, d_bott, grads)
        for i in range(cfg.depth, 0, -1):
            d = pools[i - 1](d)
            if d_skips[i - 1] is not None:
                d = d + d_skips[i - 1]
            d = run_tape_back(enc_tapes[i - 1], d, grads)
        return grads

    return outputs, backward


def forward(model: UNetModel, x: np.ndarray) -> dict[str, np.ndarray]:
    outputs, _ = forward_with_grad(model, x)
    return outputs


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

def save_model(path: str | Path, model: UNetModel) -> None:
    """Write magic, version, a length-prefixed JSON config block, then every
    parameter as float32 little-endian in declaration order."""
    cfg = model.config
    doc = {
        "variant": cfg.variant,
        "tasks": list(cfg.tasks),
        "in_bands": cfg.in_bands,
        "depth": cfg.depth,
        "base_channels": cfg.base_channels,
    }
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<H", _MODEL_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in model.params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str | Path) -> UNetModel:
    buf = Path(path).read_bytes()
    if buf[:5] != _MODEL_MAGIC:
        raise DataError(f"{path}: bad model magic {buf[:5]!r}")
    (version,) = struct.unpack_from("<H", buf, 5)
    if version != _MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 7)
    try:
        doc = json.loads(buf[11 : 11 + cfg_len].decode("utf-8"))
        config = UNetConfig(
            variant=doc["variant"],
            tasks=tuple(doc["tasks"]),
            in_bands=int(doc["in_bands"]),
            depth=int(doc["depth"]),
            base_channels=int(doc["base_channels"]),
        )
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: invalid model config block ({exc})") from exc
    offset = 11 + cfg_len
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(buf):
            raise DataError(f"{path}: parameter data truncated at {name}")
        params[name] = (
            np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
            .reshape(shape)
            .astype(np.float32)
        )
        offset = end
    if offset != len(buf):
        raise DataError(f"{path}: {len(buf) - offset} trailing bytes after parameters")
    return UNetModel(config, params)
