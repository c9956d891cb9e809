"""3D U-Net with additive skip connections.

Contraction path: ``depth`` blocks of (conv3 -> BN -> ReLU) x 2 with 2^3
max-pooling in between, channels doubling from ``base_channels``. Expansion
path: ``depth`` blocks mirrored, linked by stride-2 transposed convolutions
that halve the channels. The first expansion block sits at the bottom
resolution and consumes the deepest contraction output directly; each
following one receives ``upsampled + skip`` from the contraction block at
the same resolution. A 1x1x1 convolution and a softmax produce per-voxel
class probabilities.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, FormatError, IoError, ShapeError, ValidationError
from .volumes import SegmentationMask, Volume

CHECKPOINT_MAGIC = b"HSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    num_classes: int
    base_channels: int = 32
    depth: int = 4
    patch_size: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ConfigError(f"invalid model config {self}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.patch_size) != 3 or any(p % self.divisor for p in self.patch_size):
            raise ConfigError(f"patch size {self.patch_size} must be divisible by {self.divisor}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def channels(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.depth)]


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        # torch momentum 0.1 == running = 0.9 * running + 0.1 * batch
        nn.BatchNorm3d(cout, momentum=0.1),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.BatchNorm3d(cout, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = config.channels()
        self.down = nn.ModuleList(
            [_conv_block(config.in_channels, ch[0])] + [_conv_block(ch[k - 1], ch[k]) for k in range(1, len(ch))]
        )
        self.up_blocks = nn.ModuleList([_conv_block(ch[-1], ch[-1])])
        self.upsample = nn.ModuleList()
        for k in range(len(ch) - 1, 0, -1):
            self.upsample.append(nn.ConvTranspose3d(ch[k], ch[k - 1], 2, stride=2))
            self.up_blocks.append(_conv_block(ch[k - 1], ch[k - 1]))
        self.head = nn.Conv3d(ch[0], config.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for k, block in enumerate(self.down):
            x = block(x)
            if k < len(self.down) - 1:
                skips.append(x)
                x = nn.functional.max_pool3d(x, 2)
        x = self.up_blocks[0](x)
        for up, block in zip(self.upsample, self.up_blocks[1:]):
            x = block(up(x) + skips.pop())
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


@dataclass
class ModelHandle:
    """A network plus what it needs to be applied to new data: which
    modalities feed its input channels and which label id each output
    channel stands for."""

    config: ModelConfig
    module: UNet3D
    modalities: tuple[str, ...] = ()
    label_ids: tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.label_ids:
            self.label_ids = tuple(range(self.config.num_classes))
        if len(self.label_ids) != self.config.num_classes:
            raise ConfigError("label_ids must name every output channel")

    @property
    def training(self) -> bool:
        return self.module.training

    def train(self):
        self.module.train()
        return self

    def eval(self):
        self.module.eval()
        return self

    def parameters(self):
        return self.module.parameters()

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def clone(self) -> "ModelHandle":
        return ModelHandle(self.config, copy.deepcopy(self.module), self.modalities, self.label_ids, dict(self.extra))


def _he_init(module: nn.Module, seed: int) -> None:
    """He-normal weights drawn from a Philox stream, zero biases.

    Transposed convolutions with kernel == stride see exactly ``in_channels``
    inputs per output voxel, which is used as their fan-in.
    """
    rng = np.random.Generator(np.random.Philox(int(seed)))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.ConvTranspose3d):
                fan_in = m.in_channels
            elif isinstance(m, nn.Conv3d):
                fan_in = m.in_channels * int(np.prod(m.kernel_size))
            elif isinstance(m, nn.BatchNorm3d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                continue
            else:
                continue
            w = rng.standard_normal(tuple(m.weight.shape)) * np.sqrt(2.0 / fan_in)
            m.weight.copy_(torch.from_numpy(w.astype(np.float32)))
            m.bias.zero_()


def build_model(config: ModelConfig, seed: int, modalities: Sequence[str] = (), label_ids: Sequence[int] = ()) -> ModelHandle:
    module = UNet3D(config)
    _he_init(module, seed)
    return ModelHandle(config, module, tuple(modalities), tuple(label_ids))


def _check_input(model: ModelHandle, x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if x.ndim != 5 or x.shape[1] != model.config.in_channels:
        raise ShapeError(
            f"expected (batch, {model.config.in_channels}, x, y, z) input, got {tuple(x.shape)}"
        )
    d = model.config.divisor
    if any(s % d for s in x.shape[2:]):
        raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {d}")
    return x


def forward(model: ModelHandle, batch) -> torch.Tensor:
    """Per-voxel class probabilities ``(batch, C, x, y, z)``; differentiable."""
    return model.module(_check_input(model, batch))


def forward_logits(model: ModelHandle, batch) -> torch.Tensor:
    return model.module.logits(_check_input(model, batch))


# --------------------------------------------------------------------------
# sliding-window inference
# --------------------------------------------------------------------------


def _starts(n: int, window: int, stride: int) -> list[int]:
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def _predictor(model) -> tuple[Callable[[np.ndarray], np.ndarray], tuple[int, ...] | None]:
    if isinstance(model, ModelHandle):

        def run(x):
            with torch.no_grad():
                return forward(model, x).numpy()

        return run, model.label_ids
    if callable(model):
        return model, None
    raise ValidationError(f"cannot predict with {type(model).__name__}")


def predict_volume(
    model,
    vol: Volume | np.ndarray,
    stride=None,
    window=None,
    batch_size: int = 4,
) -> tuple[np.ndarray, SegmentationMask]:
    """Sliding-window prediction over a whole volume.

    ``model`` is a :class:`ModelHandle` or any callable mapping a
    ``(B, C_in, x, y, z)`` float32 array to probabilities. Windows default
    to the model's patch size and the stride to half of it; overlapping
    probabilities are averaged. The returned mask holds the model's label
    ids (argmax, lowest id on ties).
    """
    run, label_ids = _predictor(model)
    if isinstance(vol, Volume):
        data = vol.channels(model.modalities) if isinstance(model, ModelHandle) and model.modalities else vol.data
    else:
        data = np.asarray(vol, dtype=np.float32)
    if window is None:
        if not isinstance(model, ModelHandle):
            raise ValidationError("window is required for callable models")
        window = model.config.patch_size
    window = tuple(int(w) for w in np.broadcast_to(window, 3))
    stride = tuple(w // 2 for w in window) if stride is None else tuple(int(s) for s in np.broadcast_to(stride, 3))
    if any(s < 1 or s > w for s, w in zip(stride, window)):
        raise ValidationError(f"stride {stride} must be in [1, window {window}]")

    was_training = isinstance(model, ModelHandle) and model.training
    if isinstance(model, ModelHandle):
        model.eval()
    try:
        spatial = data.shape[1:]
        padded_shape = tuple(max(n, w) for n, w in zip(spatial, window))
        if padded_shape != spatial:
            padded = np.zeros((data.shape[0], *padded_shape), dtype=np.float32)
            padded[:, : spatial[0], : spatial[1], : spatial[2]] = data
        else:
            padded = np.ascontiguousarray(data, dtype=np.float32)
        corners = [
            (a, b, c)
            for a in _starts(padded_shape[0], window[0], stride[0])
            for b in _starts(padded_shape[1], window[1], stride[1])
            for c in _starts(padded_shape[2], window[2], stride[2])
        ]
        acc = None
        count = np.zeros(padded_shape, dtype=np.float32)
        for i in range(0, len(corners), batch_size):
            chunk = corners[i : i + batch_size]
            x = np.stack(
                [padded[:, a : a + window[0], b : b + window[1], c : c + window[2]] for a, b, c in chunk]
            )
            probs = np.asarray(run(x), dtype=np.float32)
            if acc is None:
                acc = np.zeros((probs.shape[1], *padded_shape), dtype=np.float32)
            for (a, b, c), p in zip(chunk, probs):
                acc[:, a : a + window[0], b : b + window[1], c : c + window[2]] += p
                count[a : a + window[0], b : b + window[1], c : c + window[2]] += 1
    finally:
        if was_training:
            model.train()
    probs = acc[:, : spatial[0], : spatial[1], : spatial[2]] / count[: spatial[0], : spatial[1], : spatial[2]]
    arg = np.argmax(probs, axis=0)
    if label_ids is not None:
        arg = np.asarray(label_ids, dtype=np.int64)[arg]
    return probs, SegmentationMask(arg.astype(np.uint8))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# Layout:  b"HSEGCKPT" | u32 LE version | u32 LE header length N |
#          N bytes UTF-8 JSON header | payload
# The header holds "version", "config", "modalities", "label_ids", "extra"
# and "tensors": [{"name", "shape", "offset", "nbytes"}]; offsets are
# relative to the payload start and every tensor is little-endian float32
# in C order. BatchNorm running statistics are included; the
# num_batches_tracked counters are not.


def save_checkpoint(path, model: ModelHandle, extra: dict | None = None) -> None:
    state = model.module.state_dict()
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        if name.endswith("num_batches_tracked"):
            continue
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "modalities": list(model.modalities),
        "label_ids": list(model.label_ids),
        "extra": {**model.extra, **(extra or {})},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelHandle:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != version:
        raise FormatError(f"{path}: header version mismatch")
    cfg = header["config"]
    cfg["patch_size"] = tuple(cfg["patch_size"])
    config = ModelConfig(**cfg)
    module = UNet3D(config)
    payload = memoryview(raw)[16 + hlen :]
    state = module.state_dict()
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(payload[t["offset"] : end], dtype="<f4").reshape(t["shape"])
        if t["name"] not in state or tuple(state[t["name"]].shape) != tuple(arr.shape):
            raise FormatError(f"{path}: tensor {t['name']} does not fit the configured network")
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    module.load_state_dict(state)
    module.eval()
    return ModelHandle(config, module, tuple(header["modalities"]), tuple(header["label_ids"]), header.get("extra", {}))
