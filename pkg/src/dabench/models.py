"""Residual and vanilla 2D U-Nets with named layer groups for freezing.

Residual variant (default, ``base_filters`` = b, channels double per level)::

    stem      conv3x3(1 -> b) + BN + ReLU
    enc[0]    ResBlock(b -> b)
    enc[i]    maxpool2 -> ResBlock(c[i-1] -> c[i])       (1x1 projection shortcut)
    skip[i]   conv1x1(c[i] -> c[i])                      applied to enc[i] output
    dec[i]    convT2x2(c[i+1] -> c[i]) + skip[i] (sum) -> ResBlock(c[i] -> c[i])
    head      BN(b) -> conv3x3(b -> 1)                   foreground logit

A ResBlock is ``relu(shortcut(x) + BN(conv(relu(BN(conv(x))))))``; main-path
convolutions carry no bias since a BN follows (or, for the head, precedes)
them. The head mirrors the stem, so the first three and the last three
main-path convolution units hold exactly the same number of parameters for
any ``base_filters``.

Layer groups address *convolution units*: a main-path convolution together
with the batch norm attached to it. Skip 1x1 convolutions, projection
shortcuts and transposed up-convolutions are not units and belong only to
the ``all`` group.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ModelSpec",
    "LayerGroup",
    "SegmentationModel",
    "build_model",
    "forward",
    "parameter_count",
    "segmentation_loss",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "CHECKPOINT_FORMAT_VERSION",
]

VARIANTS = ("residual_unet", "vanilla_unet")
GROUP_NAMES = ("first", "last", "all")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "residual_unet"
    depth: int = 4
    base_filters: int = 16
    in_channels: int = 1
    out_channels: int = 1
    group_size: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unsupported model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ValueError("only single-channel input and a single foreground logit are supported")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")

    def channels(self) -> list[int]:
        return [self.base_filters * 2**i for i in range(self.depth)]

    @classmethod
    def from_dict(cls, doc: dict) -> ModelSpec:
        return cls(**doc)


@dataclass(frozen=True)
class LayerGroup:
    name: str
    parameter_ids: tuple[str, ...]


class ConvUnit(nn.Module):
    """Convolution with an attached batch norm (after it, or before it)."""

    def __init__(self, c_in, c_out, kernel_size=3, norm_first=False, bias=False):
        super().__init__()
        self.norm_first = norm_first
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, padding=kernel_size // 2, bias=bias)
        self.bn = nn.BatchNorm2d(c_in if norm_first else c_out)

    def forward(self, x):
        if self.norm_first:
            return self.conv(self.bn(x))
        return self.bn(self.conv(x))


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.unit1 = ConvUnit(c_in, c_out)
        self.unit2 = ConvUnit(c_out, c_out)
        self.shortcut = None if c_in == c_out else ConvUnit(c_in, c_out, kernel_size=1)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.unit1(x))
        return F.relu(identity + self.unit2(out))

    def units(self, prefix):
        return [f"{prefix}.unit1", f"{prefix}.unit2"]


class ResidualUNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        ch = spec.channels()
        self.stem = ConvUnit(spec.in_channels, ch[0])
        self.enc = nn.ModuleList(
            [ResBlock(ch[0], ch[0])] + [ResBlock(ch[i - 1], ch[i]) for i in range(1, spec.depth)]
        )
        self.skip = nn.ModuleList([nn.Conv2d(ch[i], ch[i], 1) for i in range(spec.depth - 1)])
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(spec.depth - 1)]
        )
        self.dec = nn.ModuleList([ResBlock(ch[i], ch[i]) for i in range(spec.depth - 1)])
        self.head = ConvUnit(ch[0], spec.out_channels, norm_first=True)

    def forward(self, x):
        x = F.relu(self.stem(x))
        feats = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        for i in reversed(range(len(self.dec))):
            x = self.up[i](x) + self.skip[i](feats[i])
            x = self.dec[i](x)
        return self.head(x)

    def conv_units(self) -> list[str]:
        """Main-path convolution units in forward order."""
        names = ["stem"]
        for i, block in enumerate(self.enc):
            names += block.units(f"enc.{i}")
        for i in reversed(range(len(self.dec))):
            names += self.dec[i].units(f"dec.{i}")
        return names + ["head"]


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class VanillaUNet(nn.Module):
    """Original U-Net topology: plain double convolutions, concatenated skips."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        ch = spec.channels()
        self.enc = nn.ModuleList(
            [DoubleConv(spec.in_channels if i == 0 else ch[i - 1], ch[i]) for i in range(spec.depth)]
        )
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(spec.depth - 1)]
        )
        self.dec = nn.ModuleList([DoubleConv(2 * ch[i], ch[i]) for i in range(spec.depth - 1)])
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        for i in reversed(range(len(self.dec))):
            x = self.dec[i](torch.cat([feats[i], self.up[i](x)], dim=1))
        return self.head(x)

    def conv_units(self) -> list[str]:
        names = []
        for i in range(len(self.enc)):
            names += [f"enc.{i}.conv1", f"enc.{i}.conv2"]
        for i in reversed(range(len(self.dec))):
            names += [f"dec.{i}.conv1", f"dec.{i}.conv2"]
        return names + ["head"]


class SegmentationModel(nn.Module):
    """A U-Net plus its spec and named parameter groups."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        net_cls = ResidualUNet if spec.variant == "residual_unet" else VanillaUNet
        self.net = net_cls(spec)
        self.layer_groups = self._make_groups()

    def _unit_params(self, unit: str) -> list[str]:
        prefix = f"net.{unit}."
        return [name for name, _ in self.named_parameters() if name.startswith(prefix) or name == f"net.{unit}"]

    def _make_groups(self) -> dict[str, LayerGroup]:
        units = self.net.conv_units()
        k = self.spec.group_size
        if 2 * k > len(units):
            raise ValueError(f"group_size {k} too large for {len(units)} convolution units")
        first = [p for u in units[:k] for p in self._unit_params(u)]
        last = [p for u in units[-k:] for p in self._unit_params(u)]
        return {
            "first": LayerGroup("first", tuple(first)),
            "last": LayerGroup("last", tuple(last)),
            "all": LayerGroup("all", tuple(name for name, _ in self.named_parameters())),
        }

    def forward(self, x):
        return self.net(x)

    def group_units(self, name: str) -> list[str]:
        units = self.net.conv_units()
        k = self.spec.group_size
        return {"first": units[:k], "last": units[-k:], "all": units}[name]


def _init_weights(model: nn.Module, gen: torch.Generator) -> None:
    # Kaiming-normal (fan-in, ReLU gain) for every convolution; zero biases;
    # BN scale 1 / shift 0.
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                w = module.weight
                if isinstance(module, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * w.shape[2] * w.shape[3]
                else:
                    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
                std = math.sqrt(2.0 / fan_in)
                w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64).to(w.dtype) * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(spec: ModelSpec | None = None, seed: int = 0) -> SegmentationModel:
    spec = spec or ModelSpec()
    model = SegmentationModel(spec)
    gen = torch.Generator().manual_seed(int(seed))
    _init_weights(model, gen)
    return model


def _check_divisible(h: int, w: int, depth: int) -> None:
    factor = 2 ** (depth - 1)
    if h % factor or w % factor:
        raise ValueError(f"spatial dims ({h}, {w}) must be divisible by {factor} for depth {depth}")


def as_batch(batch, dtype=torch.float32) -> torch.Tensor:
    """Convert a stack of slices ((N,H,W) array, tensor or Slice2D list) to (N,1,H,W)."""
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "data"):
            batch = np.stack([s.data for s in batch])
        x = torch.as_tensor(np.asarray(batch))
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4:
        raise ValueError(f"expected a batch of 2D slices, got tensor of shape {tuple(x.shape)}")
    return x.to(dtype)


def forward(model: SegmentationModel, batch) -> torch.Tensor:
    """Apply ``model`` in inference mode; returns (N, 1, H, W) logits."""
    dtype = next(model.parameters()).dtype
    x = as_batch(batch, dtype)
    _check_divisible(x.shape[-2], x.shape[-1], model.spec.depth)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x)
    finally:
        model.train(was_training)


def parameter_count(model: SegmentationModel, group_name: str) -> int:
    try:
        group = model.layer_groups[group_name]
    except KeyError:
        raise KeyError(f"unknown layer group {group_name!r}; known: {sorted(model.layer_groups)}") from None
    params = dict(model.named_parameters())
    return sum(params[p].numel() for p in group.parameter_ids)


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, kind: str = "bce") -> torch.Tensor:
    """Per-pixel mean loss on foreground logits.

    ``kind`` is ``"bce"`` (binary cross-entropy) or ``"soft_dice"``.
    """
    target = target.to(logits.dtype)
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(logits, target)
    if kind == "soft_dice":
        prob = torch.sigmoid(logits)
        inter = (prob * target).sum()
        return 1.0 - (2.0 * inter + 1.0) / (prob.sum() + target.sum() + 1.0)
    raise ValueError(f"unknown loss {kind!r}; expected 'bce' or 'soft_dice'")


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(model: SegmentationModel, path, extra: dict | None = None) -> Path:
    """Write ``model`` to a zip container.

    Layout: ``manifest.json`` (format version, spec, group names and
    parameter ids, tensor names, optional ``extra`` metadata) and one
    ``tensors/<name>.npy`` per state-dict entry. Output bytes depend only
    on the model state.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": asdict(model.spec),
        "layer_groups": {k: list(g.parameter_ids) for k, g in model.layer_groups.items()},
        "tensors": list(state),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name, tensor in state.items():
            _zip_write(zf, f"tensors/{name}.npy", _npy_bytes(tensor.detach().cpu().numpy()))
    return path


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, manifest)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
        model = SegmentationModel(ModelSpec.from_dict(manifest["spec"]))
        state = {}
        for name in manifest["tensors"]:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, manifest


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
