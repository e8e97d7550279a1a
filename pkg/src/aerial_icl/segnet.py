"""Residual encoder-decoder segmentation network.

The decoder restores full input resolution before the 1x1 classifier, so
the pre-classifier feature map can be rotated/flipped exactly like the
input. The classifier is the only layer that knows the number of classes;
``class_ids`` maps each output channel to a global class id, channel 0
being the background.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IntegrityError

CHECKPOINT_SCHEMA = "aerial-icl-ckpt/1"
METADATA_KEY = "aerial_icl"


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, out_relu: bool = True):
        super().__init__()
        self.out_relu = out_relu
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out)) + self.shortcut(x)
        return F.relu(out) if self.out_relu else out


class SegNet(nn.Module):
    """Res-UNet style network: ``logits = classifier(features(x))``."""

    def __init__(
        self,
        in_channels: int = 3,
        widths: Sequence[int] = (16, 32, 64),
        feature_dim: int = 16,
        class_ids: Sequence[int] = (0, 1),
    ):
        super().__init__()
        if len(widths) < 1:
            raise ValueError("need at least one encoder stage")
        if len(class_ids) < 2 or class_ids[0] != 0:
            raise ValueError("class_ids must start with the background (0) and hold at least one class")
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.feature_dim = int(feature_dim)
        self.class_ids = [int(c) for c in class_ids]

        w = self.widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        self.encoder = nn.ModuleList(
            [ResidualBlock(w[0], w[0])] + [ResidualBlock(w[i - 1], w[i], stride=2) for i in range(1, len(w))]
        )
        decoder = []
        prev = w[-1]
        for i in reversed(range(len(w) - 1)):
            out = w[i] if i > 0 else self.feature_dim
            decoder.append(ResidualBlock(prev + w[i], out, out_relu=i > 0))
            prev = out
        if len(w) == 1:
            decoder.append(ResidualBlock(w[0], self.feature_dim, out_relu=False))
        self.decoder = nn.ModuleList(decoder)
        self.classifier = nn.Conv2d(self.feature_dim, len(self.class_ids), 1)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_channels

    def arch(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "feature_dim": self.feature_dim,
            "class_ids": list(self.class_ids),
        }

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected input (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        skips = []
        h = self.stem(x)
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        if len(self.widths) == 1:
            return self.decoder[0](h)
        h = skips.pop()
        for block in self.decoder:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))

    def forward_all(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(x)
        return feats, self.classifier(feats)


def forward_features(net: SegNet, x: torch.Tensor) -> torch.Tensor:
    return net.features(x)


def forward_logits(net: SegNet, x: torch.Tensor) -> torch.Tensor:
    return net(x)


@torch.no_grad()
def expand_classifier(net: SegNet, new_class_ids: Sequence[int], init: str = "mib") -> SegNet:
    """Grow the classifier by one output per new class, in place.

    With ``init="mib"`` the new rows copy the background weights and the
    background plus new biases become ``b_bg - log(N + 1)``: at the first
    forward pass the old background probability is shared evenly among the
    background and the N new classes. ``init="random"`` uses the default
    convolution initialisation for the new rows.
    """
    n = len(new_class_ids)
    if n < 1:
        raise ValueError("expand_classifier needs at least one new class")
    overlap = set(new_class_ids) & set(net.class_ids)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} already in the classifier")
    old = net.classifier
    new = nn.Conv2d(old.in_channels, old.out_channels + n, 1).to(old.weight.device, old.weight.dtype)
    new.weight[: old.out_channels] = old.weight
    new.bias[: old.out_channels] = old.bias
    if init == "mib":
        shifted = old.bias[0] - math.log(n + 1)
        new.weight[old.out_channels :] = old.weight[0]
        new.bias[old.out_channels :] = shifted
        new.bias[0] = shifted
    elif init != "random":
        raise ValueError(f"unknown classifier init {init!r}")
    net.classifier = new
    net.class_ids = net.class_ids + [int(c) for c in new_class_ids]
    return net


@torch.no_grad()
def expand_input_channels(net: SegNet, new_count: int = 4, source: int = 0) -> SegNet:
    """Widen the first convolution; added channels copy the ``source`` kernels."""
    conv = net.stem[0]
    cur = conv.in_channels
    if new_count <= cur:
        raise ValueError(f"new channel count {new_count} must exceed current {cur}")
    if not 0 <= source < cur:
        raise ValueError(f"source channel {source} out of range for {cur} input channels")
    extra = conv.weight[:, source : source + 1].repeat(1, new_count - cur, 1, 1)
    wider = nn.Conv2d(new_count, conv.out_channels, conv.kernel_size, conv.stride, conv.padding, bias=False)
    wider = wider.to(conv.weight.device, conv.weight.dtype)
    wider.weight.copy_(torch.cat([conv.weight, extra], dim=1))
    net.stem[0] = wider
    net.in_channels = new_count
    return net


def clone_frozen(net: SegNet) -> SegNet:
    """Deep copy with gradients off and normalisation layers in inference mode."""
    teacher = copy.deepcopy(net)
    teacher.eval()
    teacher.requires_grad_(False)
    return teacher


# --------------------------------------------------------------------------
# checkpoints


def _digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(json.dumps([str(t.dtype), list(t.shape)]).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(net: SegNet, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write a safetensors file (little-endian raw tensors + JSON header).

    The metadata block carries the schema id, the architecture, the
    caller's ``meta`` (label space, step history, ...) and a SHA-256 of
    the tensor payload.
    """
    from safetensors.torch import save_file

    tensors = {k: v.detach().cpu().contiguous() for k, v in net.state_dict().items()}
    header = {"schema": CHECKPOINT_SCHEMA, "arch": net.arch(), "meta": meta or {}, "sha256": _digest(tensors)}
    # one key only: safetensors does not keep metadata key order, and reruns must be byte-identical
    save_file(tensors, os.fspath(path), metadata={METADATA_KEY: json.dumps(header, sort_keys=True)})


def load_checkpoint(path: str | os.PathLike) -> tuple[SegNet, dict]:
    from safetensors import SafetensorError
    from safetensors.torch import safe_open

    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(path, framework="pt") as fh:
            raw = (fh.metadata() or {}).get(METADATA_KEY, "{}")
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
        metadata = json.loads(raw)
    except (SafetensorError, ValueError, OSError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    schema = metadata.get("schema")
    if schema != CHECKPOINT_SCHEMA:
        raise IntegrityError(f"{path}: schema {schema!r}, expected {CHECKPOINT_SCHEMA!r}")
    if _digest(tensors) != metadata.get("sha256"):
        raise IntegrityError(f"{path}: tensor payload does not match its SHA-256")
    try:
        net = SegNet(**metadata["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"{path}: malformed architecture block ({exc})") from exc
    meta = metadata.get("meta", {})
    expected = net.state_dict()
    problems = [f"missing {k}" for k in expected if k not in tensors]
    problems += [f"unexpected {k}" for k in tensors if k not in expected]
    problems += [
        f"{k}: shape {tuple(tensors[k].shape)} != {tuple(v.shape)}"
        for k, v in expected.items()
        if k in tensors and tensors[k].shape != v.shape
    ]
    if problems:
        raise IntegrityError(f"{path}: " + "; ".join(problems))
    net.load_state_dict(tensors)
    return net, meta
