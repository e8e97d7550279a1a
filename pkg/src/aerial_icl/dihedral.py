"""The eight axis-aligned flip/rotation symmetries of a square grid.

Every element is written as ``R^k F^f``: an optional horizontal flip ``F``
applied first, followed by ``k`` counterclockwise quarter turns ``R``.
Counterclockwise is the only rotation convention used in this package:
``rot90`` maps pixel ``(r, c)`` of an ``H x W`` grid to ``(W - 1 - c, r)``,
exactly like :func:`numpy.rot90` with ``k=1``.

Transforms act on the trailing two axes. Leading axes (batch, channel)
pass through untouched, so the same call handles images, label maps and
feature maps. Both numpy arrays and torch tensors are accepted.
"""

from __future__ import annotations

import enum
from typing import Iterable, Sequence

import numpy as np
import torch


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    HFLIP = "hflip"
    VFLIP = "vflip"
    TRANSPOSE = "transpose"
    ANTITRANSPOSE = "antitranspose"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str | "Transform") -> "Transform":
        if isinstance(name, Transform):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        for t in cls:
            if t.value == key:
                return t
        raise ValueError(f"unknown transform {name!r}; expected one of {[t.value for t in cls]}")


ALL_TRANSFORMS: tuple[Transform, ...] = tuple(Transform)
# Group generators minus compositions; usable as a reduced allow-set.
FLIPS_AND_ROTATIONS: tuple[Transform, ...] = (
    Transform.HFLIP,
    Transform.VFLIP,
    Transform.ROT90,
    Transform.ROT180,
    Transform.ROT270,
)

# (quarter turns, flip first)
_ALGEBRA: dict[Transform, tuple[int, bool]] = {
    Transform.IDENTITY: (0, False),
    Transform.ROT90: (1, False),
    Transform.ROT180: (2, False),
    Transform.ROT270: (3, False),
    Transform.HFLIP: (0, True),
    Transform.TRANSPOSE: (1, True),
    Transform.VFLIP: (2, True),
    Transform.ANTITRANSPOSE: (3, True),
}
_FROM_ALGEBRA = {v: k for k, v in _ALGEBRA.items()}


def _element(k: int, flip: bool) -> Transform:
    return _FROM_ALGEBRA[(k % 4, flip)]


def compose(outer: Transform, inner: Transform) -> Transform:
    """Return the element equal to applying ``inner`` first, then ``outer``."""
    ka, fa = _ALGEBRA[Transform.parse(outer)]
    kb, fb = _ALGEBRA[Transform.parse(inner)]
    # F R^k = R^-k F
    return _element(ka + (-kb if fa else kb), fa != fb)


def invert(t: Transform) -> Transform:
    k, flip = _ALGEBRA[Transform.parse(t)]
    if flip:
        return t
    return _element(-k, False)


def apply_transform(t: Transform, x):
    """Apply ``t`` to the trailing two axes of ``x``.

    The result is a pure index permutation of ``x``; with an odd number of
    quarter turns the trailing axes swap sizes. Torch inputs keep their
    autograd graph.
    """
    k, flip = _ALGEBRA[Transform.parse(t)]
    if x.ndim < 2:
        raise ValueError(f"expected at least 2 spatial dimensions, got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ValueError(f"cannot transform an empty grid of shape {tuple(x.shape)}")
    if isinstance(x, torch.Tensor):
        if flip:
            x = torch.flip(x, dims=(-1,))
        return torch.rot90(x, k, dims=(-2, -1)) if k else x
    x = np.asarray(x)
    if flip:
        x = np.flip(x, axis=-1)
    if k:
        x = np.rot90(x, k, axes=(-2, -1))
    return np.ascontiguousarray(x)


def apply_per_sample(ts: Sequence[Transform], x):
    """Apply ``ts[i]`` to ``x[i]`` along the leading (batch) axis."""
    if len(ts) != x.shape[0]:
        raise ValueError(f"{len(ts)} transforms for a batch of {x.shape[0]}")
    parts = [apply_transform(t, x[i]) for i, t in enumerate(ts)]
    if isinstance(x, torch.Tensor):
        return torch.stack(parts)
    return np.stack(parts)


def sample_transform(rng: np.random.Generator, allow: Iterable[Transform] = ALL_TRANSFORMS) -> Transform:
    """Draw one element uniformly from ``allow``.

    ``allow`` is put into canonical group order first, so a set and a list
    with the same members give the same draws for the same seed.
    """
    members = {Transform.parse(t) for t in allow}
    if not members:
        raise ValueError("allow-set of transforms is empty")
    pool = [t for t in ALL_TRANSFORMS if t in members]
    return pool[int(rng.integers(len(pool)))]


def parse_allow(names: Iterable[str]) -> tuple[Transform, ...]:
    members = {Transform.parse(n) for n in names}
    return tuple(t for t in ALL_TRANSFORMS if t in members)
