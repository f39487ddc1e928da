"""Token packing: bilinear resize of the visual grid, then space-to-depth.

Resizing each axis by ``s / sqrt(R)`` before an ``s x s`` space-to-depth
gives roughly ``H*W/R`` tokens for any reduction rate ``R``, not only
powers of two.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass
class TokenGrid:
    values: np.ndarray  # (H, W, c)
    provenance: str = "pre-connector"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"grid must be (H, W, c), got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, height: int, width: int, provenance: str = "pre-connector"):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[0] != height * width:
            raise ValueError(f"{tokens.shape[0]} tokens do not fill a {height}x{width} grid")
        return cls(tokens.reshape(height, width, tokens.shape[1]), provenance)

    def flatten(self) -> np.ndarray:
        h, w, c = self.values.shape
        return self.values.reshape(h * w, c)


def _axis_weights(n: int, m: int):
    """Source indices and blend weights for resizing one axis from n to m.

    Half-pixel centres, edges clamped.
    """
    src = (np.arange(m) + 0.5) * (n / m) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, src - i0


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an ``(H, W, c)`` array; blends as ``a + t*(b - a)`` so constants survive exactly."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resized grid would be {out_h}x{out_w}")
    h, w, _ = x.shape
    i0, i1, t = _axis_weights(h, out_h)
    a, b = x[i0], x[i1]
    x = a + t[:, None, None] * (b - a)
    j0, j1, u = _axis_weights(w, out_w)
    a, b = x[:, j0], x[:, j1]
    return a + u[None, :, None] * (b - a)


def space_to_depth(x: np.ndarray, s: int) -> np.ndarray:
    """``(H, W, c)`` to ``(H/s, W/s, s*s*c)``; channel order is (row, col, c) within a block."""
    h, w, c = x.shape
    if h % s or w % s:
        raise ValueError(f"{h}x{w} grid does not tile into {s}x{s} blocks")
    return x.reshape(h // s, s, w // s, s, c).transpose(0, 2, 1, 3, 4).reshape(h // s, w // s, s * s * c)


def depth_to_space(y: np.ndarray, s: int) -> np.ndarray:
    hb, wb, cc = y.shape
    if cc % (s * s):
        raise ValueError(f"{cc} channels do not split into {s}x{s} blocks")
    c = cc // (s * s)
    return y.reshape(hb, wb, s, s, c).transpose(0, 2, 1, 3, 4).reshape(hb * s, wb * s, c)


def resized_shape(height: int, width: int, reduction: float, block: int) -> tuple[int, int]:
    """Resized grid size before space-to-depth.

    Each axis takes one of the two multiples of ``block`` bracketing
    ``size * block / sqrt(reduction)``; of the (at most four) combinations the
    one whose token count lies closest to ``H*W/R`` wins, ties going to the
    per-axis nearest sizes.
    """
    if reduction < 1:
        raise ValueError(f"reduction rate must be >= 1, got {reduction}")
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    if height < 1 or width < 1:
        raise ValueError(f"grid axis of size 0 ({height}x{width})")
    scale = block / math.sqrt(reduction)
    target = height * width / reduction

    def options(n):
        x = n * scale
        lo = max(block, math.floor(x / block) * block)
        hi = max(block, math.ceil(x / block) * block)
        return sorted({lo, hi}, key=lambda m: (abs(m - x), m))

    best = min(((a, b) for a in options(height) for b in options(width)),
               key=lambda ab: (abs(ab[0] * ab[1] / block**2 - target),
                               abs(ab[0] - height * scale) + abs(ab[1] - width * scale)))
    return best


def average_projector(tokens: np.ndarray, block: int) -> np.ndarray:
    """Parameter-free projector: mean over the ``block**2`` sub-positions.

    Computed as offsets from the first sub-position, so equal inputs give
    that value back bit-exactly.
    """
    n, cc = tokens.shape
    parts = tokens.reshape(n, block * block, cc // (block * block))
    first = parts[:, :1]
    return (first + (parts - first).mean(axis=1, keepdims=True))[:, 0]


def averaging_projector(block: int, c: int) -> np.ndarray:
    """``(s*s*c, c)`` matrix equal to the mean over sub-positions; initial value for a learned projector."""
    return np.tile(np.eye(c), (block * block, 1)) / (block * block)


def pack_tokens(grid: TokenGrid, reduction: float, block: int,
                projector: np.ndarray | Callable[[np.ndarray], np.ndarray] | str | None = None) -> np.ndarray:
    """Packed token matrix ``(N', s*s*c)``, or ``(N', c)`` with a projector.

    ``projector`` is a ``(s*s*c, c')`` matrix, a callable on the token matrix,
    or ``"average"`` for :func:`average_projector`.
    """
    h, w, _ = grid.shape
    oh, ow = resized_shape(h, w, reduction, block)
    x = grid.values if (oh, ow) == (h, w) else bilinear_resize(grid.values, oh, ow)
    y = space_to_depth(x, block)
    tokens = y.reshape(-1, y.shape[-1])
    if projector is None:
        return tokens
    if isinstance(projector, str):
        if projector != "average":
            raise ValueError(f"unknown projector {projector!r}")
        return average_projector(tokens, block)
    if callable(projector):
        return np.asarray(projector(tokens))
    projector = np.asarray(projector)
    if projector.shape[0] != tokens.shape[1]:
        raise ValueError(f"projector expects {projector.shape[0]} inputs, tokens have {tokens.shape[1]}")
    return tokens @ projector


def pack_matrix(height: int, width: int, reduction: float, block: int) -> np.ndarray:
    """``(N', H*W)`` matrix ``M`` with ``M @ V`` equal to averaged packing of ``V``.

    Packing with the averaging projector is linear in the tokens, so packing
    the identity gives the map.
    """
    n = height * width
    eye = TokenGrid.from_tokens(np.eye(n), height, width)
    return pack_tokens(eye, reduction, block, "average")


def pack_selectors(height: int, width: int, reduction: float, block: int) -> np.ndarray:
    """``(s*s, N', H*W)`` stack; slice ``k`` maps tokens to sub-position ``k`` of each packed token.

    Concatenating ``S[k] @ V`` over ``k`` along channels reproduces the raw
    ``s*s*c`` packed tokens, ready for a learned projector.
    """
    n = height * width
    raw = pack_tokens(TokenGrid.from_tokens(np.eye(n), height, width), reduction, block)
    return raw.reshape(raw.shape[0], block * block, n).transpose(1, 0, 2).copy()


def packed_count(height: int, width: int, reduction: float, block: int) -> int:
    oh, ow = resized_shape(height, width, reduction, block)
    return (oh // block) * (ow // block)


# --------------------------------------------------------------------------
# grid dumps: one JSON header line, then the values as little-endian float64


def write_grid(path, grid: TokenGrid) -> None:
    header = {"shape": list(grid.shape), "dtype": "<f8", "provenance": grid.provenance}
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def read_grid(path) -> TokenGrid:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    values = np.frombuffer(raw[cut + 1 :], dtype=header["dtype"]).reshape(header["shape"])
    return TokenGrid(values.astype(np.float64), header.get("provenance", "pre-connector"))
