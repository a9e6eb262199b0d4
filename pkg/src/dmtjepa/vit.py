"""Patch embedding plus pre-norm transformer encoder and predictor stacks.

The encoder is a plain ViT without a class token: images become a grid of
patch embeddings with additive 2-D sinusoidal positions, and every stage is
a function of a flat ``{name: Tensor}`` parameter dict so the training loop
can hold two structurally identical copies (trainable and EMA).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DegenerateInputError,
    ShapeError,
    Tensor,
    concat,
    gather_rows,
    gelu,
    layernorm,
    matmul,
    softmax,
)


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 4.0
    patch_size: int = 8
    image_size: tuple[int, int] = (32, 32)
    channels: int = 1
    pos_embedding: str = "sinusoidal"  # or "learned"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.depth, self.heads, self.embed_dim, self.patch_size) < 0 or self.depth < 0:
            raise ValueError("encoder dimensions must be positive")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.pos_embedding not in ("sinusoidal", "learned"):
            raise ValueError(f"unknown positional embedding kind {self.pos_embedding!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 2
    embed_dim: int = 32
    heads: int = 4

    def __post_init__(self):
        if self.depth < 0 or self.embed_dim <= 0 or self.heads <= 0:
            raise ValueError("predictor dimensions must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"predictor embed_dim {self.embed_dim} not divisible by heads {self.heads}")


@dataclass
class PatchGrid:
    """An image as a rows x cols grid of embedded patches, row-major ids."""

    rows: int
    cols: int
    embeddings: Tensor = field(repr=False)

    @property
    def n(self) -> int:
        return self.rows * self.cols


def sincos_position_table(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos positional table, half the channels per grid axis."""
    if dim % 4 != 0:
        raise ValueError(f"sinusoidal positions need dim divisible by 4, got {dim}")
    half = dim // 2

    def axis_table(positions: np.ndarray) -> np.ndarray:
        freq = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
        args = np.outer(positions, freq)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    table = np.concatenate(
        [axis_table(rr.ravel().astype(np.float64)), axis_table(cc.ravel().astype(np.float64))],
        axis=1,
    )
    return table


# ----------------------------------------------------------------------
# Parameter initialization
# ----------------------------------------------------------------------

_INIT_STD = 0.02


def _linear(params: dict, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
            std: float = _INIT_STD) -> None:
    params[f"{name}.W"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(dim), requires_grad=True)


def _blocks(params: dict, prefix: str, depth: int, dim: int, mlp_ratio: float, rng) -> None:
    hidden = int(round(dim * mlp_ratio))
    for i in range(depth):
        b = f"{prefix}.block{i}"
        _norm(params, f"{b}.ln1", dim)
        _linear(params, f"{b}.attn.q", dim, dim, rng)
        _linear(params, f"{b}.attn.k", dim, dim, rng)
        _linear(params, f"{b}.attn.v", dim, dim, rng)
        _linear(params, f"{b}.attn.out", dim, dim, rng)
        _norm(params, f"{b}.ln2", dim)
        _linear(params, f"{b}.mlp.fc1", dim, hidden, rng)
        _linear(params, f"{b}.mlp.fc2", hidden, dim, rng)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    # Fan-in-scaled patch projection: pixel content arrives at the same
    # order of magnitude as the positional embeddings, which matters at
    # desk scale where few steps are available to rebalance it.
    _linear(params, f"{prefix}.patch_proj", patch_dim, cfg.embed_dim, rng,
            std=1.0 / math.sqrt(patch_dim))
    if cfg.pos_embedding == "learned":
        params[f"{prefix}.pos_embed"] = Tensor(
            rng.normal(0.0, _INIT_STD, size=(cfg.num_patches, cfg.embed_dim)), requires_grad=True
        )
    _blocks(params, prefix, cfg.depth, cfg.embed_dim, cfg.mlp_ratio, rng)
    return params


def init_predictor_params(
    cfg: PredictorConfig, backbone_dim: int, rng: np.random.Generator, prefix: str = "pred"
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _linear(params, f"{prefix}.in_proj", backbone_dim, cfg.embed_dim, rng)
    _blocks(params, prefix, cfg.depth, cfg.embed_dim, 4.0, rng)
    _linear(params, f"{prefix}.out_proj", cfg.embed_dim, backbone_dim, rng)
    return params


def position_table(cfg: EncoderConfig, params: dict, prefix: str = "enc") -> Tensor:
    """Positional embeddings for the full grid; a parameter when learned."""
    if cfg.pos_embedding == "learned":
        return params[f"{prefix}.pos_embed"]
    rows, cols = cfg.grid
    return Tensor(sincos_position_table(rows, cols, cfg.embed_dim))


# ----------------------------------------------------------------------
# Forward passes
# ----------------------------------------------------------------------

def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) -> (N, C*P*P) with patches in row-major grid order."""
    c, h, w = image.shape
    p = patch_size
    rows, cols = h // p, w // p
    blocks = image.reshape(c, rows, p, cols, p).transpose(1, 3, 0, 2, 4)
    return blocks.reshape(rows * cols, c * p * p)


def patchify(image, params: dict, cfg: EncoderConfig, prefix: str = "enc") -> PatchGrid:
    """Linear patch projection plus positional embedding for one image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != cfg.channels:
        raise ShapeError(f"expected image of shape ({cfg.channels}, H, W), got {arr.shape}")
    h, w = arr.shape[1:]
    if (h, w) != tuple(cfg.image_size):
        raise ShapeError(f"image size {(h, w)} does not match config {cfg.image_size}")
    patches = Tensor(extract_patches(arr, cfg.patch_size))
    proj = matmul(patches, params[f"{prefix}.patch_proj.W"]) + params[f"{prefix}.patch_proj.bias"]
    embedded = proj + position_table(cfg, params, prefix)
    rows, cols = cfg.grid
    return PatchGrid(rows=rows, cols=cols, embeddings=embedded)


def _attention(x: Tensor, params: dict, prefix: str, heads: int, collect: list | None) -> Tensor:
    n, dim = x.shape
    dh = dim // heads
    scale = 1.0 / math.sqrt(dh)
    q = matmul(x, params[f"{prefix}.q.W"]) + params[f"{prefix}.q.bias"]
    k = matmul(x, params[f"{prefix}.k.W"]) + params[f"{prefix}.k.bias"]
    v = matmul(x, params[f"{prefix}.v.W"]) + params[f"{prefix}.v.bias"]
    outs = []
    maps = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = matmul(q[:, cols], k[:, cols].T) * scale
        attn = softmax(logits, axis=1)
        if collect is not None:
            maps.append(attn.data.copy())
        outs.append(matmul(attn, v[:, cols]))
    if collect is not None:
        collect.append(np.stack(maps))
    merged = outs[0] if heads == 1 else concat(outs, axis=1)
    return matmul(merged, params[f"{prefix}.out.W"]) + params[f"{prefix}.out.bias"]


def _block(x: Tensor, params: dict, prefix: str, heads: int, gelu_mode: str, collect: list | None) -> Tensor:
    h = x + _attention(
        layernorm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
        params,
        f"{prefix}.attn",
        heads,
        collect,
    )
    normed = layernorm(h, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    hidden = gelu(matmul(normed, params[f"{prefix}.mlp.fc1.W"]) + params[f"{prefix}.mlp.fc1.bias"], gelu_mode)
    return h + (matmul(hidden, params[f"{prefix}.mlp.fc2.W"]) + params[f"{prefix}.mlp.fc2.bias"])


def run_blocks(
    x: Tensor,
    params: dict,
    prefix: str,
    depth: int,
    heads: int,
    gelu_mode: str = "exact",
    collect_attn: list | None = None,
) -> Tensor:
    for i in range(depth):
        x = _block(x, params, f"{prefix}.block{i}", heads, gelu_mode, collect_attn)
    return x


def encode(
    grid: PatchGrid,
    indices,
    params: dict,
    cfg: EncoderConfig,
    prefix: str = "enc",
    gelu_mode: str = "exact",
    collect_attn: list | None = None,
) -> Tensor:
    """Run the transformer over a patch subset (None selects the full grid).

    Positions were attached during patchify, so restriction to an index set
    happens after embedding; a depth-0 config is the identity on the
    embedded patches.
    """
    if indices is None:
        x = grid.embeddings
    else:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise DegenerateInputError("encode: empty patch index set")
        x = gather_rows(grid.embeddings, idx)
    return run_blocks(x, params, prefix, cfg.depth, cfg.heads, gelu_mode, collect_attn)


def predict(
    tokens: Tensor,
    num_mask: int,
    params: dict,
    cfg: PredictorConfig,
    prefix: str = "pred",
    gelu_mode: str = "exact",
) -> Tensor:
    """Narrow transformer over [conditioning tokens; mask tokens].

    The mask tokens must be the trailing ``num_mask`` rows; predictions are
    returned for exactly those rows, projected back to the backbone width.
    """
    if num_mask <= 0:
        raise DegenerateInputError("predict: no mask tokens supplied")
    if num_mask > tokens.shape[0]:
        raise ShapeError("predict: more mask tokens than sequence rows")
    x = matmul(tokens, params[f"{prefix}.in_proj.W"]) + params[f"{prefix}.in_proj.bias"]
    x = run_blocks(x, params, prefix, cfg.depth, cfg.heads, gelu_mode)
    out = matmul(x, params[f"{prefix}.out_proj.W"]) + params[f"{prefix}.out_proj.bias"]
    n = out.shape[0]
    return out[n - num_mask : n, :]


def build_mask_tokens(mask_token: Tensor, positions, pos_table: Tensor) -> Tensor:
    """One mask token per target position: shared token + that position's embedding."""
    idx = np.asarray(positions, dtype=np.int64)
    if idx.size == 0:
        raise DegenerateInputError("build_mask_tokens: empty position list")
    pos_rows = gather_rows(pos_table, idx)
    return pos_rows + mask_token
