"""Multi-block mask sampling: one context block and M rectangular targets.

Target blocks are drawn by (scale, aspect) then placed uniformly; they may
overlap each other. The context block is a large rectangle (aspect fixed at
1.0) from which every target index is removed, so context and targets are
always disjoint. Defaults follow the multi-block recipe common to latent
masked pre-training: 4 targets at scale [0.15, 0.2] with aspect
[0.75, 1.5], context scale [0.85, 1.0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MaskConfigError(ValueError):
    """The sampler configuration cannot produce a usable plan."""


@dataclass(frozen=True)
class MaskSamplerConfig:
    num_targets: int = 4
    target_scale: tuple[float, float] = (0.15, 0.2)
    target_aspect: tuple[float, float] = (0.75, 1.5)
    context_scale: tuple[float, float] = (0.85, 1.0)

    def __post_init__(self):
        for name, (lo, hi) in (
            ("target_scale", self.target_scale),
            ("context_scale", self.context_scale),
        ):
            if not (0.0 < lo <= hi <= 1.0):
                raise MaskConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        lo, hi = self.target_aspect
        if not (0.0 < lo <= hi):
            raise MaskConfigError(f"target_aspect must be positive and ordered, got {(lo, hi)}")
        if self.num_targets < 1:
            raise MaskConfigError("num_targets must be >= 1")


@dataclass
class MaskPlan:
    """Context indices plus M rectangular target blocks over an N-patch grid."""

    rows: int
    cols: int
    context_indices: np.ndarray
    target_blocks: list[np.ndarray] = field(default_factory=list)

    @property
    def num_targets(self) -> int:
        return len(self.target_blocks)

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def masked_pairs(self) -> list[tuple[int, int]]:
        """All (block, patch) pairs in block order; overlaps repeat a patch."""
        return [(i, int(j)) for i, block in enumerate(self.target_blocks) for j in block]

    def masked_patches(self) -> np.ndarray:
        """Sorted unique union of all target-block indices."""
        return np.unique(np.concatenate(self.target_blocks))

    def validate(self) -> None:
        n = self.n
        if self.context_indices.size == 0:
            raise MaskConfigError("plan has an empty context")
        union = set()
        for block in self.target_blocks:
            if block.size == 0:
                raise MaskConfigError("plan has an empty target block")
            if block.min() < 0 or block.max() >= n:
                raise MaskConfigError("target index out of range")
            if not _is_rectangle(block, self.cols):
                raise MaskConfigError("target block is not rectangular")
            union.update(int(j) for j in block)
        if self.context_indices.min() < 0 or self.context_indices.max() >= n:
            raise MaskConfigError("context index out of range")
        if union & set(int(j) for j in self.context_indices):
            raise MaskConfigError("context overlaps a target block")


def _is_rectangle(block: np.ndarray, cols: int) -> bool:
    r, c = np.divmod(np.sort(block), cols)
    rr = np.unique(r)
    cc = np.unique(c)
    return block.size == rr.size * cc.size and np.array_equal(
        np.sort(block), (rr[:, None] * cols + cc[None, :]).ravel()
    )


def _block_dims(n: int, rows: int, cols: int, scale: float, aspect: float) -> tuple[int, int]:
    h = int(round(math.sqrt(scale * n * aspect)))
    w = int(round(math.sqrt(scale * n / aspect)))
    return max(1, min(h, rows)), max(1, min(w, cols))


def _rect_indices(top: int, left: int, h: int, w: int, cols: int) -> np.ndarray:
    rr = np.arange(top, top + h)
    cc = np.arange(left, left + w)
    return (rr[:, None] * cols + cc[None, :]).ravel()


def _sample_rect(rows, cols, scale_rng, aspect_rng, rng) -> np.ndarray:
    n = rows * cols
    s = rng.uniform(scale_rng[0], scale_rng[1])
    a = rng.uniform(aspect_rng[0], aspect_rng[1])
    h, w = _block_dims(n, rows, cols, s, a)
    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    return _rect_indices(top, left, h, w, cols)


def _always_covers_grid(rows: int, cols: int, cfg: MaskSamplerConfig) -> bool:
    """True when every drawable target block is the whole grid.

    Block height grows with aspect and width shrinks, so it suffices to
    check the two extreme corners at the scale floor.
    """
    n = rows * cols
    s = cfg.target_scale[0]
    h_min, _ = _block_dims(n, rows, cols, s, cfg.target_aspect[0])
    _, w_min = _block_dims(n, rows, cols, s, cfg.target_aspect[1])
    return h_min >= rows and w_min >= cols


_RETRY_BUDGET = 16


def sample_mask_plan(rows: int, cols: int, cfg: MaskSamplerConfig, rng: np.random.Generator) -> MaskPlan:
    """Draw M target rectangles and a context rectangle minus the targets.

    If unlucky draws leave the context empty, the whole plan is re-sampled
    up to 16 times; after that the target scale floor is halved once and the
    budget retried. A configuration that still cannot produce a non-empty
    context (e.g. targets that always cover the grid) raises
    :class:`MaskConfigError`.
    """
    if rows < 1 or cols < 1:
        raise MaskConfigError("grid must have at least one patch")
    if _always_covers_grid(rows, cols, cfg):
        raise MaskConfigError(
            "every drawable target block covers the whole grid; context would always be empty"
        )
    scale = cfg.target_scale
    for attempt in range(2 * _RETRY_BUDGET):
        if attempt == _RETRY_BUDGET:
            scale = (cfg.target_scale[0] / 2.0, cfg.target_scale[1])
        targets = [
            _sample_rect(rows, cols, scale, cfg.target_aspect, rng)
            for _ in range(cfg.num_targets)
        ]
        context_rect = _sample_rect(rows, cols, cfg.context_scale, (1.0, 1.0), rng)
        masked = np.unique(np.concatenate(targets))
        context = np.setdiff1d(context_rect, masked)
        if context.size > 0:
            plan = MaskPlan(rows=rows, cols=cols, context_indices=context, target_blocks=targets)
            plan.validate()
            return plan
    raise MaskConfigError("mask sampling failed to produce a non-empty context after retry budget")
