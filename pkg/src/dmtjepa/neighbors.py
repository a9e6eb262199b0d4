"""Semantic neighbor selection for masked patches.

For each masked patch the spatial neighborhood (a square window clipped at
grid borders, or every other patch) is scored by cosine similarity of
target-encoder features, and the k most similar neighbors are kept. The
whole computation runs on detached feature arrays: selection is a hard
decision and never carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DegenerateInputError

ALL_PATCHES = 0  # window sentinel: the neighborhood is the entire grid


@dataclass(frozen=True)
class NeighborhoodSpec:
    window: int = 3  # odd side length, or ALL_PATCHES
    include_self: bool = False
    k: int = 4

    def __post_init__(self):
        if self.window != ALL_PATCHES and (self.window < 3 or self.window % 2 == 0):
            raise ValueError(f"window must be odd and >= 3 or ALL_PATCHES, got {self.window}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class SelectionEntry:
    """Chosen neighbor ids for one query patch, scores sorted non-increasing."""

    indices: np.ndarray
    scores: np.ndarray


@dataclass
class NeighborSelection:
    entries: dict[int, SelectionEntry] = field(default_factory=dict)

    def __contains__(self, patch: int) -> bool:
        return patch in self.entries

    def __getitem__(self, patch: int) -> SelectionEntry:
        return self.entries[patch]


def neighborhood(i: int, rows: int, cols: int, spec: NeighborhoodSpec) -> np.ndarray:
    """Grid indices inside the window centered at patch ``i``, border-clipped."""
    n = rows * cols
    if not 0 <= i < n:
        raise IndexError(f"patch {i} outside grid of {n}")
    if spec.window == ALL_PATCHES:
        idx = np.arange(n)
    else:
        r, c = divmod(i, cols)
        half = spec.window // 2
        rr = np.arange(max(0, r - half), min(rows, r + half + 1))
        cc = np.arange(max(0, c - half), min(cols, c + half + 1))
        idx = (rr[:, None] * cols + cc[None, :]).ravel()
    if not spec.include_self:
        idx = idx[idx != i]
    return idx


def _normalized(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("neighbor selection: zero-norm feature row")
    return features / norms


def dense_similarity(i: int, j: int, target_feats: np.ndarray) -> float:
    """Cosine similarity of target-encoder rows i and j."""
    normed = _normalized(np.stack([target_feats[i], target_feats[j]]))
    return float(np.clip(normed[0] @ normed[1], -1.0, 1.0))


def select_topk(i: int, target_feats: np.ndarray, rows: int, cols: int,
                spec: NeighborhoodSpec) -> SelectionEntry:
    """Top-k cosine-similar neighbors of patch ``i``.

    Ties break toward the lower patch index; when the clipped neighborhood
    holds fewer than k patches the whole neighborhood is returned.
    """
    nbrs = neighborhood(i, rows, cols, spec)
    if nbrs.size == 0:
        raise DegenerateInputError(f"patch {i} has an empty neighborhood")
    normed = _normalized(target_feats)
    scores = np.clip(normed[nbrs] @ normed[i], -1.0, 1.0)
    order = np.lexsort((nbrs, -scores))[: min(spec.k, nbrs.size)]
    return SelectionEntry(indices=nbrs[order], scores=scores[order])


def select_for_patches(patches, target_feats: np.ndarray, rows: int, cols: int,
                       spec: NeighborhoodSpec) -> NeighborSelection:
    selection = NeighborSelection()
    for patch in patches:
        selection.entries[int(patch)] = select_topk(int(patch), target_feats, rows, cols, spec)
    return selection
