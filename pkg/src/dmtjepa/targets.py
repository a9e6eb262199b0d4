"""Dense target construction and the training objectives.

Each masked patch gets a target vector aggregated from its selected
neighbors, and the context block gets a single aggregated summary token.
Both use the same single-layer aggregation head: a projection-free
cross-attention (softmax(q K^T / sqrt(D)) K) by default, with average- and
max-pooling as selectable ablation variants and optional learned Q/K/V
projections. The target side always runs detached; the context side stays
on the gradient tape.

Losses: the dense-target objective and the two baselines (latent patch
regression and normalized-pixel reconstruction). The latent losses divide
by the number of target blocks, the pixel loss by the number of masked
patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masking import MaskPlan
from .neighbors import NeighborSelection
from .tensor import (
    DegenerateInputError,
    ShapeError,
    Tensor,
    matmul,
    max_rows,
    no_grad,
    reshape,
    softmax,
    tensor_mean,
)
from .vit import extract_patches

HEAD_KINDS = ("cross_attention", "average_pool", "max_pool")


class MisalignedTargetsError(ValueError):
    """Prediction rows and target entries do not describe the same patches."""


@dataclass
class AggregationHead:
    """One aggregation head; ``params`` holds learned projections when used.

    The trainable context head and the EMA target head are two instances;
    the projection-free default has no parameters, making the EMA coupling
    vacuous.
    """

    kind: str = "cross_attention"
    params: dict[str, Tensor] | None = None

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown aggregation head kind {self.kind!r}")


def init_head_params(dim: int, rng: np.random.Generator, prefix: str = "head") -> dict[str, Tensor]:
    """Learned Q/K/V projections for the cross-attention head."""
    scale = 1.0 / math.sqrt(dim)
    return {
        f"{prefix}.Wq": Tensor(rng.normal(0.0, scale, size=(dim, dim)), requires_grad=True),
        f"{prefix}.Wk": Tensor(rng.normal(0.0, scale, size=(dim, dim)), requires_grad=True),
        f"{prefix}.Wv": Tensor(rng.normal(0.0, scale, size=(dim, dim)), requires_grad=True),
    }


def cross_attend(query: Tensor, keys_values: Tensor, params: dict | None = None,
                 prefix: str = "head") -> Tensor:
    """softmax(q K^T / sqrt(D)) V over the rows of ``keys_values``.

    Without projections K = V = keys_values, so the output is a convex
    combination of the input rows.
    """
    q = reshape(query, (1, -1)) if query.data.ndim == 1 else query
    if q.shape[0] != 1:
        raise ShapeError(f"cross_attend expects a single query row, got {q.shape}")
    if keys_values.data.ndim != 2 or keys_values.shape[0] == 0:
        raise DegenerateInputError("cross_attend: empty key/value set")
    if q.shape[1] != keys_values.shape[1]:
        raise ShapeError(f"cross_attend: width mismatch {q.shape} vs {keys_values.shape}")
    dim = q.shape[1]
    if params is not None:
        q = matmul(q, params[f"{prefix}.Wq"])
        keys = matmul(keys_values, params[f"{prefix}.Wk"])
        values = matmul(keys_values, params[f"{prefix}.Wv"])
    else:
        keys = values = keys_values
    logits = matmul(q, keys.T) * (1.0 / math.sqrt(dim))
    return matmul(softmax(logits, axis=1), values)


def aggregate(query: Tensor, keys_values: Tensor, head: AggregationHead) -> Tensor:
    """Reduce ``keys_values`` to one row with the configured head."""
    if head.kind == "cross_attention":
        return cross_attend(query, keys_values, head.params)
    if keys_values.data.ndim != 2 or keys_values.shape[0] == 0:
        raise DegenerateInputError("aggregate: empty key/value set")
    if head.kind == "average_pool":
        return tensor_mean(keys_values, axis=0, keepdims=True)
    return reshape(max_rows(keys_values), (1, -1))


def build_dense_targets(target_feats: np.ndarray, selection: NeighborSelection,
                        masked_patches, head: AggregationHead) -> dict[int, np.ndarray]:
    """Aggregate each masked patch's selected neighbors into its target vector.

    The query is the mean of all target-encoder rows. Runs entirely off the
    gradient tape; the returned vectors are plain arrays.
    """
    query = target_feats.mean(axis=0, keepdims=True)
    targets: dict[int, np.ndarray] = {}
    with no_grad():
        q = Tensor(query)
        for patch in masked_patches:
            patch = int(patch)
            if patch not in selection:
                raise MisalignedTargetsError(f"no neighbor selection for masked patch {patch}")
            rows = Tensor(target_feats[selection[patch].indices])
            targets[patch] = aggregate(q, rows, head).data[0].copy()
    return targets


def build_aggregated_context(context_feats: Tensor, head: AggregationHead) -> Tensor:
    """Summarize the context block into one token; gradients flow through."""
    if context_feats.data.ndim != 2 or context_feats.shape[0] == 0:
        raise DegenerateInputError("aggregated context: empty context")
    query = tensor_mean(context_feats, axis=0, keepdims=True)
    return aggregate(query, context_feats, head)


def standardize_rows(mat: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-feature standardization over the row set (opt-in for targets)."""
    mu = mat.mean(axis=0, keepdims=True)
    var = mat.var(axis=0, keepdims=True)
    return (mat - mu) / np.sqrt(var + eps)


# ----------------------------------------------------------------------
# Objectives
# ----------------------------------------------------------------------

def _stack_plan_targets(targets: dict[int, np.ndarray], plan: MaskPlan) -> np.ndarray:
    rows = []
    for _, patch in plan.masked_pairs():
        if patch not in targets:
            raise MisalignedTargetsError(f"target for masked patch {patch} missing")
        rows.append(targets[patch])
    return np.stack(rows)


def loss_dmt(predictions: Tensor, targets: dict[int, np.ndarray], plan: MaskPlan) -> Tensor:
    """Sum of squared residuals over all (block, patch) pairs, divided by M."""
    mat = _stack_plan_targets(targets, plan)
    if predictions.shape != mat.shape:
        raise MisalignedTargetsError(
            f"predictions {predictions.shape} misaligned with plan targets {mat.shape}"
        )
    diff = predictions - Tensor(mat)
    return (diff * diff).sum() * (1.0 / plan.num_targets)


def loss_ijepa(predictions: Tensor, target_feats: np.ndarray, plan: MaskPlan) -> Tensor:
    """Same normalization as the dense loss, with raw encoder rows as targets."""
    idx = [patch for _, patch in plan.masked_pairs()]
    mat = target_feats[idx]
    if predictions.shape != mat.shape:
        raise MisalignedTargetsError(
            f"predictions {predictions.shape} misaligned with plan targets {mat.shape}"
        )
    diff = predictions - Tensor(mat)
    return (diff * diff).sum() * (1.0 / plan.num_targets)


def loss_mae(pixel_predictions: Tensor, pixel_targets: np.ndarray) -> Tensor:
    """Mean over masked patches of the squared pixel residual norm."""
    if pixel_predictions.shape != pixel_targets.shape:
        raise MisalignedTargetsError(
            f"pixel predictions {pixel_predictions.shape} vs targets {pixel_targets.shape}"
        )
    count = pixel_targets.shape[0]
    diff = pixel_predictions - Tensor(pixel_targets)
    return (diff * diff).sum() * (1.0 / count)


def normalized_pixel_targets(image: np.ndarray, patch_size: int, masked, eps: float = 1e-6) -> np.ndarray:
    """Per-patch pixel vectors normalized to mean 0 / unit variance."""
    patches = extract_patches(np.asarray(image, dtype=np.float64), patch_size)
    rows = patches[np.asarray(masked, dtype=np.int64)]
    mu = rows.mean(axis=1, keepdims=True)
    var = rows.var(axis=1, keepdims=True)
    return (rows - mu) / np.sqrt(var + eps)
