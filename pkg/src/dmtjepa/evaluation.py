"""Frozen-feature probes and visualization exports.

Probes consume mean-pooled patch features from a frozen encoder (the EMA
target encoder by default) and never propagate gradients into it. Exports
are pure functions of (parameters, image, flags): attention maps and
cosine-similarity maps land as PGM images at pixel resolution plus raw
matrices in the binary corpus container.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_corpus
from .optim import AdamW
from .tensor import Tensor, backward, log, no_grad, softmax
from .vit import EncoderConfig, encode, patchify


@dataclass
class ProbeReport:
    kind: str
    accuracy: float
    per_class: dict[int, float] = field(default_factory=dict)
    feature_source: str = "target_encoder"
    train_count: int = 0
    test_count: int = 0

    def lines(self) -> list[str]:
        out = [
            f"kind={self.kind}",
            f"accuracy={self.accuracy:.6f}",
            f"feature_source={self.feature_source}",
            f"train_count={self.train_count}",
            f"test_count={self.test_count}",
        ]
        out += [f"acc_class_{c}={v:.6f}" for c, v in sorted(self.per_class.items())]
        return out


def write_probe_report(report: ProbeReport, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def encode_features(params: dict, cfg: EncoderConfig, images: np.ndarray,
                    gelu_mode: str = "exact") -> np.ndarray:
    """Mean-pooled full-grid patch features, one row per image, no gradients."""
    feats = np.zeros((images.shape[0], cfg.embed_dim), dtype=np.float64)
    with no_grad():
        for i in range(images.shape[0]):
            grid = patchify(images[i], params, cfg)
            feats[i] = encode(grid, None, params, cfg, gelu_mode=gelu_mode).data.mean(axis=0)
    return feats


def _safe_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def _per_class_accuracy(pred: np.ndarray, truth: np.ndarray) -> dict[int, float]:
    return {
        int(c): float(np.mean(pred[truth == c] == c))
        for c in np.unique(truth)
    }


def knn_probe(train_feats, train_labels, test_feats, test_labels, k_nn: int = 10) -> ProbeReport:
    """Majority vote over the k cosine-nearest training features.

    Neighbor ties break toward the lower training index, vote ties toward
    the smaller class id.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if len(train_feats) == 0 or len(test_feats) == 0:
        raise ValueError("knn probe needs non-empty train and test splits")
    k = min(k_nn, len(train_feats))
    tr = _safe_normalize(np.asarray(train_feats, dtype=np.float64))
    te = _safe_normalize(np.asarray(test_feats, dtype=np.float64))
    sims = te @ tr.T
    num_classes = int(train_labels.max()) + 1
    pred = np.zeros(len(te), dtype=np.int64)
    order_idx = np.arange(len(tr))
    for i in range(len(te)):
        order = np.lexsort((order_idx, -sims[i]))[:k]
        votes = np.bincount(train_labels[order], minlength=num_classes)
        pred[i] = int(np.argmax(votes))
    acc = float(np.mean(pred == test_labels))
    return ProbeReport(
        kind="knn",
        accuracy=acc,
        per_class=_per_class_accuracy(pred, test_labels),
        train_count=len(tr),
        test_count=len(te),
    )


def linear_probe(train_feats, train_labels, test_feats, test_labels,
                 epochs: int = 100, lr: float = 0.05) -> ProbeReport:
    """Single linear layer with softmax cross-entropy on frozen features."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if len(train_feats) == 0 or len(test_feats) == 0:
        raise ValueError("linear probe needs non-empty train and test splits")
    x = np.asarray(train_feats, dtype=np.float64)
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    w = Tensor(np.zeros((x.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = AdamW({"probe.W": w, "probe.bias": b})
    xt = Tensor(x)
    picks = (np.arange(len(x)), train_labels)
    for _ in range(epochs):
        opt.zero_grad()
        logits = (xt @ w) + b
        logp = log(softmax(logits, axis=1))
        loss = logp[picks].mean() * -1.0
        backward(loss)
        opt.step(lr=lr, wd=0.0)
    test_logits = np.asarray(test_feats, dtype=np.float64) @ w.data + b.data
    pred = np.argmax(test_logits, axis=1)
    acc = float(np.mean(pred == test_labels))
    return ProbeReport(
        kind="linear",
        accuracy=acc,
        per_class=_per_class_accuracy(pred, test_labels),
        train_count=len(x),
        test_count=len(test_labels),
    )


# ----------------------------------------------------------------------
# Visualization exports
# ----------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D uint8 array."""
    arr = np.asarray(image, dtype=np.uint8)
    h, w = arr.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def _to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def _upscale(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(grid, np.ones((factor, factor), dtype=grid.dtype))


def export_attention_maps(params: dict, cfg: EncoderConfig, image: np.ndarray, out_dir,
                          layer: int = -1, queries: tuple[int, ...] = (),
                          gelu_mode: str = "exact") -> dict[str, Path]:
    """Head-averaged attention of one layer, as raw matrix plus PGM renderings.

    Writes the full query-by-key matrix (every query row) to
    ``attention_raw.dmtj`` and a query-averaged grid map to
    ``attention_mean.pgm``; individual query maps are opt-in via ``queries``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps: list[np.ndarray] = []
    with no_grad():
        grid = patchify(image, params, cfg)
        encode(grid, None, params, cfg, gelu_mode=gelu_mode, collect_attn=maps)
    if not -len(maps) <= layer < len(maps):
        raise ValueError(f"layer {layer} out of range for depth {len(maps)}")
    head_mean = maps[layer].mean(axis=0)  # (N, N)
    rows, cols = cfg.grid
    paths = {"raw": out_dir / "attention_raw.dmtj"}
    write_corpus(paths["raw"], head_mean[None, None])
    mean_map = head_mean.mean(axis=0).reshape(rows, cols)
    paths["mean"] = out_dir / "attention_mean.pgm"
    write_pgm(paths["mean"], _upscale(_to_gray(mean_map), cfg.patch_size))
    for q in queries:
        if not 0 <= q < head_mean.shape[0]:
            raise ValueError(f"query patch {q} out of range")
        qmap = head_mean[q].reshape(rows, cols)
        paths[f"query_{q}"] = out_dir / f"attention_q{q}.pgm"
        write_pgm(paths[f"query_{q}"], _upscale(_to_gray(qmap), cfg.patch_size))
    return paths


@dataclass
class SimilarityMap:
    query_index: int
    scores: np.ndarray  # (N,) cosine scores, query fixed at 1.0
    mask: np.ndarray  # (N,) bool, exactly ceil(fraction * N) set

    def selected(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]


def similarity_map(feats: np.ndarray, query_index: int, fraction: float = 0.10) -> SimilarityMap:
    """Top-fraction cosine mask of one query patch over last-layer features.

    Ranking is (score desc, index asc) with the query winning any tie at its
    own score, so the query always lands inside its mask.
    """
    n = feats.shape[0]
    if not 0 <= query_index < n:
        raise ValueError(f"query patch {query_index} out of range [0, {n})")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    normed = _safe_normalize(feats)
    scores = np.clip(normed @ normed[query_index], -1.0, 1.0)
    scores[query_index] = 1.0  # self-similarity by definition
    count = int(np.ceil(fraction * n))
    not_query = np.ones(n, dtype=np.int64)
    not_query[query_index] = 0
    order = np.lexsort((np.arange(n), not_query, -scores))[:count]
    mask = np.zeros(n, dtype=bool)
    mask[order] = True
    return SimilarityMap(query_index=query_index, scores=scores, mask=mask)


def export_similarity_map(params: dict, cfg: EncoderConfig, image: np.ndarray, query_index: int,
                          out_dir, fraction: float = 0.10,
                          gelu_mode: str = "exact") -> SimilarityMap:
    """Cosine map of one query patch, exported as PGMs plus a raw score grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with no_grad():
        grid = patchify(image, params, cfg)
        feats = encode(grid, None, params, cfg, gelu_mode=gelu_mode).data
    result = similarity_map(feats, query_index, fraction)
    rows, cols = cfg.grid
    score_grid = result.scores.reshape(rows, cols)
    write_corpus(out_dir / f"similarity_q{query_index}_raw.dmtj", score_grid[None, None])
    gray = np.round((score_grid + 1.0) / 2.0 * 255.0).astype(np.uint8)
    write_pgm(out_dir / f"similarity_q{query_index}.pgm", _upscale(gray, cfg.patch_size))
    mask_gray = result.mask.reshape(rows, cols).astype(np.uint8) * 255
    write_pgm(out_dir / f"similarity_q{query_index}_mask.pgm", _upscale(mask_gray, cfg.patch_size))
    return result
