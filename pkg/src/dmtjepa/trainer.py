"""Training loop: masked latent prediction with an EMA target encoder.

Each step, per image: sample a mask plan, run the frozen target encoder on
the full grid, select semantic neighbors for every masked patch, aggregate
them into dense targets, encode the context block, aggregate it into a
summary token, predict the masked representations, and regress. Gradients
only ever flow through the context encoder, the context aggregation head,
the predictor, and the mask token; the target tree follows by EMA after
every optimizer step.

Also hosts the finite-difference verification of the full objective
(gradcheck) and the ablation matrix runner.
"""

from __future__ import annotations

import itertools
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import ImageDataset, UnlabeledImages, generate_synthetic, load_raw_corpus
from .evaluation import ProbeReport, encode_features, knn_probe, linear_probe
from .masking import MaskPlan, MaskSamplerConfig, sample_mask_plan
from .neighbors import NeighborhoodSpec, select_for_patches
from .optim import AdamW, Schedules, clone_params, ema_update
from .targets import (
    AggregationHead,
    build_aggregated_context,
    build_dense_targets,
    init_head_params,
    loss_dmt,
    loss_ijepa,
    loss_mae,
    normalized_pixel_targets,
    standardize_rows,
)
from .tensor import Tensor, backward, concat, matmul, no_grad
from .vit import (
    EncoderConfig,
    PredictorConfig,
    build_mask_tokens,
    encode,
    init_encoder_params,
    init_predictor_params,
    patchify,
    position_table,
    predict,
)


class TrainAbortError(RuntimeError):
    """Training stopped on a non-finite loss; carries replay information."""


@dataclass
class TrainState:
    config: RunConfig
    enc_cfg: EncoderConfig
    pred_cfg: PredictorConfig
    mask_cfg: MaskSamplerConfig
    nb_spec: NeighborhoodSpec
    params: dict[str, Tensor]
    target_params: dict[str, Tensor]
    context_head: AggregationHead
    target_head: AggregationHead
    optimizer: AdamW
    schedules: Schedules
    rng_mask: np.random.Generator
    rng_data: np.random.Generator
    step: int = 0

    def ema_pairs(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        subset = {name: self.params[name] for name in self.target_params}
        return subset, self.target_params


def _spawn_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init_ss, mask_ss, data_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(mask_ss),
        np.random.default_rng(data_ss),
    )


def init_state(config: RunConfig, steps_per_epoch: int) -> TrainState:
    enc_cfg = config.encoder_config()
    pred_cfg = config.predictor_config()
    rng_init, rng_mask, rng_data = _spawn_rngs(config.seed)

    params = init_encoder_params(enc_cfg, rng_init, prefix="enc")
    params.update(init_predictor_params(pred_cfg, enc_cfg.embed_dim, rng_init, prefix="pred"))
    params["mask_token"] = Tensor(
        rng_init.normal(0.0, 0.02, size=enc_cfg.embed_dim), requires_grad=True
    )
    heads_cfg = config.tree["heads"]
    if heads_cfg["learned_projections"]:
        params.update(init_head_params(enc_cfg.embed_dim, rng_init, prefix="head"))
    if config.objective == "mae":
        patch_dim = enc_cfg.patch_size**2 * enc_cfg.channels
        params["pixel_head.W"] = Tensor(
            rng_init.normal(0.0, 0.02, size=(enc_cfg.embed_dim, patch_dim)), requires_grad=True
        )
        params["pixel_head.bias"] = Tensor(np.zeros(patch_dim), requires_grad=True)

    # Target tree: EMA copies of the encoder and (when present) the context
    # aggregation head, initialized identically.
    ema_names = [n for n in params if n.startswith("enc.") or n.startswith("head.")]
    target_params = clone_params({n: params[n] for n in ema_names})

    context_head = AggregationHead(
        kind=heads_cfg["context_head"],
        params=params if heads_cfg["learned_projections"] else None,
    )
    target_head = AggregationHead(
        kind=heads_cfg["target_head"],
        params=target_params if heads_cfg["learned_projections"] else None,
    )

    opt_cfg = config.tree["optimizer"]
    optimizer = AdamW(
        params,
        beta1=float(opt_cfg["beta1"]),
        beta2=float(opt_cfg["beta2"]),
        eps=float(opt_cfg["eps"]),
        grad_clip=float(opt_cfg["grad_clip"]),
        decay_exempt=tuple(opt_cfg["decay_exempt"]),
    )
    return TrainState(
        config=config,
        enc_cfg=enc_cfg,
        pred_cfg=pred_cfg,
        mask_cfg=config.mask_config(),
        nb_spec=config.neighborhood_spec(),
        params=params,
        target_params=target_params,
        context_head=context_head,
        target_head=target_head,
        optimizer=optimizer,
        schedules=config.schedules(steps_per_epoch),
        rng_mask=rng_mask,
        rng_data=rng_data,
    )


# ----------------------------------------------------------------------
# Per-image objectives
# ----------------------------------------------------------------------

def _target_features(state: TrainState, image: np.ndarray) -> np.ndarray:
    with no_grad():
        grid = patchify(image, state.target_params, state.enc_cfg, prefix="enc")
        return encode(grid, None, state.target_params, state.enc_cfg,
                      gelu_mode=state.config.gelu_mode).data


def _context_tokens(state: TrainState, image: np.ndarray, indices) -> Tensor:
    grid = patchify(image, state.params, state.enc_cfg, prefix="enc")
    return encode(grid, indices, state.params, state.enc_cfg, gelu_mode=state.config.gelu_mode)


def _predict_for_plan(state: TrainState, plan: MaskPlan, conditioning: list[Tensor]) -> Tensor:
    positions = [patch for _, patch in plan.masked_pairs()]
    pos_table = position_table(state.enc_cfg, state.params, prefix="enc")
    mask_toks = build_mask_tokens(state.params["mask_token"], positions, pos_table)
    seq = concat([*conditioning, mask_toks], axis=0)
    return predict(seq, len(positions), state.params, state.pred_cfg,
                   gelu_mode=state.config.gelu_mode)


def dmt_image_loss(state: TrainState, image: np.ndarray, plan: MaskPlan,
                   target_feats: np.ndarray | None = None) -> Tensor:
    if target_feats is None:
        target_feats = _target_features(state, image)
    masked = plan.masked_patches()
    selection = select_for_patches(masked, target_feats, plan.rows, plan.cols, state.nb_spec)
    targets = build_dense_targets(target_feats, selection, masked, state.target_head)
    if state.config.tree["heads"]["target_standardize"]:
        keys = sorted(targets)
        mat = standardize_rows(np.stack([targets[k] for k in keys]))
        targets = {k: mat[i] for i, k in enumerate(keys)}
    ctx = _context_tokens(state, image, plan.context_indices)
    summary = build_aggregated_context(ctx, state.context_head)
    conditioning = [ctx, summary] if state.config.context_mode == "full_aggregated" else [summary]
    preds = _predict_for_plan(state, plan, conditioning)
    return loss_dmt(preds, targets, plan)


def ijepa_image_loss(state: TrainState, image: np.ndarray, plan: MaskPlan,
                     target_feats: np.ndarray | None = None) -> Tensor:
    if target_feats is None:
        target_feats = _target_features(state, image)
    ctx = _context_tokens(state, image, plan.context_indices)
    preds = _predict_for_plan(state, plan, [ctx])
    return loss_ijepa(preds, target_feats, plan)


def mae_image_loss(state: TrainState, image: np.ndarray, masked: np.ndarray) -> Tensor:
    n = state.enc_cfg.num_patches
    visible = np.setdiff1d(np.arange(n), masked)
    ctx = _context_tokens(state, image, visible)
    pos_table = position_table(state.enc_cfg, state.params, prefix="enc")
    mask_toks = build_mask_tokens(state.params["mask_token"], masked, pos_table)
    seq = concat([ctx, mask_toks], axis=0)
    hidden = predict(seq, len(masked), state.params, state.pred_cfg,
                     gelu_mode=state.config.gelu_mode)
    pixels = matmul(hidden, state.params["pixel_head.W"]) + state.params["pixel_head.bias"]
    targets = normalized_pixel_targets(np.asarray(image), state.enc_cfg.patch_size, masked)
    return loss_mae(pixels, targets)


def image_loss(state: TrainState, image: np.ndarray) -> tuple[Tensor, object]:
    """Loss for one image under the configured objective; returns replay info."""
    cfg = state.config
    rows, cols = state.enc_cfg.grid
    if cfg.objective == "mae":
        n = state.enc_cfg.num_patches
        count = max(1, min(n - 1, int(round(cfg.mae_mask_ratio * n))))
        masked = np.sort(state.rng_mask.choice(n, size=count, replace=False))
        return mae_image_loss(state, image, masked), masked
    plan = sample_mask_plan(rows, cols, state.mask_cfg, state.rng_mask)
    if cfg.objective == "dmt":
        return dmt_image_loss(state, image, plan), plan
    if cfg.objective == "ijepa":
        return ijepa_image_loss(state, image, plan), plan
    # mix: lam * latent-patch baseline + (1 - lam) * dense-target objective,
    # sharing the target forward; zero-weight branches are skipped so the
    # endpoints reproduce the pure paths exactly.
    lam = cfg.mix_lambda
    target_feats = _target_features(state, image)
    if lam == 1.0:
        return ijepa_image_loss(state, image, plan, target_feats), plan
    if lam == 0.0:
        return dmt_image_loss(state, image, plan, target_feats), plan
    combined = (
        ijepa_image_loss(state, image, plan, target_feats) * lam
        + dmt_image_loss(state, image, plan, target_feats) * (1.0 - lam)
    )
    return combined, plan


def train_step(state: TrainState, images: np.ndarray) -> dict[str, float]:
    """One optimizer step over a batch; loss gradients are batch-averaged."""
    lr = state.schedules.lr_at(state.step)
    wd = state.schedules.wd_at(state.step)
    momentum = state.schedules.ema_at(state.step)
    state.optimizer.zero_grad()
    batch = images.shape[0]
    total = 0.0
    for i in range(batch):
        loss, replay = image_loss(state, images[i])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainAbortError(
                f"non-finite loss at step {state.step} (image {i} of the batch); "
                f"seed={state.config.seed} replay={replay!r}"
            )
        total += value
        backward(loss * (1.0 / batch))
    state.optimizer.step(lr=lr, wd=wd)
    ema_update(*state.ema_pairs(), momentum=momentum)
    state.step += 1
    return {"loss": total / batch, "lr": lr, "wd": wd, "ema": momentum}


# ----------------------------------------------------------------------
# Datasets and the epoch loop
# ----------------------------------------------------------------------

def build_train_dataset(config: RunConfig) -> ImageDataset:
    data_cfg = config.tree["data"]
    if data_cfg["source"] == "synthetic":
        return generate_synthetic(config.synthetic_spec(), int(data_cfg["count"]))
    if data_cfg["corpus_dir"] is None:
        raise ConfigError("data.source is 'corpus' but data.corpus_dir is unset")
    return load_raw_corpus(data_cfg["corpus_dir"], data_cfg["manifest"])


def build_test_dataset(config: RunConfig) -> ImageDataset:
    """Held-out labeled split for probes (synthetic: fresh seed offset)."""
    data_cfg = config.tree["data"]
    if data_cfg["source"] == "synthetic":
        spec = config.synthetic_spec()
        test_spec = type(spec)(**{**spec.__dict__, "seed": spec.seed + 1})
        return generate_synthetic(test_spec, int(data_cfg["test_count"]))
    dataset = build_train_dataset(config)
    half = len(dataset) // 2
    return ImageDataset(
        images=dataset.images[half:],
        labels=None if dataset.labels is None else dataset.labels[half:],
    )


def _format_metric(x: float) -> str:
    return str(np.float32(x))


def metrics_line(step: int, metrics: dict[str, float]) -> str:
    return (
        f"step={step} loss={_format_metric(metrics['loss'])} "
        f"lr={_format_metric(metrics['lr'])} wd={_format_metric(metrics['wd'])} "
        f"ema={_format_metric(metrics['ema'])}"
    )


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"ctx.{name}"] = p.data
    for name, p in state.target_params.items():
        tensors[f"tgt.{name}"] = p.data
    for name, m in state.optimizer.m.items():
        tensors[f"opt.m.{name}"] = m
    for name, v in state.optimizer.v.items():
        tensors[f"opt.v.{name}"] = v
    rng_state = {
        "mask": state.rng_mask.bit_generator.state,
        "data": state.rng_data.bit_generator.state,
    }
    return Checkpoint(
        config_json=state.config.to_json(),
        schedule_step=state.step,
        opt_step=state.optimizer.step_count,
        rng_state=rng_state,
        tensors=tensors,
    )


def state_from_checkpoint(ckpt: Checkpoint, steps_per_epoch: int | None = None) -> TrainState:
    config = RunConfig.from_json(ckpt.config_json)
    if steps_per_epoch is None:
        dataset = build_train_dataset(config)
        steps_per_epoch = max(1, len(dataset) // config.batch_size)
    state = init_state(config, steps_per_epoch)
    for name, p in state.params.items():
        p.data[...] = ckpt.tensors[f"ctx.{name}"]
    for name, p in state.target_params.items():
        p.data[...] = ckpt.tensors[f"tgt.{name}"]
    for name in state.optimizer.m:
        state.optimizer.m[name][...] = ckpt.tensors[f"opt.m.{name}"]
        state.optimizer.v[name][...] = ckpt.tensors[f"opt.v.{name}"]
    state.optimizer.step_count = ckpt.opt_step
    state.step = ckpt.schedule_step
    state.rng_mask.bit_generator.state = ckpt.rng_state["mask"]
    state.rng_data.bit_generator.state = ckpt.rng_state["data"]
    return state


def run_pretrain(config: RunConfig, verbose: bool = False) -> dict:
    """Full pre-training run; writes metrics log and per-epoch checkpoints."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_train_dataset(config)
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    unlabeled = dataset.unlabeled()
    assert isinstance(unlabeled, UnlabeledImages)  # pre-training never sees labels
    batch = min(config.batch_size, len(unlabeled))
    steps_per_epoch = max(1, len(unlabeled) // batch)
    state = init_state(config, steps_per_epoch)
    total_epochs = state.schedules.total_epochs

    losses: list[float] = []
    metrics_partial = out_dir / "metrics.log.partial"
    config_path = out_dir / "config.json"
    config_path.write_text(config.to_json() + "\n", encoding="utf-8")
    started = time.time()
    with open(metrics_partial, "w", encoding="utf-8") as log:
        for epoch in range(total_epochs):
            order = state.rng_data.permutation(len(unlabeled))
            epoch_losses = []
            for b in range(steps_per_epoch):
                idx = order[b * batch : (b + 1) * batch]
                step_index = state.step
                metrics = train_step(state, unlabeled.images[idx])
                log.write(metrics_line(step_index, metrics) + "\n")
                losses.append(metrics["loss"])
                epoch_losses.append(metrics["loss"])
            save_checkpoint(out_dir / "checkpoint_last.dmtc", state_to_checkpoint(state))
            if verbose:
                print(f"epoch {epoch + 1}/{total_epochs} loss={np.mean(epoch_losses):.6f}")
    os.replace(metrics_partial, out_dir / "metrics.log")
    save_checkpoint(out_dir / "checkpoint_final.dmtc", state_to_checkpoint(state))
    return {
        "out_dir": str(out_dir),
        "steps": state.step,
        "losses": losses,
        "final_loss": losses[-1] if losses else float("nan"),
        "runtime_s": time.time() - started,
        "state": state,
    }


# ----------------------------------------------------------------------
# Probing helpers
# ----------------------------------------------------------------------

def probe_state(config: RunConfig, encoder_params: dict[str, Tensor], kind: str = "knn",
                knn_k: int = 10, epochs: int = 100, lr: float = 0.05,
                feature_source: str = "target_encoder") -> ProbeReport:
    """Probe frozen features of the given encoder on the configured data."""
    enc_cfg = config.encoder_config()
    train = build_train_dataset(config)
    test = build_test_dataset(config)
    train_labels = train.require_labels()
    test_labels = test.require_labels()
    train_feats = encode_features(encoder_params, enc_cfg, train.images, config.gelu_mode)
    test_feats = encode_features(encoder_params, enc_cfg, test.images, config.gelu_mode)
    if kind == "knn":
        report = knn_probe(train_feats, train_labels, test_feats, test_labels, k_nn=knn_k)
    elif kind == "linear":
        report = linear_probe(train_feats, train_labels, test_feats, test_labels, epochs=epochs, lr=lr)
    else:
        raise ConfigError(f"unknown probe kind {kind!r}")
    report.feature_source = feature_source
    return report


def random_baseline_probe(config: RunConfig, kind: str = "knn", knn_k: int = 10) -> ProbeReport:
    """Probe of a frozen randomly-initialized encoder (same seed, no training)."""
    state = init_state(config, steps_per_epoch=1)
    return probe_state(config, state.target_params, kind=kind, knn_k=knn_k,
                       feature_source="random_init_target_encoder")


# ----------------------------------------------------------------------
# Gradient verification of the full objective
# ----------------------------------------------------------------------

_GRADCHECK_OVERRIDES = (
    "encoder.depth=2",
    "encoder.heads=2",
    "encoder.embed_dim=8",
    "encoder.patch_size=4",
    "encoder.image_size=[16,16]",
    "encoder.channels=1",
    "predictor.depth=1",
    "predictor.embed_dim=8",
    "predictor.heads=2",
)


_GRAD_NOISE_FLOOR = 1e-6


def gradcheck(config: RunConfig | None = None, h: float = 1e-4,
              threshold: float = 1e-3, corrupt_group: str | None = None) -> dict:
    """Compare the backward pass of the full objective to finite differences.

    A small geometry (16 patches, width 8) is forced so the coordinate loop
    stays fast; every other knob comes from the given config. Target-side
    (EMA) parameters are verified to receive no gradient and are skipped.

    The per-group relative error divides by max(|fd|, |analytic|, 1e-6): a
    group whose true gradient norm sits below that floor (attention q/k at a
    fresh init) is measured against the floor instead, since central
    differences of a loss of order 10 cannot resolve norms near 1e-8.
    ``corrupt_group`` perturbs one group's analytic gradient, for testing
    the failure path.
    """
    started = time.time()
    tree = json.loads(config.to_json()) if config is not None else {}
    base = RunConfig.from_json(json.dumps(tree))
    tuned = RunConfig.from_sources(
        preset="tiny", overrides=list(_GRADCHECK_OVERRIDES), seed=base.seed
    )
    for key in ("objective", "mix_lambda", "context_mode", "gelu"):
        tuned.tree[key] = base.tree[key]
    tuned.tree["heads"] = dict(base.tree["heads"])
    tuned.tree["neighborhood"] = dict(base.tree["neighborhood"])
    tuned.validate()

    state = init_state(tuned, steps_per_epoch=1)
    rows, cols = state.enc_cfg.grid
    spec = tuned.synthetic_spec()
    image = generate_synthetic(spec, 1).images[0]
    plan = sample_mask_plan(rows, cols, state.mask_cfg, state.rng_mask)
    mae_masked = np.sort(
        np.random.default_rng(tuned.seed).choice(
            state.enc_cfg.num_patches,
            size=max(1, int(round(tuned.mae_mask_ratio * state.enc_cfg.num_patches))),
            replace=False,
        )
    )

    def objective() -> Tensor:
        if tuned.objective == "mae":
            return mae_image_loss(state, image, mae_masked)
        if tuned.objective == "ijepa":
            return ijepa_image_loss(state, image, plan)
        if tuned.objective == "mix":
            lam = tuned.mix_lambda
            return (
                ijepa_image_loss(state, image, plan) * lam
                + dmt_image_loss(state, image, plan) * (1.0 - lam)
            )
        return dmt_image_loss(state, image, plan)

    state.optimizer.zero_grad()
    backward(objective())

    groups: dict[str, float] = {}
    skipped: list[str] = []
    for name, p in sorted(state.target_params.items()):
        if p.grad is not None:
            raise TrainAbortError(f"target parameter {name} received gradient")
        skipped.append(f"tgt.{name}")
    for name, p in sorted(state.params.items()):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if corrupt_group == name:
            analytic = analytic + 0.1
        original = p.data.copy()
        flat = p.data.ravel()
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = objective().item()
            flat[i] = keep - h
            fm = objective().item()
            flat[i] = keep
            fd[i] = (fp - fm) / (2.0 * h)
        p.data[...] = original
        denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), _GRAD_NOISE_FLOOR)
        groups[name] = float(np.linalg.norm(fd - analytic.ravel()) / denom)
    max_err = max(groups.values()) if groups else 0.0
    return {
        "groups": groups,
        "skipped": skipped,
        "max_rel_err": max_err,
        "passed": max_err < threshold,
        "threshold": threshold,
        "runtime_s": time.time() - started,
    }


# ----------------------------------------------------------------------
# Ablation matrix
# ----------------------------------------------------------------------

def run_ablation(base: RunConfig, axes: dict[str, list], out_path) -> list[dict]:
    """Cross-product of config overrides; one TSV row per cell.

    Cells that fail validation (or sampling feasibility) are recorded with
    their error and skipped; nothing is fatal.
    """
    keys = sorted(axes)
    rows: list[dict] = []
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base_json = base.to_json()
    for combo in itertools.product(*(axes[k] for k in keys)):
        cell = dict(zip(keys, combo))
        label = ",".join(f"{k}={v}" for k, v in cell.items())
        row = {"cell": label, **{k: v for k, v in cell.items()}}
        try:
            merged = json.loads(base_json)
            for k, v in cell.items():
                node = merged
                parts = k.split(".")
                for part in parts[:-1]:
                    if part not in node:
                        raise ConfigError(f"unknown config key: {k}")
                    node = node[part]
                if parts[-1] not in node:
                    raise ConfigError(f"unknown config key: {k}")
                node[parts[-1]] = v
            merged["out_dir"] = str(out_path.parent / f"cell_{len(rows)}")
            cfg = RunConfig.from_json(json.dumps(merged))
            result = run_pretrain(cfg)
            report = probe_state(cfg, result["state"].target_params, kind="knn")
            row.update(status="ok", final_loss=result["final_loss"], knn_accuracy=report.accuracy)
        except Exception as exc:  # noqa: BLE001 - infeasible cells are logged, not fatal
            row.update(status=f"skipped: {type(exc).__name__}: {exc}",
                       final_loss=float("nan"), knn_accuracy=float("nan"))
        rows.append(row)
    header = keys + ["status", "final_loss", "knn_accuracy"]
    tmp = out_path.with_name(out_path.name + ".partial")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(row.get(k, "")) for k in header) + "\n")
    os.replace(tmp, out_path)
    return rows
