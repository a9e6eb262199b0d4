import json

import numpy as np
import pytest

import dmtjepa.trainer as trainer_mod
from dmtjepa.checkpoint import load_checkpoint, save_checkpoint
from dmtjepa.cli import main
from dmtjepa.config import RunConfig
from dmtjepa.data import generate_synthetic
from dmtjepa.tensor import backward
from dmtjepa.trainer import (
    TrainAbortError,
    build_train_dataset,
    dmt_image_loss,
    gradcheck,
    image_loss,
    init_state,
    run_pretrain,
    state_from_checkpoint,
    state_to_checkpoint,
    train_step,
)
from dmtjepa.masking import sample_mask_plan
from dmtjepa.vit import encode, patchify

MICRO = [
    "schedule.total_epochs=2",
    "schedule.warmup_epochs=1",
    "schedule.batch_size=12",
    "data.count=24",
    "data.test_count=24",
]


def micro_config(tmp_path, name="run", extra=()):
    return RunConfig.from_sources(
        preset="tiny", overrides=MICRO + list(extra) + [f'out_dir="{tmp_path / name}"']
    )


class TestTrainStep:
    def test_step_updates_everything(self, tmp_path):
        cfg = micro_config(tmp_path)
        ds = build_train_dataset(cfg)
        state = init_state(cfg, steps_per_epoch=2)
        before_ctx = state.params["enc.patch_proj.W"].data.copy()
        before_tgt = state.target_params["enc.patch_proj.W"].data.copy()
        metrics = train_step(state, ds.images[:12])
        assert np.isfinite(metrics["loss"]) and metrics["loss"] > 0
        assert state.step == 1
        assert np.max(np.abs(state.params["enc.patch_proj.W"].data - before_ctx)) > 0
        # EMA moved the target a small amount toward the new context weights.
        assert np.max(np.abs(state.target_params["enc.patch_proj.W"].data - before_tgt)) > 0

    def test_no_gradient_reaches_target_side(self, tmp_path):
        cfg = micro_config(tmp_path)
        ds = build_train_dataset(cfg)
        state = init_state(cfg, steps_per_epoch=2)
        plan = sample_mask_plan(4, 4, state.mask_cfg, state.rng_mask)
        loss = dmt_image_loss(state, ds.images[0], plan)
        backward(loss)
        for name, p in state.target_params.items():
            assert p.grad is None, name
            assert not p.requires_grad

    def test_gradient_reaches_every_context_parameter(self, tmp_path):
        cfg = micro_config(tmp_path)
        ds = build_train_dataset(cfg)
        state = init_state(cfg, steps_per_epoch=2)
        plan = sample_mask_plan(4, 4, state.mask_cfg, state.rng_mask)
        backward(dmt_image_loss(state, ds.images[0], plan))
        for name, p in state.params.items():
            assert p.grad is not None and np.max(np.abs(p.grad)) > 0, f"dead parameter {name}"

    def test_context_and_target_encoders_identical_at_init(self, tmp_path):
        cfg = micro_config(tmp_path)
        ds = build_train_dataset(cfg)
        state = init_state(cfg, steps_per_epoch=2)
        image = ds.images[0]
        ctx_grid = patchify(image, state.params, state.enc_cfg)
        tgt_grid = patchify(image, state.target_params, state.enc_cfg)
        out_ctx = encode(ctx_grid, None, state.params, state.enc_cfg)
        out_tgt = encode(tgt_grid, None, state.target_params, state.enc_cfg)
        np.testing.assert_array_equal(out_ctx.data, out_tgt.data)

    @pytest.mark.filterwarnings("ignore:overflow|invalid value")
    def test_nan_loss_aborts_with_diagnostics(self, tmp_path):
        cfg = micro_config(tmp_path)
        ds = build_train_dataset(cfg)
        state = init_state(cfg, steps_per_epoch=2)
        state.params["mask_token"].data[:] = 1e200
        with pytest.raises(TrainAbortError, match="step 0"):
            train_step(state, ds.images[:2])

    def test_objective_paths_run(self, tmp_path):
        for objective in ("ijepa", "mae", "mix"):
            cfg = micro_config(tmp_path, name=objective,
                              extra=[f"objective={objective}", "mix_lambda=0.5"])
            ds = build_train_dataset(cfg)
            state = init_state(cfg, steps_per_epoch=2)
            loss, _ = image_loss(state, ds.images[0])
            assert np.isfinite(loss.item())

    def test_head_variants_train(self, tmp_path):
        for head in ("average_pool", "max_pool"):
            cfg = micro_config(
                tmp_path, name=head,
                extra=[f"heads.context_head={head}", f"heads.target_head={head}"],
            )
            ds = build_train_dataset(cfg)
            state = init_state(cfg, steps_per_epoch=2)
            metrics = train_step(state, ds.images[:4])
            assert np.isfinite(metrics["loss"])

    def test_learned_projection_heads_get_ema_copies(self, tmp_path):
        cfg = micro_config(tmp_path, extra=["heads.learned_projections=true"])
        state = init_state(cfg, steps_per_epoch=2)
        assert "head.Wq" in state.params
        assert "head.Wq" in state.target_params
        np.testing.assert_array_equal(
            state.params["head.Wq"].data, state.target_params["head.Wq"].data
        )
        ds = build_train_dataset(cfg)
        metrics = train_step(state, ds.images[:4])
        assert np.isfinite(metrics["loss"])
        # After one step the trainable head moved, the EMA copy barely.
        assert not np.array_equal(state.params["head.Wq"].data, state.target_params["head.Wq"].data)


class TestPretrainRuns:
    def test_determinism_byte_identical_logs(self, tmp_path):
        cfg_a = micro_config(tmp_path, name="a")
        cfg_b = micro_config(tmp_path, name="b")
        run_pretrain(cfg_a)
        run_pretrain(cfg_b)
        log_a = (tmp_path / "a" / "metrics.log").read_bytes()
        log_b = (tmp_path / "b" / "metrics.log").read_bytes()
        assert log_a == log_b and len(log_a) > 0

    def test_metrics_line_format(self, tmp_path):
        cfg = micro_config(tmp_path)
        run_pretrain(cfg)
        lines = (tmp_path / "run" / "metrics.log").read_text().splitlines()
        assert len(lines) == 4  # 2 epochs x 2 steps
        for i, line in enumerate(lines):
            keys = [kv.split("=")[0] for kv in line.split()]
            assert keys == ["step", "loss", "lr", "wd", "ema"]
            assert line.startswith(f"step={i} ")

    def test_mix_lambda_one_equals_pure_baseline_path(self, tmp_path):
        cfg_mix = micro_config(tmp_path, name="mix", extra=["objective=mix", "mix_lambda=1.0"])
        cfg_ij = micro_config(tmp_path, name="ij", extra=["objective=ijepa"])
        run_pretrain(cfg_mix)
        run_pretrain(cfg_ij)
        mix_lines = (tmp_path / "mix" / "metrics.log").read_text()
        ij_lines = (tmp_path / "ij" / "metrics.log").read_text()
        assert mix_lines == ij_lines

    def test_checkpoint_roundtrip_through_state(self, tmp_path):
        cfg = micro_config(tmp_path)
        result = run_pretrain(cfg)
        path_a = tmp_path / "run" / "checkpoint_final.dmtc"
        state = state_from_checkpoint(load_checkpoint(path_a))
        path_b = tmp_path / "again.dmtc"
        save_checkpoint(path_b, state_to_checkpoint(state))
        assert path_a.read_bytes() == path_b.read_bytes()
        assert state.step == result["steps"]

    def test_smoke_loss_decreases_over_200_steps(self, tmp_path):
        cfg = RunConfig.from_sources(
            preset="tiny",
            overrides=[
                "schedule.total_epochs=25",
                "schedule.warmup_epochs=2",
                "schedule.batch_size=8",
                "data.count=64",
                "data.test_count=24",
                f'out_dir="{tmp_path / "smoke"}"',
            ],
        )
        result = run_pretrain(cfg)  # 25 epochs x 8 steps = 200 steps
        losses = np.array(result["losses"])
        assert len(losses) == 200
        smoothed_early = losses[6:14].mean()  # window around step 10
        smoothed_late = losses[-8:].mean()
        assert smoothed_late < smoothed_early


class TestGradcheck:
    def test_corrupted_gradient_fails(self, monkeypatch):
        monkeypatch.setattr(
            trainer_mod,
            "_GRADCHECK_OVERRIDES",
            trainer_mod._GRADCHECK_OVERRIDES[:2]
            + (
                "encoder.embed_dim=8",
                "encoder.patch_size=4",
                "encoder.image_size=[16,16]",
                "encoder.channels=1",
                "encoder.depth=1",
                "predictor.depth=0",
                "predictor.embed_dim=8",
                "predictor.heads=2",
            ),
        )
        clean = gradcheck()
        assert clean["passed"]
        corrupt = gradcheck(corrupt_group="mask_token")
        assert not corrupt["passed"]
        assert corrupt["groups"]["mask_token"] > clean["groups"]["mask_token"]

    def test_target_groups_skipped(self, monkeypatch):
        monkeypatch.setattr(
            trainer_mod,
            "_GRADCHECK_OVERRIDES",
            ("encoder.depth=1", "encoder.heads=2", "encoder.embed_dim=8",
             "encoder.patch_size=4", "encoder.image_size=[16,16]", "encoder.channels=1",
             "predictor.depth=0", "predictor.embed_dim=8", "predictor.heads=2"),
        )
        report = gradcheck()
        assert any(name.startswith("tgt.enc.") for name in report["skipped"])
        assert all(not g.startswith("tgt.") for g in report["groups"])


class TestCli:
    def test_pretrain_probe_export_chain(self, tmp_path, capsys):
        out = tmp_path / "cli_run"
        args_common = ["--preset", "tiny", "--out", str(out)]
        for item in MICRO:
            args_common += ["--set", item]
        assert main(["pretrain", "--quiet", *args_common]) == 0
        ckpt = out / "checkpoint_final.dmtc"
        assert ckpt.exists() and (out / "metrics.log").exists()

        assert main(["probe", "--checkpoint", str(ckpt), "--kind", "knn",
                     "--knn-k", "3", "--baseline"]) == 0
        captured = capsys.readouterr().out
        assert "accuracy=" in captured and "random_init_baseline_accuracy=" in captured
        assert (out / "probe_knn.txt").exists()

        assert main(["export", "--checkpoint", str(ckpt), "--what", "attn",
                     "--query", "0"]) == 0
        assert (out / "exports" / "attention_mean.pgm").exists()
        assert main(["export", "--checkpoint", str(ckpt), "--what", "sim",
                     "--query", "5", "--fraction", "0.25"]) == 0
        assert (out / "exports" / "similarity_q5_mask.pgm").exists()

    def test_invalid_config_exits_nonzero(self, capsys):
        assert main(["pretrain", "--set", "objective=bogus"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_ablate_matrix(self, tmp_path):
        matrix = tmp_path / "matrix.json"
        matrix.write_text(json.dumps({"axes": {
            "neighborhood.k": [1, 4],
            "heads.context_head": ["cross_attention", "average_pool"],
        }}), encoding="utf-8")
        out = tmp_path / "ablate"
        args = ["ablate", "--matrix", str(matrix), "--out", str(out), "--preset", "tiny"]
        for item in ["schedule.total_epochs=1", "schedule.warmup_epochs=0",
                     "schedule.batch_size=8", "data.count=16", "data.test_count=16"]:
            args += ["--set", item]
        assert main(args) == 0
        table = (out / "ablation.tsv").read_text(encoding="utf-8").splitlines()
        assert len(table) == 5  # header + 4 cells
        assert table[0].split("\t") == ["heads.context_head", "neighborhood.k",
                                        "status", "final_loss", "knn_accuracy"]
        assert sum(1 for line in table[1:] if "\tok\t" in line) == 4

    def test_ablate_infeasible_cell_skipped(self, tmp_path):
        matrix = tmp_path / "matrix.json"
        matrix.write_text(json.dumps({"axes": {"neighborhood.k": [0, 1]}}), encoding="utf-8")
        out = tmp_path / "ablate"
        args = ["ablate", "--matrix", str(matrix), "--out", str(out)]
        for item in ["schedule.total_epochs=1", "schedule.warmup_epochs=0",
                     "schedule.batch_size=8", "data.count=16", "data.test_count=16"]:
            args += ["--set", item]
        assert main(args) == 0
        table = (out / "ablation.tsv").read_text(encoding="utf-8").splitlines()
        statuses = [line.split("\t")[1] for line in table[1:]]
        assert any(s.startswith("skipped") for s in statuses)
        assert any(s == "ok" for s in statuses)
