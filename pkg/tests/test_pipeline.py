"""Training drivers: determinism, checkpointing, logging, and metrics."""

import csv
import dataclasses
import json

import numpy as np
import pytest

from navprompt.data import gen_indoor_dataset, gen_trajectory_dataset
from navprompt.encoders import EncoderConfig, init_visual_params, param_shapes
from navprompt.errors import (
    AlignmentError,
    CheckpointError,
    ConfigurationError,
    DatasetError,
    FreezeViolationError,
    ParameterError,
)
from navprompt.optim import ParamStore
from navprompt.training import (
    RunConfig,
    TrajectoryFeatures,
    build_vocabulary,
    evaluate_retrieval,
    load_checkpoint,
    parse_config_file,
    prepare_trajectories,
    retrieval_metrics,
    run_stage1,
    run_stage2,
    save_checkpoint,
    stage2_losses,
    precompute_viewpoint_features,
)


def tiny_cfg(tmp_path, **overrides):
    base = dict(
        seed=5, out_dir=str(tmp_path / "run"),
        stage1_epochs=2, stage1_batch_size=4,
        stage2_epochs=2, stage2_batch_size=5,
        d=16, heads=2, ff_mult=2, visual_layers=2, text_layers=1, cross_layers=1,
        prompt_count=3, prompt_layers=2, num_patches=2, feature_dim=6,
        num_classes=4, max_text_len=32, max_viewpoints=8, max_subpaths=6,
        indoor_samples_per_class=6, trajectory_count=15,
        subpaths_min=2, subpaths_max=3, viewpoints_min=3, viewpoints_max=5,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        store = ParamStore()
        init_visual_params(store, cfg.encoder(), np.random.default_rng(0))
        store.set_frozen({"visual.cls"})
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(store, {"encoder": dataclasses.asdict(cfg.encoder())}, path)
        loaded, config = load_checkpoint(path)
        assert set(loaded.names()) == set(store.names())
        for name in store.names():
            assert loaded[name].data.tobytes() == store[name].data.tobytes()
        assert loaded.frozen == {"visual.cls"}

    def test_truncated_file(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        store = ParamStore()
        init_visual_params(store, cfg.encoder(), np.random.default_rng(0))
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(store, {}, path)
        blob = open(path).read()
        with open(path, "w") as fh:
            fh.write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_config_mismatch_names_tensor(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        store = ParamStore()
        init_visual_params(store, cfg.encoder(), np.random.default_rng(0))
        wrong = dataclasses.asdict(tiny_cfg(tmp_path, d=32, heads=2).encoder())
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(store, {"encoder": wrong}, path)
        with pytest.raises(CheckpointError, match=r"has shape .* config implies"):
            load_checkpoint(path)

    def test_version_check(self, tmp_path):
        path = str(tmp_path / "ckpt.json")
        with open(path, "w") as fh:
            json.dump({"format_version": 99, "tensors": {}, "frozen": []}, fh)
        with pytest.raises(CheckpointError, match="99"):
            load_checkpoint(path)


class TestStage1:
    def test_zero_epochs_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_cfg(tmp_path, stage1_epochs=0)
        result = run_stage1(cfg)
        fresh = ParamStore()
        init_visual_params(fresh, cfg.encoder(), np.random.default_rng([cfg.seed, 11]))
        for name in fresh.names():
            assert result.store[name].data.tobytes() == fresh[name].data.tobytes()

    def test_deterministic_checkpoints(self, tmp_path):
        a = run_stage1(tiny_cfg(tmp_path, out_dir=str(tmp_path / "a")))
        b = run_stage1(tiny_cfg(tmp_path, out_dir=str(tmp_path / "b")))
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()

    def test_csv_schema(self, tmp_path):
        result = run_stage1(tiny_cfg(tmp_path))
        with open(result.csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "train_acc", "val_acc"]
        assert len(rows) == 1 + 2

    def test_trainable_count_in_metrics(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        result = run_stage1(cfg)
        enc = cfg.encoder()
        head = enc.d * enc.d + enc.d + enc.d * enc.num_classes + enc.num_classes
        assert result.metrics["trainable_parameters"] == enc.prompt_layers * enc.prompt_count * enc.d + head
        assert result.metrics["prompt_parameters"] == enc.prompt_layers * enc.prompt_count * enc.d

    def test_freeze_violation_trap(self, tmp_path, monkeypatch):
        cfg = tiny_cfg(tmp_path, stage1_epochs=1)
        from navprompt import training as T
        from navprompt.optim import Optimizer

        real_step = Optimizer.step

        def sabotage(self, store, grads):
            real_step(self, store, grads)
            store["visual.cls"].data[0, 0] += 1.0  # corrupt a frozen tensor

        monkeypatch.setattr(Optimizer, "step", sabotage)
        with pytest.raises(FreezeViolationError):
            run_stage1(cfg, write_outputs=False)


class TestStage2:
    def _stage1(self, tmp_path, **kw):
        cfg = tiny_cfg(tmp_path, **kw)
        return cfg, run_stage1(cfg, write_outputs=False)

    def test_composition_identity_every_step(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path)
        result = run_stage2(cfg, s1.store)
        with open(result.csv_path) as fh:
            rows = list(csv.DictReader(fh))
        assert rows, "no steps logged"
        for row in rows:
            total = float(row["total"])
            combined = cfg.lambda1 * float(row["l_ove"]) + cfg.lambda2 * float(row["l_cnt"]) + float(row["l_ind_sum"])
            assert abs(total - combined) < 1e-12

    def test_sub_only_leaves_ove_cnt_blank(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path, ablation="sub_only")
        result = run_stage2(cfg, s1.store)
        with open(result.csv_path) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert row["l_ove"] == "" and row["l_cnt"] == ""
            assert row["l_ind_sum"] != "" and row["total"] != ""

    def test_cnt_mode_logs_only_count(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path, ablation="cnt")
        result = run_stage2(cfg, s1.store)
        with open(result.csv_path) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert row["l_ove"] == "" and row["l_ind_sum"] == ""
            assert abs(float(row["total"]) - cfg.lambda2 * float(row["l_cnt"])) < 1e-12

    def test_lambda_zero_degenerates_to_individual_sum(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path, lambda1=0.0, lambda2=0.0)
        result = run_stage2(cfg, s1.store)
        with open(result.csv_path) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert float(row["total"]) == float(row["l_ind_sum"])

    def test_deterministic_checkpoints(self, tmp_path):
        cfg_a, s1a = self._stage1(tmp_path, out_dir=str(tmp_path / "a"))
        cfg_b, s1b = self._stage1(tmp_path, out_dir=str(tmp_path / "b"))
        a = run_stage2(cfg_a, s1a.store)
        b = run_stage2(cfg_b, s1b.store)
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()
        assert open(a.vocab_path).read() == open(b.vocab_path).read()

    def test_checkpoint_config_mismatch(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path)
        path = str(tmp_path / "s1.json")
        save_checkpoint(s1.store, {"encoder": dataclasses.asdict(cfg.encoder()), "stage": "stage1", "seed": 5}, path)
        other = tiny_cfg(tmp_path, d=32)
        with pytest.raises((ConfigurationError, CheckpointError)):
            run_stage2(other, path)

    def test_prompt_chunk_mismatch(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path)
        dataset = gen_trajectory_dataset(count=3, subpaths_range=(2, 3), viewpoints_range=(3, 5), seed=0,
                                         feature_dim=cfg.feature_dim)
        dataset[1].sub_instructions.append("turn left")
        with pytest.raises(AlignmentError):
            run_stage2(cfg, s1.store, dataset=dataset, write_outputs=False)

    def test_joint_prompt_tuning_trains_prompts(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path, joint_prompt_tuning=True, stage2_epochs=1)
        before = s1.store["visual.prompt.0"].data.copy()
        result = run_stage2(cfg, s1.store, write_outputs=False)
        assert "visual.prompt.0" not in result.store.frozen
        assert not np.array_equal(result.store["visual.prompt.0"].data, before)
        # the backbone itself stays frozen even when prompts train jointly
        assert "visual.layer0.attn.wq" in result.store.frozen

    def test_reverse_kl_flag_runs_and_composes(self, tmp_path):
        cfg, s1 = self._stage1(tmp_path, kl_reverse=True, stage2_epochs=1)
        result = run_stage2(cfg, s1.store)
        with open(result.csv_path) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            combined = cfg.lambda1 * float(row["l_ove"]) + cfg.lambda2 * float(row["l_cnt"]) + float(row["l_ind_sum"])
            assert abs(float(row["total"]) - combined) < 1e-12


class TestEvaluation:
    def test_untrained_checkpoint_near_chance(self):
        # M fixed at 4 -> chance is 0.25; allow +-0.1 over >=200 trajectories.
        cfg = RunConfig(seed=9, d=16, heads=2, ff_mult=2, visual_layers=2, text_layers=1,
                        cross_layers=1, prompt_count=2, prompt_layers=1, num_patches=2,
                        feature_dim=6, num_classes=3, max_text_len=32, max_viewpoints=10,
                        max_subpaths=6)
        enc = cfg.encoder()
        dataset = gen_trajectory_dataset(count=220, subpaths_range=(4, 4), viewpoints_range=(4, 8),
                                         seed=9, feature_dim=6)
        vocab = build_vocabulary(dataset, enc.max_subpaths)
        store = ParamStore()
        rng = np.random.default_rng(1234)
        from navprompt.encoders import init_cross_params, init_text_params

        init_visual_params(store, enc, rng)
        init_text_params(store, enc, len(vocab), rng)
        init_cross_params(store, enc, rng)
        metrics = evaluate_retrieval(store, enc, dataset, vocab)
        assert 0.15 <= metrics["subpair_accuracy"] <= 0.35

    def test_perfect_features_upper_bound(self):
        rng = np.random.default_rng(0)
        feats = []
        count_candidates = rng.normal(size=(6, 8))
        for m in (2, 3, 4):
            basis = rng.normal(size=(m, 8))
            feats.append(TrajectoryFeatures(
                text_feats=basis.copy(),
                visual_feats=basis.copy(),
                overall_text=basis.sum(axis=0),
                overall_visual=basis.sum(axis=0),
                count_feature=count_candidates[m - 1],
                m=m,
            ))
        metrics = retrieval_metrics(feats, count_candidates)
        assert metrics["subpair_accuracy"] == 1.0
        assert metrics["trajectory_accuracy"] == 1.0
        assert metrics["count_accuracy"] == 1.0

    def test_metrics_invariant_under_shuffling(self):
        rng = np.random.default_rng(1)
        feats = []
        for m in (2, 3, 2, 4, 3, 2):
            t = rng.normal(size=(m, 8))
            v = t + 0.05 * rng.normal(size=(m, 8))
            feats.append(TrajectoryFeatures(
                text_feats=t, visual_feats=v,
                overall_text=t.mean(axis=0), overall_visual=v.mean(axis=0),
                count_feature=None, m=m,
            ))
        base = retrieval_metrics(feats)
        for seed in range(3):
            order = np.random.default_rng(seed).permutation(len(feats))
            shuffled = retrieval_metrics([feats[i] for i in order])
            assert shuffled["subpair_accuracy"] == base["subpair_accuracy"]
            assert shuffled["trajectory_accuracy"] == base["trajectory_accuracy"]

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            retrieval_metrics([])


class TestConfigFile:
    def test_parse_and_coerce(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 3\nstage1_lr = 0.01\njoint_prompt_tuning = true\nablation = cnt_ind\n# comment\n")
        values = parse_config_file(str(path))
        assert values == {"seed": 3, "stage1_lr": 0.01, "joint_prompt_tuning": True, "ablation": "cnt_ind"}

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("mystery = 1\n")
        with pytest.raises(ParameterError):
            parse_config_file(str(path))

    def test_validation_ranges(self):
        with pytest.raises(ParameterError):
            RunConfig(val_fraction=1.5).validate()
        with pytest.raises(ParameterError):
            RunConfig(ablation="everything").validate()
