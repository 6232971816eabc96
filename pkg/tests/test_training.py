"""Trainer: config round-trips, schedule, checkpointing, resume, evaluation."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from jamlab import config as config_mod
from jamlab import datafiles, training
from jamlab.checkpoint import load_checkpoint, save_checkpoint
from jamlab.config import ExperimentConfig, OptimizerConfig, config_hash
from jamlab.model import VerificationModel


class TestConfig:
    def test_json_roundtrip_lossless(self, tmp_path):
        cfg = tiny_config(enable_je=False, je_mode="pairwise-literal")
        path = tmp_path / "c.json"
        config_mod.save_config(path, cfg)
        again = config_mod.load_config(path)
        assert again == cfg
        assert config_mod.to_json(again) == config_mod.to_json(cfg)

    def test_hash_changes_with_content(self):
        a = tiny_config()
        b = tiny_config(seed=6)
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(tiny_config())

    def test_je_requires_jam(self):
        with pytest.raises(ValueError, match="requires the attention"):
            tiny_config(enable_jam=False, enable_je=True)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            config_mod.from_dict({"learning_rate_typo": 1})

    def test_missing_file_reports_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.json"):
            config_mod.load_config(tmp_path / "nope.json")


class TestSchedule:
    def test_milestone_decay_steps(self):
        opt = OptimizerConfig(learning_rate=0.001, milestones=(8, 12, 14), decay=0.1)
        assert opt.lr_at(1) == 0.001
        assert opt.lr_at(7) == 0.001
        np.testing.assert_allclose(opt.lr_at(8), 1e-4)  # drops exactly at 8
        np.testing.assert_allclose(opt.lr_at(9), 1e-4)
        np.testing.assert_allclose(opt.lr_at(12), 1e-5)
        np.testing.assert_allclose(opt.lr_at(14), 1e-6)
        np.testing.assert_allclose(opt.lr_at(30), 1e-6)

    def test_schedule_is_right_continuous_step(self):
        opt = OptimizerConfig(learning_rate=1.0, milestones=(3,), decay=0.5)
        values = [opt.lr_at(e) for e in range(1, 7)]
        assert values == [1.0, 1.0, 0.5, 0.5, 0.5, 0.5]


class TestCheckpointFormat:
    def test_bitwise_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "w": rng.normal(size=(3, 4)),
            "scalar": np.asarray(0.25),
            "b": rng.normal(size=7),
        }
        meta = {"epoch": 3, "note": "x"}
        path = tmp_path / "c.bin"
        save_checkpoint(path, arrays, meta)
        loaded, got_meta = load_checkpoint(path)
        assert got_meta == meta
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].shape == arrays[k].shape

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "gone.bin")


class TestFoldSplits:
    def test_disjoint_eval_sets(self):
        cfg = tiny_config(folds=2)
        ids = list(range(8))
        evals = []
        for fold in range(2):
            train, val, ev = training.fold_identity_split(cfg, ids, fold)
            assert not (train & ev) and not (val & ev) and not (train & val)
            evals.append(ev)
        assert not (evals[0] & evals[1])

    def test_too_few_identities_rejected(self):
        cfg = tiny_config(folds=2)
        with pytest.raises(ValueError, match="too few identities"):
            training.fold_identity_split(cfg, [0, 1, 2], 0)
        with pytest.raises(ValueError, match="out of range"):
            training.fold_identity_split(cfg, list(range(8)), 2)

    def test_manifest_split_respects_dataset(self, tiny_dataset):
        cfg, data = tiny_dataset
        rows = training.load_rows(data)
        train, val, ev = training.manifest_identity_split(cfg, rows)
        manifest_eval = {r.identity for r in rows if r.split == "eval"}
        assert ev == manifest_eval
        assert (train | val) == {r.identity for r in rows if r.split == "train"}


class TestTrainEvaluate:
    @pytest.fixture(scope="class")
    def trained(self, tiny_dataset, tmp_path_factory):
        cfg, data = tiny_dataset
        out = tmp_path_factory.mktemp("run")
        result = training.train_fold(cfg, data, out, fold=0)
        return cfg, data, out, result

    def test_metrics_log_one_record_per_epoch(self, trained):
        cfg, data, out, result = trained
        records = [json.loads(l) for l in open(out / "metrics.jsonl")]
        assert [r["epoch"] for r in records] == list(range(1, result.epochs_run + 1))
        assert all("val_tar" in r and "lr" in r for r in records)

    def test_checkpoints_written(self, trained):
        _, _, out, _ = trained
        assert (out / "checkpoint_best.bin").exists()
        assert (out / "checkpoint_last.bin").exists()

    def test_resume_equivalence(self, tiny_dataset, tmp_path):
        # 3 straight epochs == 2 epochs + checkpoint + 1 resumed epoch
        cfg, data = tiny_dataset
        full = training.train_fold(cfg, data, tmp_path / "full", fold=0)
        short_cfg = tiny_config(max_epochs=2)
        training.train_fold(short_cfg, data, tmp_path / "part", fold=0)
        resumed = training.train_fold(
            cfg, data, tmp_path / "part2", fold=0,
            resume=tmp_path / "part" / "checkpoint_last.bin",
        )
        a, _ = load_checkpoint(tmp_path / "full" / "checkpoint_last.bin")
        b, _ = load_checkpoint(tmp_path / "part2" / "checkpoint_last.bin")
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], atol=1e-9)

    def test_resume_rejects_other_config(self, tiny_dataset, tmp_path):
        cfg, data = tiny_dataset
        training.train_fold(tiny_config(max_epochs=1), data, tmp_path / "r", fold=0)
        with pytest.raises(ValueError, match="config hash"):
            training.train_fold(
                tiny_config(max_epochs=1, seed=99), data, tmp_path / "r2", fold=0,
                resume=tmp_path / "r" / "checkpoint_last.bin",
            )

    def test_evaluate_produces_report(self, trained, tmp_path):
        cfg, data, out, result = trained
        report = training.evaluate_checkpoint(
            cfg, out / "checkpoint_best.bin", data, tmp_path / "eval"
        )
        assert 0 <= report.average_tar <= 100
        assert (tmp_path / "eval" / "report.json").exists()
        assert (tmp_path / "eval" / "curve.csv").exists()

    def test_evaluate_never_touches_clouds(self, trained):
        cfg, data, out, _ = trained
        with datafiles.recording_file_access() as log:
            training.evaluate_checkpoint(cfg, out / "checkpoint_best.bin", data)
        assert log, "no file access recorded"
        assert not [p for p in log if p.endswith(".cld")]

    def test_evaluate_survives_missing_3d_params(self, trained, tmp_path):
        cfg, data, out, _ = trained
        arrays, meta = load_checkpoint(out / "checkpoint_best.bin")
        report_full = training.evaluate_checkpoint(cfg, out / "checkpoint_best.bin", data)
        pruned = {
            k: v for k, v in arrays.items()
            if not (k.startswith("enc3d") or k.startswith("head3d")
                    or k.startswith("opt.enc3d"))
        }
        path = tmp_path / "pruned.bin"
        save_checkpoint(path, pruned, meta)
        report_pruned = training.evaluate_checkpoint(cfg, path, data)
        assert report_pruned.as_dict() == report_full.as_dict()

    def test_export_embeddings_roundtrip(self, trained, tmp_path):
        from jamlab import verification

        cfg, data, out, _ = trained
        gpath, ppath = training.export_embeddings(
            cfg, out / "checkpoint_best.bin", data, tmp_path / "emb"
        )
        gids, gbins, gemb = verification.read_embeddings(gpath)
        pids, pbins, pemb = verification.read_embeddings(ppath)
        scores = verification.cosine_scores(gemb, gids, pemb, pids, pbins,
                                            fusion=cfg.gallery_fusion)
        report = verification.pose_binned_report(scores, average=cfg.average_mode)
        direct = training.evaluate_checkpoint(cfg, out / "checkpoint_best.bin", data)
        assert report.average_tar == direct.average_tar
        assert report.tar_by_bin == direct.tar_by_bin

    def test_divergence_aborts_with_step(self, tiny_dataset, tmp_path):
        cfg, data = tiny_dataset
        bad = tiny_config(optimizer=OptimizerConfig(learning_rate=1e9, momentum=0.99))
        with pytest.raises(training.TrainingDiverged, match="epoch"):
            training.train_fold(bad, data, tmp_path / "diverge", fold=0)


class TestDeterminism:
    def test_fixed_seed_reproduces_metrics(self, tiny_dataset, tmp_path):
        cfg, data = tiny_dataset
        r1 = training.train_fold(cfg, data, tmp_path / "d1", fold=0)
        r2 = training.train_fold(cfg, data, tmp_path / "d2", fold=0)
        assert r1.report.as_dict() == r2.report.as_dict()
        h1 = [json.loads(l) for l in open(tmp_path / "d1" / "metrics.jsonl")]
        h2 = [json.loads(l) for l in open(tmp_path / "d2" / "metrics.jsonl")]
        assert h1 == h2

    def test_loss_trajectory_identical(self, tiny_dataset, tmp_path):
        cfg, data = tiny_dataset
        traces = []
        for tag in ("a", "b"):
            hist = []
            training.train_fold(
                cfg, data, tmp_path / tag, fold=0,
                log_fn=lambda r: hist.append(r["loss"]),
            )
            traces.append(hist)
        np.testing.assert_allclose(traces[0], traces[1], atol=1e-12)


class TestAggregation:
    def test_aggregate_mean_and_std(self):
        from jamlab.verification import VerificationReport

        bins = ("0-10", "10-30", "30-60", "60-90", "90+")
        r1 = VerificationReport({b: 10.0 for b in bins}, 10.0, 80.0, 20.0, fold=0)
        r2 = VerificationReport({b: 20.0 for b in bins}, 20.0, 90.0, 10.0, fold=1)
        agg = training.aggregate_reports([r1, r2])
        assert agg.mean.average_tar == 15.0
        assert agg.std["average_tar"] == 5.0
        assert agg.mean.tar_by_bin["0-10"] == 15.0

    def test_single_fold_aggregate_is_identity(self):
        from jamlab.verification import VerificationReport

        bins = ("0-10", "10-30", "30-60", "60-90", "90+")
        r = VerificationReport({b: 33.0 for b in bins}, 33.0, 70.0, 30.0)
        agg = training.aggregate_reports([r])
        assert agg.mean.average_tar == 33.0
        assert agg.std["average_tar"] == 0.0
