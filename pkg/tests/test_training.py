import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import SMALL_MODEL, constant_regressor, small_samples, uniform_sample
from switchcnn.ground_truth import PointSet
from switchcnn.neural import ParameterSnapshot, build_regressor, build_switch
from switchcnn.training import (
    STAGES, FixedRouter, OracleRouter, PatchSample, Plateau, RoutingLabels, TrainConfig,
    TrainLog, best_label, build_models, compute_labels, count_matrix, coupled_train,
    differential_epoch, differential_train, downsample_mask, ideal_mae, load_stage,
    make_patch_samples, make_switch_dataset, minimal_achievable_mae, parse_log_line, pretrain,
    route_all, run_pipeline, sample_counts, save_stage, switch_train, train_switch_epoch,
)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(T_p=0), dict(T_c=0), dict(plateau_patience=0),
                                    dict(balance="smote"), dict(finetune_lr=-1.0),
                                    dict(grad_clip=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestBestLabel:
    def test_cases(self):
        assert best_label((12, 9, 15), 10) == (1, 1.0)
        assert best_label((9, 11, 20), 10) == (0, 1.0)
        assert best_label((10, 3, 99), 10) == (0, 0.0)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            best_label((1.0, np.nan, 2.0), 1.0)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=5), st.floats(0, 100))
    def test_argmin(self, counts, gt):
        k, err = best_label(counts, gt)
        errs = [abs(c - gt) for c in counts]
        assert err == min(errs) and k == errs.index(min(errs))


class TestIdealMae:
    def test_hand_case(self):
        counts = np.array([[11, 12, 13], [14, 10, 16]], dtype=float)
        assert ideal_mae(counts, [10, 10]) == pytest.approx(0.5, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            ideal_mae(np.zeros((0, 3)), [])
        with pytest.raises(ValueError):
            minimal_achievable_mae([build_regressor("R3", 0)], [])

    def test_bounded_by_each_regressor(self):
        samples = small_samples(2)
        regs = [build_regressor(n, i, init_std=None) for i, n in enumerate(("R1", "R2", "R3"))]
        counts = count_matrix(regs, samples)
        gts = np.array([s.gt_count for s in samples])
        ideal = minimal_achievable_mae(regs, samples)
        assert all(ideal <= np.mean(np.abs(counts[:, k] - gts)) + 1e-12 for k in range(3))
        single = minimal_achievable_mae(regs[:1], samples)
        assert single == pytest.approx(np.mean(np.abs(counts[:, 0] - gts)), abs=1e-12)


class TestSamples:
    def test_patch_targets_sum_to_scene_count(self):
        samples = small_samples(3)
        assert len(samples) == 27
        for sid in {s.scene_id for s in samples}:
            mine = [s for s in samples if s.scene_id == sid]
            total = sum(len(s.points) for s in mine)
            assert sum(s.gt_count for s in mine) == pytest.approx(total, abs=1e-3 * max(1, total))
        assert all(s.target.shape == (4, 4) and s.pixels.shape == (16, 16) for s in samples)

    def test_roi_restricts_count(self):
        from switchcnn.dataset_io import Scene
        img = np.zeros((48, 48))
        roi = np.zeros((48, 48), bool)
        roi[:, :8] = True
        s = Scene(img, PointSet(np.array([[8.0, 4.0], [8.0, 12.0]]), 48, 48), "r", roi=roi)
        from switchcnn.ground_truth import KernelConfig
        samples = make_patch_samples([s], kernel=KernelConfig(mode="fixed", sigma_fixed=0.5))
        first = samples[0]
        assert first.gt_count == pytest.approx(1.0, abs=1e-3)

    def test_downsample_mask(self):
        m = np.zeros((8, 8), bool)
        m[2, 2] = m[6, 6] = True
        np.testing.assert_array_equal(downsample_mask(m), [[True, False], [False, True]])


class TestPlateau:
    def test_constant_error_stops_after_patience_plus_one(self):
        p = Plateau(patience=1, min_delta=0.1)
        assert not p.update(5.0)
        assert p.update(5.0)

    def test_pretrain_stops_on_constant_validation(self):
        s = uniform_sample()
        reg = constant_regressor("R3", 0.0)
        hist = pretrain([reg], [s], [s], TrainConfig(T_p=10, plateau_patience=1))
        assert len(hist) == 2

    def test_improvement_resets(self):
        p = Plateau(patience=2, min_delta=0.1)
        assert [p.update(v) for v in (5, 4, 3.95, 3.0, 3.0, 3.0)] == [False] * 5 + [True]


class TestPretrain:
    def test_loss_decreases_on_learnable_patch(self):
        s = uniform_sample(density=0.3)
        reg = build_regressor("R3", 0, init_std=None)
        hist = pretrain([reg], [s] * 4, [s], TrainConfig(T_p=3, lr=1e-3, plateau_patience=10))
        losses = [h["train_loss"] for h in hist]
        assert losses[0] > losses[1] > losses[2]

    def test_deterministic(self):
        samples = small_samples(1)
        runs = []
        for _ in range(2):
            m = build_models(SMALL_MODEL, seed=3)
            runs.append([h["train_loss"] for h in pretrain(m.regressors, samples, samples[:3],
                                                           TrainConfig(T_p=2, lr=1e-4))])
        assert runs[0] == runs[1]

    def test_empty(self):
        with pytest.raises(ValueError):
            pretrain([build_regressor("R3", 0)], [], [uniform_sample()], TrainConfig())


class TestDifferential:
    def test_one_patch_updates_one_regressor(self):
        s = uniform_sample(density=0.2)
        regs = [constant_regressor(n, v) for n, v in zip(("R1", "R2", "R3"), (0.1, 0.15, 0.5))]
        for _ in range(3):
            before = [ParameterSnapshot.of(r) for r in regs]
            _, chosen = differential_epoch(regs, [s], [0], TrainConfig(lr=1e-3))
            changed = [not b.equals(ParameterSnapshot.of(r)) for b, r in zip(before, regs)]
            assert changed == [k == chosen[0] for k in range(3)]

    def test_matching_regressor_claims_its_regime(self):
        samples = small_samples(8, seed=1)
        by_regime = {g: np.mean([s.gt_count for s in samples if s.regime == g]) for g in range(3)}
        # each regressor predicts one regime's mean count everywhere
        regs = [constant_regressor(n, by_regime[g] / 16.0)
                for n, g in zip(("R1", "R2", "R3"), range(3))]
        labels, _ = differential_train(regs, samples, samples[:9],
                                       TrainConfig(T_d=2, lr=1e-6, plateau_patience=5))
        for g in range(3):
            mine = labels.labels[[s.regime == g for s in samples]]
            assert np.mean(mine == g) >= 0.8

    def test_finetune_lr_applies_after_pretraining(self):
        samples = small_samples(1)
        cfg = TrainConfig(T_p=1, T_d=1, lr=1e-4, finetune_lr=0.0)
        regs = build_models(SMALL_MODEL, seed=2).regressors
        before = [ParameterSnapshot.of(r) for r in regs]
        pretrain(regs, samples, samples, cfg)
        assert not any(b.equals(ParameterSnapshot.of(r)) for b, r in zip(before, regs))
        before = [ParameterSnapshot.of(r) for r in regs]
        differential_train(regs, samples, samples, cfg)
        assert all(b.equals(ParameterSnapshot.of(r)) for b, r in zip(before, regs))

    def test_oracle_router_matches_argmin(self):
        samples = small_samples(1)
        cfg = TrainConfig(lr=1e-4)
        a = build_models(SMALL_MODEL, seed=1).regressors
        b = build_models(SMALL_MODEL, seed=1).regressors
        order = np.arange(len(samples))
        _, ca = differential_epoch(a, samples, order, cfg)
        _, cb = differential_epoch(b, samples, order, cfg, router=OracleRouter(b))
        assert np.array_equal(ca, cb)
        assert all(ParameterSnapshot.of(x).equals(ParameterSnapshot.of(y)) for x, y in zip(a, b))


class TestBalancing:
    def test_oversample(self):
        labels = np.repeat([0, 1, 2], [100, 40, 60])
        bal = make_switch_dataset(labels, seed=0)
        assert np.bincount(bal[:, 1]).tolist() == [100, 100, 100]
        for k in range(3):
            assert set(bal[bal[:, 1] == k, 0]) == set(np.flatnonzero(labels == k))
            assert (labels[bal[bal[:, 1] == k, 0]] == k).all()

    def test_equal_unchanged(self):
        labels = np.repeat([0, 1, 2], 50)
        bal = make_switch_dataset(labels, seed=0)
        assert sorted(bal[:, 0].tolist()) == list(range(150))

    def test_deterministic_and_undersample(self):
        labels = np.random.default_rng(0).integers(0, 3, 90)
        assert np.array_equal(make_switch_dataset(labels, 4), make_switch_dataset(labels, 4))
        under = make_switch_dataset(labels, 4, mode="undersample")
        assert len(set(np.bincount(under[:, 1]))) == 1
        assert np.bincount(under[:, 1])[0] == np.bincount(labels).min()

    def test_empty_class_named(self):
        with pytest.raises(ValueError, match="class 1"):
            make_switch_dataset(np.array([0, 0, 2]), seed=0)

    @given(st.lists(st.integers(1, 40), min_size=2, max_size=4), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_equal_counts(self, sizes, seed):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        bal = make_switch_dataset(labels, seed, num_classes=len(sizes))
        assert len(set(np.bincount(bal[:, 1]).tolist())) == 1


def _flat_patches(levels, n=12, size=16):
    out = []
    for k, level in enumerate(levels):
        for i in range(n):
            rng = np.random.default_rng(100 * k + i)
            px = np.clip(level + 0.05 * rng.standard_normal((size, size)), 0, 1).astype(np.float32)
            s = uniform_sample(key=(f"c{k}", (i // 3, i % 3)))
            s.pixels = px
            out.append(s)
    return out


class TestSwitchTraining:
    def test_separable_classes(self):
        samples = _flat_patches((0.1, 0.5, 0.9))
        labels = np.repeat([0, 1, 2], 12)
        sw = build_switch("cnn_small", seed=0, input_size=16, width=0.125, hidden=16)
        cfg = TrainConfig(switch_lr=0.01, switch_momentum=0.9)
        bal = make_switch_dataset(labels, 0)
        accs = [train_switch_epoch(sw, samples, bal, cfg, epoch=e) for e in range(10)]
        routed = route_all(sw, samples)
        assert max(accs) > 0.9 or np.mean(routed == labels) > 0.9

    def test_constant_label(self):
        samples = _flat_patches((0.3,))
        sw = build_switch("cnn_small", seed=0, input_size=16, width=0.125, hidden=16, num_classes=1)
        bal = np.stack([np.arange(12), np.zeros(12, int)], axis=1)
        assert train_switch_epoch(sw, samples, bal, TrainConfig(switch_lr=0.01)) == 1.0

    def test_lr_zero(self):
        samples = _flat_patches((0.1, 0.5, 0.9), n=3)
        sw = build_switch("cnn_small", seed=0, input_size=16, width=0.125, hidden=16)
        before = ParameterSnapshot.of(sw)
        bal = make_switch_dataset(np.repeat([0, 1, 2], 3), 0)
        initial = np.mean(route_all(sw, [samples[i] for i in bal[:, 0]]) == bal[:, 1])
        acc = train_switch_epoch(sw, samples, bal, TrainConfig(switch_lr=0.0))
        assert before.equals(ParameterSnapshot.of(sw)) and acc == pytest.approx(initial)

    def test_empty_class_is_skipped_and_logged(self):
        samples = _flat_patches((0.1, 0.9), n=4)
        sw = build_switch("cnn_small", seed=0, input_size=16, width=0.125, hidden=16)
        regs = [constant_regressor(n, 0.0) for n in ("R1", "R2", "R3")]
        log = TrainLog()
        labels = RoutingLabels(np.repeat([0, 2], 4), np.zeros(8))
        switch_train(regs, sw, samples, samples, labels, TrainConfig(), 1, log)
        assert {"stage": "switch", "epoch": 1, "empty_classes": "1"} in log.records

    def test_switch_train_leaves_regressors(self):
        samples = small_samples(1)
        m = build_models(SMALL_MODEL, seed=0)
        before = [ParameterSnapshot.of(r) for r in m.regressors]
        labels = RoutingLabels(np.arange(len(samples)) % 3, np.zeros(len(samples)))
        switch_train(m.regressors, m.switch, samples, samples[:3], labels, TrainConfig(), 1)
        assert all(b.equals(ParameterSnapshot.of(r)) for b, r in zip(before, m.regressors))


class TestCoupled:
    def test_stage_order_and_single_updates(self):
        samples = small_samples(2)
        m = build_models(SMALL_MODEL, seed=0)
        events = []
        snaps = {}

        def on_step(stage, epoch, i, k):
            now = [ParameterSnapshot.of(r) for r in m.regressors]
            changed = [not a.equals(b) for a, b in zip(snaps["prev"], now)]
            assert changed == [j == k for j in range(3)]
            snaps["prev"] = now

        def on_stage(name, epoch):
            events.append((name, epoch))
            snaps["prev"] = [ParameterSnapshot.of(r) for r in m.regressors]

        coupled_train(m.regressors, m.switch, samples, samples[:3],
                      TrainConfig(T_c=2, lr=1e-5, plateau_patience=5), on_stage=on_stage,
                      on_step=on_step)
        assert events == [("relabel", 1), ("switch", 1), ("switched_differential", 1),
                          ("relabel", 2), ("switch", 2), ("switched_differential", 2)]

    def test_oracle_switch_reduces_to_differential(self):
        samples = small_samples(1)
        cfg = TrainConfig(lr=1e-4)
        a = build_models(SMALL_MODEL, seed=2).regressors
        b = build_models(SMALL_MODEL, seed=2).regressors
        order = np.random.default_rng(0).permutation(len(samples))
        labels = compute_labels(b, samples).labels
        # a frozen switch that reproduces the labels computed before the epoch
        differential_epoch(a, samples, order, cfg, router=FixedRouter(samples, labels))
        ref = [ParameterSnapshot.of(r) for r in a]
        differential_epoch(b, samples, order, cfg, router=FixedRouter(samples, labels))
        assert all(x.equals(ParameterSnapshot.of(y)) for x, y in zip(ref, b))


class TestPipeline:
    def test_stages_and_checkpoints(self, tmp_path):
        samples = small_samples(3)
        cfg = TrainConfig(T_p=1, T_d=1, T_c=1, lr=1e-4)
        log = TrainLog(tmp_path / "log.tsv")
        m = run_pipeline(samples, samples[:9], cfg, SMALL_MODEL, out_dir=tmp_path / "ck", log=log)
        for stage in STAGES:
            assert (tmp_path / "ck" / stage / "state.json").exists()
        back = load_stage(tmp_path / "ck" / "coupled")
        for a, b in zip(m.regressors, back.regressors):
            assert ParameterSnapshot.of(a).equals(ParameterSnapshot.of(b))
        lines = (tmp_path / "log.tsv").read_text().splitlines()
        stages = {parse_log_line(line)["stage"] for line in lines}
        assert stages == {"pretrain", "differential", "switch", "coupled"}

    def test_resume_matches_uninterrupted(self, tmp_path):
        samples = small_samples(2)
        cfg = TrainConfig(T_p=1, T_d=1, T_c=1, lr=1e-4)
        full = run_pipeline(samples, samples[:9], cfg, SMALL_MODEL, out_dir=tmp_path / "a")
        resumed = run_pipeline(samples, samples[:9], cfg, SMALL_MODEL,
                               start=load_stage(tmp_path / "a" / "differential"),
                               start_after="differential")
        for a, b in zip(full.regressors + [full.switch], resumed.regressors + [resumed.switch]):
            assert ParameterSnapshot.of(a).equals(ParameterSnapshot.of(b))

    def test_single_regressor_has_no_switch(self):
        from dataclasses import replace
        samples = small_samples(1)
        m = run_pipeline(samples, samples[:3], TrainConfig(T_p=1), replace(SMALL_MODEL, regressors=("R2",)))
        assert m.switch is None and m.router.route_one(samples[0]) == 0

    def test_save_load_labels(self, tmp_path):
        m = build_models(SMALL_MODEL, seed=0)
        m.labels = RoutingLabels(np.array([0, 2, 1]), np.array([0.5, 0.25, 1.0]))
        back = load_stage(save_stage(m, tmp_path / "s", "differential"))
        assert back.labels.labels.tolist() == [0, 2, 1]
        with pytest.raises(FileNotFoundError):
            load_stage(tmp_path / "missing")

    def test_stop_after(self, tmp_path):
        samples = small_samples(2)
        cfg = TrainConfig(T_p=1, T_d=1, T_c=1, lr=1e-4)
        run_pipeline(samples, samples[:9], cfg, SMALL_MODEL, out_dir=tmp_path, stop_after="differential")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["differential", "pretrain"]

    def test_failed_save_leaves_no_checkpoint(self, tmp_path, monkeypatch):
        import switchcnn.neural as neural
        m = build_models(SMALL_MODEL, seed=0)

        def boom(*a, **k):
            raise OSError("disk full")
        monkeypatch.setattr(neural, "save_model", boom)
        with pytest.raises(OSError):
            save_stage(m, tmp_path / "s", "pretrain")
        assert list(tmp_path.iterdir()) == []
