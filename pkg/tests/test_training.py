"""Loss, optimizer, schedules, and the epoch loop.

Loss oracles come from the definition: mean binary cross entropy plus one
minus the smoothed per-sample Jaccard ratio, so a uniform 0.5 map against an
all-ones 10x10 target costs ln 2 + 1 - 51/101 exactly.
"""

import math

import numpy as np
import pytest

from blastoseg.data.dataset import SamplePair
from blastoseg.errors import (
    ConfigurationError,
    DimensionError,
    TrainingDiverged,
    ValidationError,
)
from blastoseg.models import build_model
from blastoseg.training import (
    Adam,
    EarlyStopper,
    PlateauScheduler,
    TrainConfig,
    _forward_loss,
    bce_jaccard_loss,
    train,
)


class TestLossValues:
    def test_perfect_prediction_is_nearly_free(self):
        t = np.zeros((1, 1, 8, 8), np.float32)
        t[0, 0, 2:5, 2:5] = 1.0
        loss, _ = bce_jaccard_loss(t.copy(), t)
        assert 0.0 <= loss < 1e-5

    def test_uniform_half_against_ones(self):
        p = np.full((1, 1, 10, 10), 0.5, np.float64)
        t = np.ones((1, 1, 10, 10), np.float64)
        loss, _ = bce_jaccard_loss(p, t, epsilon=1.0)
        # bce = ln 2; intersection 50, union 100 -> jaccard term 1 - 51/101
        expected = math.log(2.0) + 1.0 - 51.0 / 101.0
        assert abs(loss - expected) < 1e-12

    def test_batch_is_averaged_per_sample(self):
        p = np.full((2, 1, 10, 10), 0.5, np.float64)
        t = np.ones((2, 1, 10, 10), np.float64)
        loss, _ = bce_jaccard_loss(p, t, epsilon=1.0)
        expected = math.log(2.0) + 1.0 - 51.0 / 101.0
        assert abs(loss - expected) < 1e-12

    def test_worse_overlap_costs_more(self):
        t = np.zeros((1, 1, 8, 8), np.float32)
        t[0, 0, :4] = 1.0
        good = np.clip(t + 0.1 * (1 - 2 * t), 0, 1)
        bad = np.clip(t + 0.4 * (1 - 2 * t), 0, 1)
        assert bce_jaccard_loss(good, t)[0] < bce_jaccard_loss(bad, t)[0]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bce_jaccard_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))

    def test_non_binary_target(self):
        with pytest.raises(ValidationError):
            bce_jaccard_loss(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.5))

    def test_saturated_predictions_stay_finite(self):
        p = np.zeros((1, 1, 4, 4), np.float64)
        t = np.zeros((1, 1, 4, 4), np.float64)
        loss, grad = bce_jaccard_loss(p, t)
        assert math.isfinite(loss)
        assert np.all(np.isfinite(grad))
        p = np.ones((1, 1, 4, 4), np.float64)
        t = np.ones((1, 1, 4, 4), np.float64)
        loss, grad = bce_jaccard_loss(p, t)
        assert math.isfinite(loss)
        assert np.all(np.isfinite(grad))


class TestLossGradient:
    @pytest.mark.parametrize("target_kind", ("mixed", "all_zero", "all_one"))
    def test_matches_central_differences(self, target_kind):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.05, 0.95, (2, 1, 5, 5))
        if target_kind == "mixed":
            t = (rng.random((2, 1, 5, 5)) > 0.5).astype(np.float64)
        elif target_kind == "all_zero":
            t = np.zeros((2, 1, 5, 5))
        else:
            t = np.ones((2, 1, 5, 5))
        _, grad = bce_jaccard_loss(p, t, epsilon=1.0)
        h = 1e-6
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = bce_jaccard_loss(p, t, epsilon=1.0)
            p[idx] = orig - h
            lm, _ = bce_jaccard_loss(p, t, epsilon=1.0)
            p[idx] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8))
        assert worst < 1e-4, f"max relative error {worst:.3e}"

    def test_gradient_zeroed_in_clamp_region(self):
        p = np.array([[[[0.0, 1.0], [0.5, 0.5]]]])
        t = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
        _, grad = bce_jaccard_loss(p, t, epsilon=1.0)
        # Jaccard still contributes, but the BCE part must not blow up.
        assert np.all(np.isfinite(grad))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        w = np.array([1.0, -2.0, 0.3], np.float64)
        opt = Adam({"w": w}, lr=1e-4)
        opt.step({"w": np.array([0.5, -3.0, 2.0])})
        moved = np.array([1.0, -2.0, 0.3]) - w
        np.testing.assert_allclose(moved, 1e-4 * np.sign([0.5, -3.0, 2.0]),
                                   rtol=1e-5)

    def test_zero_gradient_is_a_fixed_point(self):
        w = np.array([1.0, 2.0])
        opt = Adam({"w": w}, lr=1e-2)
        for _ in range(3):
            opt.step({"w": np.zeros(2)})
        np.testing.assert_array_equal(w, [1.0, 2.0])

    def test_updates_in_place(self):
        w = np.zeros(2, np.float32)
        opt = Adam({"w": w}, lr=1e-3)
        opt.step({"w": np.ones(2)})
        assert opt.params["w"] is w
        assert np.all(w != 0)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            w = np.array([0.5, -0.5])
            opt = Adam({"w": w}, lr=1e-3)
            for k in range(5):
                opt.step({"w": np.array([1.0 + k, -2.0])})
            runs.append(w.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_missing_gradient(self):
        opt = Adam({"w": np.zeros(2)})
        with pytest.raises(TrainingDiverged) as err:
            opt.step({"w": None})
        assert err.value.parameter == "w"

    def test_nan_gradient(self):
        opt = Adam({"w": np.zeros(2)})
        with pytest.raises(TrainingDiverged):
            opt.step({"w": np.array([1.0, np.nan])})

    def test_lr_override_per_step(self):
        w = np.zeros(1)
        opt = Adam({"w": w}, lr=1.0)
        opt.step({"w": np.ones(1)}, lr=1e-3)
        assert abs(w[0] + 1e-3) < 1e-8


class TestPlateauScheduler:
    def test_reduces_after_patience_stagnant_epochs(self):
        s = PlateauScheduler(1e-4, factor=0.95, patience=5)
        assert s.update(1.0) == 1e-4           # first call sets the best
        for _ in range(4):
            assert s.update(1.0) == 1e-4       # four stagnant epochs: no change
        assert s.update(1.0) == pytest.approx(9.5e-5)  # fifth triggers decay

    def test_improvement_resets_the_counter(self):
        s = PlateauScheduler(1e-4, factor=0.95, patience=5)
        s.update(1.0)
        for _ in range(4):
            s.update(1.0)
        s.update(0.5)                          # improvement, counter back to 0
        for _ in range(4):
            assert s.update(0.5) == 1e-4
        assert s.update(0.5) == pytest.approx(9.5e-5)

    def test_floor_at_min_lr(self):
        s = PlateauScheduler(1.05e-6, factor=0.5, patience=1, min_lr=1e-6)
        s.update(1.0)
        assert s.update(1.0) == 1e-6
        assert s.update(1.0) == 1e-6

    def test_counter_resets_after_reduction(self):
        s = PlateauScheduler(1e-4, factor=0.95, patience=2)
        s.update(1.0)
        s.update(1.0)
        assert s.update(1.0) == pytest.approx(9.5e-5)
        assert s.update(1.0) == pytest.approx(9.5e-5)   # wait 1 after reset
        assert s.update(1.0) == pytest.approx(9.025e-5)

    def test_tiny_improvement_below_threshold_counts_as_stagnant(self):
        s = PlateauScheduler(1e-4, factor=0.95, patience=2, threshold=1e-3)
        s.update(1.0)
        s.update(1.0 - 1e-4)
        assert s.update(1.0 - 2e-4) == pytest.approx(9.5e-5)


class TestEarlyStopper:
    def test_stops_after_patience(self):
        st = EarlyStopper(patience=15)
        assert st.update(1.0) is False
        for _ in range(14):
            assert st.update(1.0) is False
        assert st.update(1.0) is True
        assert st.best_epoch == 1

    def test_improvement_at_fourteen_keeps_going(self):
        st = EarlyStopper(patience=15)
        st.update(1.0)
        for _ in range(14):
            assert st.update(1.0) is False
        assert st.update(0.5) is False          # improvement on the brink
        assert st.best_epoch == 16
        for _ in range(14):
            assert st.update(0.5) is False
        assert st.update(0.5) is True


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 16
        assert cfg.max_epochs == 200
        assert cfg.initial_lr == 1e-4
        assert cfg.lr_factor == 0.95
        assert cfg.lr_patience == 5
        assert cfg.early_stop_patience == 15

    @pytest.mark.parametrize("bad", [
        {"batch_size": 0},
        {"max_epochs": 0},
        {"lr_factor": 1.0},
        {"lr_factor": 0.0},
        {"min_lr": 1.0, "initial_lr": 1e-4},
        {"lr_patience": 0},
        {"early_stop_patience": 0},
        {"dropout_rate": 1.0},
        {"dropout_rate": -0.1},
    ])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)

    def test_text_roundtrip_preserves_types(self):
        cfg = TrainConfig(batch_size=4, max_epochs=7, initial_lr=3e-4, seed=9)
        back = TrainConfig.from_text(cfg.to_text())
        assert back == cfg
        assert isinstance(back.batch_size, int)
        assert isinstance(back.initial_lr, float)

    def test_from_text_comments_and_blanks(self):
        cfg = TrainConfig.from_text(
            "# recipe\n\nbatch_size = 2   # small\nmax_epochs = 3\n")
        assert cfg.batch_size == 2 and cfg.max_epochs == 3

    def test_from_text_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown key"):
            TrainConfig.from_text("momentum = 0.9\n")

    def test_from_text_bad_value(self):
        with pytest.raises(ConfigurationError, match="bad value"):
            TrainConfig.from_text("batch_size = lots\n")

    def test_from_text_missing_equals(self):
        with pytest.raises(ConfigurationError, match="key = value"):
            TrainConfig.from_text("batch_size 4\n")

    def test_replace_ignores_none(self):
        cfg = TrainConfig(batch_size=4)
        other = cfg.replace(batch_size=None, max_epochs=9)
        assert other.batch_size == 4 and other.max_epochs == 9


def disk_pairs(n, size=16, seed=0):
    """Bright disks on a dark noisy field; the mask is the disk."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = np.zeros((size, size), np.uint8)
        r = int(rng.integers(3, 6))
        cy, cx = (int(v) for v in rng.integers(5, size - 5, 2))
        yy, xx = np.ogrid[:size, :size]
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[inside] = 255
        img = np.full((size, size), 40, np.float64)
        img[inside] = 180
        img += rng.normal(0.0, 5.0, (size, size))
        out.append(SamplePair(np.clip(img, 0, 255).astype(np.uint8),
                              mask, f"s{i}", 0))
    return out


def tiny_model(seed=0):
    return build_model("unet", base_filters=4, input_shape=16, seed=seed,
                       dropout_rate=0.0)


class TestTrainLoop:
    def test_empty_sets_rejected(self):
        pairs = disk_pairs(2)
        cfg = TrainConfig(batch_size=2, max_epochs=1)
        with pytest.raises(ConfigurationError):
            train(tiny_model(), [], pairs, cfg)
        with pytest.raises(ConfigurationError):
            train(tiny_model(), pairs, [], cfg)

    def test_single_epoch_bookkeeping(self):
        pairs = disk_pairs(5)
        cfg = TrainConfig(batch_size=2, max_epochs=1, dropout_rate=0.0)
        _, hist = train(tiny_model(), pairs, pairs, cfg)
        assert len(hist.records) == 1
        assert hist.records[0].epoch == 1
        assert hist.records[0].lr == cfg.initial_lr
        assert hist.stop_reason == "max_epochs"
        assert hist.best_epoch == 1
        assert 0.0 <= hist.records[0].val_jaccard <= 1.0

    def test_learns_the_disks(self):
        pairs = disk_pairs(8)
        model = tiny_model()
        before, _ = _forward_loss(model, pairs, 8, 1.0)
        cfg = TrainConfig(batch_size=8, max_epochs=30, initial_lr=3e-3,
                          seed=0, dropout_rate=0.0)
        model, hist = train(model, pairs, pairs, cfg)
        assert hist.best_val_loss < before
        assert hist.best_val_jaccard > 0.5

    def test_restores_best_epoch_weights(self):
        pairs = disk_pairs(8)
        # Deliberately unstable learning rate so later epochs get worse.
        cfg = TrainConfig(batch_size=8, max_epochs=8, initial_lr=5e-2,
                          seed=0, dropout_rate=0.0)
        model, hist = train(tiny_model(), pairs, pairs, cfg)
        assert hist.best_epoch < len(hist.records)
        recomputed, _ = _forward_loss(model, pairs, 8, 1.0)
        assert recomputed == hist.best_val_loss

    def test_training_is_deterministic(self):
        pairs = disk_pairs(6)
        cfg = TrainConfig(batch_size=4, max_epochs=3, seed=1, dropout_rate=0.05)
        outputs = []
        for _ in range(2):
            model, hist = train(tiny_model(seed=2), pairs, pairs, cfg)
            outputs.append((hist.to_csv(),
                            {k: v.copy() for k, v in model.state_arrays().items()}))
        assert outputs[0][0] == outputs[1][0]
        for name in outputs[0][1]:
            np.testing.assert_array_equal(outputs[0][1][name], outputs[1][1][name])

    def test_nan_weight_aborts_with_location(self):
        pairs = disk_pairs(4)
        model = tiny_model()
        dict(model.named_params())["head.w"][0, 0, 0, 0] = np.nan
        cfg = TrainConfig(batch_size=4, max_epochs=2, dropout_rate=0.0)
        with pytest.raises(TrainingDiverged) as err:
            train(model, pairs, pairs, cfg)
        assert err.value.epoch == 1
        assert err.value.batch == 0

    def test_augment_fn_sees_derived_seeds(self):
        pairs = disk_pairs(4)
        cfg = TrainConfig(batch_size=2, max_epochs=2, dropout_rate=0.0, seed=3)
        seen = []

        def recorder(pair, seed):
            seen.append(seed)
            return pair

        train(tiny_model(), pairs, pairs, cfg, augment_fn=recorder)
        assert len(seen) == len(pairs) * 2
        assert len(set(seen)) > 1

        repeat = []
        train(tiny_model(), pairs, pairs, cfg,
              augment_fn=lambda pair, seed: (repeat.append(seed), pair)[1])
        assert repeat == seen

    def test_history_csv_roundtrips_floats(self, tmp_path):
        pairs = disk_pairs(4)
        cfg = TrainConfig(batch_size=4, max_epochs=2, dropout_rate=0.0)
        _, hist = train(tiny_model(), pairs, pairs, cfg)
        path = tmp_path / "hist.csv"
        hist.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_jaccard,lr"
        assert len(lines) == 1 + len(hist.records)
        cells = lines[1].split(",")
        assert int(cells[0]) == 1
        assert float(cells[2]) == hist.records[0].val_loss

    def test_log_callback_sees_each_epoch(self):
        pairs = disk_pairs(4)
        cfg = TrainConfig(batch_size=4, max_epochs=3, dropout_rate=0.0)
        epochs = []
        train(tiny_model(), pairs, pairs, cfg, log=lambda r: epochs.append(r.epoch))
        assert epochs == [1, 2, 3]
