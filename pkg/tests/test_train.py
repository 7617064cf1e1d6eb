import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cerd import tensor as T
from cerd.data_io import Standardizer
from cerd.errors import CompatibilityError, ConfigurationError, LabelError, ParameterError, TrainingDivergenceError
from cerd.metrics import macro_ovr_auc
from cerd.model import CERDModel, TrainConfig, desk_config
from cerd.synth import SyntheticSpec, generate
from cerd.tensor import Tensor, parameter
from cerd.train import (
    VARIANTS,
    Adam,
    Checkpoint,
    adam_step,
    attribute,
    cross_entropy,
    evaluate,
    evaluate_model,
    reconstruction_errors,
    run_ablation,
    run_training,
    total_loss,
)

TINY = dict(hidden=8, tokens=2, experts=4, top_k=2, heads=2, epochs=2, warmup_epochs=1, lr=1e-3)


class TestLoss:
    def test_lambda_zero_is_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(4, 3)))
        labels = np.array([0, 2, 1, 1])
        assert total_loss(logits, labels, Tensor(5.0), 0.0).data == cross_entropy(logits, labels).data

    def test_confident_correct(self):
        logits = Tensor([[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]])
        assert cross_entropy(logits, [0, 2]).data < 1e-20

    def test_uniform(self):
        assert cross_entropy(Tensor(np.zeros((5, 3))), [0, 1, 2, 0, 1]).data == pytest.approx(math.log(3), abs=1e-15)

    def test_rec_term_is_added(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)))
        ce = cross_entropy(logits, [0, 1]).data
        assert total_loss(logits, [0, 1], Tensor(0.25), 2.0).data == pytest.approx(ce + 0.5, abs=1e-15)

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0], [0]])
    def test_invalid_labels(self, labels):
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), labels)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-30, 30)),
        st.lists(st.integers(0, 2), min_size=4, max_size=4),
        st.floats(0, 10),
        st.floats(0, 5),
    )
    def test_non_negative(self, logits, labels, rec, lam):
        assert total_loss(Tensor(logits), labels, Tensor(rec), lam).data >= 0


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = parameter(np.array([1.0, -2.0, 3.0]))
        p.grad = np.array([0.3, -5.0, 1e-3])
        Adam([("p", p)], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, -1.99, 2.99], atol=1e-7)

    def test_zero_gradient(self):
        theta, m, v = adam_step(np.array([1.5]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1)
        assert theta[0] == 1.5
        _, m2, v2 = adam_step(np.array([1.5]), np.zeros(1), np.array([0.4]), np.array([0.2]), 2, 0.1)
        assert m2[0] == pytest.approx(0.9 * 0.4) and v2[0] == pytest.approx(0.999 * 0.2)

    def test_hand_stepped_quadratic(self):
        # f(theta) = theta^2 from theta = 1, lr = 0.1, default betas
        theta, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in (1, 2, 3):
            g = 2.0 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            theta = theta - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
            expected.append(theta)
        p = parameter(np.array([1.0]))
        opt = Adam([("theta", p)], lr=0.1)
        for want in expected:
            T.sum(p * p).backward()
            opt.step()
            assert abs(p.data[0] - want) < 1e-12
        f_theta, fm, fv = np.array([1.0]), np.zeros(1), np.zeros(1)
        for t, want in zip((1, 2, 3), expected):
            f_theta, fm, fv = adam_step(f_theta, 2.0 * f_theta, fm, fv, t, 0.1)
            assert abs(f_theta[0] - want) < 1e-12

    def test_grads_cleared(self):
        p = parameter(np.ones(2))
        p.grad = np.ones(2)
        Adam([("p", p)]).step()
        assert p.grad is None

    def test_non_finite_names_parameter(self):
        p = parameter(np.ones(2))
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(TrainingDivergenceError, match="encoder.w"):
            Adam([("encoder.w", p)]).step()

    def test_parameters_without_gradient_stay_frozen(self):
        a, b = parameter(np.ones(2)), parameter(np.ones(2))
        opt = Adam([("a", a), ("b", b)], lr=0.1)
        a.grad, b.grad = np.ones(2), np.ones(2)
        opt.step()
        frozen = b.data.copy()
        a.grad = np.ones(2)
        opt.step()
        assert np.array_equal(b.data, frozen)
        assert not np.array_equal(a.data, frozen)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SyntheticSpec(n_subjects=60, seed=3))


class TestTraining:
    def test_zero_epochs(self, tiny_data):
        result = run_training(TrainConfig(**{**TINY, "epochs": 0}), tiny_data)
        assert result.history == []
        fresh = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, result.checkpoint.config)
        assert all(np.array_equal(v, result.checkpoint.state[k]) for k, v in fresh.state_dict().items())

    def test_deterministic(self, tiny_data):
        a = run_training(TrainConfig(**TINY), tiny_data)
        b = run_training(TrainConfig(**TINY), tiny_data)
        assert a.test == b.test
        assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
        assert all(np.array_equal(a.checkpoint.state[k], b.checkpoint.state[k]) for k in a.checkpoint.state)

    def test_records(self, tiny_data):
        result = run_training(TrainConfig(**{**TINY, "epochs": 3}), tiny_data)
        assert [r.epoch for r in result.history] == [1, 2, 3]
        assert [r.phase for r in result.history] == ["warmup", "train", "train"]
        for r in result.history:
            assert 0 <= r.val_acc <= 1 and 0 <= r.val_f1 <= 1 and 0 <= r.val_auc <= 1
        n_train = len(tiny_data.rows("train"))
        assert result.history[0].expert_load == [0] * TINY["experts"]
        assert sum(result.history[1].expert_load) == n_train * TINY["top_k"]
        assert result.checkpoint.best_epoch in (2, 3)

    def test_warmup_gives_no_gradient_to_head_or_backbone(self, tiny_data):
        cfg = TrainConfig(**TINY)
        model = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, cfg)
        train = tiny_data.rows("train")
        full = train[tiny_data.full_coverage[train]]
        std = Standardizer.fit(tiny_data, train)
        tokens = model.tokenize(tiny_data.batch(full[:4], std))
        model.reconstruction_loss(tokens, np.random.default_rng(0)).backward()
        for name, p in model.named_parameters():
            if name.startswith(("head.", "backbone.")):
                assert p.grad is None, name
        assert any(p.grad is not None for g in model.generators for p in g.parameters())

    def test_warmup_only_epoch_keeps_initial_state(self, tiny_data):
        cfg = TrainConfig(**{**TINY, "epochs": 1})
        result = run_training(cfg, tiny_data)
        init = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, cfg).state_dict()
        assert result.history[0].phase == "warmup"
        assert all(np.array_equal(init[k], result.checkpoint.state[k]) for k in init)

    def test_warmup_epoch_updates_only_reconstruction_path(self, tiny_data):
        cfg = TrainConfig(**{**TINY, "epochs": 2, "warmup_epochs": 1, "lr": 1e-2})
        snapshots = []
        result = run_training(cfg, tiny_data, on_epoch=lambda rec: snapshots.append(rec.phase))
        assert snapshots == ["warmup", "train"]
        assert result.history[0].cls_loss == 0.0 and result.history[0].rec_loss > 0

    def test_non_cer_variants_skip_warmup_updates(self, tiny_data):
        cfg = TrainConfig(**{**TINY, "epochs": 1, "completion": "zero_fill"})
        result = run_training(cfg, tiny_data)
        assert result.history[0].train_loss == 0.0

    def test_lr_warmup_mode(self, tiny_data):
        result = run_training(TrainConfig(**{**TINY, "warmup_mode": "lr"}), tiny_data)
        assert [r.phase for r in result.history] == ["train", "train"]

    def test_cer_needs_full_coverage(self):
        ds = generate(SyntheticSpec(n_subjects=40, missingness="block", missing_rates=(0.5, 0.5, 0.5, 0.5), seed=0))
        if ds.full_coverage[ds.rows("train")].any():
            ds.mask[ds.rows("train"), 0] = ds.mask[ds.rows("train"), 0] & ~ds.full_coverage[ds.rows("train")]
        with pytest.raises(ConfigurationError):
            run_training(TrainConfig(**TINY), ds)

    def test_static_fill_has_no_generators(self, tiny_data):
        model = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, TrainConfig(**TINY, completion="static_fill"))
        names = [n for n, _ in model.named_parameters()]
        assert not any(n.startswith("generators") for n in names)
        assert sum(n.startswith("static_fill") for n in names) == 4

    def test_unselected_experts_do_not_move(self, tiny_data):
        cfg = TrainConfig(**{**TINY, "experts": 8, "top_k": 1, "epochs": 2, "warmup_epochs": 0, "batch_size": 4})
        result = run_training(cfg, tiny_data)
        init = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, cfg).state_dict()
        load = np.sum([r.expert_load for r in result.history[: result.checkpoint.best_epoch]], axis=0)
        for e in np.flatnonzero(load == 0):
            for k in init:
                if k.startswith(f"backbone.experts.{e}."):
                    assert np.array_equal(init[k], result.checkpoint.state[k])


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.batch_size, c.epochs, c.warmup_epochs, c.dropout) == (1e-4, 8, 50, 5, 0.5)
        assert (c.hidden, c.tokens, c.experts, c.top_k, c.heads) == (128, 16, 16, 4, 4)
        assert c.routing_temperature == c.attribution_temperature == c.rec_weight == 1.0

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rate": 0.1})

    @pytest.mark.parametrize(
        "change,error",
        [
            ({"lr": 0}, ParameterError),
            ({"top_k": 20}, ParameterError),
            ({"hidden": 10, "heads": 4}, ParameterError),
            ({"dropout": 1.0}, ParameterError),
            ({"completion": "mean"}, ConfigurationError),
            ({"routing_temperature": -1.0}, ParameterError),
        ],
    )
    def test_validation(self, change, error):
        with pytest.raises(error):
            TrainConfig().replace(**change)

    def test_round_trip(self):
        c = desk_config(seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestCheckpoint:
    def test_round_trip_is_exact(self, tiny_data, tmp_path):
        result = run_training(TrainConfig(**TINY), tiny_data)
        result.checkpoint.save(tmp_path / "c.json")
        back = Checkpoint.load(tmp_path / "c.json")
        assert all(np.array_equal(result.checkpoint.state[k], back.state[k]) for k in back.state)
        assert evaluate(back, tiny_data) == result.test
        assert back.config == result.checkpoint.config

    def test_incompatible_data(self, tiny_data):
        result = run_training(TrainConfig(**{**TINY, "epochs": 0}), tiny_data)
        other = generate(SyntheticSpec(n_subjects=40, modality_names=("A", "B", "C"), modality_dims=(24, 40, 18),
                                       missing_rates=(0.1, 0.1, 0.1), private_signal=(0.2, 0.2, 0.2)))
        with pytest.raises(CompatibilityError):
            evaluate(result.checkpoint, other)

    def test_attribute_reports_verify(self, tiny_data):
        result = run_training(TrainConfig(**TINY), tiny_data)
        reports = attribute(result.checkpoint, tiny_data, "val")
        assert len(reports) == len(tiny_data.rows("val"))
        assert [r.subject_id for r in reports] == [tiny_data.subject_ids[i] for i in tiny_data.rows("val")]


def test_memorises_tiny_set():
    ds = generate(SyntheticSpec(n_subjects=20, seed=1, noise=0.1))
    cfg = TrainConfig(**{**TINY, "epochs": 60, "warmup_epochs": 0, "lr": 1e-2, "dropout": 0.0})
    result = run_training(cfg, ds)
    model = result.checkpoint.build_model()
    final = evaluate_model(model, ds, ds.rows("train"), result.checkpoint.standardizer)
    assert final["acc"] >= 0.9


def test_ablation_structure(tiny_data):
    rows = run_ablation(TrainConfig(**{**TINY, "epochs": 1, "warmup_epochs": 0}), tiny_data, seeds=(0,))
    assert [r.variant for r in rows] == list(VARIANTS) == ["full", "no_ed", "static_fill", "no_cer", "no_moe"]
    counts = {r.variant: r.n_params for r in rows}
    assert counts["no_ed"] < counts["full"] and counts["no_cer"] < counts["static_fill"] < counts["full"]
    for r in rows:
        assert r.median("auc") == r.runs[0]["auc"]


def test_linear_baseline_recovers_planted_signal():
    ds = generate(SyntheticSpec())
    tr, va = ds.rows("train"), ds.rows("val")
    feats = []
    for m, x in enumerate(ds.features):
        mu = np.nanmean(x[tr], axis=0)
        z = np.where(ds.mask[:, [m]], x - mu, 0.0)
        feats.append(np.hstack([z, ds.mask[:, [m]].astype(float)]))
    x = np.hstack(feats + [np.ones((len(ds), 1))])
    y = np.eye(3)[ds.labels]
    coef, *_ = np.linalg.lstsq(x[tr], y[tr], rcond=1e-6)
    assert macro_ovr_auc(ds.labels[va], x[va] @ coef) > 0.7


class TestReconstructionErrors:
    def test_matches_hand_computed_mse(self, tiny_data):
        model = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, TrainConfig(**TINY)).eval()
        std = Standardizer.fit(tiny_data, tiny_data.rows("train"))
        rows = tiny_data.rows("val")
        errors = reconstruction_errors(model, tiny_data, rows, std)
        full = rows[tiny_data.full_coverage[rows]]
        tokens = model.tokenize(tiny_data.batch(full, std))
        for m, gen in enumerate(model.generators):
            ctx = T.concat([tokens.blocks[j] for j in range(4) if j != m], axis=-2)
            expected = np.mean((gen(ctx).data - tokens.blocks[m].data) ** 2)
            assert errors[m] == pytest.approx(expected, rel=1e-12)

    def test_needs_generators_and_full_subjects(self, tiny_data):
        std = Standardizer.fit(tiny_data, tiny_data.rows("train"))
        static = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, TrainConfig(**TINY, completion="static_fill"))
        with pytest.raises(ConfigurationError):
            reconstruction_errors(static, tiny_data, tiny_data.rows("val"), std)
        model = CERDModel.for_dataset(tiny_data.modalities, tiny_data.dims, 3, TrainConfig(**TINY))
        partial = np.flatnonzero(~tiny_data.full_coverage)[:5]
        with pytest.raises(ConfigurationError):
            reconstruction_errors(model, tiny_data, partial, std)
