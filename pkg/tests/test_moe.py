"""Forward semantics, losses, metrics, and the training loop."""

import numpy as np
import pytest

from moegeo.dictgen import synthetic_classification
from moegeo.errors import DegenerateProbeError, InvalidConfigError, InvalidShapeError
from moegeo.infotheory import RoutingBatch, aux_loss
from moegeo.moe import (
    AggregateReport,
    ForwardTrace,
    MoEConfig,
    MoEParams,
    ambiguity_decomposition,
    cross_validate,
    effective_rank,
    expert_coherence,
    forward,
    init_params,
    ncl_loss,
    ortho_loss,
    softdpp_loss,
    specialization_heatmap,
    stratified_folds,
    total_loss,
    train_fold,
    write_heatmap_csv,
    write_run_csv,
)

QUICK = dict(input_dim=16, experts=4, active_k=2, expert_hidden=8, classes=5,
             batch=32, epochs=3, seed=5)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def make_trace(outputs, gates=None):
    """Wrap hand-picked expert output vectors in a minimal valid trace."""
    outputs = np.asarray(outputs, dtype=float)
    b, k, c = outputs.shape
    e = k + 1
    if gates is None:
        gates = np.full((b, k), 1.0 / k)
    probs = np.full((b, e), 1.0 / e)
    sel = np.tile(np.arange(k), (b, 1))
    logits = np.einsum("bk,bkc->bc", gates, outputs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    cp = np.exp(shifted)
    cp /= cp.sum(axis=1, keepdims=True)
    return ForwardTrace(x=np.zeros((b, 2)), dense_probs=probs, selections=sel,
                        gates=gates, expert_outputs=outputs, logits=logits,
                        class_probs=cp)


class TestForward:
    def test_hand_computed_gates(self):
        config = MoEConfig(input_dim=4, experts=4, active_k=2, expert_hidden=3,
                           classes=3, seed=1)
        params = init_params(config, np.random.default_rng(0))
        params.w_g[:] = 0.0
        params.w_g[0, 0] = 2.0
        params.w_g[1, 0] = 1.0
        trace = forward(params, config, np.array([[1.0, 0, 0, 0]]))
        # h = (2, 1, 0, 0): top-2 gates renormalize to e/(e+1), 1/(e+1)
        assert tuple(trace.selections[0]) == (0, 1)
        np.testing.assert_allclose(trace.gates[0], [0.73106, 0.26894], atol=1e-5)

    def test_k_equals_e_gates_are_full_softmax(self):
        config = MoEConfig(input_dim=6, experts=4, active_k=4, expert_hidden=5,
                           classes=3, seed=2)
        rng = np.random.default_rng(2)
        params = init_params(config, rng)
        trace = forward(params, config, rng.standard_normal((7, 6)))
        np.testing.assert_allclose(trace.gates, trace.dense_probs, atol=1e-12)

    def test_zero_input_gives_uniform_probs(self):
        config = MoEConfig(input_dim=5, experts=3, active_k=2, expert_hidden=4,
                           classes=6, seed=3)
        params = init_params(config, np.random.default_rng(3))
        trace = forward(params, config, np.zeros((2, 5)))
        np.testing.assert_allclose(trace.expert_outputs, 0.0, atol=1e-15)
        np.testing.assert_allclose(trace.logits, 0.0, atol=1e-15)
        np.testing.assert_allclose(trace.class_probs, 1.0 / 6, atol=1e-12)

    def test_ties_select_lowest_indices(self):
        config = MoEConfig(input_dim=4, experts=4, active_k=2, expert_hidden=3,
                           classes=3, seed=4)
        params = init_params(config, np.random.default_rng(4))
        params.w_g[:] = 0.0  # all router logits equal
        trace = forward(params, config, np.ones((3, 4)))
        assert np.all(trace.selections == [0, 1])

    def test_gate_rows_sum_to_one(self):
        config = MoEConfig(**QUICK)
        rng = np.random.default_rng(6)
        params = init_params(config, rng)
        trace = forward(params, config, rng.standard_normal((40, 16)))
        np.testing.assert_allclose(trace.gates.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_bad_shape(self):
        config = MoEConfig(**QUICK)
        params = init_params(config, np.random.default_rng(0))
        with pytest.raises(InvalidShapeError):
            forward(params, config, np.zeros((4, 7)))


class TestOrthoLoss:
    def test_orthogonal_pair_is_zero(self):
        out = np.array([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
        assert ortho_loss(make_trace(out)) == pytest.approx(0.0, abs=1e-15)

    def test_parallel_pair_counts_both_ordered_pairs(self):
        out = np.array([[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]])
        assert ortho_loss(make_trace(out)) == pytest.approx(2.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            b, k, c = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
            out = rng.standard_normal((b, k, c))
            expected = 0.0
            for s in range(b):
                for i in range(k):
                    for j in range(k):
                        if i == j:
                            continue
                        ni = out[s, i] / np.linalg.norm(out[s, i])
                        nj = out[s, j] / np.linalg.norm(out[s, j])
                        expected += float(ni @ nj) ** 2
            expected /= b
            assert ortho_loss(make_trace(out)) == pytest.approx(expected, abs=1e-12)

    def test_zero_norm_vector_contributes_nothing(self):
        out = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        assert ortho_loss(make_trace(out)) == pytest.approx(0.0, abs=1e-15)


class TestSoftDppLoss:
    def test_orthonormal_pair(self):
        eps = 1e-4
        out = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        expected = -2.0 * np.log(1.0 + eps)
        assert softdpp_loss(make_trace(out), eps) == pytest.approx(expected, abs=1e-12)

    def test_parallel_pair(self):
        eps = 1e-4
        out = np.array([[[1.0, 1.0], [3.0, 3.0]]])
        expected = -np.log(eps * (2.0 + eps))
        assert softdpp_loss(make_trace(out), eps) == pytest.approx(expected, abs=1e-9)

    def test_batch_of_identical_samples(self):
        rng = np.random.default_rng(8)
        row = rng.standard_normal((1, 3, 4))
        single = softdpp_loss(make_trace(row), 1e-4)
        batch = softdpp_loss(make_trace(np.tile(row, (6, 1, 1))), 1e-4)
        assert batch == pytest.approx(single, abs=1e-12)

    def test_epsilon_must_be_positive(self):
        out = np.ones((1, 2, 2))
        with pytest.raises(InvalidConfigError):
            softdpp_loss(make_trace(out), 0.0)


class TestNclLoss:
    def test_identical_outputs_zero(self):
        out = np.tile(np.array([[1.0, 2.0, 0.5]]), (3, 1)).reshape(1, 3, 3)
        assert ncl_loss(make_trace(out)) == pytest.approx(0.0, abs=1e-15)

    def test_two_expert_algebra(self):
        out = np.array([[[2.0, 0.0], [0.0, 1.0]]])
        p1, p2 = softmax(out[0, 0]), softmax(out[0, 1])
        expected = -2.0 * float(np.sum(((p1 - p2) / 2.0) ** 2))
        assert ncl_loss(make_trace(out)) == pytest.approx(expected, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            b, k, c = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
            out = rng.standard_normal((b, k, c))
            expected = 0.0
            for s in range(b):
                pis = np.array([softmax(out[s, i]) for i in range(k)])
                d = pis - pis.mean(axis=0)
                for i in range(k):
                    for j in range(k):
                        if i != j:
                            expected += float(d[i] @ d[j])
            expected /= b
            assert ncl_loss(make_trace(out)) == pytest.approx(expected, abs=1e-12)


class TestTotalLoss:
    def test_reg_none_component_is_zero(self):
        config = MoEConfig(reg_kind="none", **QUICK)
        rng = np.random.default_rng(10)
        params = init_params(config, rng)
        trace = forward(params, config, rng.standard_normal((8, 16)))
        _, comps = total_loss(trace, rng.integers(0, 5, 8), config)
        assert comps.reg == 0.0

    def test_aux_component_matches_infotheory(self):
        config = MoEConfig(aux_weight=0.01, **QUICK)
        rng = np.random.default_rng(11)
        params = init_params(config, rng)
        trace = forward(params, config, rng.standard_normal((12, 16)))
        _, comps = total_loss(trace, rng.integers(0, 5, 12), config)
        batch = RoutingBatch(dense_probs=trace.dense_probs, selections=trace.selections)
        assert comps.aux == pytest.approx(0.01 * aux_loss(batch), abs=1e-15)

    def test_confident_correct_predictions(self):
        out = np.zeros((3, 2, 4))
        out[:, :, 1] = 40.0  # both experts shout class 1
        trace = make_trace(out)
        _, comps = total_loss(trace, np.array([1, 1, 1]),
                              MoEConfig(input_dim=2, experts=3, active_k=2,
                                        expert_hidden=2, classes=4, aux_weight=0.0))
        assert comps.task <= 1e-6

    def test_total_is_sum(self):
        config = MoEConfig(reg_kind="ortho", **QUICK)
        rng = np.random.default_rng(12)
        params = init_params(config, rng)
        trace = forward(params, config, rng.standard_normal((8, 16)))
        value, comps = total_loss(trace, rng.integers(0, 5, 8), config)
        assert value == pytest.approx(comps.task + comps.aux + comps.reg, abs=1e-15)


class TestEffectiveRank:
    def _params(self, w_in, w_out):
        e, h, d = w_in.shape
        return MoEParams(w_g=np.zeros((e, d)), w_in=w_in, w_out=w_out)

    def test_identical_experts_rank_one(self):
        rng = np.random.default_rng(13)
        w_in = np.tile(rng.standard_normal((1, 6, 5)), (4, 1, 1))
        w_out = np.tile(rng.standard_normal((1, 3, 6)), (4, 1, 1))
        params = self._params(w_in, w_out)
        probe = rng.standard_normal((20, 5))
        assert effective_rank(params, probe) == pytest.approx(1.0, abs=1e-6)
        assert expert_coherence(params, probe) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_experts_rank_e(self):
        e = c = 4
        h, d = 3, 5
        rng = np.random.default_rng(14)
        w_in = np.tile(rng.standard_normal((1, h, d)), (e, 1, 1))
        w_out = np.zeros((e, c, h))
        v = rng.standard_normal(h)
        for i in range(e):
            w_out[i, i] = v  # expert i emits only class-slot i
        params = self._params(w_in, w_out)
        probe = rng.standard_normal((30, d))
        assert effective_rank(params, probe) == pytest.approx(e, abs=1e-6)
        assert expert_coherence(params, probe) == pytest.approx(0.0, abs=1e-12)

    def test_random_init_in_range(self):
        config = MoEConfig(**QUICK)
        rng = np.random.default_rng(15)
        params = init_params(config, rng)
        r = effective_rank(params, rng.standard_normal((50, 16)))
        assert 1.0 <= r <= config.experts

    def test_degenerate_probe(self):
        params = self._params(np.zeros((3, 4, 5)), np.zeros((3, 2, 4)))
        with pytest.raises(DegenerateProbeError):
            effective_rank(params, np.ones((10, 5)))


class TestAmbiguity:
    def test_symmetric_scalar_pair(self):
        assert ambiguity_decomposition(np.array([1.0, 3.0]), np.array([2.0])) == (0.0, 1.0, 1.0, 0.0)

    def test_all_equal_target(self):
        y = np.tile(np.array([[0.5, -1.0]]), (3, 1))
        assert ambiguity_decomposition(y, np.array([0.5, -1.0])) == (0.0, 0.0, 0.0, 0.0)

    def test_identity_holds_for_random_vectors(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            y = rng.standard_normal((4, 6))
            t = rng.standard_normal(6)
            ens, mean_ind, amb, gap = ambiguity_decomposition(y, t)
            assert gap <= 1e-10
            assert ens <= mean_ind + 1e-12  # ambiguity is nonnegative
            assert amb >= -1e-12


class TestHeatmap:
    def test_k_equals_e_all_ones(self):
        config = MoEConfig(input_dim=6, experts=3, active_k=3, expert_hidden=4,
                           classes=4, seed=17)
        rng = np.random.default_rng(17)
        params = init_params(config, rng)
        x = rng.standard_normal((40, 6))
        y = rng.integers(0, 4, 40)
        heat = specialization_heatmap(params, config, x, y)
        present = np.unique(y)
        np.testing.assert_allclose(heat[:, present], 1.0, atol=1e-12)

    def test_single_class_column(self):
        config = MoEConfig(input_dim=6, experts=5, active_k=2, expert_hidden=4,
                           classes=4, seed=18)
        rng = np.random.default_rng(18)
        params = init_params(config, rng)
        x = rng.standard_normal((30, 6))
        y = np.full(30, 2)
        heat = specialization_heatmap(params, config, x, y)
        assert heat[:, 2].sum() == pytest.approx(2.0, abs=1e-12)
        assert np.all(heat[:, [0, 1, 3]] == 0.0)

    def test_columns_sum_to_k(self):
        config = MoEConfig(**QUICK)
        rng = np.random.default_rng(19)
        params = init_params(config, rng)
        x = rng.standard_normal((100, 16))
        y = rng.integers(0, 5, 100)
        heat = specialization_heatmap(params, config, x, y)
        np.testing.assert_allclose(heat.sum(axis=0), 2.0, atol=1e-9)


def quick_dataset():
    return synthetic_classification(samples=300, features=16, informative=8,
                                    classes=5, class_sep=1.2, seed=21)


class TestTrainFold:
    def test_epochs_zero_untrained(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=0, seed=5)
        report = train_fold(config, (data.features[:240], data.labels[:240]),
                            (data.features[240:], data.labels[240:]))
        assert len(report.epoch) == 1
        assert report.epoch[0] == 0
        # 5 balanced classes: untrained accuracy should hover near 0.2
        assert 0.0 <= report.final_accuracy <= 0.45

    def test_training_learns(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=8, lr=3e-3, seed=5)
        report = train_fold(config, (data.features[:240], data.labels[:240]),
                            (data.features[240:], data.labels[240:]))
        assert report.final_accuracy > report.test_acc[0] + 0.1
        assert report.loss_task[-1] < report.loss_task[0]
        assert len(report.epoch) == 9

    def test_deterministic(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=2, seed=9)
        split = ((data.features[:240], data.labels[:240]),
                 (data.features[240:], data.labels[240:]))
        r1 = train_fold(config, *split, fold=3)
        r2 = train_fold(config, *split, fold=3)
        np.testing.assert_array_equal(r1.test_acc, r2.test_acc)
        np.testing.assert_array_equal(r1.loss_task, r2.loss_task)
        np.testing.assert_array_equal(r1.heatmap, r2.heatmap)

    def test_fold_index_changes_run(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=1, seed=9)
        split = ((data.features[:240], data.labels[:240]),
                 (data.features[240:], data.labels[240:]))
        r1 = train_fold(config, *split, fold=0)
        r2 = train_fold(config, *split, fold=1)
        assert not np.array_equal(r1.loss_task, r2.loss_task)


class TestCrossValidate:
    def test_fold_structure_and_aggregate(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=1, seed=13)
        reports, agg = cross_validate(config, data, folds=5)
        assert len(reports) == 5
        assert [r.fold for r in reports] == list(range(5))
        assert agg.mean_accuracy == pytest.approx(np.mean(agg.final_accuracies), abs=1e-12)
        assert agg.std_accuracy == pytest.approx(np.std(agg.final_accuracies), abs=1e-12)
        assert len(agg.mean_eff_rank) == 2

    def test_parallel_matches_serial(self):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=1, seed=13)
        serial, agg_s = cross_validate(config, data, folds=3, workers=1)
        parallel, agg_p = cross_validate(config, data, folds=3, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.test_acc, b.test_acc)
            np.testing.assert_array_equal(a.loss_task, b.loss_task)
        assert agg_s.final_accuracies == agg_p.final_accuracies

    def test_stratified_folds_balanced(self):
        labels = np.repeat(np.arange(5), 60)
        assignment = stratified_folds(labels, 10, seed=1)
        for c in range(5):
            counts = np.bincount(assignment[labels == c], minlength=10)
            assert counts.max() - counts.min() <= 1
        sizes = np.bincount(assignment, minlength=10)
        assert sizes.max() - sizes.min() <= 1


class TestCsvExport:
    def test_run_csv_roundtrip(self, tmp_path):
        data = quick_dataset()
        config = MoEConfig(input_dim=16, experts=4, active_k=2, expert_hidden=8,
                           classes=5, batch=32, epochs=1, seed=23)
        reports, _ = cross_validate(config, data, folds=2)
        path = tmp_path / "run.csv"
        write_run_csv(path, reports)
        lines = path.read_text().splitlines()
        assert lines[0] == "fold,epoch,loss_task,loss_aux,loss_reg,test_acc,eff_rank,coherence,marg_entropy"
        assert len(lines) == 1 + 2 * 2  # 2 folds x (epochs+1)
        first = path.read_bytes()
        write_run_csv(path, reports)
        assert path.read_bytes() == first

    def test_heatmap_csv(self, tmp_path):
        heat = np.arange(6, dtype=float).reshape(3, 2) / 10
        path = tmp_path / "heat.csv"
        write_heatmap_csv(path, heat)
        lines = path.read_text().splitlines()
        assert lines[0] == "expert,class,freq"
        assert lines[1] == "0,0,0"
        assert lines[-1] == "2,1,0.5"


class TestConfigValidation:
    def test_k_cannot_exceed_experts(self):
        with pytest.raises(InvalidConfigError):
            MoEConfig(experts=4, active_k=5)

    def test_bad_reg_kind(self):
        with pytest.raises(InvalidConfigError):
            MoEConfig(reg_kind="l2")

    def test_nonpositive_lr(self):
        with pytest.raises(InvalidConfigError):
            MoEConfig(lr=0.0)

    def test_defaults(self):
        config = MoEConfig()
        assert (config.experts, config.active_k, config.expert_hidden) == (16, 2, 32)
        assert (config.aux_weight, config.reg_weight) == (0.01, 0.1)
        assert (config.lr, config.epochs, config.batch) == (1e-3, 30, 128)
