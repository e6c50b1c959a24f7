"""Mixture weights, predictions, the ensemble error bound, the error
decomposition, weight gradients, and entropy machinery."""

import numpy as np
import pytest

from promix.embedspace import (
    DomainPartition,
    EmbeddingSet,
    partition_classes,
    unit_normalize,
)
from promix.head import PromptHead, predict_matrix, similarity_matrix, expected_error
from promix.mixture import (
    MixtureModel,
    MixtureWeights,
    bound_gap,
    class_weight_matrix,
    decompose_error,
    effective_weight,
    ent_loss,
    load_weights,
    matched_two_stage,
    mixture_ce_grad_wrt_weight,
    mixture_predict,
    mixture_predict_matrix,
    mixture_scaled_logits,
    normalized_entropy,
    one_stage_params,
    save_weights,
    two_stage_params,
)


def _unit_rows(rng, rows, dim):
    return unit_normalize(rng.standard_normal((rows, dim)))


def _heads(rng, count, classes, dim):
    names = tuple(f"c{i}" for i in range(classes))
    return tuple(PromptHead.frozen_from(_unit_rows(rng, classes, dim), names) for _ in range(count))


def _data(rng, n, classes, dim):
    names = tuple(f"c{i}" for i in range(classes))
    return EmbeddingSet(_unit_rows(rng, n, dim), rng.integers(0, classes, n), names)


class TestEffectiveWeight:
    def test_k1_in_domain(self):
        part = partition_classes(4, "explicit", sets=[[0, 1], [2, 3]])
        w = MixtureWeights.direct([0.5], [0.3])
        assert effective_weight(w, 1, 2, part) == pytest.approx(0.5)
        assert effective_weight(w, 0, 2, part) == pytest.approx(0.5)
        assert effective_weight(w, 1, 0, part) == pytest.approx(0.3)
        assert effective_weight(w, 0, 0, part) == pytest.approx(0.7)

    def test_k2_columns_always_simplex(self):
        rng = np.random.default_rng(0)
        part = partition_classes(6, "explicit", sets=[[0, 1], [2, 3], [4, 5]])
        for _ in range(100):
            w = MixtureWeights.direct(rng.uniform(0, 1, 2), rng.uniform(0, 1, 2))
            mat = class_weight_matrix(w, part)
            np.testing.assert_allclose(mat.sum(axis=0), 1.0, atol=1e-12)
            assert np.all(mat >= 0)

    def test_zero_out_weight_eliminates_specialized_head(self):
        rng = np.random.default_rng(1)
        heads = _heads(rng, 2, 4, 8)
        part = partition_classes(4, "explicit", sets=[[0, 1], [2, 3]])
        model = MixtureModel(heads, MixtureWeights.direct([0.5], [0.0]), part, tau=0.05)
        x = _unit_rows(rng, 1, 8)
        logits = mixture_scaled_logits(model, x)
        s0 = similarity_matrix(heads[0], x)
        np.testing.assert_allclose(logits[0, 0], s0[0, 0] / 0.05, rtol=1e-12)
        np.testing.assert_allclose(logits[0, 1], s0[0, 1] / 0.05, rtol=1e-12)


class TestMixturePredict:
    def test_degenerate_weights_reduce_to_generalized_head(self):
        rng = np.random.default_rng(2)
        heads = _heads(rng, 2, 5, 8)
        part = partition_classes(5, "base_new_even_split", seed=0)
        model = MixtureModel(heads, MixtureWeights.direct([0.0], [0.0]), part, tau=0.02)
        x = _unit_rows(rng, 1, 8)[0]
        expected = predict_matrix(similarity_matrix(heads[0], x[None, :]), 0.02)[0]
        np.testing.assert_allclose(mixture_predict(model, x).probs, expected, atol=1e-12)

    def test_full_weight_on_specialized_head(self):
        rng = np.random.default_rng(3)
        heads = _heads(rng, 2, 4, 8)
        part = partition_classes(4, "explicit", sets=[[], [0, 1, 2, 3]])
        model = MixtureModel(heads, MixtureWeights.direct([1.0], [0.7]), part, tau=0.02)
        x = _unit_rows(rng, 1, 8)[0]
        expected = predict_matrix(similarity_matrix(heads[1], x[None, :]), 0.02)[0]
        np.testing.assert_allclose(mixture_predict(model, x).probs, expected, atol=1e-12)

    def test_uniform_weights_match_mean_similarities(self):
        rng = np.random.default_rng(4)
        heads = _heads(rng, 2, 6, 8)
        part = partition_classes(6, "base_new_even_split", seed=1)
        model = MixtureModel(heads, MixtureWeights.direct([0.5], [0.5]), part, tau=0.05)
        x = _unit_rows(rng, 3, 8)
        mean_sims = 0.5 * (similarity_matrix(heads[0], x) + similarity_matrix(heads[1], x))
        np.testing.assert_allclose(
            mixture_predict_matrix(model, x), predict_matrix(mean_sims, 0.05), atol=1e-12
        )

    def test_single_tuning_domain_reduces_to_global_weights(self):
        # every class owned by head 1: the per-class rule collapses to one
        # global simplex (pi_0, pi_1), the plain weighted-combination model
        rng = np.random.default_rng(21)
        heads = _heads(rng, 2, 5, 8)
        part = partition_classes(5, "explicit", sets=[[], [0, 1, 2, 3, 4]])
        x = _unit_rows(rng, 3, 8)
        for pi_1 in (0.2, 0.5, 0.9):
            model = MixtureModel(
                heads, MixtureWeights.direct([pi_1], [0.3]), part, tau=0.05
            )
            combined = (1 - pi_1) * similarity_matrix(heads[0], x) + pi_1 * similarity_matrix(heads[1], x)
            np.testing.assert_allclose(
                mixture_predict_matrix(model, x), predict_matrix(combined, 0.05), atol=1e-12
            )

    def test_class_restriction(self):
        rng = np.random.default_rng(5)
        heads = _heads(rng, 2, 6, 8)
        part = partition_classes(6, "base_new_even_split", seed=2)
        model = MixtureModel(heads, MixtureWeights.uniform(1), part, tau=0.05)
        x = _unit_rows(rng, 2, 8)
        subset = np.array([1, 3, 4])
        full = mixture_scaled_logits(model, x)
        restricted = mixture_scaled_logits(model, x, classes=subset)
        np.testing.assert_array_equal(restricted, full[:, subset])


class TestBoundGap:
    def test_single_head_gap_is_exactly_zero(self):
        rng = np.random.default_rng(6)
        (head,) = _heads(rng, 1, 4, 8)
        data = _data(rng, 10, 4, 8)
        assert bound_gap([head], data, np.array([1.0]), 0.1) == 0.0

    def test_identical_heads_gap_is_exactly_zero(self):
        rng = np.random.default_rng(7)
        (head,) = _heads(rng, 1, 5, 8)
        data = _data(rng, 12, 5, 8)
        assert bound_gap([head, head], data, np.array([0.5, 0.5]), 0.1) == 0.0

    def test_random_ensembles_never_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            k = int(rng.integers(1, 5))
            c = int(rng.integers(2, 21))
            d = int(rng.integers(4, 12))
            heads = _heads(rng, k + 1, c, d)
            data = _data(rng, int(rng.integers(3, 12)), c, d)
            pi = rng.exponential(size=k + 1)
            pi /= pi.sum()
            tau = float(rng.choice([1.0, 0.1, 0.01]))
            assert bound_gap(heads, data, pi, tau) >= -1e-12

    def test_rejects_off_simplex(self):
        rng = np.random.default_rng(9)
        heads = _heads(rng, 2, 3, 6)
        data = _data(rng, 5, 3, 6)
        with pytest.raises(ValueError, match="simplex"):
            bound_gap(heads, data, np.array([0.7, 0.6]), 0.1)


class TestDecomposeError:
    def _model(self, rng, classes=6, dim=8, k=2):
        heads = _heads(rng, k + 1, classes, dim)
        sets = np.array_split(np.arange(classes), k + 1)
        part = DomainPartition(tuple(sets), np.array([len(s) for s in sets]) / classes)
        return MixtureModel(heads, MixtureWeights.uniform(k), part, tau=0.05)

    def test_single_subset_recovers_full_error(self):
        rng = np.random.default_rng(10)
        heads = _heads(rng, 1, 4, 8)
        part = partition_classes(4, "explicit", sets=[[0, 1, 2, 3]])
        model = MixtureModel(heads, MixtureWeights.direct(np.empty(0), np.empty(0)), part, tau=0.05)
        data = _data(rng, 9, 4, 8)
        parts, total = decompose_error(model, data)
        assert parts[0][0] == 1.0
        assert total == pytest.approx(parts[0][1], rel=1e-15)

    def test_equal_counts_give_equal_masses(self):
        rng = np.random.default_rng(11)
        model = self._model(rng, classes=6, k=1)
        vecs = _unit_rows(rng, 8, 8)
        labels = np.array([0, 1, 2, 3, 4, 5, 0, 3])
        data = EmbeddingSet(vecs, labels, model.heads[0].class_names)
        parts, _ = decompose_error(model, data)
        assert parts[0][0] == pytest.approx(0.5)
        assert parts[1][0] == pytest.approx(0.5)

    def test_reconstruction_matches_expected_error(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            model = self._model(rng, classes=9, k=2)
            data = _data(rng, 30, 9, 8)
            parts, total = decompose_error(model, data)
            probs = mixture_predict_matrix(model, data.vectors)
            direct = float(
                np.mean(-np.log(probs[np.arange(len(data)), data.labels]))
            )
            assert total == pytest.approx(direct, abs=1e-12)

    def test_label_outside_partition_rejected(self):
        rng = np.random.default_rng(13)
        model = self._model(rng, classes=6, k=1)
        bad = EmbeddingSet(_unit_rows(rng, 2, 8), np.array([0, 6]),
                           tuple(f"c{i}" for i in range(7)))
        with pytest.raises(ValueError, match="outside"):
            decompose_error(model, bad)


class TestMixtureCEGradient:
    def _setup(self, rng, classes=5, dim=8):
        heads = _heads(rng, 2, classes, dim)
        part = partition_classes(classes, "base_new_even_split", seed=0)
        model = MixtureModel(heads, MixtureWeights.direct([0.4], [0.6]), part, tau=0.05)
        x = _unit_rows(rng, 1, dim)[0]
        return model, x

    def test_constant_similarity_head_has_zero_gradient(self):
        rng = np.random.default_rng(14)
        names = ("a", "b", "c")
        anchors0 = _unit_rows(rng, 3, 6)
        shared = unit_normalize(rng.standard_normal(6))
        anchors1 = np.tile(shared, (3, 1))
        heads = (
            PromptHead.frozen_from(anchors0, names),
            PromptHead.frozen_from(anchors1, names),
        )
        part = partition_classes(3, "explicit", sets=[[0], [1, 2]])
        model = MixtureModel(heads, MixtureWeights.uniform(1), part, tau=0.05)
        x = _unit_rows(rng, 1, 6)[0]
        assert mixture_ce_grad_wrt_weight(model, x, 1, 1) == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            model, x = self._setup(rng)
            y = int(rng.integers(0, 5))
            for prompt in (0, 1):
                g = mixture_ce_grad_wrt_weight(model, x, y, prompt)
                h = 1e-5
                base_w = class_weight_matrix(model.weights, model.partition)

                def ce_at(delta):
                    rows = base_w.copy()
                    rows[prompt] += delta
                    logits = mixture_scaled_logits(model, x[None, :], weight_rows=rows)
                    probs = np.exp(logits - logits.max())
                    probs /= probs.sum()
                    return -np.log(probs[0, y])

                fd = (ce_at(h) - ce_at(-h)) / (2 * h)
                assert g == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_sign_when_head_is_right_and_mixture_wrong(self):
        # head 1 puts the true class on top while head 0 drags the mixture
        # elsewhere: the gradient must be negative so descent raises pi_1
        names = ("a", "b")
        anchors1 = np.eye(2)
        anchors0 = np.eye(2)[::-1].copy()
        heads = (
            PromptHead.frozen_from(anchors0, names),
            PromptHead.frozen_from(anchors1, names),
        )
        part = partition_classes(2, "explicit", sets=[[1], [0]])
        model = MixtureModel(heads, MixtureWeights.direct([0.2], [0.2]), part, tau=0.05)
        x = unit_normalize(np.array([1.0, 0.05]))
        probs = mixture_predict(model, x).probs
        assert int(np.argmax(probs)) != 0
        assert mixture_ce_grad_wrt_weight(model, x, 0, 1) < 0


class TestEntropyPieces:
    def test_normalized_entropy_bounds(self):
        assert normalized_entropy(np.array([0.25, 0.25, 0.25, 0.25])) == pytest.approx(1.0)
        assert normalized_entropy(np.array([1.0, 0.0, 0.0])) == 0.0
        assert normalized_entropy(np.array([0.5, 0.5])) == pytest.approx(1.0)

    def test_requires_two_entries(self):
        with pytest.raises(ValueError, match="two"):
            normalized_entropy(np.array([1.0]))

    def test_ent_loss_hinge(self):
        assert ent_loss(0.3, 0.8, 0.2) == 0.0
        assert ent_loss(0.9, 0.5, 0.2) == pytest.approx(0.6, abs=1e-15)
        assert ent_loss(0.25, 0.75, 0.5) == 0.0  # boundary: H_i = H_0 + d

    def test_ent_loss_monotonicity(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            h0, hi, d = rng.uniform(0, 1, 3)
            assert ent_loss(h0, hi + 0.05, d) <= ent_loss(h0, hi, d)
            assert ent_loss(h0, hi, min(d + 0.05, 1.0)) >= ent_loss(h0, hi, d)


class TestParameterizations:
    def test_one_stage_symmetric_case(self):
        pi, tau = one_stage_params(0.01, 0.01)
        assert pi == pytest.approx(0.5)
        assert tau == pytest.approx(0.005)

    def test_one_stage_limit(self):
        pi, tau = one_stage_params(1e9, 0.01)
        assert pi == pytest.approx(0.0, abs=1e-10)
        assert tau == pytest.approx(0.01, rel=1e-6)

    def test_one_stage_table_values(self):
        pi, tau = one_stage_params(0.03, 0.01)
        assert pi == pytest.approx(0.25, rel=1e-12)
        assert tau == pytest.approx(0.0075, rel=1e-12)

    def test_two_stage_uniform_at_zero(self):
        np.testing.assert_allclose(two_stage_params([0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_two_stage_saturates(self):
        pi = two_stage_params([50.0])
        assert pi[1] == pytest.approx(1.0, abs=1e-12)

    def test_two_stage_log3(self):
        np.testing.assert_allclose(two_stage_params([np.log(3.0)]), [0.25, 0.75], atol=1e-12)

    def test_equivalence_of_matched_configurations(self):
        rng = np.random.default_rng(17)
        heads = _heads(rng, 2, 6, 8)
        part = partition_classes(6, "base_new_even_split", seed=3)
        x = _unit_rows(rng, 4, 8)
        for tau_1 in (0.005, 0.01, 0.03, 0.2):
            one = MixtureModel(
                heads, MixtureWeights.one_stage(tau_1, tau_1), part, tau=0.01
            )
            alpha, tau_eff = matched_two_stage(tau_1, 0.01)
            two = MixtureModel(
                heads, MixtureWeights.two_stage([alpha], [alpha]), part, tau=tau_eff
            )
            p_one = mixture_predict_matrix(one, x)
            p_two = mixture_predict_matrix(two, x)
            np.testing.assert_allclose(p_one, p_two, atol=1e-12)

    def test_one_stage_requires_single_head(self):
        with pytest.raises(ValueError, match="one_stage|single"):
            MixtureWeights(
                "one_stage", np.array([0.5, 0.5]), np.array([0.5, 0.5]),
                tau_in=0.01, tau_out=0.01,
            )


class TestWeightCheckpoint:
    @pytest.mark.parametrize(
        "weights",
        [
            MixtureWeights.two_stage([0.3, -1.2], [0.0, 2.0]),
            MixtureWeights.one_stage(0.03, 0.07),
            MixtureWeights.direct([0.4], [0.9]),
        ],
        ids=["two_stage", "one_stage", "direct"],
    )
    def test_round_trip(self, weights, tmp_path):
        path = tmp_path / "w.json"
        save_weights(weights, path)
        back = load_weights(path)
        assert back.parameterization == weights.parameterization
        np.testing.assert_allclose(back.in_weights, weights.in_weights, rtol=1e-15)
        np.testing.assert_allclose(back.out_weights, weights.out_weights, rtol=1e-15)
