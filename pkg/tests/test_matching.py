"""Language-to-object matching scores, mixing, probabilities, and the loss."""

import numpy as np
import pytest

from gradtools import analytic_grad, max_rel_err, numeric_grad
from refgraph.matching import (
    combine_scores,
    component_score,
    init_matching_params,
    predicted_index,
    referent_nll,
    referent_probabilities,
)
from refgraph.tensor import Tensor

DIM = 6


def make_params(seed=0, dim=DIM):
    return init_matching_params(np.random.default_rng(seed), dim)


def rand_inputs(rng, n=4, dim=DIM, node_width=None):
    node_width = node_width or dim
    return (Tensor(rng.normal(size=(1, dim))),
            Tensor(rng.normal(size=(n, node_width))))


class TestComponentScore:
    def test_matches_tanh_inner_product_oracle(self):
        rng = np.random.default_rng(1)
        p = make_params()
        s, reps = rand_inputs(rng, n=5, node_width=2 * DIM)
        out = component_score(s, reps, p.lang_subject, p.node_subject, 5)
        want = (np.tanh(reps.data @ p.node_subject.data)
                @ np.tanh(s.data @ p.lang_subject.data).T)
        assert out.shape == (5, 1)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_absent_evidence_scores_exactly_zero(self):
        rng = np.random.default_rng(2)
        p = make_params()
        s, _ = rand_inputs(rng)
        out = component_score(s, None, p.lang_intra, p.node_intra, 3)
        np.testing.assert_array_equal(out.data, np.zeros((3, 1)))

    def test_zero_node_rows_score_exactly_zero(self):
        # tanh(0) = 0 makes a node with no edges score 0 even against
        # a nonzero language projection — same value the shortcut produces.
        rng = np.random.default_rng(3)
        p = make_params()
        s = Tensor(rng.normal(size=(1, DIM)))
        reps = rng.normal(size=(4, DIM))
        reps[2] = 0.0
        out = component_score(s, Tensor(reps), p.lang_intra, p.node_intra, 4)
        assert out.data[2, 0] == 0.0

    def test_identical_rows_tie(self):
        rng = np.random.default_rng(4)
        p = make_params()
        row = rng.normal(size=DIM)
        reps = Tensor(np.stack([row, row, row]))
        s = Tensor(rng.normal(size=(1, DIM)))
        out = component_score(s, reps, p.lang_intra, p.node_intra, 3)
        assert out.data[0, 0] == out.data[1, 0] == out.data[2, 0]


class TestCombineAndProbabilities:
    def test_combination_matches_weighted_sum(self):
        rng = np.random.default_rng(5)
        cols = {name: Tensor(rng.normal(size=(4, 1)))
                for name in ("subject", "intra", "inter")}
        w = rng.dirichlet(np.ones(3)).reshape(1, 3)
        out = combine_scores(cols, Tensor(w))
        want = (w[0, 0] * cols["subject"].data
                + w[0, 1] * cols["intra"].data
                + w[0, 2] * cols["inter"].data)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_subject_only_weights_reproduce_subject_column(self):
        rng = np.random.default_rng(6)
        cols = {name: Tensor(rng.normal(size=(5, 1)))
                for name in ("subject", "intra", "inter")}
        out = combine_scores(cols, Tensor(np.array([[1.0, 0.0, 0.0]])))
        np.testing.assert_array_equal(out.data, cols["subject"].data)

    def test_probabilities_form_distribution(self):
        rng = np.random.default_rng(7)
        probs = referent_probabilities(Tensor(rng.normal(size=(6, 1))))
        assert abs(probs.data.sum() - 1.0) < 1e-12
        assert (probs.data > 0).all()

    def test_identical_scores_are_uniform(self):
        probs = referent_probabilities(Tensor(np.full((4, 1), 2.5)))
        np.testing.assert_allclose(probs.data, np.full((4, 1), 0.25), atol=1e-15)


class TestLossAndPrediction:
    def test_uniform_over_four_gives_log4(self):
        probs = referent_probabilities(Tensor(np.zeros((4, 1))))
        loss = referent_nll(probs, 2)
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_loss_is_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(1, 7))
            probs = referent_probabilities(Tensor(rng.normal(size=(n, 1))))
            assert referent_nll(probs, int(rng.integers(n))).item() >= 0.0

    def test_confident_correct_prediction_has_small_loss(self):
        scores = np.zeros((3, 1))
        scores[1] = 20.0
        probs = referent_probabilities(Tensor(scores))
        assert referent_nll(probs, 1).item() < 1e-8
        assert referent_nll(probs, 0).item() > 10.0

    def test_label_out_of_range_rejected(self):
        probs = referent_probabilities(Tensor(np.zeros((3, 1))))
        with pytest.raises(IndexError):
            referent_nll(probs, 3)
        with pytest.raises(IndexError):
            referent_nll(probs, -1)

    def test_prediction_is_argmax_with_lowest_index_tie_break(self):
        assert predicted_index(Tensor([[0.2], [0.5], [0.3]])) == 1
        assert predicted_index(Tensor([[0.4], [0.4], [0.2]])) == 0
        assert predicted_index(Tensor([[0.25], [0.25], [0.25], [0.25]])) == 0


class TestGradients:
    def test_finite_difference_through_scores_and_loss(self):
        rng = np.random.default_rng(9)
        p = make_params(seed=10)
        s = {name: Tensor(rng.normal(size=(1, DIM)))
             for name in ("subject", "intra", "inter")}
        reps = {"subject": Tensor(rng.normal(size=(4, 2 * DIM))),
                "intra": Tensor(rng.normal(size=(4, DIM))),
                "inter": Tensor(rng.normal(size=(4, DIM)))}
        w = Tensor(np.random.default_rng(11).dirichlet(np.ones(3)).reshape(1, 3))

        def build():
            cols = {
                "subject": component_score(s["subject"], reps["subject"],
                                           p.lang_subject, p.node_subject, 4),
                "intra": component_score(s["intra"], reps["intra"],
                                         p.lang_intra, p.node_intra, 4),
                "inter": component_score(s["inter"], reps["inter"],
                                         p.lang_inter, p.node_inter, 4),
            }
            probs = referent_probabilities(combine_scores(cols, w))
            return referent_nll(probs, 2)

        tensors = p.tensors()
        for name, param in tensors.items():
            got = analytic_grad(build, param, reset=tuple(tensors.values()))
            want = numeric_grad(build, param)
            assert max_rel_err(got, want) < 1e-4, name

    def test_determinism(self):
        rng = np.random.default_rng(12)
        p = make_params(seed=13)
        s, reps = rand_inputs(rng, n=5, node_width=2 * DIM)
        a = component_score(s, reps, p.lang_subject, p.node_subject, 5)
        b = component_score(s, reps, p.lang_subject, p.node_subject, 5)
        np.testing.assert_array_equal(a.data, b.data)
