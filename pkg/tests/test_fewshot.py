import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hve import tensor as T
from hve.config import EpisodeConfig
from hve.errors import SamplingError
from hve.fewshot import (ball_project, build_prototypes, classify, distances, hyperbolic_distance,
                         probs_from_distances, query_nll, sample_episode, to_ball, weighted_distance)
from hve.gradcheck import check_function

import checks

LN3 = 1.0986122886681098  # mpmath: log(3)
LN5_3 = 0.5108256237659907  # mpmath: acosh(17/15) = log(5/3)


# --- sampling -----------------------------------------------------------------


def groups(n_rel, size):
    return {f"r{i}": [f"r{i}-{j}" for j in range(size)] for i in range(n_rel)}


def test_ten_by_two():
    ep = sample_episode(groups(10, 2), EpisodeConfig(5, 1, 1), np.random.default_rng(0))
    sup = [s for row in ep.support for s in row]
    qry = [q for q, _ in ep.query]
    assert len(sup) == 5 and len(qry) == 5 and not set(sup) & set(qry)


def test_infeasible_shots():
    with pytest.raises(SamplingError, match="short by 5"):
        sample_episode(groups(10, 4), EpisodeConfig(5, 5, 1), np.random.default_rng(0))


def test_same_seed_same_episode():
    a = sample_episode(groups(8, 6), EpisodeConfig(3, 2, 2), np.random.default_rng(5))
    b = sample_episode(groups(8, 6), EpisodeConfig(3, 2, 2), np.random.default_rng(5))
    assert (a.relations, a.support, a.query) == (b.relations, b.support, b.query)


def test_local_ids_follow_name_order():
    ep = sample_episode(groups(12, 3), EpisodeConfig(4, 1, 2), np.random.default_rng(1))
    assert ep.relations == sorted(ep.relations)
    assert [lab for _, lab in ep.query] == [0, 0, 1, 1, 2, 2, 3, 3]


def test_episode_protocol_suite():
    ok, detail = checks.episode_protocol(500)
    assert ok, detail


# --- ball and distances ---------------------------------------------------------


def test_ball_project_examples():
    assert ball_project(T.Tensor([2.0, 0.0])).data.tolist() == [0.99999, 0.0]
    assert ball_project(T.Tensor([0.3, 0.4])).data.tolist() == [0.3, 0.4]
    rows = ball_project(T.Tensor([[2.0, 0.0], [0.3, 0.4]])).data
    assert rows.tolist() == [[0.99999, 0.0], [0.3, 0.4]]


def test_conformal_term_closed_form():
    p, c = to_ball(T.Tensor([3.0, 4.0]))
    assert c.item() == 1e-5 * (2 - 1e-5)
    assert abs((1 - np.sum(p.data ** 2)) - c.item()) < 1e-10


def test_ball_project_gradient_both_branches():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=4)
        inside = rng.normal(size=4)
        inside *= 0.5 / np.linalg.norm(inside)
        outside = inside * 6.0
        f = lambda x: T.mul(ball_project(x), T.Tensor(w))
        assert max(check_function(f, [inside])) < 1e-6
        assert max(check_function(f, [outside])) < 1e-6


def test_distance_examples():
    s = T.Tensor([0.3, -0.2])
    assert hyperbolic_distance(s, s).item() == 0.0
    assert abs(hyperbolic_distance(T.Tensor([0.5, 0.0]), T.Tensor([0.0, 0.0])).item() - LN3) <= 1e-9


def test_metric_axioms():
    ok, detail = checks.metric_axioms(1000)
    assert ok, detail


def test_weighted_distance_values():
    q, p = T.Tensor([0.5, 0.0]), T.Tensor([0.0, 0.0])
    half = T.Tensor([0.5, 0.5])
    assert abs(weighted_distance(half, q, p).item() - LN5_3) < 1e-12
    assert weighted_distance(T.Tensor([1.0, 1.0]), q, p).item() == hyperbolic_distance(q, p).item()
    mean_alpha = weighted_distance(half, q, p, "scalar_mean_alpha").item()
    assert mean_alpha == pytest.approx(0.5 * LN3, abs=1e-12)


def test_weighted_distance_gradient():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        alpha = rng.uniform(0.1, 1.0, size=4)
        q, p = (checks.random_ball_point(rng, 4, 0.8) for _ in range(2))
        assert max(check_function(weighted_distance, [alpha, q, p])) < 1e-6
        f = lambda a, x, y: weighted_distance(a, x, y, "scalar_mean_alpha")
        assert max(check_function(f, [alpha, q, p])) < 1e-6


# --- prototypes and classification -----------------------------------------------


def test_prototype_mean_and_projection():
    protos = build_prototypes([T.Tensor([[0.2, 0.0], [0.4, 0.0]])])
    assert np.allclose(protos.P.data, [[0.3, 0.0]], atol=1e-16) and np.all(protos.A.data == 1.0)
    single = build_prototypes([T.Tensor([[3.0, 4.0]])])
    assert np.allclose(single.P.data[0], np.array([0.6, 0.8]) * 0.99999, atol=1e-15)


def test_prototype_support_permutation():
    rng = np.random.default_rng(0)
    stack = rng.normal(size=(3, 4)) * 0.2
    a = build_prototypes([T.Tensor(stack)]).P.data
    b = build_prototypes([T.Tensor(stack[[2, 0, 1]])]).P.data
    assert np.allclose(a, b, atol=1e-16)


def test_probabilities():
    p = probs_from_distances([0.0, math.log(3.0)]).data
    assert abs(p[0] - 0.75) < 1e-9 and abs(p[1] - 0.25) < 1e-9
    ok, detail = checks.classification_algebra(500)
    assert ok, detail


def test_classify_nearest_prototype():
    protos = build_prototypes([T.Tensor([[0.5, 0.0]]), T.Tensor([[-0.5, 0.0]]), T.Tensor([[0.0, 0.7]])])
    probs = classify(T.Tensor([0.5, 0.0]), protos).data
    assert int(np.argmax(probs)) == 0 and abs(probs.sum() - 1) <= 1e-12
    assert distances(T.Tensor([0.5, 0.0]), protos).data[0] == 0.0


def test_query_nll_values():
    uniform = T.Tensor(np.zeros((3, 5)))
    assert query_nll(uniform, [0, 1, 2]).item() == pytest.approx(1.6094379124341003, abs=1e-12)
    sharp = T.Tensor(np.array([[0.0, 1e4], [1e4, 0.0]]))
    assert query_nll(sharp, [0, 1]).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=2, max_size=10), st.floats(-100, 100))
def test_probability_shift_invariance(d, shift):
    d = np.array(d)
    a = probs_from_distances(d).data
    b = probs_from_distances(d + shift).data
    assert abs(a.sum() - 1) <= 1e-12
    assert np.allclose(a, b, atol=1e-12)
