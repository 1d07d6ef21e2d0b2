import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilasr import tensor as tn
from ilasr.data import Sample
from ilasr.errors import ConfigError, DomainError, InfeasibleAlignmentError, ShapeError
from ilasr.losses import (LossWeights, Posteriors, aggregate_loss, ctc_loss, ctc_loss_bruteforce,
                          ebkd_loss, entropy, ewc_penalty, fisher_estimate, greedy_log_prob,
                          importance_map, min_alignment_length, rbkd_loss, soften)
from ilasr.model import TINY_CONFIG, collate, forward, init_model
from ilasr.tensor import Tensor

from .oracles import random_ctc_instance


def P(rows):
    return Posteriors.from_probs(np.array(rows, dtype=np.float64))


# -- CTC ---------------------------------------------------------------------

def test_ctc_single_path():
    assert ctc_loss(P([[0.2, 0.8]]), [1]).item() == pytest.approx(-math.log(0.8), abs=1e-12)


def test_ctc_two_frames_uniform():
    # paths (a,a), (-,a), (a,-) each with mass 1/4
    assert ctc_loss(P([[0.5, 0.5], [0.5, 0.5]]), [1]).item() == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_loss_bruteforce(np.full((2, 2), 0.5), [1]) == pytest.approx(0.2876820724517809, abs=1e-12)


def test_ctc_repeated_label_needs_blank():
    with pytest.raises(InfeasibleAlignmentError, match="infeasible alignment"):
        ctc_loss(P([[0.5, 0.5]]), [1, 1])
    assert min_alignment_length([1, 1, 2]) == 4


def test_ctc_empty_labels_is_all_blank_path():
    probs = np.array([[0.6, 0.4], [0.9, 0.1], [0.3, 0.7]])
    expect = -np.log(probs[:, 0]).sum()
    assert ctc_loss(Posteriors.from_probs(probs), []).item() == pytest.approx(expect, abs=1e-12)
    assert ctc_loss_bruteforce(probs, []) == pytest.approx(expect, abs=1e-12)


def test_ctc_rejects_blank_or_out_of_range_labels():
    with pytest.raises(DomainError):
        ctc_loss(P([[0.5, 0.5], [0.5, 0.5]]), [0])
    with pytest.raises(DomainError):
        ctc_loss(P([[0.5, 0.5], [0.5, 0.5]]), [2])


def test_bruteforce_refuses_large_instances():
    with pytest.raises(ValueError, match="enumeration bound"):
        ctc_loss_bruteforce(np.full((9, 4), 0.25), [1])


def test_ctc_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(300):
        probs, y = random_ctc_instance(rng)
        worst = max(worst, abs(ctc_loss(Posteriors.from_probs(probs), y).item()
                               - ctc_loss_bruteforce(probs, y)))
    assert worst < 1e-9


def test_ctc_batched_with_padding_equals_per_sample():
    rng = np.random.default_rng(5)
    cases = [random_ctc_instance(rng, max_k=6, max_m=3) for _ in range(6)]
    K = max(p.shape[0] for p, _ in cases)
    M = 3
    probs = np.full((len(cases), K, M), 1.0 / M)
    mask = np.zeros((len(cases), K), dtype=bool)
    singles = []
    for b, (p, y) in enumerate(cases):
        padded = np.zeros((p.shape[0], M))
        padded[:, :p.shape[1]] = p
        padded[:, p.shape[1]:] = 1e-30
        padded /= padded.sum(axis=1, keepdims=True)
        probs[b, :p.shape[0]] = padded
        mask[b, :p.shape[0]] = True
        singles.append(ctc_loss(Posteriors.from_probs(padded), y).item())
    per = ctc_loss(Posteriors.from_probs(probs, mask), [y for _, y in cases], reduction="none")
    np.testing.assert_allclose(per.data, singles, atol=1e-12)


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(5, 3))
    assert tn.finite_diff_check(lambda t: ctc_loss(Posteriors(tn.log_softmax(t)[None], np.ones((1, 5), bool)),
                                                   [1, 2]), z) < 1e-7


# -- softening and RBKD ------------------------------------------------------

def test_soften_closed_form():
    np.testing.assert_allclose(soften(P([[0.9, 0.1]]), 2).probs[0, 0], [0.75, 0.25], atol=1e-12)


def test_soften_identity_and_uniform():
    pi = np.array([[0.1, 0.2, 0.7]])
    np.testing.assert_allclose(soften(P(pi), 1.0).probs[0], pi, atol=1e-15)
    np.testing.assert_allclose(soften(P([[0.25] * 4]), 3.7).probs[0, 0], [0.25] * 4, atol=1e-15)


def test_soften_rejects_non_positive_temperature():
    with pytest.raises(DomainError):
        soften(P([[0.5, 0.5]]), 0.0)


def test_rbkd_examples():
    assert rbkd_loss(P([[0.5, 0.5]]), P([[0.5, 0.5]]), 1).item() == pytest.approx(math.log(2), abs=1e-12)
    expect = -(0.8 * math.log(0.6) + 0.2 * math.log(0.4))
    assert rbkd_loss(P([[0.8, 0.2]]), P([[0.6, 0.4]]), 1).item() == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.59192, abs=1e-5)


def test_rbkd_handles_zero_student_mass_without_nan():
    val = rbkd_loss(P([[0.5, 0.5]]), P([[1.0, 0.0]]), 1).item()
    assert math.isfinite(val) and val > 10


def test_rbkd_shape_mismatch():
    with pytest.raises(ShapeError):
        rbkd_loss(P([[0.5, 0.5]]), P([[0.5, 0.5], [0.5, 0.5]]), 1)


def test_rbkd_teacher_gets_no_gradient():
    t = Tensor(np.log([[[0.7, 0.3]]]), requires_grad=True)
    s = Tensor(np.log([[[0.4, 0.6]]]), requires_grad=True)
    loss = rbkd_loss(Posteriors(t, np.ones((1, 1), bool)), Posteriors(s, np.ones((1, 1), bool)), 2.0)
    loss.backward()
    assert t.grad is None or not np.any(t.grad)
    assert np.any(s.grad)


simplex_rows = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5)


@settings(max_examples=80, deadline=None)
@given(simplex_rows, st.floats(0.01, 1.0), st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_rbkd_gibbs_inequality(raw, shift, T):
    p = np.array(raw) / np.sum(raw)
    q = np.roll(p, 1) + shift
    q /= q.sum()
    gap = rbkd_loss(P([p]), P([q]), T).item() - rbkd_loss(P([p]), P([p]), T).item()
    assert gap >= -1e-12


@settings(max_examples=60, deadline=None)
@given(simplex_rows)
def test_softened_entropy_is_non_decreasing_in_temperature(raw):
    p = P([np.array(raw) / np.sum(raw)])
    h = [entropy(soften(p, T))[0, 0] for T in (0.5, 1, 2, 3, 5)]
    assert all(b >= a - 1e-12 for a, b in zip(h, h[1:]))


# -- greedy probability and EBKD ---------------------------------------------

def test_greedy_log_prob_examples():
    assert greedy_log_prob(P([[0.7, 0.3], [0.6, 0.4]])).item() == pytest.approx(math.log(0.42), abs=1e-12)
    assert greedy_log_prob(P([[0.25] * 4])).item() == pytest.approx(math.log(0.25), abs=1e-12)


def test_greedy_log_prob_gradient_only_on_argmax():
    lp = Tensor(np.log([[[0.7, 0.3], [0.4, 0.6]]]), requires_grad=True)
    greedy_log_prob(Posteriors(lp, np.ones((1, 2), bool))).sum().backward()
    np.testing.assert_array_equal(lp.grad[0], [[1, 0], [0, 1]])


def test_ebkd_examples():
    assert ebkd_loss(np.array([[1.0], [2.0]]), np.array([[2.0], [1.0]])).item() == \
        pytest.approx(math.sqrt(0.4), abs=1e-12)
    assert ebkd_loss(np.zeros((2, 1)), np.array([[1.0], [0.0]])).item() == pytest.approx(1.0, abs=1e-15)
    q = np.random.default_rng(0).uniform(0.1, 1, size=(4, 3))
    assert ebkd_loss(q, q).item() == 0.0


def test_ebkd_shape_mismatch():
    with pytest.raises(ShapeError):
        ebkd_loss(np.ones((2, 3)), np.ones((3, 3)))


def test_ebkd_ignores_masked_frames():
    rng = np.random.default_rng(1)
    q1 = rng.uniform(size=(1, 4, 3))
    q2 = rng.uniform(size=(1, 4, 3))
    mask = np.array([[True, True, False, False]])
    garbage = q2.copy()
    garbage[0, 2:] = rng.uniform(size=(2, 3)) * 50
    assert ebkd_loss(q1, q2, mask).item() == ebkd_loss(q1, garbage, mask).item()
    assert ebkd_loss(q1, q2, mask).item() == pytest.approx(ebkd_loss(q1[:, :2], q2[:, :2]).item(), abs=1e-15)


def test_ebkd_gradient_finite_at_fixed_point():
    q = Tensor(np.random.default_rng(2).uniform(0.1, 1, size=(1, 3, 4)), requires_grad=True)
    ebkd_loss(tn.detach(q), q).backward()
    assert np.all(np.isfinite(q.grad)) and not np.any(q.grad)


nonneg = st.floats(0.0, 3.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_ebkd_range_and_scale_invariance(d, K, seed):
    rng = np.random.default_rng(seed)
    q1 = np.maximum(rng.normal(size=(d, K)), 0)
    q2 = np.maximum(rng.normal(size=(d, K)), 0)
    base = ebkd_loss(q1, q2).item()
    assert 0.0 <= base <= 2.0 + 1e-12
    c1 = rng.uniform(0.01, 100, size=(1, K))
    c2 = rng.uniform(0.01, 100, size=(1, K))
    # frames with a sub-threshold norm would cross the zero guard when scaled
    if np.all(np.linalg.norm(q1, axis=0) * np.minimum(c1[0], 1) > 1e-6) and \
            np.all(np.linalg.norm(q2, axis=0) * np.minimum(c2[0], 1) > 1e-6):
        assert abs(ebkd_loss(q1 * c1, q2).item() - base) < 1e-12
        assert abs(ebkd_loss(q1, q2 * c2).item() - base) < 1e-12


def _tiny_batch(seed=0, n=3):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(TINY_CONFIG.input_dim, S)) for S in (7, 9, 5)[:n]]
    return collate(xs)


def test_importance_map_matches_finite_differences_on_feature_map():
    ck = init_model(TINY_CONFIG, 3)
    x, L = _tiny_batch()
    out = forward(ck, x, L)
    art = importance_map(out)
    A0 = out.feature_map.data
    # log p as a function of A alone: re-run the FC head on a perturbed A
    def head_logp(A):
        h = Tensor(A)
        params = ck.tensors()
        for i in range(len(ck.config.fc_dims)):
            h = tn.matmul(h, params[f"fc{i}.w"]) + params[f"fc{i}.b"]
            if i < len(ck.config.fc_dims) - 1:
                h = tn.relu(h)
        return greedy_log_prob(Posteriors(tn.log_softmax(h), out.frame_mask)).sum()

    assert head_logp(A0).item() == pytest.approx(art.log_p.sum(), abs=1e-12)
    num = np.zeros_like(A0)
    h = 1e-6
    it = np.nditer(A0, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        Ap, Am = A0.copy(), A0.copy()
        Ap[i] += h
        Am[i] -= h
        num[i] = (head_logp(Ap).item() - head_logp(Am).item()) / (2 * h)
    assert np.max(np.abs(num - art.alpha)) < 1e-5


def test_importance_map_masked_frames_have_zero_alpha():
    ck = init_model(TINY_CONFIG, 4)
    x, L = _tiny_batch()
    out = forward(ck, x, L)
    art = importance_map(out)
    assert not np.any(art.alpha[~out.frame_mask])
    assert np.all(art.Q.data >= 0)
    assert not art.Q.requires_grad


def test_importance_map_needs_live_graph():
    from ilasr.errors import GraphError
    ck = init_model(TINY_CONFIG, 4)
    x, L = _tiny_batch()
    out = forward(ck, x, L, tap_feature_map=False)
    with pytest.raises(GraphError, match="re-run forward"):
        importance_map(out)


def test_q_is_zero_when_alpha_a_nonpositive():
    assert not np.any(tn.relu(Tensor(-np.abs(np.random.default_rng(0).normal(size=(3, 4))))).data)


# -- EWC and Fisher ----------------------------------------------------------

def test_ewc_examples():
    assert ewc_penalty({"w": Tensor(3.0)}, {"w": np.array(0.0)}, {"w": np.array(2.0)}).item() == 18.0
    p = {"a": np.ones(3), "b": np.arange(4.0)}
    assert ewc_penalty(p, p, {k: np.ones_like(v) for k, v in p.items()}).item() == 0.0
    other = {k: v + 5 for k, v in p.items()}
    assert ewc_penalty(other, p, {k: np.zeros_like(v) for k, v in p.items()}).item() == 0.0


def test_ewc_name_mismatch():
    with pytest.raises(ShapeError):
        ewc_penalty({"a": np.ones(2)}, {"b": np.ones(2)}, {"a": np.ones(2)})


def _tiny_samples(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [Sample(rng.normal(size=(TINY_CONFIG.input_dim, 8)), (1 + i % 3, 2), "t", i) for i in range(n)]


def test_fisher_properties():
    ck = init_model(TINY_CONFIG, 1)
    samples = _tiny_samples()
    f = fisher_estimate(ck, samples)
    assert set(f) == set(ck.params)
    assert all(np.all(v >= 0) for v in f.values())
    doubled = fisher_estimate(ck, [s for s in samples for _ in range(2)])
    for k in f:
        np.testing.assert_allclose(doubled[k], f[k], rtol=1e-12, atol=1e-300)


def test_fisher_single_sample_is_squared_gradient():
    ck = init_model(TINY_CONFIG, 1)
    (s,) = _tiny_samples(1)
    params = ck.tensors(requires_grad=True)
    x, L = collate([s.x])
    ctc_loss(forward(ck, x, L, params=params, tap_feature_map=False).posteriors, [list(s.y)]).backward()
    f = fisher_estimate(ck, [s])
    for k, p in params.items():
        np.testing.assert_array_equal(f[k], p.grad ** 2)


def test_fisher_rejects_empty_dataset():
    with pytest.raises(ValueError):
        fisher_estimate(init_model(TINY_CONFIG, 0), [])


# -- aggregate ---------------------------------------------------------------

def test_reference_default_weights():
    w = LossWeights()
    assert (w.T, w.beta, w.gamma) == (3.0, 0.03, 500.0)


def test_aggregate_arithmetic_and_degeneracy():
    w = LossWeights(beta=0.03, gamma=500)
    assert aggregate_loss(Tensor(1.0), Tensor(2.0), Tensor(0.01), w).item() == pytest.approx(6.06, abs=1e-12)
    ctc = Tensor(1.25)
    assert aggregate_loss(ctc, Tensor(2.0), Tensor(0.5), LossWeights(beta=0, gamma=0)) is ctc


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(T=0)
    with pytest.raises(ConfigError):
        LossWeights(beta=-1)
    with pytest.raises(ConfigError):
        LossWeights(gamma=float("nan"))


def test_ctc_matches_probability_space_recursion():
    from .oracles import ctc_prob_space
    rng = np.random.default_rng(77)
    for _ in range(200):
        probs, y = random_ctc_instance(rng, max_k=8, max_m=5, max_u=4)
        assert ctc_loss(Posteriors.from_probs(probs), y).item() == pytest.approx(
            ctc_prob_space(probs, y), abs=1e-10)
