import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from engage.core import BehaviorState
from engage.engagement import (AnnotationRecord, EngagementModel, all_states, fit_em, log_likelihood,
                               partial_state, posterior, predict_live, predict_session,
                               predict_session_with_context)


def sample_records(n_ann=6, n_turns=200, K=2, seed=0, context=False):
    rng = np.random.default_rng(seed)
    S = 32 if context else 16
    phi = np.where(np.arange(K)[:, None] == 0, np.linspace(0.05, 0.95, S), np.linspace(0.95, 0.05, S))
    theta = rng.dirichlet(np.ones(K) * 0.5, size=n_ann)
    recs = []
    for t in range(n_turns):
        x = int(rng.integers(S))
        st_ = BehaviorState.decode(x, context)
        for i in range(n_ann):
            k = rng.choice(K, p=theta[i])
            recs.append(AnnotationRecord(f"a{i}", st_, int(rng.random() < phi[k, x]), f"s/t{t}"))
    return recs


def model(theta, phi, context=False, prior=None):
    theta = np.asarray(theta, float)
    S = 32 if context else 16
    prior = np.full(S, 1 / S) if prior is None else prior
    return EngagementModel(theta.shape[1], [f"a{i}" for i in range(len(theta))], theta, phi, prior, context)


def test_single_character_is_smoothed_rate():
    recs = sample_records(n_ann=4, n_turns=100, seed=1)
    m = fit_em(recs, K=1, restarts=2)
    np.testing.assert_allclose(m.theta, 1.0)
    for x in range(16):
        ys = [r.engaged for r in recs if r.state.encode() == x]
        assert m.phi[0, x] == pytest.approx((sum(ys) + 1) / (len(ys) + 2))


def test_posterior_example():
    phi = np.tile([[0.2], [0.6]], (1, 16))
    m = model([[0.25, 0.75]], phi)
    assert posterior(m, "a0", 3) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_posterior_is_convex_combination(seed, K):
    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(np.ones(K), size=3)
    phi = rng.uniform(0, 1, (K, 16))
    m = model(theta, phi)
    for i, x in itertools.product(range(3), range(16)):
        p = posterior(m, f"a{i}", x)
        assert p == pytest.approx(sum(theta[i, k] * phi[k, x] for k in range(K)))
        assert phi[:, x].min() - 1e-12 <= p <= phi[:, x].max() + 1e-12


def test_posterior_errors():
    m = model([[1.0]], np.full((1, 16), 0.5))
    with pytest.raises(ValueError):
        posterior(m, "a0", 16)
    with pytest.raises(KeyError):
        posterior(m, "zz", 0)


def test_live_constant_phi():
    m = model([[0.5, 0.5], [0.1, 0.9]], np.tile([[0.3], [0.7]], (1, 16)))
    pi = np.array([0.3, 0.7])
    for s in all_states():
        assert predict_live(m, s) == pytest.approx(pi @ [0.3, 0.7])


def test_live_full_observation_uses_population_mean():
    rng = np.random.default_rng(2)
    theta = rng.dirichlet(np.ones(3), size=4)
    phi = rng.uniform(size=(3, 16))
    m = model(theta, phi, prior=rng.dirichlet(np.ones(16)))
    for x, s in enumerate(all_states()):
        assert predict_live(m, s) == pytest.approx(theta.mean(axis=0) @ phi[:, x])


def test_live_marginalises_over_unobserved():
    rng = np.random.default_rng(3)
    theta = rng.dirichlet(np.ones(2), size=3)
    phi = rng.uniform(size=(2, 16))
    prior = rng.dirichlet(np.ones(16))
    m = model(theta, phi, prior=prior)
    pi = theta.mean(axis=0)
    num = den = 0.0
    for n, lg, bc in itertools.product([0, 1], repeat=3):
        x = n + 2 * lg + 4 * bc + 8
        num += prior[x] * (pi @ phi[:, x])
        den += prior[x]
    assert predict_live(m, partial_state(gaze=True)) == pytest.approx(num / den)


def test_live_nothing_observed_uniform_prior():
    rng = np.random.default_rng(4)
    phi = rng.uniform(size=(2, 16))
    m = model([[0.4, 0.6]], phi)
    assert predict_live(m, partial_state()) == pytest.approx(np.mean([0.4, 0.6] @ phi))


def _context_phi(p_if_prev0, p_if_prev1):
    return np.array([[p_if_prev1 if s.prev_engaged else p_if_prev0 for s in all_states(True)]])


def test_context_filter_hand_trace():
    m = model([[1.0]], _context_phi(0.7, 0.3), context=True)
    states = [BehaviorState()] * 4
    # prev starts at 0 -> 0.7 -> prev 1 -> 0.3 -> prev 0 -> ...
    assert predict_session_with_context(m, states) == pytest.approx([0.7, 0.3, 0.7, 0.3])
    assert predict_session(m, states) == pytest.approx([0.7, 0.3, 0.7, 0.3])


def test_context_filter_sticky():
    m = model([[1.0]], _context_phi(0.9, 0.6), context=True)
    assert predict_session_with_context(m, [BehaviorState()] * 3) == pytest.approx([0.9, 0.6, 0.6])


def test_context_filter_needs_context_model():
    m = model([[1.0]], np.full((1, 16), 0.5))
    with pytest.raises(ValueError):
        predict_session_with_context(m, [BehaviorState()])


def test_em_trace_is_monotone():
    m = fit_em(sample_records(seed=5), K=3, restarts=3)
    tr = np.array(m.loglik_trace)
    assert len(tr) > 2
    assert np.all(np.diff(tr) >= -1e-9)


def test_more_characters_fit_better():
    recs = sample_records(seed=6, n_turns=300)
    assert log_likelihood(fit_em(recs, K=3, restarts=4), recs) >= log_likelihood(fit_em(recs, K=1), recs)


def test_record_order_does_not_matter():
    recs = sample_records(seed=7, n_turns=80)
    perm = np.random.default_rng(0).permutation(len(recs))
    a = fit_em(recs, K=2, restarts=3)
    b = fit_em([recs[i] for i in perm], K=2, restarts=3)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-8)
    np.testing.assert_allclose(a.phi, b.phi, atol=1e-8)
    np.testing.assert_allclose(a.state_prior, b.state_prior)


def test_state_prior_counts_turns_once():
    s3 = BehaviorState.decode(3)
    recs = [AnnotationRecord(f"a{i}", s3, 1, "s/t1") for i in range(5)]
    recs.append(AnnotationRecord("a0", BehaviorState(), 0, "s/t2"))
    m = fit_em(recs, K=1, restarts=1)
    expected = np.ones(16)
    expected[3] += 1
    expected[0] += 1
    np.testing.assert_allclose(m.state_prior, expected / 18)


def test_context_detected_from_records():
    m = fit_em(sample_records(n_ann=2, n_turns=30, context=True), K=1, restarts=1)
    assert m.context_enabled and m.phi.shape == (1, 32)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_em([])
    with pytest.raises(ValueError):
        fit_em(sample_records(n_turns=2), K=0)


def test_save_load(tmp_path):
    m = fit_em(sample_records(seed=8, n_turns=40), K=2, restarts=2)
    m.save(tmp_path / "m.json")
    back = EngagementModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta, m.theta)
    np.testing.assert_array_equal(back.phi, m.phi)
    assert back.loglik_trace == m.loglik_trace
    assert back.annotator_ids == m.annotator_ids


def test_model_shape_validation():
    with pytest.raises(ValueError):
        model([[1.0]], np.full((1, 15), 0.5))
