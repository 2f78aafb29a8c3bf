import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oim_search.gradcheck import central_diff, random_oim_case, rel_error
from oim_search.oim import (
    CircularQueue,
    DegenerateProbabilityError,
    DimensionError,
    LookupTable,
    MatchScores,
    OimConfig,
    ZeroNormError,
    lut_update,
    oim_forward,
    oim_grad_x,
    oim_loss,
    queue_push,
    subsample_indices,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def buffers(V, U, capacity=None, tau=1.0):
    V = np.atleast_2d(np.asarray(V, dtype=float))
    L, D = V.shape
    U = np.asarray(U, dtype=float).reshape(-1, D)
    lut = LookupTable(L, D)
    lut.vectors[:] = V
    cq = CircularQueue(len(U) if capacity is None else capacity, D)
    queue_push(cq, list(U))
    return lut, cq, OimConfig(feature_dim=D, num_labeled=L, tau=tau, queue_capacity=cq.capacity)


def naive_probs(x, V, U, tau):
    """Textbook softmax with plain Python floats, no max shift."""
    lab = [math.exp(sum(a * b for a, b in zip(v, x)) / tau) for v in V]
    unl = [math.exp(sum(a * b for a, b in zip(u, x)) / tau) for u in U]
    z = sum(lab) + sum(unl)
    return [e / z for e in lab], [e / z for e in unl]


class TestForward:
    def test_two_logit_closed_form(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        s = oim_forward(np.array([1.0, 0.0]), lut, cq, cfg)
        assert s.p[0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
        assert s.p[0] == pytest.approx(0.73106, abs=1e-5)
        assert s.q[0] == pytest.approx(0.26894, abs=1e-5)

    def test_orthogonal_query_is_uniform(self):
        V = np.zeros((3, 6))
        V[np.arange(3), np.arange(3)] = 1
        U = np.zeros((2, 6))
        U[[0, 1], [3, 4]] = 1
        lut, cq, cfg = buffers(V, U, tau=0.1)
        s = oim_forward(np.eye(6)[5], lut, cq, cfg)
        np.testing.assert_allclose(np.concatenate([s.p, s.q]), 1 / 5, rtol=0, atol=1e-15)

    def test_matches_naive_softmax(self):
        rng = np.random.default_rng(0)
        V = np.array([unit(r) for r in rng.standard_normal((8, 8))])
        U = np.array([unit(r) for r in rng.standard_normal((16, 8))])
        x = unit(rng.standard_normal(8))
        lut, cq, cfg = buffers(V, U, tau=0.1)
        s = oim_forward(x, lut, cq, cfg)
        p_ref, q_ref = naive_probs(x, V, U, 0.1)
        assert abs(s.p.sum() + s.q.sum() - 1) <= 1e-12
        np.testing.assert_allclose(s.p, p_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s.q, q_ref, rtol=0, atol=1e-12)

    def test_subset_zeroes_the_rest(self):
        rng = np.random.default_rng(1)
        lut, cq, cfg = buffers([unit(r) for r in rng.standard_normal((5, 4))],
                               [unit(r) for r in rng.standard_normal((6, 4))])
        x = unit(rng.standard_normal(4))
        s = oim_forward(x, lut, cq, cfg, labeled_subset=[1, 3], unlabeled_subset=[0])
        assert set(np.flatnonzero(s.p)) == {1, 3}
        assert set(np.flatnonzero(s.q)) == {0}
        p_ref, q_ref = naive_probs(x, lut.vectors[[1, 3]], cq.vectors[[0]], 1.0)
        np.testing.assert_allclose(s.p[[1, 3]], p_ref, atol=1e-12)
        np.testing.assert_allclose(s.q[[0]], q_ref, atol=1e-12)

    def test_dimension_mismatch(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        with pytest.raises(DimensionError):
            oim_forward(np.ones(3) / np.sqrt(3), lut, cq, cfg)

    def test_empty_subset(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        with pytest.raises(ValueError):
            oim_forward(np.array([1.0, 0.0]), lut, cq, cfg, labeled_subset=[], unlabeled_subset=[])

    def test_zero_lut_rows_count_as_logit_zero(self):
        lut = LookupTable(3, 2)
        cq = CircularQueue(0, 2)
        cfg = OimConfig(feature_dim=2, num_labeled=3, tau=0.1, queue_capacity=0)
        s = oim_forward(np.array([0.6, 0.8]), lut, cq, cfg)
        np.testing.assert_allclose(s.p, 1 / 3)


class TestLoss:
    def test_certain_target(self):
        s = MatchScores(np.array([1.0]), np.zeros(0), np.array([0.0]), np.zeros(0))
        assert oim_loss(s, 0) == 0.0

    def test_closed_form(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        s = oim_forward(np.array([1.0, 0.0]), lut, cq, cfg)
        assert oim_loss(s, 0) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert oim_loss(s, 0) == pytest.approx(0.31326, abs=1e-5)

    def test_uniform_24(self):
        V = np.zeros((8, 25))
        U = np.zeros((16, 25))
        V[np.arange(8), np.arange(8)] = 1
        U[np.arange(16), 8 + np.arange(16)] = 1
        lut, cq, cfg = buffers(V, U, tau=0.1)
        s = oim_forward(np.eye(25)[24], lut, cq, cfg)
        assert oim_loss(s, 3) == pytest.approx(math.log(24), abs=1e-12)

    def test_target_out_of_range(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        with pytest.raises(IndexError):
            oim_loss(oim_forward(np.array([1.0, 0.0]), lut, cq, cfg), 1)

    def test_zero_probability_is_an_error(self):
        lut, cq, cfg = buffers([[1, 0], [-1, 0]], np.zeros((0, 2)), tau=1e-3)
        s = oim_forward(np.array([1.0, 0.0]), lut, cq, cfg)
        assert s.p[1] == 0.0
        with pytest.raises(DegenerateProbabilityError):
            oim_loss(s, 1)

    def test_excluded_target_is_an_error(self):
        lut, cq, cfg = buffers([[1, 0], [0, 1]], [[0, 1]])
        s = oim_forward(np.array([1.0, 0.0]), lut, cq, cfg, labeled_subset=[0])
        with pytest.raises(DegenerateProbabilityError):
            oim_loss(s, 1)


def loss_at(x, case, **subset):
    return oim_loss(oim_forward(x, case.lut, case.queue, case.cfg, **subset), case.target)


class TestGradient:
    def test_zero_when_certain(self):
        x = unit([0.3, -0.2, 0.9])
        lut, cq, cfg = buffers([x], np.zeros((0, 3)), tau=0.1)
        s = oim_forward(x, lut, cq, cfg)
        np.testing.assert_array_equal(oim_grad_x(s, 0, lut, cq, cfg), np.zeros(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            case = random_oim_case(rng)
            case.cfg.tau = 0.1
            g = oim_grad_x(oim_forward(case.x, case.lut, case.queue, case.cfg), case.target,
                           case.lut, case.queue, case.cfg)
            assert rel_error(g, central_diff(lambda x: loss_at(x, case), case.x)) <= 1e-6

    def test_matches_finite_differences_under_subsampling(self):
        rng = np.random.default_rng(8)
        case = random_oim_case(rng)
        while case.lut.num_labeled < 4 or len(case.queue) < 3:
            case = random_oim_case(rng)
        lab = subsample_indices(rng, case.lut.num_labeled, 3, must_include=case.target)
        unl = subsample_indices(rng, len(case.queue), 2)
        s = oim_forward(case.x, case.lut, case.queue, case.cfg, labeled_subset=lab, unlabeled_subset=unl)
        g = oim_grad_x(s, case.target, case.lut, case.queue, case.cfg)
        fd = central_diff(lambda x: loss_at(x, case, labeled_subset=lab, unlabeled_subset=unl), case.x)
        assert rel_error(g, fd) <= 1e-6

    def test_halving_tau_at_symmetric_point(self):
        V = np.eye(5)[:3]
        U = np.eye(5)[3:4]
        x = np.eye(5)[4]
        grads = {}
        for tau in (0.2, 0.1):
            lut, cq, cfg = buffers(V, U, tau=tau)
            g = oim_grad_x(oim_forward(x, lut, cq, cfg), 0, lut, cq, cfg)
            fd = central_diff(lambda v: oim_loss(oim_forward(v, lut, cq, cfg), 0), x)
            assert rel_error(g, fd) <= 1e-6
            grads[tau] = fd
        a, b = grads[0.2], grads[0.1]
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(b) / np.linalg.norm(a) == pytest.approx(2.0, rel=1e-6)

    def test_shape_mismatch(self):
        lut, cq, cfg = buffers([[1, 0]], [[0, 1]])
        s = oim_forward(np.array([1.0, 0.0]), lut, cq, cfg)
        bigger, _, _ = buffers([[1, 0], [0, 1]], [[0, 1]])
        with pytest.raises(DimensionError):
            oim_grad_x(s, 0, bigger, cq, cfg)


class TestLutUpdate:
    def test_gamma_one_is_identity(self):
        lut, _, _ = buffers([[1, 0], [0, 1]], np.zeros((0, 2)))
        before = lut.vectors.copy()
        lut_update(lut, 0, unit([1, 1]), 1.0)
        np.testing.assert_array_equal(lut.vectors, before)

    def test_gamma_zero_replaces(self):
        lut, _, _ = buffers([[1, 0], [0, 1]], np.zeros((0, 2)))
        x = unit([0.3, 0.7])
        lut_update(lut, 1, x, 0.0)
        np.testing.assert_array_equal(lut.vectors[1], x)
        np.testing.assert_array_equal(lut.vectors[0], [1, 0])

    def test_half_blend(self):
        lut, _, _ = buffers([[1, 0]], np.zeros((0, 2)))
        lut_update(lut, 0, np.array([0.0, 1.0]), 0.5)
        np.testing.assert_allclose(lut.vectors[0], [math.sqrt(2) / 2] * 2, atol=1e-15)

    def test_first_update_of_zero_row(self):
        lut = LookupTable(2, 3)
        x = unit([1, 2, 3])
        lut_update(lut, 1, x, 0.5)
        np.testing.assert_allclose(lut.vectors[1], x, atol=1e-15)

    def test_cancellation_leaves_row(self):
        lut, _, _ = buffers([[1, 0]], np.zeros((0, 2)))
        with pytest.raises(ZeroNormError):
            lut_update(lut, 0, np.array([-1.0, 0.0]), 0.5)
        np.testing.assert_array_equal(lut.vectors[0], [1, 0])

    def test_rejects_non_unit(self):
        lut = LookupTable(1, 2)
        with pytest.raises(ValueError):
            lut_update(lut, 0, np.array([2.0, 0.0]), 0.5)


class TestQueue:
    def letters(self, n, d=3):
        return [unit(np.arange(d) + i + 1.0) * (1 if i % 2 else -1) for i in range(n)]

    def test_fifo_eviction(self):
        a, b, c, d, e = self.letters(5)
        cq = CircularQueue(3, 3)
        queue_push(cq, [a, b, c])
        queue_push(cq, [d, e])
        np.testing.assert_array_equal(cq.vectors, [c, d, e])

    def test_empty_push(self):
        a, b = self.letters(2)
        cq = CircularQueue(3, 3)
        queue_push(cq, [a, b])
        queue_push(cq, [])
        np.testing.assert_array_equal(cq.vectors, [a, b])

    def test_overfull_push(self):
        a, b, c, d = self.letters(4)
        cq = CircularQueue(3, 3)
        queue_push(cq, [a, b, c, d])
        np.testing.assert_array_equal(cq.vectors, [b, c, d])

    def test_rejects_non_unit(self):
        cq = CircularQueue(3, 2)
        with pytest.raises(ValueError):
            queue_push(cq, [np.array([1.0, 1.0])])
        assert len(cq) == 0

    def test_zero_capacity(self):
        cq = CircularQueue(0, 2)
        queue_push(cq, [np.array([1.0, 0.0])])
        assert len(cq) == 0 and cq.vectors.shape == (0, 2)


class TestSubsample:
    def test_full(self):
        np.testing.assert_array_equal(subsample_indices(np.random.default_rng(0), 10, 10), np.arange(10))

    def test_forced_single(self):
        assert list(subsample_indices(np.random.default_rng(0), 100, 1, must_include=7)) == [7]

    def test_deterministic(self):
        a = subsample_indices(np.random.default_rng(5), 50, 5)
        b = subsample_indices(np.random.default_rng(5), 50, 5)
        np.testing.assert_array_equal(a, b)
        assert len(set(a)) == 5

    def test_too_many(self):
        with pytest.raises(ValueError):
            subsample_indices(np.random.default_rng(0), 3, 4)

    def test_uniform_marginals(self):
        rng = np.random.default_rng(11)
        counts = np.zeros(10)
        for _ in range(4000):
            counts[subsample_indices(rng, 10, 4, must_include=0)] += 1
        assert counts[0] == 4000
        # each other index is kept with probability 3/9
        np.testing.assert_allclose(counts[1:] / 4000, 1 / 3, atol=0.03)


# properties

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_probabilities_sum_to_one(seed):
    case = random_oim_case(np.random.default_rng(seed))
    s = oim_forward(case.x, case.lut, case.queue, case.cfg)
    assert abs(s.p.sum() + s.q.sum() - 1.0) <= 1e-12
    assert np.all((s.p >= 0) & (s.p <= 1)) and np.all((s.q >= 0) & (s.q <= 1))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_gradient_ignores_later_buffer_changes(seed):
    rng = np.random.default_rng(seed)
    case = random_oim_case(rng)
    lut0, cq0 = case.lut.copy(), case.queue.copy()
    s = oim_forward(case.x, case.lut, case.queue, case.cfg)
    expected = oim_grad_x(s, case.target, lut0, cq0, case.cfg)
    # scribble over the live buffers; the original copies must be unaffected
    case.lut.vectors[:] = rng.standard_normal(case.lut.vectors.shape)
    if len(case.queue):
        queue_push(case.queue, [unit(rng.standard_normal(case.cfg.feature_dim))])
    np.testing.assert_array_equal(oim_grad_x(s, case.target, lut0, cq0, case.cfg), expected)


@settings(max_examples=200, deadline=None)
@given(seeds, st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_lut_rows_stay_unit(seed, gammas):
    rng = np.random.default_rng(seed)
    L, D = 5, 4
    lut = LookupTable(L, D)
    touched = set()
    for g in gammas:
        t = int(rng.integers(L))
        try:
            lut_update(lut, t, unit(rng.standard_normal(D)), g)
        except ZeroNormError:
            continue
        if np.any(lut.vectors[t]):
            touched.add(t)
    for t in range(L):
        if t in touched:
            assert abs(np.linalg.norm(lut.vectors[t]) - 1) <= 1e-9
        else:
            assert not np.any(lut.vectors[t])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 6), st.lists(st.integers(0, 5), max_size=12), seeds)
def test_queue_keeps_last_entries(capacity, push_sizes, seed):
    rng = np.random.default_rng(seed)
    cq = CircularQueue(capacity, 3)
    history = []
    for n in push_sizes:
        batch = [unit(rng.standard_normal(3)) for _ in range(n)]
        history += batch
        queue_push(cq, batch)
        assert len(cq) <= capacity
    keep = min(len(history), capacity)
    expected = np.array(history[len(history) - keep:]).reshape(keep, 3)
    np.testing.assert_array_equal(cq.vectors, expected)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_subsampled_log_prob_dominates_full(seed):
    rng = np.random.default_rng(seed)
    case = random_oim_case(rng)
    full = -loss_at(case.x, case)
    k_lab = int(rng.integers(1, case.lut.num_labeled + 1))
    lab = subsample_indices(rng, case.lut.num_labeled, k_lab, must_include=case.target)
    unl = subsample_indices(rng, len(case.queue), int(rng.integers(0, len(case.queue) + 1)))
    sub = -loss_at(case.x, case, labeled_subset=lab, unlabeled_subset=unl)
    assert sub >= full - 1e-12


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_small_step_decreases_loss(seed):
    case = random_oim_case(np.random.default_rng(seed))
    s = oim_forward(case.x, case.lut, case.queue, case.cfg)
    g = oim_grad_x(s, case.target, case.lut, case.queue, case.cfg)
    if np.linalg.norm(g) < 1e-4:
        return  # stationary for practical purposes
    before = oim_loss(s, case.target)
    after = loss_at(case.x - 1e-3 * g, case)
    assert after < before
