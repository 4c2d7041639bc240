import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from composed_retrieval import numerics as nx
from composed_retrieval.errors import BatchTooSmallError, ConfigurationError, ZeroNormError
from composed_retrieval.metric import LossConfig, cosine_matrix, cosine_similarity, ranked_list_loss
from composed_retrieval.numerics import Tensor


def loss_oracle(composed, targets, alpha_p, margin, temperature):
    """Direct double-loop transcription of the loss on plain Python floats."""
    alpha_n = alpha_p - margin
    b = len(composed)

    def cos(u, v):
        dot = sum(a * c for a, c in zip(u, v))
        return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(c * c for c in v)))

    pos = 0.0
    neg = 0.0
    for i in range(b):
        pos += max(0.0, alpha_p - cos(composed[i], targets[i]))
        num = den = 0.0
        for j in range(b):
            if j == i:
                continue
            s = cos(composed[i], targets[j])
            if s > alpha_n:
                w = math.exp(temperature * (s - alpha_n))
                num += w * (s - alpha_n)
                den += w
        if den > 0:
            neg += num / den
    return pos / b + neg / b


# --- cosine --------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(ZeroNormError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_scale_invariance_and_range(seed):
    r = np.random.default_rng(seed)
    u, v = r.normal(size=6), r.normal(size=6)
    c = cosine_similarity(u, v)
    assert -1.0 <= c <= 1.0
    assert abs(cosine_similarity(3 * u, 5 * v) - c) <= 1e-12


def test_cosine_clamped_for_parallel_vectors():
    u = np.full(17, 0.1)
    assert cosine_similarity(u, u * 7.3) <= 1.0
    assert np.all(cosine_matrix(np.tile(u, (3, 1)), np.tile(u, (2, 1))) <= 1.0)


def test_cosine_matrix_matches_pairwise(rng):
    q, g = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    m = cosine_matrix(q, g)
    for i in range(4):
        for j in range(6):
            assert abs(m[i, j] - cosine_similarity(q[i], g[j])) <= 1e-12


# --- loss ----------------------------------------------------------------------


def test_loss_config_validation():
    assert LossConfig().alpha_n == pytest.approx(0.4)
    with pytest.raises(ConfigurationError):
        LossConfig(alpha_p=0.5, margin=1.6)
    with pytest.raises(ConfigurationError):
        LossConfig(temperature=-1.0)
    with pytest.raises(ConfigurationError):
        LossConfig(alpha_p=1.2)


def test_identical_rows_give_point_six():
    rows = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
    loss = ranked_list_loss(rows, rows, LossConfig(0.8, 0.4, 0.0))
    assert loss.item() == pytest.approx(0.6, abs=1e-12)


def test_no_violations_give_zero():
    eye = Tensor(np.eye(3))
    assert ranked_list_loss(eye, eye).item() == 0.0


def test_batch_of_one_rejected():
    with pytest.raises(BatchTooSmallError):
        ranked_list_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_random_batch_matches_double_loop(seed):
    r = np.random.default_rng(seed)
    c = r.normal(size=(4, 6))
    t = c + r.normal(scale=0.8, size=(4, 6))
    cfg = LossConfig(0.8, 0.4, 10.0)
    got = ranked_list_loss(Tensor(c), Tensor(t), cfg).item()
    want = loss_oracle(c.tolist(), t.tolist(), 0.8, 0.4, 10.0)
    assert abs(got - want) <= 1e-10


def test_oracle_hits_violations():
    # make sure the random oracle comparison is not vacuous
    r = np.random.default_rng(0)
    c = r.normal(size=(4, 6))
    t = c + r.normal(scale=0.8, size=(4, 6))
    s = cosine_matrix(c, t)
    assert np.any((s > 0.4) & ~np.eye(4, dtype=bool))


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(3)
    base = r.normal(size=(3, 5))
    c = Tensor(base + r.normal(scale=0.3, size=(3, 5)), requires_grad=True)
    t = Tensor(np.roll(base, 1, axis=0) * 0.3 + base, requires_grad=True)
    cfg = LossConfig(0.8, 0.4, 10.0)
    errors = nx.check_gradients(lambda: ranked_list_loss(c, t, cfg), [c, t])
    assert max(errors.values()) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_nonnegative_and_scale_invariant(seed):
    r = np.random.default_rng(seed)
    c, t = r.normal(size=(4, 5)), r.normal(size=(4, 5))
    base = ranked_list_loss(Tensor(c), Tensor(t)).item()
    assert base >= 0.0
    scale = r.uniform(0.1, 10.0, size=(4, 1))
    assert abs(ranked_list_loss(Tensor(c * scale), Tensor(t)).item() - base) <= 1e-9
    assert abs(ranked_list_loss(Tensor(c), Tensor(t * scale)).item() - base) <= 1e-9


def loss_from_similarity(s, cfg):
    """The loss written directly in terms of a similarity matrix."""
    b = s.shape[0]
    pos = sum(max(0.0, cfg.alpha_p - s[i, i]) for i in range(b)) / b
    neg = 0.0
    for i in range(b):
        ex = [s[i, j] - cfg.alpha_n for j in range(b) if j != i and s[i, j] > cfg.alpha_n]
        w = [math.exp(cfg.temperature * e) for e in ex]
        neg += sum(a * e for a, e in zip(w, ex)) / sum(w) if w else 0.0
    return pos + neg / b


def _unit_rows_with_similarity(s):
    # targets are the standard basis, so composed row i must equal s[i] up to scale;
    # pad one coordinate to make the rows unit length
    slack = np.sqrt(np.maximum(0.0, 1.0 - np.sum(s * s, axis=1, keepdims=True)))
    return np.hstack([s, slack]), np.eye(s.shape[0], s.shape[0] + 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_similarity_form_matches_implementation(seed):
    r = np.random.default_rng(seed)
    s = r.uniform(-1, 1, size=(3, 3)) / 2.0
    c, t = _unit_rows_with_similarity(s)
    got = ranked_list_loss(Tensor(c), Tensor(t)).item()
    assert abs(got - loss_from_similarity(s, LossConfig())) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 0.3))
def test_raising_a_positive_never_increases_loss(seed, step):
    r = np.random.default_rng(seed)
    cfg = LossConfig()
    s = r.uniform(-1, 1, size=(4, 4))
    i = r.integers(0, 4)
    raised = s.copy()
    raised[i, i] = min(1.0, s[i, i] + step)
    assert loss_from_similarity(raised, cfg) <= loss_from_similarity(s, cfg) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 0.3))
def test_lowering_the_hardest_negative_never_increases_loss(seed, step):
    r = np.random.default_rng(seed)
    cfg = LossConfig()
    s = r.uniform(-1, 1, size=(4, 4))
    i = r.integers(0, 4)
    off = [j for j in range(4) if j != i]
    j = max(off, key=lambda k: s[i, k])
    lowered = s.copy()
    lowered[i, j] -= step
    # the hardest violator sits at or above the weighted mean, where the
    # row term is increasing in it
    assert loss_from_similarity(lowered, cfg) <= loss_from_similarity(s, cfg) + 1e-12


def test_lowering_a_weak_violator_can_raise_the_loss():
    # exponential weighting makes the row term a weighted mean of excesses;
    # shrinking an excess that lies well below that mean (or dropping it from
    # the violator set) raises the mean
    cfg = LossConfig()
    s = np.array([[1.0, 0.4 + 1.0, 0.4 + 0.05], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    s[0, 1] = 1.0
    base = loss_from_similarity(s, cfg)
    weaker = s.copy()
    weaker[0, 2] = 0.4 + 0.01
    dropped = s.copy()
    dropped[0, 2] = 0.3
    assert loss_from_similarity(weaker, cfg) > base
    assert loss_from_similarity(dropped, cfg) > base


def test_zero_temperature_is_uniform_average():
    r = np.random.default_rng(7)
    c = r.normal(size=(5, 4))
    t = c + r.normal(scale=0.4, size=(5, 4))
    cfg = LossConfig(0.8, 0.4, 0.0)
    s = cosine_matrix(c, t)
    pos = np.mean(np.maximum(0.0, 0.8 - np.diag(s)))
    neg = 0.0
    for i in range(5):
        v = [s[i, j] - 0.4 for j in range(5) if j != i and s[i, j] > 0.4]
        neg += sum(v) / len(v) if v else 0.0
    assert abs(ranked_list_loss(Tensor(c), Tensor(t), cfg).item() - (pos + neg / 5)) <= 1e-12
