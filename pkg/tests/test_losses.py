import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smad import autograd as ag
from smad.losses import (
    DataError,
    attention_loss,
    ctc_forward_backward,
    ctc_loss,
    min_ctc_frames,
    multi_objective_loss,
)

from helpers import check_op


def _collapse(path, blank=0):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_force_ctc_prob(log_probs: np.ndarray, target) -> float:
    """Sum of path probabilities over every framewise path collapsing to ``target``."""
    n_frames, n_classes = log_probs.shape
    probs = np.exp(log_probs)
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=n_frames):
        if _collapse(path) == tuple(target):
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return total


def _random_log_probs(r, n_frames, n_classes):
    x = r.normal(scale=2.0, size=(n_frames, n_classes))
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


# ---- CTC ---------------------------------------------------------------------

def test_ctc_single_frame_single_label():
    lp = np.log(np.array([[0.2, 0.7, 0.1]]))
    assert abs(ctc_loss(lp, [1]).item() + math.log(0.7)) < 1e-12


def test_ctc_two_frames_three_paths():
    p = np.array([[0.3, 0.5, 0.2], [0.6, 0.1, 0.3]])
    expected = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
    assert abs(ctc_loss(np.log(p), [1]).item() + math.log(expected)) < 1e-12


def test_ctc_matches_exhaustive_enumeration():
    """T <= 6, L <= 3, |U| <= 4, 240 random instances."""
    r = np.random.default_rng(0)
    count = 0
    for n_frames in range(1, 7):
        for length in range(1, 4):
            for n_symbols in range(1, 5):
                if (n_symbols + 1) ** n_frames > 10**5:
                    continue
                for _ in range(3):
                    target = list(r.integers(1, n_symbols + 1, size=length))
                    lp = _random_log_probs(r, n_frames, n_symbols + 1)
                    ll, _ = ctc_forward_backward(lp, target)
                    oracle = brute_force_ctc_prob(lp, target)
                    if min_ctc_frames(target) > n_frames:
                        assert oracle == 0.0 and ll == -np.inf
                    else:
                        assert abs(math.exp(ll) - oracle) <= 1e-10
                    count += 1
    assert count >= 200


def test_ctc_gradient_matches_finite_differences():
    r = np.random.default_rng(1)
    for n_frames in range(2, 6):
        x = r.normal(size=(n_frames, 4))
        target = list(r.integers(1, 4, size=min(2, n_frames)))
        if min_ctc_frames(target) > n_frames:
            continue
        check_op(lambda t: ctc_loss(ag.log_softmax(t, axis=-1), target), [x], tol=1e-4)


def test_ctc_occupancy_rows_sum_to_one():
    r = np.random.default_rng(2)
    lp = _random_log_probs(r, 9, 5)
    _, occ = ctc_forward_backward(lp, [1, 3, 3, 2])
    np.testing.assert_allclose(occ.sum(-1), 1.0, atol=1e-12)


def test_ctc_infeasible_is_infinite_with_warning():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.warns(RuntimeWarning, match="no valid alignment"):
        loss = ctc_loss(lp, [1, 1])
    assert loss.item() == np.inf
    assert min_ctc_frames([1, 1]) == 3


def test_ctc_swapping_tokens_changes_loss():
    r = np.random.default_rng(3)
    for _ in range(20):
        lp = _random_log_probs(r, 6, 4)
        assert ctc_loss(lp, [1, 2]).item() != ctc_loss(lp, [2, 1]).item()


def test_ctc_batch_respects_lengths_and_averages():
    r = np.random.default_rng(4)
    a, b = _random_log_probs(r, 5, 4), _random_log_probs(r, 8, 4)
    padded = np.zeros((2, 8, 4))
    padded[0, :5], padded[1] = a, b
    padded[0, 5:] = 123.0  # garbage that must be ignored
    batch = ctc_loss(padded, [[1, 2], [3]], input_lengths=[5, 8]).item()
    single = (ctc_loss(a, [1, 2]).item() + ctc_loss(b, [3]).item()) / 2
    assert abs(batch - single) < 1e-12


# ---- attention loss ------------------------------------------------------------

def test_uniform_logits_give_log_vocab():
    assert abs(attention_loss(np.zeros((3, 7)), [1, 2, 3], smoothing=0.0).item() - math.log(7)) < 1e-12


def test_confident_prediction_without_smoothing_goes_to_zero():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 3] = 50.0
    assert attention_loss(logits, [1, 3], smoothing=0.0).item() < 1e-30


def test_hand_computed_smoothed_case():
    logits = np.array([[1.0, 2.0, 0.5, -1.0, 0.0], [0.3, -0.2, 0.0, 2.5, 1.0]])
    targets = [1, 3]
    eps, v = 0.1, 5
    total = 0.0
    for row, y in zip(logits, targets):
        logp = row - math.log(sum(math.exp(z) for z in row))
        for k in range(v):
            q = 1 - eps if k == y else eps / (v - 1)
            total += q * (math.log(q) - logp[k])
    assert abs(attention_loss(logits, targets, smoothing=eps).item() - total / 2) < 1e-10


def test_attention_loss_masks_padding():
    r = np.random.default_rng(5)
    logits = r.normal(size=(2, 4, 6))
    tgt = np.array([[1, 2, 5, 5], [3, 3, 3, 1]])
    full = attention_loss(logits, tgt, 0.1, lengths=[2, 4]).item()
    a = attention_loss(logits[0, :2], tgt[0, :2], 0.1).item()
    b = attention_loss(logits[1], tgt[1], 0.1).item()
    assert abs(full - (a + b) / 2) < 1e-12
    logits[0, 2:] += 100.0
    assert attention_loss(logits, tgt, 0.1, lengths=[2, 4]).item() == pytest.approx(full, abs=1e-12)


def test_attention_loss_rejects_bad_ids():
    with pytest.raises(DataError):
        attention_loss(np.zeros((2, 4)), [1, 9])


def test_attention_loss_gradient():
    r = np.random.default_rng(6)
    check_op(lambda x: attention_loss(x, np.array([[1, 0, 2], [3, 3, 1]]), 0.1, [3, 2]), [r.normal(size=(2, 3, 4))])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_attention_loss_falls_as_true_logit_rises(seed, eps):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(1, 6))
    values = []
    for bump in np.linspace(-3, 3, 7):
        z = logits.copy()
        z[0, 2] = logits[0, 2] + bump
        values.append(attention_loss(z, [2], smoothing=eps).item())
    # the true-class probability grows with the bump; the loss falls while it stays below 1 - eps
    p = [np.exp(logits[0, 2] + b) / (np.exp(logits[0, 2] + b) + np.exp(np.delete(logits[0], 2)).sum())
         for b in np.linspace(-3, 3, 7)]
    for k in range(6):
        if p[k + 1] <= 1 - eps:
            assert values[k + 1] < values[k]


# ---- multi-objective ------------------------------------------------------------

def test_mol_default_weight_arithmetic():
    assert abs(multi_objective_loss(2.0, 1.0, 0.3).mol - 1.3) < 1e-12


def test_mol_boundaries_are_exact():
    assert multi_objective_loss(2.5, 1.25, 0.0).mol == 1.25
    assert multi_objective_loss(2.5, 1.25, 1.0).mol == 2.5


def test_mol_boundary_drops_unused_gradient():
    x = ag.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ag.Tensor(np.array([3.0]), requires_grad=True)
    ctc, att = ag.tsum(x * x), ag.tsum(y * y)
    report = multi_objective_loss(ctc, att, 0.0)
    ag.backward(report.loss)
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, [6.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 50), st.floats(0, 50))
def test_mol_is_affine(lam, c, a, a2):
    r1 = multi_objective_loss(c, a, lam)
    r2 = multi_objective_loss(c, a2, lam)
    assert abs(r1.mol - (lam * c + (1 - lam) * a)) <= 1e-12 * max(1.0, c, a)
    assert abs((r2.mol - r1.mol) - (1 - lam) * (a2 - a)) <= 1e-10 * max(1.0, c, a, a2)
    assert r1.record()["lambda"] == lam


def test_mol_rejects_bad_lambda():
    with pytest.raises(ValueError):
        multi_objective_loss(1.0, 1.0, 1.2)
