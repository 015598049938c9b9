"""Loss contracts, anchored by independent oracles.

The CTC oracle enumerates every (V+1)^T alignment path and keeps the ones
that collapse (merge repeats, then drop blanks) to the target; its log-sum
is the ground truth the DP must match.
"""

import itertools
import math

import numpy as np
import pytest

from jepkd import losses as ls
from jepkd import tensor as tc
from jepkd.tensor import Tape, Tensor, finite_diff_check

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# brute-force CTC oracle


def collapse(path):
    out = []
    prev = None
    for p in path:
        if p != prev:
            if p != 0:
                out.append(p)
            prev = p
    return tuple(out)


def ctc_brute_force(log_probs, target):
    """-log sum over all alignment paths collapsing to target."""
    t_len, k = log_probs.shape
    target = tuple(target)
    total = ls.NEG_INF
    for path in itertools.product(range(k), repeat=t_len):
        if collapse(path) != target:
            continue
        lp = sum(log_probs[t, s] for t, s in enumerate(path))
        total = np.logaddexp(total, lp)
    return -total


def random_log_probs(rng, t_len, k):
    logits = rng.normal(size=(t_len, k))
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# CTC examples from first principles


def test_ctc_single_frame_single_label():
    lp = np.log(np.array([[0.5, 0.3, 0.2]]))
    loss = ls.ctc_loss(Tensor(lp), [1])
    assert loss.item() == pytest.approx(-math.log(0.3), abs=1e-12)


def test_ctc_two_frames_one_label():
    lp = np.log(np.array([[0.5, 0.3, 0.2], [0.4, 0.5, 0.1]]))
    # paths collapsing to "a": (a,a)=.15, (blank,a)=.25, (a,blank)=.12
    loss = ls.ctc_loss(Tensor(lp), [1])
    assert loss.item() == pytest.approx(-math.log(0.52), abs=1e-12)


def test_ctc_infeasible_target_flags_infinity():
    lp = np.log(np.array([[0.5, 0.3, 0.2]]))
    loss = ls.ctc_loss(Tensor(lp), [1, 2])
    assert np.isinf(loss.item())
    assert loss.meta["infeasible"]


def test_ctc_out_of_vocabulary_rejected():
    lp = random_log_probs(RNG, 3, 3)
    with pytest.raises(ls.TargetError):
        ls.ctc_loss(Tensor(lp), [1, 5])


def test_ctc_unnormalized_rows_rejected():
    with pytest.raises(tc.ShapeMismatch):
        ls.ctc_loss(Tensor(RNG.normal(size=(3, 4))), [1])


def test_ctc_matches_brute_force_exhaustively():
    # every target of length <= 3 over V <= 3, every T <= 6
    for v in (1, 2, 3):
        k = v + 1
        for t_len in range(1, 7):
            rng = np.random.default_rng(1000 + 10 * v + t_len)
            lp = random_log_probs(rng, t_len, k)
            for u in range(0, 4):
                for target in itertools.product(range(1, v + 1), repeat=u):
                    got = ls.ctc_loss(Tensor(lp), list(target)).item()
                    want = ctc_brute_force(lp, target)
                    if math.isinf(want):
                        assert math.isinf(got)
                    else:
                        assert got == pytest.approx(want, rel=1e-9)


def test_ctc_pure_blank_frame_is_free():
    rng = np.random.default_rng(77)
    lp = random_log_probs(rng, 4, 4)
    target = [2, 1]
    base = ls.ctc_loss(Tensor(lp), target).item()
    blank_row = np.full((1, 4), -745.0)  # exp() == 0 in float64
    blank_row[0, 0] = 0.0
    extended = np.concatenate([lp, blank_row], axis=0)
    padded = ls.ctc_loss(Tensor(extended), target).item()
    assert padded == pytest.approx(base, abs=1e-9)


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(5, 4)))
    target = [2, 1, 1]

    def f(t):
        return ls.ctc_loss(tc.log_softmax_last(t), target)

    assert finite_diff_check(f, logits) < 1e-4


def test_ctc_batch_matches_singles_and_skips_infeasible():
    rng = np.random.default_rng(9)
    lp = np.stack([random_log_probs(rng, 2, 4) for _ in range(3)])
    targets = np.array([[1, 2], [2, 3], [3, 3]])  # last needs 3 frames: infeasible
    batch = ls.ctc_loss_batch(Tensor(lp), targets)
    singles = [ls.ctc_loss(Tensor(lp[i]), targets[i]).item() for i in range(2)]
    assert batch.item() == pytest.approx(np.mean(singles), rel=1e-12)
    assert batch.meta == {"n_infeasible": 1}


def test_ctc_batch_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    logits = Tensor(rng.normal(size=(2, 4, 4)))
    targets = np.array([[1, 2], [3, 1]])

    def f(t):
        return ls.ctc_loss_batch(tc.log_softmax_last(t), targets)

    assert finite_diff_check(f, logits) < 1e-4


# ---------------------------------------------------------------------------
# cross-entropy


def test_ce_uniform_logits():
    logits = Tensor(np.zeros((2, 4)))
    assert ls.cross_entropy(logits, [0, 3]).item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_ce_hand_value():
    logits = Tensor(np.array([[2.0, 0.0, 0.0]]))
    want = math.log(1.0 + 2.0 * math.exp(-2.0))
    assert ls.cross_entropy(logits, [0]).item() == pytest.approx(want, abs=1e-12)


def test_ce_saturated_margin():
    logits = Tensor(np.array([[30.0, 0.0, 0.0]]))
    assert ls.cross_entropy(logits, [0]).item() < 1e-12


def test_ce_target_out_of_range_rejected():
    with pytest.raises(ls.TargetError):
        ls.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_ce_gradient():
    rng = np.random.default_rng(13)
    logits = Tensor(rng.normal(size=(3, 5)))
    assert finite_diff_check(lambda t: ls.cross_entropy(t, [1, 0, 4]), logits) < 1e-4


# ---------------------------------------------------------------------------
# L1 distance


def test_l1_identity_is_zero():
    x = Tensor(RNG.normal(size=(3, 4)))
    assert ls.l1_distance(x, x).item() == 0.0


def test_l1_hand_value_and_symmetry():
    g = Tensor(np.array([1.0, 2.0]))
    a = Tensor(np.array([0.0, 4.0]))
    assert ls.l1_distance(g, a).item() == pytest.approx(1.5, abs=1e-15)
    assert ls.l1_distance(a, g).item() == pytest.approx(1.5, abs=1e-15)


def test_l1_shape_mismatch_rejected():
    with pytest.raises(tc.ShapeMismatch):
        ls.l1_distance(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_l1_gradient():
    rng = np.random.default_rng(17)
    a = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(4, 3)))
    assert finite_diff_check(lambda t: ls.l1_distance(t, a), x) < 1e-4


# ---------------------------------------------------------------------------
# least-squares adversarial pair


def scalar(v):
    return Tensor(np.array([v]))


def test_lsgan_d_examples():
    assert ls.lsgan_d_loss(scalar(1.0), scalar(0.0)).item() == 0.0
    assert ls.lsgan_d_loss(scalar(0.5), scalar(0.5)).item() == pytest.approx(0.25, abs=1e-15)
    assert ls.lsgan_d_loss(scalar(0.0), scalar(1.0)).item() == pytest.approx(1.0, abs=1e-15)


def test_lsgan_g_examples():
    zero = Tensor(0.0)
    assert ls.lsgan_g_loss(scalar(1.0), zero).item() == 0.0
    assert ls.lsgan_g_loss(scalar(0.0), Tensor(0.3)).item() == pytest.approx(0.8, abs=1e-15)
    assert ls.lsgan_g_loss(scalar(0.5), zero).item() == pytest.approx(0.125, abs=1e-15)


def test_lsgan_empty_rejected():
    with pytest.raises(tc.ShapeMismatch):
        ls.lsgan_d_loss(Tensor(np.zeros(0)), scalar(0.5))


def test_lsgan_pointwise_optimum():
    # closed form: with real mass p_r and fake mass p_g on one point, the
    # optimal per-sample output is p_r / (p_r + p_g); verify by quadratic
    # minimization against a dense scan
    for p_r, p_g in [(1.0, 1.0), (0.25, 0.75), (0.9, 0.3)]:
        want = p_r / (p_r + p_g)
        grid = np.linspace(-0.5, 1.5, 20001)
        j = 0.5 * p_r * (grid - 1.0) ** 2 + 0.5 * p_g * grid**2
        got = grid[np.argmin(j)]
        assert got == pytest.approx(want, abs=1e-4)
        # analytic stationarity of the quadratic
        assert p_r * (want - 1.0) + p_g * want == pytest.approx(0.0, abs=1e-12)


def test_lsgan_gradients():
    rng = np.random.default_rng(23)
    d_real = Tensor(rng.normal(size=6))
    d_fake = Tensor(rng.normal(size=6))
    assert finite_diff_check(lambda t: ls.lsgan_d_loss(t, d_fake), d_real) < 1e-4
    assert finite_diff_check(lambda t: ls.lsgan_d_loss(d_real, t), d_fake) < 1e-4
    assert finite_diff_check(lambda t: ls.lsgan_g_loss(t, Tensor(0.2)), d_fake) < 1e-4


# ---------------------------------------------------------------------------
# stage composites


W = ls.StageLossWeights(ctc_weight=0.3, l1_weight=0.1)


def test_stage1_examples():
    z = Tensor(0.0)
    one = Tensor(1.0)
    two = Tensor(2.0)
    assert ls.stage1_loss(z, z, z, W).item() == 0.0
    assert ls.stage1_loss(one, one, one, W).item() == pytest.approx(1.0, abs=1e-15)
    assert ls.stage1_loss(two, one, one, W).item() == pytest.approx(1.3, abs=1e-15)


def test_stage3_examples():
    z, one, two = Tensor(0.0), Tensor(1.0), Tensor(2.0)
    assert ls.stage3_loss(z, z, W).item() == 0.0
    assert ls.stage3_loss(one, one, W).item() == pytest.approx(1.0, abs=1e-15)
    assert ls.stage3_loss(two, z, W).item() == pytest.approx(0.6, abs=1e-15)


def test_stage_weights_validated():
    with pytest.raises(ValueError):
        ls.StageLossWeights(ctc_weight=0.8, l1_weight=0.5)
    with pytest.raises(ValueError):
        ls.StageLossWeights(ctc_weight=-0.1, l1_weight=0.1)


def test_composites_zero_iff_components_zero():
    rng = np.random.default_rng(31)
    for _ in range(20):
        parts = np.abs(rng.normal(size=3))
        val = ls.stage1_loss(Tensor(parts[0]), Tensor(parts[1]), Tensor(parts[2]), W).item()
        assert val >= 0.0
        if parts.max() > 1e-12:
            assert val > 0.0


def test_losses_nonnegative_on_random_inputs():
    rng = np.random.default_rng(37)
    for _ in range(10):
        lp = random_log_probs(rng, 4, 4)
        assert ls.ctc_loss(Tensor(lp), [1, 2]).item() >= 0.0
        logits = Tensor(rng.normal(size=(3, 4)))
        assert ls.cross_entropy(logits, [0, 1, 2]).item() >= 0.0
        a, b = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
        assert ls.l1_distance(a, b).item() >= 0.0
        assert ls.lsgan_d_loss(a, b).item() >= 0.0
        assert ls.lsgan_g_loss(a, Tensor(0.0)).item() >= 0.0


def test_stage1_gradient_through_composite():
    rng = np.random.default_rng(41)
    logits = Tensor(rng.normal(size=(4, 4)))
    feats = Tensor(rng.normal(size=(4, 3)))
    ref = Tensor(rng.normal(size=(4, 3)))
    ce_logits = Tensor(rng.normal(size=(2, 5)))

    def f(t):
        ctc = ls.ctc_loss(tc.log_softmax_last(t), [1, 2])
        l1 = ls.l1_distance(feats, ref)
        ce = ls.cross_entropy(ce_logits, [0, 3])
        return ls.stage1_loss(ctc, l1, ce, W)

    assert finite_diff_check(f, logits) < 1e-4

    def g(t):
        ctc = ls.ctc_loss(tc.log_softmax_last(logits), [1, 2])
        l1 = ls.l1_distance(t, ref)
        ce = ls.cross_entropy(ce_logits, [0, 3])
        return ls.stage1_loss(ctc, l1, ce, W)

    assert finite_diff_check(g, feats) < 1e-4
