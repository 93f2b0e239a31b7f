import math

import numpy as np
import pytest

import paravox.tensor as pt
from paravox import duration
from paravox.errors import DegenerateSynthesisError, ShapeError
from paravox.gradcheck import grad_check
from paravox.tensor import Tensor


@pytest.fixture(autouse=True)
def high_precision():
    with pt.precision("high"):
        yield


def make_predictor(d=8, heads=2, blocks=2, seed=0):
    return duration.DurationPredictor(
        d, heads, np.random.default_rng(seed), blocks=blocks).finalize_names("dur.")


def test_seconds_head_strictly_positive():
    pred = make_predictor()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)) * 5)
    out = pred(x)
    assert np.all(out.seconds.data > 0)
    assert np.all((out.p_z.data > 0) & (out.p_z.data < 1))


def test_masked_tokens_do_not_change_loss():
    pred = make_predictor()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 8))
    frames = np.array([[3, 0, 2, 4]])
    target = duration.DurationTarget.from_frames(frames, 80.0)
    mask = np.ones((1, 4))
    out = pred(Tensor(x), mask)
    ce, l1 = duration.duration_loss(out, target, mask)

    padded = np.concatenate([x, rng.normal(size=(1, 3, 8))], axis=1)
    pmask = np.concatenate([mask, np.zeros((1, 3))], axis=1)
    ptarget = duration.DurationTarget.from_frames(
        np.concatenate([frames, rng.integers(1, 5, size=(1, 3))], axis=1), 80.0)
    pout = pred(Tensor(padded), pmask)
    pce, pl1 = duration.duration_loss(pout, ptarget, pmask)
    assert pce.data == pytest.approx(ce.data, rel=1e-9)
    assert pl1.data == pytest.approx(l1.data, rel=1e-9)


def test_predictor_gradcheck():
    pred = make_predictor(blocks=1)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 5, 8)))
    target = duration.DurationTarget.from_frames(
        np.random.default_rng(5).integers(0, 6, size=(2, 5)), 80.0)

    def loss():
        out = pred(x)
        ce, l1 = duration.duration_loss(out, target)
        return ce + l1

    report = grad_check(loss, pred.parameters(), max_entries=30)
    assert report.passed, report.format_table()


# -- finalize -----------------------------------------------------------------------

def test_finalize_confident_token():
    frames = duration.finalize_durations(np.array([[0.995]]), np.array([[0.10]]), 80.0)
    assert frames.tolist() == [[8]]


def test_finalize_gate_zeroes_low_confidence():
    frames = duration.finalize_durations(np.array([[0.5, 0.999]]), np.array([[5.0, 0.05]]), 80.0)
    assert frames.tolist() == [[0, 4]]


def test_finalize_cumulative_rounding_table():
    # each token exactly one frame; naive rounding of 0.99*s would drift
    frames = duration.finalize_durations(
        np.array([[1.0, 1.0, 1.0]]), np.array([[0.0125, 0.0125, 0.0125]]), 80.0)
    assert frames.tolist() == [[1, 1, 1]]
    # hand-computed: cumulative 0.6, 1.2, 1.8 -> rounded 1, 1, 2 -> diffs 1, 0, 1
    frames = duration.finalize_durations(
        np.array([[1.0, 1.0, 1.0]]), np.array([[0.0075, 0.0075, 0.0075]]), 80.0)
    assert frames.tolist() == [[1, 0, 1]]


def test_finalize_all_gated_off_raises():
    with pytest.raises(DegenerateSynthesisError):
        duration.finalize_durations(np.array([[0.1, 0.2]]), np.array([[1.0, 1.0]]), 80.0)


def test_finalize_length_preservation_fuzz():
    rng = np.random.default_rng(6)
    for _ in range(2000):
        n = rng.integers(1, 12)
        p = rng.random(n)
        s = rng.random(n) * 0.2
        gated = np.where(p < duration.GATE_THRESHOLD, 0.0, s)
        if gated.sum() * 80.0 < 0.5:
            continue  # would round to zero total; degenerate by construction
        frames = duration.finalize_durations(p[None], s[None], 80.0)
        assert frames.sum() == math.floor(gated.sum() * 80.0 + 0.5)
        assert np.all(frames >= 0)


# -- losses ---------------------------------------------------------------------------

def scalar_loop_duration_loss(p_z, seconds, frames, rate, mask):
    """Independent oracle: plain double loops, no vectorization."""
    ce = 0.0
    l1 = 0.0
    for b in range(p_z.shape[0]):
        for n in range(p_z.shape[1]):
            if mask[b, n] == 0:
                continue
            y = 1.0 if frames[b, n] > 0 else 0.0
            p = p_z[b, n]
            ce += -(y * math.log(p) + (1 - y) * math.log(1 - p))
            l1 += abs(seconds[b, n] - frames[b, n] / rate)
    return ce, l1


def test_duration_loss_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    pred = make_predictor(seed=8)
    x = Tensor(rng.normal(size=(2, 6, 8)))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=float)
    frames = rng.integers(0, 5, size=(2, 6))
    target = duration.DurationTarget.from_frames(frames, 80.0)
    out = pred(x, mask)
    ce, l1 = duration.duration_loss(out, target, mask)
    oce, ol1 = scalar_loop_duration_loss(out.p_z.data, out.seconds.data, frames, 80.0, mask)
    assert ce.data == pytest.approx(oce, rel=1e-10)
    assert l1.data == pytest.approx(ol1, rel=1e-10)


def test_perfect_prediction_l1_zero_and_ce_floor():
    frames = np.array([[2, 0, 3]])
    target = duration.DurationTarget.from_frames(frames, 80.0)
    logits = Tensor(np.array([[30.0, -30.0, 30.0]]))
    pred = duration.DurationPrediction(
        pt.sigmoid(logits), logits, Tensor(target.seconds), hidden=Tensor(np.zeros((1, 3, 2))))
    ce, l1 = duration.duration_loss(pred, target)
    assert l1.data == pytest.approx(0.0)
    assert ce.data < 1e-8


def test_half_probability_ce_is_ln2_per_token():
    frames = np.array([[1, 0, 4, 2]])
    target = duration.DurationTarget.from_frames(frames, 80.0)
    logits = Tensor(np.zeros((1, 4)))
    pred = duration.DurationPrediction(
        pt.sigmoid(logits), logits, Tensor(target.seconds), hidden=Tensor(np.zeros((1, 4, 2))))
    ce, _ = duration.duration_loss(pred, target)
    assert ce.data == pytest.approx(4 * math.log(2.0))


def test_l1_translation_detection():
    # when every prediction already exceeds its target, +delta adds N_valid * delta
    frames = np.array([[2, 1, 3]])
    target = duration.DurationTarget.from_frames(frames, 80.0)
    base = target.seconds + 0.5
    logits = Tensor(np.zeros((1, 3)))
    delta = 0.125

    def l1_of(seconds):
        pred = duration.DurationPrediction(
            pt.sigmoid(logits), logits, Tensor(seconds), hidden=Tensor(np.zeros((1, 3, 2))))
        _, l1 = duration.duration_loss(pred, target)
        return float(l1.data)

    assert l1_of(base + delta) - l1_of(base) == pytest.approx(3 * delta)


def test_shape_mismatch_rejected():
    frames = np.array([[1, 2]])
    target = duration.DurationTarget.from_frames(frames, 80.0)
    logits = Tensor(np.zeros((1, 3)))
    pred = duration.DurationPrediction(
        pt.sigmoid(logits), logits, Tensor(np.zeros((1, 3))), hidden=Tensor(np.zeros((1, 3, 2))))
    with pytest.raises(ShapeError):
        duration.duration_loss(pred, target)


def test_negative_target_frames_rejected():
    with pytest.raises(ShapeError):
        duration.DurationTarget.from_frames(np.array([[1, -2]]), 80.0)
