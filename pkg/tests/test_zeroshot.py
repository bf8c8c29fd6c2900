"""Zero-shot logits, accuracy, and vulnerability arithmetic."""

import numpy as np
import pytest

from qreli.core import make_rng
from qreli.errors import DimensionMismatchError, MixedScaleError, NoLabeledRowsError
from qreli.zeroshot import (
    EmbeddingSet,
    LogitSet,
    accuracy,
    vulnerability,
    zero_shot_logits,
)


def _orthonormal_set(logit_scale=100.0):
    image = np.array([[1.0, 0.0]], dtype=np.float32)
    text = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    return EmbeddingSet(
        image=image,
        labels=np.array([0], dtype=np.int64),
        class_text=text,
        logit_scale=logit_scale,
    )


def test_orthonormal_logits():
    lset = zero_shot_logits(_orthonormal_set(100.0))
    assert np.allclose(lset.logits, [[100.0, 0.0]], atol=1e-5)


def test_zero_scale_gives_zero_logits():
    lset = zero_shot_logits(_orthonormal_set(0.0))
    assert np.array_equal(lset.logits, np.zeros((1, 2), dtype=np.float32))


def test_logits_match_naive_matmul():
    rng = make_rng(13)
    image = rng.normal(size=(3, 4))
    image /= np.linalg.norm(image, axis=1, keepdims=True)
    text = rng.normal(size=(2, 4))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    e = EmbeddingSet(
        image=image.astype(np.float32),
        labels=np.array([0, 1, -1], dtype=np.int64),
        class_text=text.astype(np.float32),
        logit_scale=50.0,
    )
    got = zero_shot_logits(e).logits
    expected = np.empty((3, 2))
    for i in range(3):
        for c in range(2):
            expected[i, c] = 50.0 * float(
                np.dot(e.image[i].astype(np.float64), e.class_text[c].astype(np.float64))
            )
    assert np.allclose(got, expected, atol=1e-4)


def test_logits_linear_in_scale():
    base = zero_shot_logits(_orthonormal_set(1.0)).logits
    scaled = zero_shot_logits(_orthonormal_set(7.0)).logits
    assert np.allclose(scaled, 7.0 * base, atol=1e-5)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        EmbeddingSet(
            image=np.ones((1, 3), dtype=np.float32),
            labels=np.array([0], dtype=np.int64),
            class_text=np.ones((2, 4), dtype=np.float32),
        )


def test_accuracy_all_correct_and_tie_rule():
    lset = LogitSet(
        logits=np.array([[2.0, 0.0], [0.0, 3.0]], dtype=np.float32),
        labels=np.array([0, 1], dtype=np.int64),
    )
    assert accuracy(lset) == 1.0
    tie = LogitSet(
        logits=np.array([[1.0, 1.0]], dtype=np.float32), labels=np.array([0], dtype=np.int64)
    )
    assert accuracy(tie) == 1.0  # lowest class index wins the tie


def test_accuracy_matches_loop_oracle():
    rng = make_rng(21)
    logits = rng.normal(size=(40, 5)).astype(np.float32)
    labels = rng.integers(-1, 5, size=40).astype(np.int64)
    if not np.any(labels >= 0):
        labels[0] = 0
    lset = LogitSet(logits=logits, labels=labels)
    correct = total = 0
    for i in range(40):
        if labels[i] < 0:
            continue
        total += 1
        best = 0
        for c in range(1, 5):
            if logits[i, c] > logits[i, best]:
                best = c
        if best == labels[i]:
            correct += 1
    assert accuracy(lset) == pytest.approx(correct / total, abs=1e-12)


def test_accuracy_invariant_under_scale():
    rng = make_rng(3)
    image = rng.normal(size=(30, 6))
    image /= np.linalg.norm(image, axis=1, keepdims=True)
    text = rng.normal(size=(4, 6))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    labels = rng.integers(0, 4, size=30).astype(np.int64)
    accs = []
    for k in (0.5, 1.0, 100.0):
        e = EmbeddingSet(
            image=image.astype(np.float32),
            labels=labels,
            class_text=text.astype(np.float32),
            logit_scale=k,
        )
        accs.append(accuracy(zero_shot_logits(e)))
    assert accs[0] == accs[1] == accs[2]


def test_no_labeled_rows():
    lset = LogitSet(
        logits=np.zeros((2, 2), dtype=np.float32), labels=np.array([-1, -1], dtype=np.int64)
    )
    with pytest.raises(NoLabeledRowsError):
        accuracy(lset)


def test_vulnerability_paper_rows_exact():
    assert vulnerability(83.1, 66.4) == float("16.7")
    assert vulnerability(84.0, 60.9) == float("23.1")


def test_vulnerability_identity_and_fractions():
    assert vulnerability(0.731, 0.731) == 0.0
    assert vulnerability(55.5, 55.5) == 0.0
    assert vulnerability(0.831, 0.664) == pytest.approx(16.7, abs=1e-9)


def test_vulnerability_mixed_scale():
    with pytest.raises(MixedScaleError):
        vulnerability(0.83, 66.4)


def test_vulnerability_additive():
    a, b, c = 83.1, 66.4, 52.2
    lhs = vulnerability(a, b) + vulnerability(b, c)
    assert lhs == pytest.approx(vulnerability(a, c), abs=1e-6)
