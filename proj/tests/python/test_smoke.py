"""Smoke tests for the Python bindings."""

import json
import math

import numpy as np
import pytest

import trapforge as tf


def test_iou():
    assert tf.iou((0.0, 0.0, 0.5, 0.5), (0.0, 0.0, 0.5, 0.5)) == pytest.approx(1.0)
    assert tf.iou((0.0, 0.0, 0.5, 0.5), (0.1, 0.0, 0.5, 0.5)) == pytest.approx(0.2 / 0.3)
    assert tf.iou((0.0, 0.0, 0.1, 0.1), (0.5, 0.5, 0.1, 0.1)) == 0.0


def test_mine_pairs_from_json_text():
    doc = {
        "images": [
            {
                "file": "a.jpg",
                "camera_id": "cam0",
                "timestamp": 0,
                "detections": [{"conf": 0.9, "bbox": [0.0, 0.0, 0.5, 0.5]}],
            },
            {
                "file": "b.jpg",
                "camera_id": "cam0",
                "timestamp": 60,
                "detections": [
                    {"conf": 0.8, "bbox": [0.1, 0.0, 0.5, 0.5]},
                    {"conf": 0.3, "bbox": [0.1, 0.0, 0.5, 0.5]},
                ],
            },
        ]
    }
    pairs = tf.mine_pairs(json.dumps(doc))
    assert len(pairs) == 1
    assert pairs[0]["anchor_file"] == "a.jpg"
    assert pairs[0]["gap_s"] == 60
    assert pairs[0]["iou"] == pytest.approx(0.2 / 0.3)

    counts = tf.sweep_thresholds(json.dumps(doc), [0.1, 0.9])
    assert counts[0][1] == 1 and counts[1][1] == 0


def test_nt_xent_closed_form():
    z = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    out = tf.nt_xent(z, z)
    assert out["value"] == pytest.approx(math.log(3.0), abs=1e-9)
    assert len(out["grads"]) == 2
    assert out["grads"][0].shape == (2, 3)


def test_stop_gradient_contract():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 4))
    out = tf.negative_cosine(p, t)
    assert np.all(out["grads"][1] == 0.0)


def test_grad_check_all_methods():
    for method in tf.loss_methods():
        assert tf.grad_check(method, seed=0) <= 1e-4, method


def test_average_precision_and_map():
    assert tf.average_precision([1, 1, 0]) == pytest.approx(1.0)
    assert tf.average_precision([0, 1]) == pytest.approx(0.5)

    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    result = tf.retrieval_map(emb, [0, 0, 1, 1])
    assert result["map"] == pytest.approx(1.0)


def test_weighted_knn_and_miou():
    train = np.array([[1.0, 0.0], [0.0, 1.0]])
    test = np.array([[0.9, 0.1]])
    result = tf.weighted_knn(train, [3, 7], test, [3], k=1)
    assert result["predictions"] == [3]

    assert tf.miou([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx((0.5 + 2 / 3) / 2)


def test_train_synthetic_improves_retrieval():
    run = tf.train_synthetic(method="simclr_dclw", seed=1, steps=200)
    emb = run["embeddings"]
    assert emb.shape == (640, 8)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    trained = tf.retrieval_map(emb, run["labels"])["map"]
    assert trained > 0.25
    assert len(run["loss_trace"]) == 200


def test_determinism_across_calls():
    a = tf.train_synthetic(method="ntxent", seed=5, steps=30)
    b = tf.train_synthetic(method="ntxent", seed=5, steps=30)
    assert np.array_equal(a["embeddings"], b["embeddings"])
    assert a["loss_trace"] == b["loss_trace"]
