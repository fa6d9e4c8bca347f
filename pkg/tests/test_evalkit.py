import numpy as np
import pytest

from stdetr import evalkit as E
from stdetr.evalkit import (
    BadLayout,
    CountMismatch,
    NotRowStochastic,
    average_precision,
    dump_attention,
    evaluate,
    read_pgm,
)
from stdetr.setmatch import Box, iou


def test_iou_identical():
    b = Box(0.5, 0.5, 0.2, 0.3)
    assert iou(b, b) == pytest.approx(1.0)


def test_iou_disjoint():
    assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_iou_known_third():
    # [0,0,1,1] vs [0.5,0,1.5,1] scaled by 0.5 into the unit square
    a = Box(0.25, 0.25, 0.5, 0.5)
    b = Box(0.5, 0.25, 0.5, 0.5)
    assert iou(a, b) == pytest.approx(1.0 / 3.0)


def test_ap_single_perfect_detection():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    assert average_precision([(0.9, "a", gt)], {"a": [gt]}, 0.5) == pytest.approx(1.0)


def test_ap_no_detections():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    assert average_precision([], {"a": [gt]}, 0.5) == 0.0


def test_ap_fp_then_tp_is_half():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    fp = Box(0.1, 0.1, 0.05, 0.05)
    dets = [(0.9, "a", fp), (0.8, "a", gt)]
    assert average_precision(dets, {"a": [gt]}, 0.5) == pytest.approx(0.5)


def test_ap_monotone_score_invariance():
    rng = np.random.default_rng(0)
    gts = {"a": [Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.7, 0.2, 0.2)]}
    dets = [
        (float(s), "a", Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.3, 2)))
        for s in np.linspace(0.9, 0.1, 8)
    ]
    base = average_precision(dets, gts, 0.5)
    squashed = [(s**3 + 1.0, img, b) for s, img, b in dets]
    assert average_precision(squashed, gts, 0.5) == pytest.approx(base)


def test_ap_non_increasing_in_threshold():
    rng = np.random.default_rng(1)
    gts = {"a": [Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.6, 0.25, 0.2)]}
    dets = [
        (float(rng.uniform()), "a", Box(*rng.uniform(0.25, 0.75, 2), *rng.uniform(0.15, 0.3, 2)))
        for _ in range(10)
    ]
    aps = [average_precision(dets, gts, t) for t in E.IOU_THRESHOLDS]
    assert all(aps[i] >= aps[i + 1] - 1e-12 for i in range(len(aps) - 1))


def test_evaluate_perfect_detector():
    gts, dets = {}, {}
    rng = np.random.default_rng(2)
    for i in range(10):
        img = f"{i}"
        boxes = [Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.2, 2)) for _ in range(2)]
        gts[img] = boxes
        dets[img] = [(0.99, b) for b in boxes]
    report = evaluate(dets, gts)
    assert report.map_total == pytest.approx(1.0)
    assert report.ap50 == pytest.approx(1.0)
    assert report.ap75 == pytest.approx(1.0)


def test_evaluate_empty_detector():
    gts = {"0": [Box(0.5, 0.5, 0.2, 0.2)]}
    report = evaluate({"0": []}, gts)
    assert report.map_total == 0.0
    assert report.counts[0.5]["fn"] == 1


def test_evaluate_hand_computed_fixture():
    # 3 sequences: one perfect, one missed, one with an extra FP at top rank
    g1 = Box(0.5, 0.5, 0.2, 0.2)
    g2 = Box(0.3, 0.3, 0.2, 0.2)
    g3 = Box(0.7, 0.7, 0.2, 0.2)
    fp = Box(0.1, 0.9, 0.05, 0.05)
    dets = {
        "s1": [(0.95, g1)],
        "s2": [],
        "s3": [(0.99, fp), (0.9, g3)],
    }
    gts = {"s1": [g1], "s2": [g2], "s3": [g3]}
    report = evaluate(dets, gts)
    # ranking: fp(0.99), tp(0.95), tp(0.9); recalls 0,1/3,2/3; precisions 0,1/2,2/3
    # envelope -> 2/3 everywhere up to recall 2/3, then 0
    # 101-pt: r in {0.00, 0.01, ..., 0.66} -> 2/3 (67 points), else 0
    expected = (67 * (2.0 / 3.0)) / 101.0
    assert report.ap50 == pytest.approx(expected, abs=1e-12)
    assert report.counts[0.5] == {"tp": 2, "fp": 1, "fn": 1}


def test_evaluate_key_mismatch():
    with pytest.raises(CountMismatch):
        evaluate({"a": []}, {"b": []})


def test_evaluate_order_invariant():
    rng = np.random.default_rng(3)
    gts, dets = {}, {}
    for i in range(5):
        img = f"{i}"
        b = Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.2, 2))
        gts[img] = [b]
        dets[img] = [(float(rng.uniform(0.5, 1.0)), b)]
    r1 = evaluate(dets, gts)
    rev_d = dict(reversed(list(dets.items())))
    rev_g = dict(reversed(list(gts.items())))
    r2 = evaluate(rev_d, rev_g)
    assert r1.to_json() == r2.to_json()


def test_dump_attention_uniform_is_constant_gray(tmp_path):
    w = np.full((2, 16), 1.0 / 16.0)
    paths = dump_attention(w, (4, 4), str(tmp_path))
    assert len(paths) == 2
    img = read_pgm(paths[0])
    assert img.shape == (4, 4)
    assert np.all(img == img[0, 0])


def test_dump_attention_one_hot_single_white_pixel(tmp_path):
    w = np.zeros((1, 16))
    w[0, 5] = 1.0
    paths = dump_attention(w, (4, 4), str(tmp_path))
    img = read_pgm(paths[0])
    assert img[1, 1] == 255
    assert img.sum() == 255


def test_dump_attention_roundtrip_matches_normalized_matrix(tmp_path):
    rng = np.random.default_rng(4)
    raw = rng.uniform(size=(3, 12))
    w = raw / raw.sum(axis=1, keepdims=True)
    paths = dump_attention(w, (3, 4), str(tmp_path))
    for q, path in enumerate(paths):
        img = read_pgm(path)
        row = w[q].reshape(3, 4)
        norm = (row - row.min()) / (row.max() - row.min())
        assert np.array_equal(img, np.round(norm * 255).astype(np.uint8))


def test_dump_attention_rejects_non_stochastic(tmp_path):
    with pytest.raises(NotRowStochastic):
        dump_attention(np.ones((2, 4)), (2, 2), str(tmp_path))


def test_dump_attention_rejects_bad_layout(tmp_path):
    w = np.full((1, 6), 1.0 / 6.0)
    with pytest.raises(BadLayout):
        dump_attention(w, (2, 2), str(tmp_path))
