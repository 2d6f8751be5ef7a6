"""Heatmap decoding: ensembling, peak picking, box recovery, prediction IO."""

import numpy as np
import pytest
import torch

from concealdet.data import BoundingBox
from concealdet.decode import (
    Detection,
    decode_batch,
    decode_boxes,
    ensemble_heatmap,
    find_peaks,
    load_predictions,
    save_predictions,
)
from concealdet.model import HeadOutputs
from concealdet.targets import encode_targets


def _outputs(heat, offset=None, size=None, inters=()):
    heat = torch.as_tensor(heat, dtype=torch.float64)
    hs, ws = heat.shape
    if offset is None:
        offset = torch.zeros(2, hs, ws, dtype=torch.float64)
    if size is None:
        size = torch.ones(2, hs, ws, dtype=torch.float64)
    return HeadOutputs(
        [torch.as_tensor(h, dtype=torch.float64).reshape(1, 1, hs, ws) for h in inters],
        heat.reshape(1, 1, hs, ws),
        torch.as_tensor(offset, dtype=torch.float64).reshape(1, 2, hs, ws),
        torch.as_tensor(size, dtype=torch.float64).reshape(1, 2, hs, ws),
    )


def _maps_to_outputs(maps):
    offset = np.transpose(maps.offset_target, (2, 0, 1))
    size = np.transpose(maps.size_target, (2, 0, 1))
    return _outputs(maps.heatmap, offset, size)


# ---------------------------------------------------------------------------
# Detection / ensemble
# ---------------------------------------------------------------------------

def test_detection_score_range_enforced():
    box = BoundingBox(0, 0, 4, 4)
    with pytest.raises(ValueError):
        Detection(box, 0.0)
    with pytest.raises(ValueError):
        Detection(box, 1.0)
    assert Detection(box, 0.5).score == 0.5


def test_ensemble_is_arithmetic_mean():
    main = np.full((4, 4), 0.8)
    inter = np.full((4, 4), 0.6)
    out = _outputs(main, inters=[inter])
    ens = ensemble_heatmap(out)
    assert ens.shape == (1, 1, 4, 4)
    assert torch.allclose(ens, torch.full((1, 1, 4, 4), 0.7, dtype=torch.float64))


def test_ensemble_single_stage_is_main():
    main = np.random.default_rng(0).random((4, 4))
    out = _outputs(main)
    assert torch.allclose(ensemble_heatmap(out)[0, 0],
                          torch.as_tensor(main, dtype=torch.float64))


# ---------------------------------------------------------------------------
# find_peaks
# ---------------------------------------------------------------------------

def test_single_peak_found():
    heat = np.zeros((6, 6))
    heat[2, 3] = 0.9
    # the flat zero background is a plateau: its first cell also surfaces,
    # to be dropped later by any positive score threshold
    assert find_peaks(torch.as_tensor(heat)) == [(0, 0, 0.0), (2, 3, 0.9)]


def test_two_separated_peaks():
    heat = np.zeros((8, 8))
    heat[1, 1] = 0.8
    heat[6, 5] = 0.7
    peaks = [p for p in find_peaks(torch.as_tensor(heat)) if p[2] > 0]
    assert set(peaks) == {(1, 1, 0.8), (6, 5, 0.7)}


def test_plateau_keeps_lexicographically_first():
    heat = np.zeros((6, 6))
    heat[2:4, 2:4] = 0.5  # 2x2 flat plateau
    peaks = [(r, c) for r, c, _ in find_peaks(torch.as_tensor(heat))
             if heat[r, c] == 0.5]
    assert peaks == [(2, 2)]


def test_uniform_map_yields_single_origin_peak():
    heat = np.full((5, 5), 0.5)
    assert find_peaks(torch.as_tensor(heat)) == [(0, 0, 0.5)]


def test_adjacent_unequal_cells_one_peak():
    heat = np.zeros((4, 4))
    heat[1, 1] = 0.6
    heat[1, 2] = 0.7  # dominates (1,1), which is then not a local max
    peaks = find_peaks(torch.as_tensor(heat))
    assert (1, 2, 0.7) in peaks
    assert all((r, c) != (1, 1) for r, c, _ in peaks)


def test_equal_adjacent_peaks_tie_broken_lexicographically():
    heat = np.zeros((4, 6))
    heat[2, 1] = 0.7
    heat[2, 2] = 0.7  # same value, later in (row, col) order
    peaks = [p for p in find_peaks(torch.as_tensor(heat)) if p[2] > 0]
    assert peaks == [(2, 1, 0.7)]


def test_peaks_require_2d():
    with pytest.raises(ValueError):
        find_peaks(torch.zeros(1, 4, 4))


# ---------------------------------------------------------------------------
# decode_boxes
# ---------------------------------------------------------------------------

def test_decode_worked_example():
    # peak at cell (5, 7), offset (0.5, 0.5), size (4, 6):
    # center (row 22, col 30), box 16 wide and 24 tall
    heat = np.zeros((16, 16))
    heat[5, 7] = 0.9
    offset = np.zeros((2, 16, 16))
    offset[:, 5, 7] = 0.5
    size = np.ones((2, 16, 16))
    size[0, 5, 7] = 4.0
    size[1, 5, 7] = 6.0
    dets = decode_boxes(_outputs(heat, offset, size), (64, 64))
    assert len(dets) == 1
    det = dets[0]
    assert det.score == pytest.approx(0.9)
    assert det.box.center == pytest.approx((30.0, 22.0))
    assert det.box.width == pytest.approx(16.0)
    assert det.box.height == pytest.approx(24.0)
    assert det.box.as_tuple() == pytest.approx((22.0, 10.0, 38.0, 34.0))


def test_decode_threshold_filters():
    heat = np.full((8, 8), 0.5)
    heat[3, 3] = 0.55
    dets = decode_boxes(_outputs(heat), (32, 32), score_threshold=0.6)
    assert dets == []


def test_decode_top_k_cap_and_order():
    heat = np.zeros((16, 16))
    scores = [0.9, 0.8, 0.7, 0.6, 0.5]
    cells = [(2, 2), (2, 10), (8, 2), (8, 10), (13, 13)]
    for (r, c), s in zip(cells, scores):
        heat[r, c] = s
    dets = decode_boxes(_outputs(heat), (64, 64), top_k=3, score_threshold=0.1)
    assert len(dets) == 3
    assert [d.score for d in dets] == pytest.approx([0.9, 0.8, 0.7])


def test_decode_scores_descending_property():
    rng = np.random.default_rng(4)
    heat = rng.random((16, 16)) * 0.9 + 0.05
    dets = decode_boxes(_outputs(heat), (64, 64), score_threshold=0.0)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert len(dets) <= 10


def test_decode_round_trip_through_encoding():
    boxes = [BoundingBox(20, 30, 52, 58), BoundingBox(80, 90, 100, 120)]
    maps = encode_targets(boxes, (128, 128))
    dets = decode_boxes(_maps_to_outputs(maps), (128, 128), score_threshold=0.5)
    assert len(dets) == 2
    recovered = sorted((d.box.as_tuple() for d in dets))
    for got, want in zip(recovered, sorted(b.as_tuple() for b in boxes)):
        assert got == pytest.approx(want, abs=1e-9)


def test_decode_translation_equivariance():
    boxes = [BoundingBox(24, 24, 40, 48)]
    maps = encode_targets(boxes, (128, 128))
    out = _maps_to_outputs(maps)

    shifted = BoundingBox(24 + 4, 24, 40 + 4, 48)  # one cell right
    maps2 = encode_targets([shifted], (128, 128))
    out2 = _maps_to_outputs(maps2)

    (a,) = decode_boxes(out, (128, 128))
    (b,) = decode_boxes(out2, (128, 128))
    assert b.box.x_lt == pytest.approx(a.box.x_lt + 4)
    assert b.box.x_rb == pytest.approx(a.box.x_rb + 4)
    assert b.box.y_lt == pytest.approx(a.box.y_lt)


def test_decode_clips_to_image():
    heat = np.zeros((8, 8))
    heat[0, 0] = 0.9
    size = np.full((2, 8, 8), 4.0)  # 16 px boxes spilling over the corner
    dets = decode_boxes(_outputs(heat, size=size), (32, 32))
    assert len(dets) == 1
    box = dets[0].box
    assert box.x_lt >= 0 and box.y_lt >= 0


def test_decode_perfect_peak_score_clamped_into_open_interval():
    heat = np.zeros((8, 8))
    heat[2, 2] = 1.0
    dets = decode_boxes(_outputs(heat), (32, 32))
    assert len(dets) == 1
    assert 0.0 < dets[0].score < 1.0


def test_decode_rejects_batches():
    out = HeadOutputs([], torch.rand(2, 1, 4, 4), torch.rand(2, 2, 4, 4),
                      torch.rand(2, 2, 4, 4))
    with pytest.raises(ValueError):
        decode_boxes(out, (16, 16))


def test_decode_batch_matches_single():
    torch.manual_seed(0)
    out = HeadOutputs([], torch.rand(2, 1, 8, 8, dtype=torch.float64),
                      torch.rand(2, 2, 8, 8, dtype=torch.float64),
                      torch.rand(2, 2, 8, 8, dtype=torch.float64) + 0.5)
    batch = decode_batch(out, (32, 32), score_threshold=0.0)
    assert len(batch) == 2
    for i in range(2):
        single = decode_boxes(out.select(i), (32, 32), score_threshold=0.0)
        assert [(d.box.as_tuple(), d.score) for d in batch[i]] == [
            (d.box.as_tuple(), d.score) for d in single
        ]


# ---------------------------------------------------------------------------
# prediction IO
# ---------------------------------------------------------------------------

def test_predictions_round_trip(tmp_path):
    preds = {
        "img_b": [Detection(BoundingBox(1, 2, 3, 4), 0.75)],
        "img_a": [
            Detection(BoundingBox(0.5, 0.5, 10.25, 8.125), 0.9),
            Detection(BoundingBox(5, 5, 7, 9), 0.3),
        ],
        "img_empty": [],
    }
    save_predictions(tmp_path / "p.jsonl", preds)
    loaded = load_predictions(tmp_path / "p.jsonl")
    assert set(loaded) == set(preds)
    for key in preds:
        assert [(d.box.as_tuple(), d.score) for d in loaded[key]] == [
            (d.box.as_tuple(), d.score) for d in preds[key]
        ]


def test_predictions_file_sorted_by_id(tmp_path):
    preds = {"zz": [], "aa": [], "mm": []}
    save_predictions(tmp_path / "p.jsonl", preds)
    ids = [line.split('"id": "')[1].split('"')[0]
           for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert ids == ["aa", "mm", "zz"]


def test_predictions_malformed_line_reports_position(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"id": "a", "detections": []}\nnot json\n')
    with pytest.raises(ValueError, match=":2"):
        load_predictions(tmp_path / "p.jsonl")


def test_predictions_empty_file(tmp_path):
    save_predictions(tmp_path / "p.jsonl", {})
    assert load_predictions(tmp_path / "p.jsonl") == {}
