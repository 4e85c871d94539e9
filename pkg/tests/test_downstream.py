import csv
import io
import json

import numpy as np
import pytest

from stainbridge.downstream import (
    BlobDetector,
    CellRecord,
    DetectorParams,
    ExternalDetector,
    ProportionRecord,
    analyze_image,
    call_positivity,
    compare_pair,
    decode_rle,
    detect_cells,
    encode_rle,
    mae_ratio,
    otsu_threshold,
    per_cell_mean_expression,
    positive_proportion,
    read_detections_csv,
    run_downstream,
)
from stainbridge.errors import InputValidationError, NoThreshold, UndefinedProportion


def _disk_image(centers, radius=6, shape=(96, 96), cd3=None, panck=None):
    """DAPI disks on black; optional per-disk CD3 / panCK intensities."""
    img = np.zeros(shape + (3,), np.uint8)
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    for i, (cy, cx) in enumerate(centers):
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        img[disk, 0] = 220
        if cd3 is not None:
            img[disk, 1] = cd3[i]
        if panck is not None:
            img[disk, 2] = panck[i]
    return img


# detection ----------------------------------------------------------------------

def test_three_disks():
    cells = detect_cells(_disk_image([(20, 20), (20, 70), (70, 45)]))
    assert len(cells) == 3
    cents = sorted((round(c.centroid[1]), round(c.centroid[0])) for c in cells)
    assert cents == [(20, 20), (20, 70), (70, 45)]
    assert all(20 <= c.pixel_count <= 2000 for c in cells)


def test_blank_image():
    assert detect_cells(np.zeros((64, 64, 3), np.uint8)) == []


def test_overlapping_disks_merge():
    assert len(detect_cells(_disk_image([(40, 40), (40, 48)]))) == 1


def test_area_filter():
    img = _disk_image([(20, 20)], radius=2)  # 13 px < min area
    img = np.maximum(img, _disk_image([(60, 60)], radius=6))
    cells = BlobDetector(DetectorParams(min_cell_area=20))(img)
    assert len(cells) == 1
    assert len(BlobDetector(DetectorParams(min_cell_area=5))(img)) == 2
    assert len(BlobDetector(DetectorParams(max_cell_area=50))(img)) == 0


def test_translation_equivariance():
    base = _disk_image([(30, 30), (30, 60), (60, 45)], shape=(128, 128))
    shifted = np.roll(base, (7, 11), axis=(0, 1))
    a = sorted(c.centroid for c in detect_cells(base))
    b = sorted(c.centroid for c in detect_cells(shifted))
    assert len(a) == len(b) == 3
    for (xa, ya), (xb, yb) in zip(a, b):
        assert xb - xa == pytest.approx(11) and yb - ya == pytest.approx(7)


def test_detector_requires_dapi():
    with pytest.raises(InputValidationError):
        detect_cells(np.zeros((8, 8), np.uint8))


# expression ---------------------------------------------------------------------

def test_mean_expression_examples():
    img = np.zeros((10, 10, 3), np.uint8)
    img[:, :, 1] = 200
    img[:5, :, 2] = 100
    img[5:, :, 2] = 200
    coords = np.array([(r, c) for r in range(3, 7) for c in range(2, 8)])
    cell = per_cell_mean_expression([CellRecord(1, (0, 0), len(coords), coords)], img)[0]
    assert cell.mean_expression["CD3"] == 200
    assert cell.mean_expression["panCK"] == 150


def test_mean_expression_oracle(rng):
    img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
    coords = np.unique(rng.integers(0, 20, (30, 2)), axis=0)
    cell = per_cell_mean_expression([CellRecord(1, (0, 0), len(coords), coords)], img)[0]
    for i, ch in enumerate(("DAPI", "CD3", "panCK")):
        want = sum(float(img[r, c, i]) for r, c in coords) / len(coords)
        assert abs(cell.mean_expression[ch] - want) < 1e-9


def test_mean_expression_bounds():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(InputValidationError, match="exceeds"):
        per_cell_mean_expression([CellRecord(1, (0, 0), 1, np.array([[4, 0]]))], img)
    with pytest.raises(InputValidationError, match="empty"):
        per_cell_mean_expression([CellRecord(1, (0, 0), 0, np.zeros((0, 2), int))], img)


# Otsu ---------------------------------------------------------------------------

def test_otsu_two_populations():
    values = [10] * 50 + [200] * 50
    t = otsu_threshold(values, 256)
    assert 10 <= t < 200
    # smallest maximizer: the first interior edge above 10
    edges = np.linspace(10, 200, 257)
    assert t == edges[1]


def test_otsu_no_threshold():
    with pytest.raises(NoThreshold):
        otsu_threshold([42] * 10)
    with pytest.raises(NoThreshold):
        otsu_threshold([])


def test_otsu_separates_bimodal(rng):
    values = np.r_[rng.normal(40, 5, 200), rng.normal(180, 5, 200)]
    t = otsu_threshold(values)
    assert ((values > t) == (np.arange(400) >= 200)).all()


# proportions --------------------------------------------------------------------

def _cells_with(markers):
    cells = []
    for i, (cd3, panck) in enumerate(markers):
        c = CellRecord(i + 1, (0, 0), 1, np.zeros((1, 2), int))
        c.mean_expression = {"DAPI": 200.0, "CD3": float(cd3), "panCK": float(panck)}
        cells.append(c)
    return cells


def test_positive_proportion_examples():
    cells = _cells_with([(10, 0), (200, 0), (250, 0)])
    for c in cells:
        c.positivity["CD3"] = c.mean_expression["CD3"] > 100
    assert positive_proportion(cells, "CD3") == 2 / 3
    for c in cells:
        c.positivity["CD3"] = True
    assert positive_proportion(cells, "CD3") == 1.0
    with pytest.raises(UndefinedProportion):
        positive_proportion([], "CD3")


def test_call_positivity_flags_constant_marker():
    cells = _cells_with([(10, 5), (200, 5), (250, 5)])
    t = call_positivity(cells)
    assert t["panCK"] is None and t["CD3"] is not None
    assert [c.positivity["CD3"] for c in cells] == [False, True, True]
    assert not any(c.positivity["panCK"] for c in cells)
    assert all(c.positivity["DAPI"] for c in cells)


# agreement ----------------------------------------------------------------------

def _recs(pairs):
    return [ProportionRecord(f"s{i}", "CD3", r, g, 10, 10) for i, (r, g) in enumerate(pairs)]


def test_mae_examples():
    stats = mae_ratio(_recs([(0.4, 0.2), (0.5, 0.6)]))
    assert stats.mae_ratio == pytest.approx(0.35, abs=1e-15)
    same = mae_ratio(_recs([(0.4, 0.4), (0.5, 0.5)]))
    assert same.mae_ratio == 0.0 and same.bias == 0.0


def test_mae_exclusion():
    stats = mae_ratio(_recs([(0.0, 0.1), (0.4, 0.2), (0.5, 0.6)]))
    assert stats.n == 2 and stats.excluded_samples == 1
    assert stats.mae_ratio == pytest.approx(0.35, abs=1e-15)
    with pytest.raises(InputValidationError):
        mae_ratio(_recs([(0.0, 0.1)]))
    with pytest.raises(InputValidationError):
        mae_ratio([])


def test_bland_altman(rng):
    pairs = rng.uniform(0.05, 1, (20, 2))
    stats = mae_ratio(_recs(pairs))
    d = pairs[:, 1] - pairs[:, 0]
    assert stats.bias == pytest.approx(d.mean(), abs=1e-12)
    assert stats.sd == pytest.approx(d.std(ddof=1), abs=1e-12)
    assert abs((stats.loa_high - stats.loa_low) - 2 * 1.96 * stats.sd) < 1e-9
    assert stats.loa_low <= stats.bias <= stats.loa_high


# RLE / external detections ---------------------------------------------------------

def test_rle_roundtrip(rng):
    shape = (13, 17)
    mask = rng.random(shape) < 0.3
    coords = np.argwhere(mask)
    rle = encode_rle(coords, shape)
    assert np.array_equal(decode_rle(rle, shape), coords)
    assert encode_rle(np.array([[0, 2], [0, 3], [1, 0]]), (2, 4)) == "2 3"  # runs wrap rows
    assert encode_rle(np.array([[0, 1], [0, 3], [1, 0]]), (2, 4)) == "1 1 3 2"
    with pytest.raises(InputValidationError):
        decode_rle("1 2 3", shape)
    with pytest.raises(InputValidationError):
        decode_rle("220 5", shape)


def test_external_detector(tmp_path):
    img = _disk_image([(20, 20)], cd3=[180])
    coords = np.argwhere(img[..., 0] > 0)
    path = tmp_path / "det.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "cell_id", "centroid_x", "centroid_y", "mask_rle"])
        w.writerow(["a", 1, 20.0, 20.0, encode_rle(coords, img.shape[:2])])
        w.writerow(["generated/b", 7, 1.0, 1.0, "0 4"])
    det = ExternalDetector(read_detections_csv(path))
    cells = det(img, "real/a")
    assert len(cells) == 1 and cells[0].pixel_count == len(coords)
    assert det(img, "generated/b")[0].cell_id == 7
    assert det(img, "real/b") == []
    an = analyze_image(img, "a", det)
    assert an.cells[0].mean_expression["CD3"] == 180

    bad = tmp_path / "bad.csv"
    bad.write_text("sample_id,cell_id,centroid_x,centroid_y,mask_rle\na,x,1,1,0 1\n")
    with pytest.raises(InputValidationError, match="bad.csv:2"):
        read_detections_csv(bad)


# cohort -------------------------------------------------------------------------

def _marker_pair(n_pos_real, n_pos_gen, n_cells=6):
    centers = [(16 + 32 * (i // 3), 16 + 32 * (i % 3)) for i in range(n_cells)]
    real = _disk_image(centers, cd3=[200 if i < n_pos_real else 20 for i in range(n_cells)],
                       panck=[150 if i % 2 else 30 for i in range(n_cells)])
    gen = _disk_image(centers, cd3=[200 if i < n_pos_gen else 20 for i in range(n_cells)],
                      panck=[150 if i % 2 else 30 for i in range(n_cells)])
    return real, gen


def test_compare_pair_hand_counts():
    real, gen = _marker_pair(3, 2)
    a_real, a_gen, recs = compare_pair("s", real, gen)
    assert len(a_real.cells) == len(a_gen.cells) == 6
    by_marker = {r.marker: r for r in recs}
    assert by_marker["CD3"].p_real == 3 / 6 and by_marker["CD3"].p_generated == 2 / 6
    assert by_marker["panCK"].p_real == by_marker["panCK"].p_generated == 3 / 6


def test_run_downstream_identical_and_write(tmp_path):
    pairs = [(f"s{i}", *_marker_pair(i + 1, i + 1)) for i in range(3)]
    pairs.append(("blank", np.zeros((96, 96, 3), np.uint8), np.zeros((96, 96, 3), np.uint8)))
    res = run_downstream(pairs, BlobDetector(), workers=2)
    agree = res.agreement()
    assert agree["CD3"].mae_ratio == 0.0 and agree["panCK"].mae_ratio == 0.0
    assert res.undefined["CD3"] == ["blank"]
    res.write(tmp_path, plot=True)
    summary = json.loads((tmp_path / "agreement.json").read_text())
    assert summary["CD3"]["mae_ratio"] == 0.0 and summary["CD3"]["undefined_samples"] == 1
    cells = list(csv.DictReader(io.StringIO((tmp_path / "cells.csv").read_text())))
    assert len(cells) == 3 * 2 * 6
    cell = cells[0]
    assert np.array_equal(decode_rle(cell["mask_rle"], (96, 96)).shape[1:], (2,))
    props = list(csv.DictReader(io.StringIO((tmp_path / "proportions.csv").read_text())))
    assert len(props) == 6
    assert (tmp_path / "agreement_CD3.png").exists()


def test_compare_pair_shape_mismatch():
    with pytest.raises(InputValidationError, match="s1"):
        compare_pair("s1", np.zeros((8, 8, 3), np.uint8), np.zeros((8, 9, 3), np.uint8))
