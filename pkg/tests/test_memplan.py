from __future__ import annotations

import re

import numpy as np
import pytest

from tensorc import ir, memplan
from tensorc.memplan import BestFitPool, mb

# Forward rows of the Lenet memory table (batch 500).  Names are those of the
# published listing, whose numbering starts at X7; ours starts at X1.
FIG2 = [
    ("val X7 = Cuda(X)", "500 1 28 28", 1.568000, 1.568000, 1.568000),
    ("val X8 = Convolv(1,0)(X7,cv1_W,cv1_B)", "500 20 24 24", 23.040001, 24.608000, 24.608000),
    ("val X9 = Pooling(2,2,0,true)(X8)", "500 20 12 12", 5.760000, 30.368000, 30.368000),
    ("val X10 = Convolv(1,0)(X9,cv2_W,cv2_B)", "500 50 8 8", 6.400000, 36.768002, 36.768002),
    ("val X11 = Pooling(2,2,0,true)(X10)", "500 50 4 4", 1.600000, 38.368000, 38.368000),
    ("val X12 = (X11[1><3])(i | @) * (fc1_W)(j | @)", "500 500", 1.000000, 39.368000, 39.368000),
    ("val X14 = (X12 + (i) => fc1_B)", "500 500", 0.000000, 39.368000, 39.368000),
    ("val X15 = ReLU()(X14)", "500 500", 0.000000, 39.368000, 39.368000),
    ("val X16 = (X15)(i | @) * (fc2_W)(j | @)", "500 10", 0.020000, 39.388000, 39.388000),
    ("val X18 = (X16 + (i) => fc2_B)", "500 10", 0.000000, 39.388000, 39.388000),
    ("val X19 = Softmax()(X18)", "500 10", 0.020000, 39.408001, 39.408001),
    ("Dealloc(X18)", "", -0.020000, 39.388000, 39.408001),
]
RENAME = {7: 1, 8: 2, 9: 3, 10: 4, 11: 5, 12: 6, 14: 7, 15: 8, 16: 9, 18: 10, 19: 11}


def renamed(text: str) -> str:
    return re.sub(r"X(\d+)", lambda m: f"X{RENAME[int(m.group(1))]}", text)


@pytest.fixture(scope="module")
def report(lenet):
    return memplan.analyze_program(lenet.program)


@pytest.mark.parametrize("k", range(len(FIG2)))
def test_fig2_forward_row(report, k):
    text, dims, delta, total, reuse = FIG2[k]
    row = report.rows[k]
    assert row.stmt == renamed(text)
    assert row.dims_text == dims
    assert abs(row.delta_mb - delta) <= 1e-6
    assert abs(row.total_dealloc_mb - total) <= 1e-6
    assert abs(row.total_reuse_mb - reuse) <= 1e-6


def test_table_text_row_format(report):
    lines = report.text().splitlines()
    assert lines[2] == "val X1 = Cuda(X)                              500 1 28 28    1.568000    1.568000    1.568000"


def test_peaks_in_published_ranges(report, lenet_reuse):
    assert 55 <= report.peak_dealloc_mb <= 62
    reuse = memplan.analyze_program(lenet_reuse.program)
    assert 70 <= reuse.peak_reuse_mb <= 85


def test_report_invariants(report):
    assert report.peak_dealloc_bytes <= report.peak_reuse_bytes
    assert report.peak_reuse_bytes == report.rows[-1].total_reuse_bytes
    running = 0
    for r in report.rows:
        running += r.delta_bytes
        assert r.total_dealloc_bytes == running
    assert report.peak_dealloc_bytes == max(r.total_dealloc_bytes for r in report.rows)


def test_update_and_print_rows_are_zero(report):
    for r in report.rows:
        if "<~~" in r.stmt or r.stmt.startswith("Print"):
            assert r.delta_bytes == 0


def test_empty_program():
    rep = memplan.analyze([])
    assert rep.rows == [] and rep.peak_dealloc_bytes == 0 and rep.peak_reuse_bytes == 0


def test_mb_display_rounding():
    assert f"{mb(23040000):.6f}" == "23.040001"
    assert f"{mb(36768000):.6f}" == "36.768002"
    assert mb(1568000) == pytest.approx(1.568)


def test_static_memory_param_bytes():
    cv1 = ir.ParamInfo("cv1_W", (20, 1, 5, 5), ("xavier",))
    pb, wb, direct = memplan.static_memory([cv1], [], None)
    assert pb / 1e6 == 0.002 and wb == 0 and direct == []


def test_workspace_is_largest_conv_and_cap_zero_forces_direct(lenet):
    p = lenet.program
    _, wb, direct = memplan.static_memory(p.params, p.convs, None)
    # cv1: 4 * 500 * (1*5*5) * (24*24) bytes of unrolled patches
    assert wb == max(4 * 500 * 25 * 576, 4 * 500 * 500 * 64)
    _, wb0, direct0 = memplan.static_memory(p.params, p.convs, 0)
    assert wb0 == 0
    assert sorted(direct0) == ["cv1", "cv2"]


def test_params_include_velocities(lenet):
    p = lenet.program
    weights = sum(4 * int(np.prod(q.shape)) for q in p.params)
    pb, _, _ = memplan.static_memory(p.params, p.convs, None, p.velocities)
    assert pb == 2 * weights


def test_best_fit_reuses_larger_block():
    pool = BestFitPool()
    a = pool.acquire(5760000)
    pool.release(a)
    b = pool.acquire(1600000)
    assert b == a and pool.os_bytes == 5760000


def test_best_fit_prefers_smallest_fitting_block():
    pool = BestFitPool()
    big, small = pool.acquire(100), pool.acquire(40)
    pool.release(big)
    pool.release(small)
    assert pool.acquire(30) == small


def test_csv_has_header_and_one_line_per_row(report):
    import csv
    rows = list(csv.reader(report.csv().splitlines()))
    assert rows[0] == ["stmt", "dims", "delta_mb", "total_dealloc_mb", "total_reuse_mb"]
    assert rows[1] == ["val X1 = Cuda(X)", "500 1 28 28", "1.568000", "1.568000", "1.568000"]
    assert len(rows) >= len(report.rows) + 1
