"""Scaling-probe tests: MAC bookkeeping, slope fitting, CSV layout."""

import csv
import math

import pytest

from hazeprior.bench import (BENCH_COLUMNS, BenchPoint, DEFAULT_SIZES,
                             loglog_slope, run_bench, time_attention)
from hazeprior.dpfm import WindowGeometry, attention_mac_count
from hazeprior.errors import ParameterError

GEOM = WindowGeometry(8, 0.5, 2)


class TestMacScaling:
    def test_doubling_quadruples_both_counts(self):
        for lo, hi in ((32, 64), (64, 128)):
            a = attention_mac_count(lo, lo, GEOM, 8)
            b = attention_mac_count(hi, hi, GEOM, 8)
            assert b.score == 4 * a.score
            assert b.proj == 4 * a.proj

    def test_counts_linear_in_window_count(self):
        # one extra window row adds exactly one row's worth of work
        per_row = attention_mac_count(8, 32, GEOM, 8)
        two_rows = attention_mac_count(16, 32, GEOM, 8)
        assert two_rows.score == 2 * per_row.score
        assert two_rows.proj == 2 * per_row.proj

    def test_score_closed_form(self):
        # m=8, r=0.5 -> m_ov=12; one window, one channel budget by hand
        g = WindowGeometry(8, 0.5, 1)
        got = attention_mac_count(8, 8, g, 4)
        assert got.score == 2 * 2 * 1 * 64 * 144 * 4
        assert got.proj == 1 * 16 * (2 * (64 + 2 * 144) + 64)

    def test_heads_cancel(self):
        one = attention_mac_count(32, 32, WindowGeometry(8, 0.5, 1), 8)
        four = attention_mac_count(32, 32, WindowGeometry(8, 0.5, 4), 8)
        assert (one.score, one.proj) == (four.score, four.proj)


class TestLoglogSlope:
    def test_recovers_exact_power_law(self):
        pts = [BenchPoint(h=s, w=s, score_macs=0, proj_macs=0,
                          wall_ns=int(17 * (s * s) ** 1.5))
               for s in (32, 64, 128, 256)]
        assert math.isclose(loglog_slope(pts), 1.5, abs_tol=1e-3)

    def test_linear_law_gives_slope_one(self):
        pts = [BenchPoint(h=s, w=s, score_macs=0, proj_macs=0,
                          wall_ns=s * s * 1000) for s in (16, 32, 64)]
        assert math.isclose(loglog_slope(pts), 1.0, abs_tol=1e-9)

    def test_single_point_rejected(self):
        with pytest.raises(ParameterError):
            loglog_slope([BenchPoint(8, 8, 0, 0, 100)])


class TestTimeAttention:
    def test_returns_positive_nanoseconds(self):
        g = WindowGeometry(4, 0.5, 2)
        assert time_attention(8, 8, g, 4, warmup=0, reps=1) > 0

    def test_bad_reps_rejected(self):
        g = WindowGeometry(4, 0.5, 2)
        with pytest.raises(ParameterError):
            time_attention(8, 8, g, 4, reps=0)
        with pytest.raises(ParameterError):
            time_attention(8, 8, g, 4, warmup=-1)


class TestRunBench:
    def test_default_sizes_are_three_doublings(self):
        assert DEFAULT_SIZES == (32, 64, 128)

    def test_points_carry_exact_macs(self, tmp_path):
        pts = run_bench(sizes=(8, 16), window=4, overlap=0.5, heads=2,
                        channels=4, warmup=0, reps=1)
        g = WindowGeometry(4, 0.5, 2)
        for p in pts:
            want = attention_mac_count(p.h, p.w, g, 4)
            assert p.score_macs == want.score
            assert p.proj_macs == want.proj
        assert pts[1].score_macs == 4 * pts[0].score_macs

    def test_csv_layout(self, tmp_path):
        out = tmp_path / "bench.csv"
        pts = run_bench(sizes=(8, 16), window=4, channels=4,
                        out_csv=out, warmup=0, reps=1)
        rows = list(csv.reader(out.open()))
        assert tuple(rows[0]) == BENCH_COLUMNS
        assert len(rows) == 1 + len(pts)
        first = rows[1]
        assert first[0] == "8" and first[1] == "8"
        assert first[2] == "4" and first[3] == "0.5"
        assert int(first[6]) == pts[0].score_macs
        assert int(first[8]) == pts[0].wall_ns

    def test_too_few_sizes_rejected(self):
        with pytest.raises(ParameterError):
            run_bench(sizes=(32,))

    def test_sizes_below_window_rejected(self):
        with pytest.raises(ParameterError):
            run_bench(sizes=(4, 64), window=8)
