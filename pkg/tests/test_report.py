"""SVG and CSV report emitters."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from soupkit import bench as B
from soupkit import model as M
from soupkit import report as R
from soupkit import soup as S
from soupkit.ioutil import fmt6


def small_config():
    return M.ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, vocab_size=64, max_seq_len=32)


def alpha_set_with(cfg, activation, value):
    aset = S.AlphaSet.default(cfg, activation)
    for unit in aset.raw:
        aset.raw[unit] = np.array([value], dtype=np.float64)
    return aset


def grid_record(epochs, lr, em=None, failed=False, eval_set="A"):
    metrics = {} if em is None else {eval_set: B.Metrics(1.0, float(np.e), em)}
    return B.SweepRecord(
        train_spec="a:5",
        epochs=epochs,
        learning_rate=lr,
        activation="softmax",
        lambda_l1=0.0,
        seed=1,
        metrics=metrics,
        failed=failed,
    )


def vanilla_record(alpha, em, eval_set="A"):
    return B.SweepRecord(
        train_spec=f"vanilla@{alpha:.2f}",
        epochs=None,
        learning_rate=None,
        activation=None,
        lambda_l1=None,
        seed=None,
        metrics={eval_set: B.Metrics(1.0, float(np.e), em)},
    )


class TestDumpAlpha:
    def test_round_trip_and_row_count(self, tmp_path):
        cfg = small_config()
        aset = S.AlphaSet.default(cfg, "sigmoid")
        path = str(tmp_path / "alpha.csv")
        R.dump_alpha(aset, path)
        with open(path) as fh:
            assert len(fh.read().splitlines()) == 1 + 21
        loaded = S.load_alpha_csv(path)
        assert loaded.activation == aset.activation
        assert set(loaded.raw) == set(aset.raw)


class TestAlphaStrip:
    def test_dominant_everywhere_renders_no_red(self, tmp_path):
        cfg = small_config()
        path = str(tmp_path / "strip.svg")
        R.alpha_strip_svg({"run": alpha_set_with(cfg, "linear", 0.7)}, "attn_q", path)
        svg = open(path).read()
        ET.fromstring(svg)
        assert R.DOMINANT_COLOR in svg
        assert R.RECESSIVE_COLOR not in svg
        assert fmt6(0.7) in svg

    def test_exact_half_is_red(self, tmp_path):
        cfg = small_config()
        path = str(tmp_path / "strip.svg")
        R.alpha_strip_svg({"run": S.AlphaSet.default(cfg, "linear")}, "mlp_gate", path)
        svg = open(path).read()
        assert R.DOMINANT_COLOR not in svg
        assert svg.count(f'fill="{R.RECESSIVE_COLOR}"') == cfg.n_layers

    def test_two_runs_make_two_rows(self, tmp_path):
        cfg = small_config()
        sets = {
            "plain": alpha_set_with(cfg, "linear", 0.8),
            "shrunk": alpha_set_with(cfg, "linear", 0.2),
        }
        path = str(tmp_path / "strip.svg")
        R.alpha_strip_svg(sets, "attn_v", path)
        svg = open(path).read()
        assert ">plain<" in svg and ">shrunk<" in svg
        assert svg.count(f'fill="{R.DOMINANT_COLOR}"') == cfg.n_layers
        assert svg.count(f'fill="{R.RECESSIVE_COLOR}"') == cfg.n_layers

    def test_global_kind_has_single_column(self, tmp_path):
        cfg = small_config()
        path = str(tmp_path / "strip.svg")
        R.alpha_strip_svg({"run": alpha_set_with(cfg, "linear", 0.9)}, "embed", path)
        svg = open(path).read()
        assert ">global<" in svg
        assert svg.count(f'fill="{R.DOMINANT_COLOR}"') == 1

    def test_mixed_unit_layouts_rejected(self, tmp_path):
        cfg = small_config()
        other = M.ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, vocab_size=64, max_seq_len=32)
        sets = {
            "a": S.AlphaSet.default(cfg, "linear"),
            "b": S.AlphaSet.default(other, "linear"),
        }
        with pytest.raises(ValueError, match="mixed configs"):
            R.alpha_strip_svg(sets, "attn_q", str(tmp_path / "strip.svg"))

    def test_unknown_kind_rejected(self, tmp_path):
        cfg = small_config()
        with pytest.raises(ValueError, match="unknown unit kind"):
            R.alpha_strip_svg({"r": S.AlphaSet.default(cfg, "linear")}, "conv", str(tmp_path / "x.svg"))

    def test_rerender_is_byte_identical(self, tmp_path):
        cfg = small_config()
        sets = {"run": alpha_set_with(cfg, "sigmoid", 0.3)}
        p1, p2 = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
        R.alpha_strip_svg(sets, "final_norm", p1)
        R.alpha_strip_svg(sets, "final_norm", p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestGridHeatmap:
    def test_cells_and_ramp_endpoints(self, tmp_path):
        records = [
            grid_record(1, 0.1, em=0.2),
            grid_record(1, 0.3, em=0.8),
            grid_record(3, 0.1, em=0.5),
            grid_record(3, 0.3, em=0.6),
        ]
        path = str(tmp_path / "heat.svg")
        R.grid_heatmap_svg(records, "A", path)
        svg = open(path).read()
        ET.fromstring(svg)
        for value in (0.2, 0.8, 0.5, 0.6):
            assert f">{fmt6(value)}<" in svg
        assert R._ramp_color(0.0) in svg
        assert R._ramp_color(1.0) in svg
        assert ">1<" in svg and ">3<" in svg
        assert f">{fmt6(0.1)}<" in svg and f">{fmt6(0.3)}<" in svg

    def test_failed_and_missing_cells_gray(self, tmp_path):
        records = [
            grid_record(1, 0.1, em=0.4),
            grid_record(1, 0.3, failed=True),
            grid_record(3, 0.3, em=0.9),
        ]
        path = str(tmp_path / "heat.svg")
        R.grid_heatmap_svg(records, "A", path)
        svg = open(path).read()
        assert svg.count(">failed<") == 2
        assert svg.count(f'fill="{R.FAILED_COLOR}"') == 2

    def test_constant_grid_uses_mid_color(self, tmp_path):
        records = [grid_record(1, 0.1, em=0.4), grid_record(1, 0.3, em=0.4)]
        path = str(tmp_path / "heat.svg")
        R.grid_heatmap_svg(records, "A", path)
        svg = open(path).read()
        assert svg.count(R._ramp_color(0.5)) == 2
        assert svg.count(f"min {fmt6(0.4)}") == 1
        assert svg.count(f"max {fmt6(0.4)}") == 1

    def test_conflicting_cell_rejected(self, tmp_path):
        records = [grid_record(1, 0.1, em=0.4), grid_record(1, 0.1, em=0.5)]
        with pytest.raises(ValueError, match="conflicting records"):
            R.grid_heatmap_svg(records, "A", str(tmp_path / "x.svg"))

    def test_vanilla_records_alone_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no grid records"):
            R.grid_heatmap_svg([vanilla_record(0.5, 0.5)], "A", str(tmp_path / "x.svg"))


class TestVanillaCurve:
    def test_standard_sweep_shape(self, tmp_path):
        alphas = [i / 10 for i in range(11)]
        records = [vanilla_record(a, 0.1 + 0.05 * i) for i, a in enumerate(alphas)]
        path = str(tmp_path / "curve.svg")
        R.vanilla_curve_svg(records, "A", path)
        svg = open(path).read()
        ET.fromstring(svg)
        assert svg.count("<circle") == 9
        assert svg.count(f'stroke="{R.BASE1_COLOR}"') == 1
        assert svg.count(f'stroke="{R.BASE2_COLOR}"') == 1
        assert f">{fmt6(0.15)}<" in svg
        for label in ("0.00", "0.50", "1.00"):
            assert f">{label}<" in svg

    def test_baseline_values_printed(self, tmp_path):
        records = [vanilla_record(0.0, 0.25), vanilla_record(0.5, 0.75), vanilla_record(1.0, 0.125)]
        path = str(tmp_path / "curve.svg")
        R.vanilla_curve_svg(records, "A", path)
        svg = open(path).read()
        assert f">{fmt6(0.25)}<" in svg
        assert f">{fmt6(0.125)}<" in svg

    def test_equal_metrics_still_render(self, tmp_path):
        records = [vanilla_record(a, 0.5) for a in (0.0, 0.3, 1.0)]
        path = str(tmp_path / "curve.svg")
        R.vanilla_curve_svg(records, "A", path)
        ET.fromstring(open(path).read())

    def test_missing_base_rejected(self, tmp_path):
        records = [vanilla_record(0.1, 0.5), vanilla_record(1.0, 0.5)]
        with pytest.raises(ValueError, match="both bases"):
            R.vanilla_curve_svg(records, "A", str(tmp_path / "x.svg"))


class TestSummaryTable:
    def test_headers_and_values(self, tmp_path):
        table = B.summarize([
            B.SweepRecord("a:5", 1, 0.1, "softmax", 0.0, 1,
                          {"A": B.Metrics(1.0, float(np.e), 0.25), "B": B.Metrics(1.0, float(np.e), 0.5)}),
        ])
        path = str(tmp_path / "summary.svg")
        R.summary_table_svg(table, path)
        svg = open(path).read()
        ET.fromstring(svg)
        for header in ("train_spec", "mean:A", "max:A", "mean:B", "max:B", "sum_mean", "sum_max"):
            assert f">{header}<" in svg
        assert ">a:5<" in svg
        assert f">{fmt6(0.75)}<" in svg

    def test_rerender_is_byte_identical(self, tmp_path):
        table = B.summarize([
            B.SweepRecord("b:9", 2, 0.3, "sigmoid", 0.0, 4, {"A": B.Metrics(1.0, float(np.e), 0.625)}),
        ])
        p1, p2 = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
        R.summary_table_svg(table, p1)
        R.summary_table_svg(table, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
