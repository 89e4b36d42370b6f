import xml.etree.ElementTree as ET

import pytest

from dremlab import harness, plots


def write_bundle(root):
    root.mkdir(parents=True, exist_ok=True)
    for kind, rs in (("direct_success", [0.0, 0.5, 1.0]), ("random", [0.2, 0.1, 0.2])):
        harness.write_trace([(i, r, 0, 0.0) for i, r in enumerate(rs)], root / f"trace_{kind}.csv")
    exp = root / "drem"
    exp.mkdir()
    harness.write_aggregate([(100, 0.5, 0.0, 1.0, 3), (200, 1.0, 1.0, 1.0, 3)], exp / "aggregate.csv")


def test_one_svg_per_figure_kind(tmp_path):
    write_bundle(tmp_path / "b")
    written = plots.emit_plots([tmp_path / "b"], tmp_path / "out")
    assert sorted(p.rsplit("/", 1)[1] for p in map(str, written)) == ["reward_traces.svg", "success_rate.svg"]
    for p in written:
        assert ET.parse(p).getroot().tag.endswith("svg")


def test_plots_are_deterministic(tmp_path):
    write_bundle(tmp_path / "b")
    a = [open(p, "rb").read() for p in plots.emit_plots([tmp_path / "b"], tmp_path / "o1")]
    b = [open(p, "rb").read() for p in plots.emit_plots([tmp_path / "b"], tmp_path / "o2")]
    assert a == b


def test_band_is_drawn_between_min_and_max(tmp_path, monkeypatch):
    from matplotlib.axes import Axes

    seen = []
    real = Axes.fill_between
    monkeypatch.setattr(Axes, "fill_between", lambda self, x, lo, hi, **kw: seen.append((x, lo, hi)) or real(self, x, lo, hi, **kw))
    rows = [(100, 0.5, 0.25, 0.75, 3), (200, 0.6, 0.5, 0.9, 3)]
    plots.plot_success({"drem": rows}, tmp_path / "s.svg")
    (x, lo, hi), = seen
    assert list(x) == [100, 200]
    assert all(h >= l for l, h in zip(lo, hi))
    assert list(lo) == [0.25, 0.5] and list(hi) == [0.75, 0.9]


def test_empty_bundle_raises(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(plots.PlotInputError):
        plots.emit_plots([tmp_path / "empty"], tmp_path / "out")
    with pytest.raises(plots.PlotInputError):
        plots.plot_traces({}, tmp_path / "x.svg")
    with pytest.raises(plots.PlotInputError):
        plots.plot_success({"a": []}, tmp_path / "x.svg")
