from nextvit.analysis import count_flops
from nextvit.bench import BenchReport, BenchRow
from nextvit.model import build_variant
from nextvit.plotting import plot_bench, plot_costs

PNG = b"\x89PNG\r\n\x1a\n"


def test_cost_figure(tmp_path):
    path = plot_costs(count_flops(build_variant("S")), tmp_path / "sub" / "costs.png")
    assert open(path, "rb").read(8) == PNG


def test_bench_figure_svg(tmp_path):
    rows = [BenchRow(t, 1, 32, 32, 0, 3, m, m * 1.2) for t, m in (("stem", 1.0), ("head", 0.2))]
    path = plot_bench(BenchReport(rows, 1, "direct", "tiny"), tmp_path / "bench.svg")
    assert "<svg" in open(path).read(400)
