import io
import json

import numpy as np
import pytest

from nextvit import cli
from nextvit.config import render_config
from nextvit.weights import load_weights

TINY = {
    "pattern": {"letters": "C H H H", "N": 1, "L": 1,
                "channels": [[16, 16], [16, 32], [32, 32], [32, 64]], "depths": [1, 1, 1, 1]},
    "head_dim": 8, "num_classes": 10, "stem": [[8, 2], [8, 1], [16, 1], [16, 2]],
}


def run(*argv):
    buf = io.StringIO()
    code = cli.main(list(map(str, argv)), out=buf)
    return code, buf.getvalue()


@pytest.fixture
def tiny_files(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    w, x = tmp_path / "w.nvtw", tmp_path / "x.nvtw"
    assert run("init", cfg, "--out", w, "--calibrate", 2, "--size", "64x64")[0] == 0
    assert run("make-input", "--out", x, "--size", 64, "--batch", 2, "--seed", 5)[0] == 0
    return cfg, w, x


def test_describe_s_reports_params_and_writes_figure(tmp_path):
    code, out = run("describe", "S", "--csv", tmp_path / "s.csv", "--plot", tmp_path / "s.png")
    assert code == 0
    assert "params 31.78 M" in out
    assert (tmp_path / "s.csv").read_text().startswith("path,params,flops")
    assert (tmp_path / "s.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_describe_accepts_file_and_inline_json(tmp_path):
    path = tmp_path / "b.json"
    path.write_text(json.dumps({"variant": "B"}))
    assert run("describe", path)[1] == run("describe", '{"variant": "B"}')[1]
    assert "@ 384x384" in run("describe", "S", "--size", "384")[1]


def test_infer_trace_and_logits(tiny_files):
    cfg, w, x = tiny_files
    code, out = run("infer", cfg, w, x, "--trace")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "# stem (2, 16, 16, 16)"
    assert "# stages.3 (2, 64, 2, 2)" in lines
    rows = [l for l in lines if not l.startswith("#")]
    assert rows[0].startswith("sample,argmax,logit_0") and len(rows) == 3
    assert len(rows[1].split(",")) == 2 + 10


def test_fold_then_infer_keeps_argmax(tiny_files, tmp_path):
    cfg, w, x = tiny_files
    folded = tmp_path / "folded.nvtw"
    code, out = run("fold", cfg, w, "--out", folded, "--size", 64, "--samples", 4)
    assert code == 0, out
    assert "bn_nodes before=" in out and "after=0" in out and "PASS" in out
    fcfg = tmp_path / "folded.json"
    assert json.loads(fcfg.read_text())["norm_act"][0] == "folded"
    argmax = lambda text: [l.split(",")[1] for l in text.splitlines()[1:]]
    assert argmax(run("infer", cfg, w, x)[1]) == argmax(run("infer", fcfg, folded, x)[1])


def test_fold_rejects_ln(tmp_path, capsys):
    cfg = tmp_path / "ln.json"
    cfg.write_text(json.dumps(dict(TINY, norm_act=["LN", "GELU"])))
    w = tmp_path / "w.nvtw"
    assert run("init", cfg, "--out", w)[0] == 0
    assert run("fold", cfg, w, "--out", tmp_path / "f.nvtw")[0] == 2
    assert "not foldable" in capsys.readouterr().err


def test_bench_single_row_per_target(tiny_files, tmp_path):
    cfg, _, _ = tiny_files
    code, out = run("bench", cfg, "--iters", 1, "--warmup", 0, "--size", 64, "--csv", tmp_path / "b.csv",
                    "--plot", tmp_path / "b.png")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# threads=1 conv=direct")
    assert lines[1] == "target,batch,height,width,warmup,iters,median_ms,p95_ms"
    assert [l.split(",")[0] for l in lines[2:] if not l.startswith("#")] == ["model"]
    assert (tmp_path / "b.csv").read_text().splitlines()[:3] == lines[:3]
    assert (tmp_path / "b.png").exists()


def test_bench_per_block_and_options(tiny_files):
    cfg, w, _ = tiny_files
    code, out = run("bench", cfg, "--weights", w, "--iters", 2, "--warmup", 1, "--size", 64,
                    "--per-block", "--threads", 2, "--conv", "im2col", "--batch", 2)
    assert code == 0
    assert out.splitlines()[0].startswith("# threads=2 conv=im2col")
    targets = [l.split(",")[0] for l in out.splitlines()[2:]]
    assert targets[0] == "stem" and targets[-1] == "head" and len(targets) == 7 + 2


@pytest.mark.parametrize("argv", [
    [], ["bogus"], ["describe"], ["describe", "nope"], ["describe", "S", "--size", "abc"],
    ["bench", "S", "--iters", "0"], ["bench", "S", "--warmup", "-1"], ["describe", "S", "--size", "100"],
    ["fold", "S", "missing.nvtw"], ["infer", "S", "missing.nvtw", "x.nvtw"],
    ["describe", '{"variant": "S", "extra": 1}'],
])
def test_usage_errors_exit_2(argv, capsys):
    assert run(*argv)[0] == 2


def test_help_exits_0(capsys):
    assert run("--help")[0] == 0


def test_infer_shape_mismatch_exit_2(tiny_files, tmp_path):
    cfg, w, _ = tiny_files
    from nextvit.weights import save_tensor

    save_tensor(np.zeros((1, 3, 48, 48), np.float32), tmp_path / "odd.nvtw")
    assert run("infer", cfg, w, tmp_path / "odd.nvtw")[0] == 2


def test_infer_wrong_weights_exit_2(tiny_files, tmp_path):
    cfg, _, x = tiny_files
    assert run("infer", "S", tiny_files[1], x)[0] == 2


def test_selftest_and_gradcheck_exit_codes(monkeypatch):
    from nextvit import checks

    code, out = run("selftest")
    assert code == 0 and "FAIL" not in out and out.strip().endswith("oracle checks passed")

    failing = checks.CheckResult("forced failure", 1.0, 0.5)
    monkeypatch.setattr(checks, "run_selftest", lambda emit=None: [failing])
    assert run("selftest")[0] == 1

    bad = checks.GradReport("forced", 1.0, 1.0, (0, (0,)), 1e-3)
    monkeypatch.setattr(checks, "run_gradient_suite", lambda max_size, emit=None: [bad])
    assert run("gradcheck")[0] == 1


def test_render_matches_library(tmp_path):
    from nextvit.model import build_variant

    assert run("render", "L")[1] == render_config(build_variant("L"))


def test_init_is_seeded(tmp_path):
    run("init", json.dumps(TINY), "--out", tmp_path / "a.nvtw", "--seed", 3)
    run("init", json.dumps(TINY), "--out", tmp_path / "b.nvtw", "--seed", 3)
    assert (tmp_path / "a.nvtw").read_bytes() == (tmp_path / "b.nvtw").read_bytes()
    assert load_weights(tmp_path / "a.nvtw")
