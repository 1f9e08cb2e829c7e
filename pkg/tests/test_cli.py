import csv
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from dyra import cli, imaging

HERE = Path(__file__).parent
SNAP = HERE / "snapshots" / "help.txt"
FIXTURE = HERE / "data" / "annotations_100.json"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _all_help(parser, prefix="dyra"):
    parts = [f"$ {prefix} --help\n{parser.format_help()}"]
    for action in parser._actions:
        if action.__class__.__name__ == "_SubParsersAction":
            for name, sp in action.choices.items():
                parts.extend(_all_help(sp, f"{prefix} {name}"))
    return parts


def help_text():
    old = os.environ.get("COLUMNS")
    os.environ["COLUMNS"] = "100"
    try:
        return "\n".join(_all_help(cli.build_parser()))
    finally:
        if old is None:
            del os.environ["COLUMNS"]
        else:
            os.environ["COLUMNS"] = old


def test_help_snapshot():
    if os.environ.get("DYRA_UPDATE_SNAPSHOTS"):
        SNAP.write_text(help_text())
    assert help_text() == SNAP.read_text()


def test_help_lists_every_flag():
    text = help_text()
    parser = cli.build_parser()
    stack = [parser]
    while stack:
        p = stack.pop()
        for a in p._actions:
            for opt in a.option_strings:
                assert opt in text
            if a.__class__.__name__ == "_SubParsersAction":
                stack.extend(a.choices.values())


def test_schedule_dump_rows(capsys):
    code, out, _ = run(capsys, "schedule", "dump")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["step", "lr"]
    assert len(rows) == 102
    assert rows[1] == ["0", "0.01"] and rows[67] == ["66", "0.01"] and rows[-1] == ["100", "0.0"]


def test_schedule_dump_is_reproducible(capsys):
    assert run(capsys, "schedule", "dump")[1] == run(capsys, "schedule", "dump")[1]


@pytest.mark.parametrize("init", [4, 8])
def test_gamma_sim_endpoint(capsys, init):
    code, out, _ = run(capsys, "gamma-sim", "--init", init)
    assert code == 0
    final = float(out.strip().splitlines()[-1].split(",")[1])
    assert 6.75 <= final <= 6.85


def test_unknown_config_key_exits_2(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"balance": {"gamma_init": 5.0, "gama": 1}}))
    code, _, err = run(capsys, "schedule", "dump", "--config", p)
    assert code == 2
    assert json.loads(err)["path"] == "$.balance.gama"


@pytest.mark.parametrize("doc,path", [
    ({"scaler": {"tau": 10}}, "$.scaler.tau"),
    ({"scaler": {"tau": "2"}}, "$.scaler.tau"),
    ({"balance": {"variant": "sideways"}}, "$.balance.variant"),
    ({"balance": {"s_ap": [1, 2, 3]}}, "$.balance.s_ap"),
    ({"harness": {"surrogate": {"k": -1.0}}}, "$.harness.surrogate"),
    ({"harness": {"seed": 1.5}}, "$.harness.seed"),
    ([1, 2], "$"),
])
def test_bad_config_paths(capsys, tmp_path, doc, path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(capsys, "schedule", "dump", "--config", p)
    assert code == 2
    assert json.loads(err)["path"] == path


def test_config_not_json_exits_2(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    assert run(capsys, "schedule", "dump", "--config", p)[0] == 2


def test_config_overrides_schedule(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schedule": {"base_lr": 0.5, "total_steps": 9, "switch_step": 3}}))
    code, out, _ = run(capsys, "schedule", "dump", "--config", p)
    rows = out.strip().splitlines()
    assert code == 0 and len(rows) == 11 and rows[4] == "3,0.5"


def test_losses_eval(capsys, tmp_path):
    case = {"images": [{"phi": 1.0, "boxes": [{"width": 50, "height": 50, "loc_loss": 0.4},
                                              {"width": 300, "height": 300, "loc_loss": 0.8}]}]}
    p = tmp_path / "case.json"
    p.write_text(json.dumps(case))
    code, out, _ = run(capsys, "losses", "eval", "--case", p)
    assert code == 0
    rep = json.loads(out)
    assert rep["bal_targets"] == [pytest.approx(7.2)]


def test_losses_eval_bad_case_exits_1(capsys, tmp_path):
    p = tmp_path / "case.json"
    p.write_text(json.dumps({"images": [{"phi": 5.0, "boxes": [{"width": 1, "height": 1, "loc_loss": 0.1}]}]}))
    code, _, err = run(capsys, "losses", "eval", "--case", p)
    assert code == 1
    assert json.loads(err)["error"] == "DomainError"


def test_gradcheck_cli(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 3, "--n-configs", 16)
    assert code == 0
    assert "16/16 passed" in out


def test_gradcheck_failure_exit(capsys, monkeypatch):
    from dyra import autodiff as ad, checks

    def bad(rng):
        return ad.gradcheck(lambda v: float(v[0] ** 2), [1.0], grad_fn=lambda v: [0.0])

    monkeypatch.setattr(checks, "CASES", {"broken": bad})
    code, out, err = run(capsys, "gradcheck", "--n-configs", 2)
    assert code == 1 and "FAIL" in out
    assert json.loads(err)["error"] == "check_failed"


def test_balance_diag(capsys):
    code, out, _ = run(capsys, "balance-diag", "--sweep", "--grid", 3)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 9
    for r in rows:
        if r["l_down"] == r["l_up"]:
            assert float(r["target"]) == pytest.approx(6.8)


def test_balance_diag_needs_sweep(capsys):
    assert run(capsys, "balance-diag")[0] == 1


def test_stats(capsys, tmp_path):
    hist = tmp_path / "h.csv"
    code, out, _ = run(capsys, "stats", "--annotations", FIXTURE, "--gamma", 6.8, "--histogram", hist)
    s = json.loads(out)
    assert code == 0
    assert s["n_boxes"] == 95 and s["n_warnings"] == 5
    assert s["fraction_up"] == pytest.approx(40 / 95)
    assert hist.read_text().startswith("bin_lo,bin_hi,count")


def test_stats_missing_file_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "stats", "--annotations", tmp_path / "none.json")
    assert code == 1 and json.loads(err)["error"] == "AnnotationParseError"


def test_resize_identity_bytes(capsys, tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "in.ppm"
    imaging.write_pnm(src, imaging.RasterImage.from_array(rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)))
    dst = tmp_path / "out.ppm"
    assert run(capsys, "resize", "--input", src, "--phi", 1, "--output", dst)[0] == 0
    assert dst.read_bytes() == src.read_bytes()


def test_resize_with_boxes(capsys, tmp_path):
    src = tmp_path / "in.pgm"
    imaging.write_pnm(src, imaging.RasterImage.from_array(np.zeros((10, 20), np.uint8)))
    boxes = tmp_path / "b.json"
    boxes.write_text(json.dumps([[10, 10, 20, 20]]))
    code, out, _ = run(capsys, "resize", "--input", src, "--phi", 0.5, "--output", tmp_path / "o.pgm",
                       "--boxes", boxes)
    assert code == 0
    rep = json.loads(out)
    assert rep["boxes"] == [[5, 5, 10, 10]] and (rep["width"], rep["height"]) == (10, 5)


def test_resize_bad_phi_exits_1(capsys, tmp_path):
    src = tmp_path / "in.pgm"
    imaging.write_pnm(src, imaging.RasterImage.from_array(np.zeros((4, 4), np.uint8)))
    assert run(capsys, "resize", "--input", src, "--phi", 0, "--output", tmp_path / "o.pgm")[0] == 1


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["resize"])
    assert info.value.code == 2


def test_train_toy_small(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "scaler": {"architecture": {"hidden_dim": 8, "ffn_dim": 8, "tokens": 4, "conv_layers": 1}},
        "harness": {"n_images": 40, "steps": 30, "batch_size": 4},
        "output": {"directory": str(tmp_path / "ignored")},
    }))
    out_dir = tmp_path / "out"
    monkeypatch.setenv("DYRA_OUTPUT_DIR", str(out_dir))
    code, out, _ = run(capsys, "--threads", 2, "train-toy", "--config", cfg)
    assert code == 0
    assert json.loads(out)["heldout"]["n_images"] == 8
    assert (out_dir / "trace.csv").read_text().count("\n") == 31
    assert (out_dir / "checkpoint.json").exists() and (out_dir / "stats.json").exists()
    first = (out_dir / "trace.csv").read_bytes()
    assert run(capsys, "--threads", 1, "train-toy", "--config", cfg)[0] == 0
    assert (out_dir / "trace.csv").read_bytes() == first
