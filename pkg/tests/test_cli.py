import json

import numpy as np
import pytest
import yaml
from PIL import Image

from robox.evalcli.cli import main
from robox.evalcli.report import table_csv


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """Tiny end-to-end run: 20 samples, one epoch each."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--count", "20", "--seed", "3", "--out", str(root / "ds")]) == 0
    manifest = str(root / "ds" / "manifest.json")
    base = str(root / "base.rbxs")
    assert main(["pretrain", "--manifest", manifest, "--out", base, "--epochs", "1", "--batch", "8"]) == 0
    heads = str(root / "heads.rbxs")
    assert main(["train", "--base", base, "--manifest", manifest, "--out", heads, "--epochs", "1"]) == 0
    return root, manifest, base, heads


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--bogus"]) == 1
    assert main(["gen-data"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.rbxs"
    bad.write_bytes(b"XXXX" + bytes(40))
    assert main(["infer", "--checkpoint", str(bad), "--image", "x.png", "--box", "1,1,5,5"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--manifest", "m", "--out", "o"]) == 2


def test_bad_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"no_such_key": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


def test_flow_outputs(flow):
    root, manifest, base, heads = flow
    assert (root / "base.log.jsonl").exists() and (root / "heads.log.jsonl").exists()
    m = json.loads(open(manifest).read())
    assert len(m["samples"]) == 20


def test_eval_seed_determinism_and_report(flow, capsys, tmp_path):
    _, manifest, _, heads = flow
    common = ["eval", "--checkpoint", heads, "--manifest", manifest, "--limit", "2", "--trials", "2",
              "--methods", "Baseline;Baseline+PRM;Baseline+PRM+PEM;RoBox", "--seed", "7"]
    assert main(common + ["--out", str(tmp_path / "a")]) == 0
    assert main(common + ["--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.runtime.json").exists()
    capsys.readouterr()
    assert main(["report", str(tmp_path / "a.json"), str(tmp_path / "b.json"),
                 "--out", str(tmp_path / "t.csv"), "--plot", str(tmp_path / "p.png")]) == 0
    lines = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert lines[0] == "method,bucket,DICE,PR"
    assert len(lines) == 1 + 4 * 4
    assert {ln.split(",")[0] for ln in lines[1:]} == {"Baseline", "Baseline+PRM", "Baseline+PRM+PEM", "RoBox"}
    assert all(ln.endswith(",/") for ln in lines[1:] if ",GT," in ln)
    assert (tmp_path / "p.png").stat().st_size > 0


def test_config_file_and_flag_precedence(flow, tmp_path):
    _, manifest, _, heads = flow
    cfg = tmp_path / "e.json"
    cfg.write_text(json.dumps({"checkpoint": heads, "manifest": manifest, "limit": 1,
                               "trials": 2, "methods": ["Baseline"], "seed": 1}))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "c1")]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "c2"), "--trials", "3"]) == 0
    r1 = json.loads((tmp_path / "c1.json").read_text())
    r2 = json.loads((tmp_path / "c2.json").read_text())
    assert r1["config"]["trials"] == 2 and r2["config"]["trials"] == 3
    assert {a["method"] for a in r1["aggregates"]} == {"Baseline"}


def test_infer_prints_index_and_dice(flow, capsys, tmp_path):
    root, _, _, heads = flow
    m = json.loads((root / "ds" / "manifest.json").read_text())
    s = m["samples"][-1]
    img, gt = str(root / "ds" / s["image"]), str(root / "ds" / s["mask"])
    box = ",".join(str(v) for v in s["box"])
    out_mask, out_trace = tmp_path / "m.png", tmp_path / "t.json"
    capsys.readouterr()
    assert main(["infer", "--checkpoint", heads, "--image", img, "--box", box, "--gt-mask", gt,
                 "--out-mask", str(out_mask), "--out-trace", str(out_trace)]) == 0
    out = capsys.readouterr().out
    assert "selected_mask_index" in out and "dice " in out
    k = int(out.split("selected_mask_index")[1].split()[0])
    assert k in (0, 1, 2)
    mask = np.asarray(Image.open(out_mask))
    assert set(np.unique(mask)) <= {0, 255}
    assert "boxes" in json.loads(out_trace.read_text())
    assert main(["infer", "--checkpoint", heads, "--image", img, "--box", "1,2,3"]) == 1
    assert main(["infer", "--checkpoint", heads, "--image", img, "--box", box, "--flags", "none"]) == 0
