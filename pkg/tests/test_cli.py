import io
import json

import pytest

from minikv.cli import main


def run(*argv):
    buf = io.StringIO()
    code = main(list(argv), out=buf)
    return code, buf.getvalue()


def test_mem_table():
    code, text = run("mem", "--layers", "32", "--hidden", "4096", "--heads", "32",
                     "--prompt", "4096", "--gen", "512", "--budget", "0.25,0.25")
    assert code == 0
    full = next(line for line in text.splitlines() if line.startswith("full"))
    mini = next(line for line in text.splitlines() if line.startswith("minikv"))
    assert full.split()[2] == "2.4"
    assert mini.split()[2] == "0.33" and mini.split()[3] == "86%"
    assert "3.76x" in text and "h2o 15.6%" in text and "qhitter 58.8%" in text


def test_mem_json():
    code, text = run("mem", "--layers", "32", "--hidden", "4096", "--heads", "32",
                     "--prompt", "4096", "--gen", "512", "--format", "json")
    doc = json.loads(text)
    assert code == 0 and {r["method"] for r in doc["rows"]} >= {"full", "minikv", "kivi"}


def test_verify_passes():
    code, text = run("verify", "--seed", "3")
    assert code == 0 and "FAIL" not in text


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--seed", "5", "--layers", "2", "--hidden", "32", "--prompt", "64",
            "--steps", "4", "--n-r", "16"]
    code1, a = run(*args)
    code2, b = run(*args)
    assert code1 == code2 == 0 and a == b
    doc = json.loads(a)
    assert doc["meta"]["seed"] == 5 and len(doc["decode"]) == 4


def test_run_writes_files(tmp_path):
    out, csv = tmp_path / "t.json", tmp_path / "m.csv"
    code, _ = run("run", "--seed", "1", "--layers", "2", "--hidden", "16", "--prompt", "32",
                  "--steps", "3", "--n-r", "16", "--out", str(out), "--csv", str(csv))
    assert code == 0 and json.loads(out.read_text())["meta"]["seed"] == 1
    assert csv.read_text().splitlines()[0] == "step,max_abs_dev,bound"
    assert len(csv.read_text().splitlines()) == 4


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"layers": 2, "d": 16, "l_prompt": 32, "steps": 2, "n_r": 16, "seed": 4}))
    code, text = run("run", "--config", str(cfg), "--seed", "8")
    assert code == 0 and json.loads(text)["meta"]["seed"] == 8


@pytest.mark.parametrize("payload", [{"bogus": 1}, {"n_r": 10}, [1, 2]])
def test_bad_config_exits_2(tmp_path, payload):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(payload))
    assert run("run", "--config", str(cfg))[0] == 2


def test_bad_flag_exits_2():
    assert run("run", "--budget", "0.5")[0] == 2


def test_allocate():
    code, text = run("allocate", "--layers", "8", "--policy", "pyramid", "--mean", "70")
    doc = json.loads(text)
    assert code == 0 and doc["per_layer_hh"][0] == 130 and doc["per_layer_hh"][-1] == 10
    code, text = run("allocate", "--layers", "4", "--policy", "var_prop", "--mean", "10",
                     "--variances", "0,0,0,0")
    assert json.loads(text)["fallback"] and json.loads(text)["total"] == 40


def test_persistence():
    code, text = run("persistence", "--seed", "2", "--hidden", "16", "--prompt", "64", "--gen", "32")
    doc = json.loads(text)
    assert code == 0 and 0 <= doc["final"] <= 1 and doc["fractions"][0] == 1.0


def test_dump_and_load(tmp_path):
    path = tmp_path / "c.mkv"
    code, text = run("dump", "--seed", "1", "--hidden", "16", "--prompt", "64", "--steps", "20",
                     "--n-r", "16", str(path))
    assert code == 0
    code, loaded = run("load", str(path))
    assert code == 0
    state = json.loads(text)
    back = json.loads(loaded)
    assert all(back[k] == v for k, v in state.items() if k != "path")


def test_load_corrupt_exits_1(tmp_path):
    path = tmp_path / "bad.mkv"
    path.write_bytes(b"MKV1" + b"\0" * 8)
    assert run("load", str(path))[0] == 1
