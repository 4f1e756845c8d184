import json
import subprocess
import sys
from dataclasses import asdict

import pytest

from cptdst.cli import main
from cptdst.stream import GeneratorConfig

GEN = asdict(GeneratorConfig(n_services=2, samples_per_service=(32, 34), seed=9))


@pytest.fixture
def config_file(tiny_backbone, tmp_path):
    bb = tmp_path / "bb.json"
    tiny_backbone.save(bb)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({
        "method": "cpt", "seeds": [0], "memory_size": 3, "output_dir": str(tmp_path / "out"),
        "stream": {"generator": GEN}, "backbone": {"path": str(bb)},
        "schedule": {"phase_a_epochs": 1, "phase_b_epochs": 1, "batch_size": 8, "backward_epochs": 1},
    }))
    return path


def test_run_summarize_export(config_file, tmp_path, capsys):
    assert main(["run", "--config", str(config_file)]) == 0
    assert "avg_jga" in capsys.readouterr().out
    out = tmp_path / "out"
    assert main(["summarize", str(out), "--csv", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "s.csv").read_text().startswith("method,runs,avg_jga_mean")
    assert main(["export", str(out), "--out", str(tmp_path / "bundle.json")]) == 0
    bundle = json.loads((tmp_path / "bundle.json").read_text())
    assert bundle["runs"][0]["method"] == "cpt"


def test_flag_overrides_and_env_output(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("CPTDST_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", "--config", str(config_file), "--method", "prompt_tuning", "--init", "cl"]) == 0
    rep = json.loads((tmp_path / "env_out/runs/prompt_tuning/seed0/metrics.json").read_text())
    assert rep["fwt"] is not None  # CLInit makes the prompts sequential
    manifest = json.loads((tmp_path / "env_out/runs/prompt_tuning/seed0/manifest.json").read_text())
    assert manifest["header"]["flags"]["init"] == "cl"


def test_generate_data(tmp_path, capsys):
    cfg = tmp_path / "g.toml"
    cfg.write_text("[stream.generator]\nn_services = 2\nsamples_per_service = [32, 33]\n")
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "corpus.json")]) == 0
    corpus = json.loads((tmp_path / "corpus.json").read_text())
    assert len(corpus["services"]) == 2


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "cpt_mem", "memory_size": 0}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_invariant_violation_exit_code(config_file, tmp_path):
    assert main(["run", "--config", str(config_file)]) == 0
    log = tmp_path / "out/runs/cpt/seed0/gate_log.jsonl"
    log.write_text(json.dumps({"prev_task": "x", "step": 0, "dot": -1.0, "applied": True, "k": 2}) + "\n")
    assert main(["summarize", str(tmp_path / "out")]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cptdst", "summarize", str(tmp_path)], capture_output=True,
                          text=True)
    assert proc.returncode == 2 and "no finished runs" in proc.stderr


def test_pretrain_writes_loadable_backbone(tmp_path, capsys):
    cfg = tmp_path / "p.toml"
    cfg.write_text("[backbone]\nd_model = 16\nn_layers = 1\nn_heads = 2\nprompt_length = 4\n"
                   "pretrain_streams = 1\npretrain_services = 2\npretrain_dialogs = 32\n[backbone.pretrain]\nsteps = 3\n")
    out = tmp_path / "bb.json"
    with pytest.warns(RuntimeWarning, match="pre-training loss"):  # three steps cannot halve the loss
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    from cptdst.model import Backbone
    model = Backbone.load(out)
    assert model.frozen and model.config.d_model == 16
    assert model.digest()[:12] in capsys.readouterr().out
