import json
from dataclasses import asdict

import pytest

from cptdst.errors import ContractError
from cptdst.model import Backbone, ModelConfig
from cptdst.runner import (PRESETS, ExperimentConfig, check_run_invariants, load_config, parameter_report,
                           run_experiment, run_one, summarize, summarize_reports, task_order)
from cptdst.stream import GeneratorConfig, generate_stream

GEN = GeneratorConfig(n_services=3, samples_per_service=(32, 36), seed=5)
SCHED = dict(phase_a_epochs=1, phase_b_epochs=1, batch_size=8, backward_epochs=1, finetune_epochs=1)


@pytest.fixture
def backbone_path(tiny_backbone, tmp_path_factory):
    path = tmp_path_factory.mktemp("bb") / "backbone.json"
    tiny_backbone.save(path)
    return str(path)


def make(method, out, backbone_path, **kw):
    record = {"method": method, "seeds": kw.pop("seeds", [0]), "output_dir": str(out), "memory_size": 4,
              "stream": {"generator": asdict(GEN)}, "backbone": {"path": backbone_path},
              "schedule": dict(SCHED, **kw.pop("schedule", {}))}
    record.update(kw)
    return ExperimentConfig.from_dict(record)


def test_presets_differ_minimally():
    assert asdict(PRESETS["cpt_mem_back"]) == asdict(PRESETS["cpt_mem"])
    a, b = asdict(PRESETS["cpt"]), asdict(PRESETS["cpt_mem"])
    assert {k for k in a if a[k] != b[k]} == {"mr"}
    cpt = ExperimentConfig(method="cpt").resolved_flags()
    assert (cpt.msr, cpt.init, cpt.qf, cpt.mr) == (True, "cl", True, False)
    assert ExperimentConfig(method="cpt_mem_back").backward and not ExperimentConfig(method="cpt_mem").backward


@pytest.mark.parametrize("bad", [dict(method="nope"), dict(method="cpt_mem", memory_size=0),
                                 dict(method="cpt", flags={"zz": 1}), dict(method="finetune", flags={"qf": False}),
                                 dict(method="cpt", flags={"msr": False}), dict(seeds=[]),
                                 dict(workers=0)])
def test_config_validation(bad):
    with pytest.raises(ContractError):
        ExperimentConfig(**bad)


def test_unknown_nested_key():
    with pytest.raises(ContractError, match="schedule"):
        ExperimentConfig.from_dict({"schedule": {"epochz": 3}})


def test_json_and_toml_configs(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"method": "cpt_mem", "memory_size": 10,
                                                 "schedule": {"lr": 0.5}}))
    (tmp_path / "c.toml").write_text('method = "cpt_mem"\nmemory_size = 10\n[schedule]\nlr = 0.5\n'
                                     '[stream.generator]\nsamples_per_service = [32, 40]\n')
    a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.toml")
    assert a.schedule.lr == b.schedule.lr == 0.5 and a.memory_size == b.memory_size == 10
    assert b.stream.generator.samples_per_service == (32, 40)


def test_task_order_is_seeded_permutation():
    stream = generate_stream(GEN)
    o = task_order(stream, 4)
    assert sorted(o) == sorted(stream.task_ids) and o == task_order(stream, 4)
    assert task_order(stream, 4, last_k=2) == o[-2:]


def test_independent_prompts_blank_transfer(tmp_path, backbone_path):
    rep = run_experiment(make("prompt_tuning", tmp_path, backbone_path))["runs"][0]
    assert rep["fwt"] is None and rep["bwt"] is None and rep["avg_jga"] is not None


def test_cpt_structural_zero_bwt(tmp_path, backbone_path):
    config = make("cpt", tmp_path, backbone_path)
    before = Backbone.load(backbone_path).digest()
    rep = run_experiment(config)["runs"][0]
    assert rep["bwt"] == 0.0 and rep["fwt"] is not None
    T = len(rep["task_order"])
    for i in range(1, T):
        assert rep["matrix"][f"{T},{i}"] == rep["matrix"][f"{i},{i}"]
    assert Backbone.load(backbone_path).digest() == before
    assert not check_run_invariants(tmp_path)
    run = tmp_path / "runs" / "cpt" / "seed0"
    assert {p.name for p in run.iterdir()} >= {"manifest.json", "bank", "train_log.jsonl", "metrics.json",
                                               "matrix.csv"}


def test_backward_run_logs_and_invariants(tmp_path, backbone_path):
    rep = run_experiment(make("cpt_mem_back", tmp_path, backbone_path))["runs"][0]
    run = tmp_path / "runs" / "cpt_mem_back" / "seed0"
    gates = [json.loads(x) for x in (run / "gate_log.jsonl").read_text().splitlines()]
    accepts = [json.loads(x) for x in (run / "accept_log.jsonl").read_text().splitlines()]
    assert gates and len(accepts) == 3  # tasks 2 and 3 revisit 1 and 2 earlier prompts
    assert all(g["dot"] > 0 for g in gates if g["applied"])
    assert all(a["new_loss"] < a["old_loss"] and a["new_jga"] >= a["old_jga"] for a in accepts if a["accepted"])
    assert not check_run_invariants(tmp_path)
    assert rep["params"]["memory_per_task"] == 4


def test_resume_matches_uninterrupted(tmp_path, backbone_path, small_stream):
    full = make("cpt_mem", tmp_path / "full", backbone_path)
    part = make("cpt_mem", tmp_path / "part", backbone_path)
    model = Backbone.load(backbone_path)
    stream = generate_stream(GEN)
    want = run_one(full, model, stream, 0)
    assert run_one(part, model, stream, 0, stop_after=2) == {}
    got = run_one(part, model, stream, 0)
    assert got == want
    a = (tmp_path / "full/runs/cpt_mem/seed0/train_log.jsonl").read_text().splitlines()
    b = (tmp_path / "part/runs/cpt_mem/seed0/train_log.jsonl").read_text().splitlines()
    strip = lambda lines: [{k: v for k, v in json.loads(x).items() if k != "wall_ms"} for x in lines]
    assert strip(a) == strip(b)


def test_reproducible_metrics_bytes(tmp_path, backbone_path):
    for name in ("a", "b"):
        run_experiment(make("cpt", tmp_path / name, backbone_path))
    read = lambda n: (tmp_path / n / "runs/cpt/seed0/metrics.json").read_bytes()
    assert read("a") == read("b")


def test_changed_config_refuses_resume(tmp_path, backbone_path):
    run_experiment(make("cpt", tmp_path, backbone_path))
    with pytest.raises(ContractError):
        run_experiment(make("cpt", tmp_path, backbone_path, schedule={"lr": 0.1}))


@pytest.mark.parametrize("method", ["finetune", "replay"])
def test_baselines(tmp_path, backbone_path, method):
    before = Backbone.load(backbone_path).digest()
    rep = run_experiment(make(method, tmp_path, backbone_path))["runs"][0]
    assert rep["bwt"] is not None and rep["fwt"] is not None
    assert Backbone.load(backbone_path).digest() == before
    assert (tmp_path / "runs" / method / "seed0" / "model.json").exists()
    manifest = json.loads((tmp_path / "runs" / method / "seed0" / "manifest.json").read_text())
    assert bool(manifest["memory"]["entries"]) == (method == "replay")


def test_summaries(tmp_path, backbone_path):
    run_experiment(make("cpt", tmp_path, backbone_path))
    text, csv_text, summary = summarize(tmp_path)
    assert "±" not in text and "avg_jga_std" not in csv_text
    rep = json.loads((tmp_path / "runs/cpt/seed0/metrics.json").read_text())
    twice = summarize_reports([rep, dict(rep, seed=1)])
    assert twice["cpt"]["avg_jga"]["std"] == 0.0
    with pytest.raises(ContractError):
        summarize(tmp_path / "empty")


def test_parameter_columns(vocab):
    model = Backbone(ModelConfig(len(vocab), d_model=512, n_layers=1, n_heads=8, prompt_length=100), vocab)
    rep = parameter_report(ExperimentConfig(method="cpt"), model, 15)
    assert rep["tunable_per_task"] == 51_200
    assert rep["tunable_fraction"] == pytest.approx(51_200 / model.num_params())
    assert rep["stored_params"] == 15 * 51_200
    ft = parameter_report(ExperimentConfig(method="finetune"), model, 15)
    assert ft["tunable_fraction"] == 1.0


def test_concurrent_seeds_match_sequential(tmp_path, backbone_path):
    seq = run_experiment(make("cpt_mem_back", tmp_path / "seq", backbone_path, seeds=[0, 1]))["runs"]
    par = run_experiment(make("cpt_mem_back", tmp_path / "par", backbone_path, seeds=[0, 1], workers=2))["runs"]
    assert seq == par
    for seed in (0, 1):
        a = (tmp_path / f"seq/runs/cpt_mem_back/seed{seed}/metrics.json").read_bytes()
        assert a == (tmp_path / f"par/runs/cpt_mem_back/seed{seed}/metrics.json").read_bytes()
