import json

import numpy as np
import pytest

from pood_backdoor.config import ConfigError
from pood_backdoor.evaluation import MetricsReport
from pood_backdoor.pipeline import (
    STAGES,
    DependencyError,
    load_stage,
    run_pipeline,
    stage_keys,
    upstream,
)
from pood_backdoor.store import ArtifactStore, StaleArtifactError, artifact_key
from pood_backdoor.sweeps import run_ablation, run_sweep
from pood_backdoor.trigger import Trigger
from tiny import tiny_config


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    cfg = tiny_config(root)
    store = ArtifactStore(root)
    return cfg, store, run_pipeline(cfg, store=store)


def test_full_run_records_every_stage(full_run):
    cfg, store, m = full_run
    assert [r["stage"] for r in m.stages] == list(STAGES)
    assert set(m.events.values()) == {"run"}
    for r in m.stages:
        rec = store.verify(r["key"])
        assert rec.files and rec.seeds == r["seeds"]
        assert r["config_hash"] == rec.config_hash
    assert {"decoder", "encoder", "victim", "evaluate", "defend"} <= set(m.metrics)
    assert isinstance(m.report, MetricsReport) and m.report.config_hash == cfg.hash()
    assert json.loads(m.path.read_text()) == m.doc


def test_rerun_is_all_cache_hits_with_identical_manifest(full_run):
    cfg, store, m = full_run
    before = m.path.read_bytes()
    again = run_pipeline(cfg, store=store)
    assert again.cache_hits == list(STAGES)
    assert again.path == m.path and again.path.read_bytes() == before


def test_keys_depend_only_on_stage_inputs(full_run):
    cfg, _, _ = full_run
    a, b = stage_keys(cfg), stage_keys(cfg.replace(**{"victim.epochs": 2}))
    for s in ("binarize", "decoder", "encoder", "trigger", "poison"):
        assert a[s][0] == b[s][0]
    for s in ("victim", "evaluate", "defend"):
        assert a[s][0] != b[s][0]
    assert artifact_key("victim", "h", {"poison": "k"}) != artifact_key("victim", "h", {"poison": "j"})


def test_provenance_links_back_to_the_pood_data(full_run):
    _, store, m = full_run
    chain = store.lineage(m.key("evaluate"))
    assert {r.stage for r in chain} == set(upstream("evaluate"))
    trig = load_stage(full_run[0], "trigger", store)
    assert isinstance(trig, Trigger)
    assert trig.provenance["pood_source"] == full_run[0].data.pood_source


def test_missing_dependency_is_an_error(full_run):
    cfg, store, _ = full_run
    other = cfg.replace(**{"seeds.victim": 5})
    with pytest.raises(DependencyError):
        run_pipeline(other, ["evaluate"], store=store)
    with pytest.raises(DependencyError):
        load_stage(other, "victim", store)
    with pytest.raises(ValueError):
        run_pipeline(cfg, ["train"], store=store)


def test_tampered_artifact_is_stale(tmp_path):
    cfg = tiny_config(tmp_path)
    store = ArtifactStore(tmp_path)
    m = run_pipeline(cfg, upstream("decoder"), store=store)
    (m.artifact_path("decoder") / "decoder.pt").write_bytes(b"corrupt")
    with pytest.raises(StaleArtifactError):
        run_pipeline(cfg, ["encoder"], store=store)
    rebuilt = run_pipeline(cfg, upstream("decoder"), force=True, store=store)
    assert rebuilt.events["decoder"] == "run"
    store.verify(rebuilt.key("decoder"))


def test_clean_runs_share_one_victim_across_trigger_modes(full_run):
    cfg, store, _ = full_run
    a = run_pipeline(cfg.replace(**{"attack.ratio": 0.0}), upstream("victim"), store=store)
    b = run_pipeline(cfg.replace(**{"attack.ratio": 0.0, "attack.mode": "dynamic"}), upstream("victim"), store=store)
    assert a.key("victim") == b.key("victim")


def test_baseline_mode_skips_attack_stages(tmp_path):
    cfg = tiny_config(tmp_path, **{"attack.mode": "badnets-d"})
    m = run_pipeline(cfg, upstream("evaluate"), store=ArtifactStore(tmp_path))
    status = {r["stage"]: r.get("status", "done") for r in m.stages}
    assert status["decoder"] == status["encoder"] == status["binarize"] == "not-applicable"
    assert 0 <= m.report.asr <= 100


def test_ratio_zero_sweep_point_equals_clean_training(full_run, tmp_path):
    cfg, store, _ = full_run
    (point,) = run_sweep("poison_ratio", [0.0], cfg, store, out=tmp_path / "s.jsonl")
    clean = run_pipeline(cfg.replace(**{"attack.ratio": 0.0}), upstream("evaluate"), store=store).report
    assert (point.acc, point.tar_acc, point.asr) == (clean.acc, clean.tar_acc, clean.asr)
    assert point.label == "poison_ratio=0.0" and point.extra["value"] == 0.0
    rows = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert rows[0]["acc"] == point.acc


def test_sweep_rejects_bad_values(full_run):
    cfg, store, _ = full_run
    with pytest.raises(ConfigError):
        run_sweep("poison_ratio", [-0.1], cfg, store)
    with pytest.raises(ConfigError):
        run_sweep("learning_rate", [0.1], cfg, store)
    with pytest.raises(ConfigError):
        run_sweep("poison_ratio", [], cfg, store)


def test_ablations(full_run):
    cfg, store, _ = full_run
    minloss = run_ablation("min_loss_trigger", cfg, store)
    assert set(minloss) == {"max_loss", "min_loss"}
    cross = run_ablation("cross_domain_trigger", cfg, store)
    assert set(cross) == {"in_domain", "cross_domain", "clean"}
    enc = run_ablation("encoder_accuracy", cfg, store, values=[0, 1])
    assert set(enc) == {"epochs=0", "epochs=1"}
    assert all("erase_rate" in r.extra for r in enc.values())
    with pytest.raises(ConfigError):
        run_ablation("cross_domain_trigger", cfg.replace(**{"data.foreign_source": None}), store)
    with pytest.raises(ConfigError):
        run_ablation("bogus", cfg, store)


def test_defense_outputs(full_run):
    _, _, m = full_run
    d = m.artifact_path("defend")
    record = json.loads((d / "defense.json").read_text())
    assert len(record["neural_cleanse"]["anomaly_index"]) == 5
    assert [p["rate"] for p in record["pruning"]] == [0.0, 0.5]
    for png in ("neural_cleanse.png", "pruning.png", "strip.png", "sentinet.png"):
        assert (d / png).stat().st_size > 0
    with np.load(d / "defense_arrays.npz") as z:
        assert z["nc_masks"].shape == (5, 16, 16)
