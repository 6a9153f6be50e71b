import csv
import json
import math

import numpy as np
import pytest

from foresight import pipeline
from foresight.cli import main
from foresight.config import apply_overrides, load_config
from foresight.criteria import Mask, removal_count
from foresight.pipeline import format_cell, mean_ci


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = apply_overrides(load_config("smoke"), out=str(out))
    results = {}
    for cmd in ("prune", "gradnorm", "train", "ntk", "report"):
        exp, res = pipeline.run(cmd, cfg)
        results[cmd] = (exp, res)
    return out, cfg, results


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_masks_have_exact_sparsity(smoke_run):
    out, cfg, results = smoke_run
    exp = results["prune"][0]
    d = exp.params(0).d
    for crit in cfg["criteria"]:
        for ratio in cfg["ratios"]:
            m = Mask.load(out / "masks" / crit / f"{pipeline.ratio_tag(ratio)}_t0.fsct")
            assert m.zeros() == removal_count(ratio, d)


def test_survival_accounting(smoke_run):
    out, cfg, _ = smoke_run
    table = rows(out / "prune" / "survival.csv")
    for crit in cfg["criteria"]:
        for ratio in cfg["ratios"]:
            cell = [r for r in table if r["criterion"] == crit and float(r["ratio[fraction]"]) == ratio
                    and r["trial"] == "0"]
            kept = sum(float(r["survival[fraction]"]) * int(r["size[weights]"]) for r in cell)
            total = sum(int(r["size[weights]"]) for r in cell)
            assert kept / total == pytest.approx(1 - removal_count(ratio, total) / total, abs=1e-12)


def test_gradnorm_unpruned_is_exactly_one(smoke_run):
    out, _, _ = smoke_run
    for r in rows(out / "gradnorm" / "trials.csv"):
        if float(r["ratio[fraction]"]) == 0.0:
            assert float(r["norm_ratio[1]"]) == 1.0 and float(r["flow_ratio[1]"]) == 1.0


def test_csv_headers_carry_units(smoke_run):
    out, _, _ = smoke_run
    for path in out.rglob("*.csv"):
        header = path.read_text().splitlines()[0].split(",")
        assert any("[" in h for h in header), path


def test_every_output_is_in_the_manifest(smoke_run):
    out, _, _ = smoke_run
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {p for c in manifest["commands"].values() for p in c["outputs"]}
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*")
               if p.is_file() and p.name != "manifest.json" and "cache" not in p.parts}
    assert on_disk == listed
    assert manifest["dataset_fingerprints"]["train"] and manifest["code_hash"]
    assert set(manifest["seeds"]) == {"0", "1"}


def test_train_reuses_cached_scores(smoke_run):
    out, _, results = smoke_run
    assert results["prune"][0].cache_stats["score_misses"] == 8
    for cmd in ("gradnorm", "train", "ntk"):
        assert results[cmd][0].cache_stats["score_misses"] == 0


def test_accuracy_table_format(smoke_run):
    out, cfg, _ = smoke_run
    table = rows(out / "train" / "accuracy.csv")
    assert len(table) == len(cfg["criteria"]) * len(cfg["ratios"])
    for r in table:
        assert r["cell"] == format_cell(float(r["test_acc_mean[percent]"]), float(r["test_acc_std[percent]"]))
    assert format_cell(93.0412, 0.2049) == "93.04(0.2)"


def test_ntk_outputs(smoke_run):
    out, cfg, _ = smoke_run
    k = cfg["dataset"]["k"]
    for path in (out / "ntk").glob("spectrum_*.csv"):
        vals = [float(r["eigenvalue[1]"]) for r in rows(path)]
        assert len(vals) == cfg["ntk"]["per_class"] * k * k  # n = per_class * k samples, k outputs each
        assert vals == sorted(vals, reverse=True)
    for r in rows(out / "ntk" / "gradnorm_identity.csv"):
        assert float(r["rel_error[1]"]) < 1e-6
    assert max(float(r["rel_error[1]"]) for r in rows(out / "ntk" / "dynamics.csv")) < 0.05


def test_report(smoke_run):
    out, _, results = smoke_run
    summary = results["report"][1]
    assert summary["gradnorm"]["grasp@0"] == 1.0 and "accuracy" in summary
    assert (out / "report" / "report.md").read_text().startswith("# smoke")


def test_manifest_rerun_is_byte_identical(smoke_run, tmp_path, capsys):
    out, _, _ = smoke_run
    for cmd in ("prune", "gradnorm", "train", "ntk", "report"):
        assert main([cmd, "--config", str(out / "manifest.json"), "--out", str(tmp_path)]) == 0
        assert "differing" not in capsys.readouterr().out
    ref = json.loads((out / "manifest.json").read_text())["commands"]
    new = json.loads((tmp_path / "manifest.json").read_text())["commands"]
    for cmd in ref:
        assert ref[cmd]["outputs"] == new[cmd]["outputs"], cmd


def test_parallel_workers_match_serial(smoke_run, tmp_path):
    out, cfg, _ = smoke_run
    par = dict(apply_overrides(cfg, out=str(tmp_path)), workers=2)
    pipeline.run("prune", par)
    exp, _ = pipeline.run("train", par)
    serial = json.loads((out / "manifest.json").read_text())["commands"]["train"]["outputs"]
    assert exp.written == serial
    assert exp.cache_stats["score_misses"] == 0


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nratios: [1.2]\n")
    assert main(["prune", "--config", str(bad)]) == 2
    assert "bad.yaml:2: ratios[0]" in capsys.readouterr().err
    assert main(["train", "--config", "smoke", "--ratio", "1.5", "--out", str(tmp_path)]) == 2
    diverge = tmp_path / "div.yaml"
    diverge.write_text(
        "name: div\nmodel: {kind: mlp, sizes: [4, 8, 2]}\n"
        "dataset: {source: synthetic, k: 2, n_per_class: 20, dim: 4, separation: 2.0}\n"
        f"out: {tmp_path / 'div'}\ncriteria: [random]\nratios: [0.0]\n"
        "train: {epochs: 3, lr: 1.0e+300, momentum: 0.0}\n")
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(diverge)]) == 3
    assert "numerical failure" in capsys.readouterr().err
    assert main(["configs"]) == 0


def test_mean_ci():
    m, lo, hi = mean_ci([1.0, 2.0, 3.0])
    assert m == 2.0 and (hi - m) == pytest.approx(4.302652729911275 * 1.0 / math.sqrt(3))
    assert math.isnan(mean_ci([1.0])[1])


def test_derived_seeds_are_distinct():
    seeds = {pipeline.derive_seed(0, t, s) for t in range(5) for s in pipeline.STREAMS}
    assert len(seeds) == 5 * len(pipeline.STREAMS)
