import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from longiseg.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, cmd_preprocess, main
from longiseg.config import PRESETS, PipelineConfig, PostprocessConfig, load_config, preset, save_config
from longiseg.manifest import ManifestError, load_manifest
from longiseg.network import NetworkConfig, build
from longiseg.training import ConfigError
from longiseg.volume_io import read_nifti
from longiseg.weights import save_weights

ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- configs


@pytest.mark.parametrize("name", sorted(PRESETS))
@pytest.mark.parametrize("scale", ["paper", "desk"])
def test_preset_json_round_trip(name, scale, tmp_path):
    cfg = preset(name, scale)
    text = cfg.to_json()
    again = PipelineConfig.from_json(text)
    assert again.to_json() == text and again.hash() == cfg.hash()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_shipped_configs_match_presets():
    files = sorted((ROOT / "configs").glob("*.json"))
    assert len(files) == 2 * len(PRESETS)
    for f in files:
        cfg = load_config(f)
        name, scale = f.stem.rsplit("_", 1)
        assert cfg.to_dict() == preset(name, scale).to_dict(), f.name


def test_paper_preset_values():
    t1, t2 = preset("task1"), preset("task2")
    assert (t1.train.lr, t1.train.weight_decay, t1.train.epochs) == (1e-4, 1e-5, 400)
    assert (t1.train.patches_per_sample, t1.train.batch_size) == (2, 3)
    assert t1.train.patch_size == (192, 192, 128) and t2.train.patch_size == (160, 160, 128)
    assert t1.sliding_window.overlap == 0.625
    assert t1.network.blocks_per_level == (1, 2, 2, 4, 4, 4)
    assert t1.postprocess.remove_small and t1.postprocess.min_cm3 == 0.5 and not t1.postprocess.mpdr
    assert t2.postprocess.mpdr and t2.architecture == "ma-segresnet" and t2.network.in_channels == 3
    assert t1.validation_timepoint == "pre" and t2.validation_timepoint == "mid"
    assert preset("table3_pre_only").training_timepoints == ("pre",)
    rows = [preset(f"table4_row{i}") for i in range(1, 8)]
    assert [r.network.in_channels for r in rows] == [1, 1, 4, 3, 3, 3, 3]
    assert [r.architecture for r in rows].count("ma-segresnet") == 2
    assert [r.postprocess.mpdr for r in rows] == [False] * 6 + [True]
    desk = preset("task2", "desk")
    assert desk.network.init_filters == 4 and desk.train.patch_size == (32, 32, 32)


def _invalid(**changes):
    d = preset("task1", "desk").to_dict()
    for path, value in changes.items():
        node = d
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return d


@pytest.mark.parametrize(
    "changes",
    [
        dict(postprocess__mpdr=True),
        dict(architecture="ma-segresnet", network__attention_enabled=True),
        dict(network__in_channels=3),
        dict(input_recipe="image+priors"),
        dict(train__patch_size=[32, 32, 16], sliding_window__patch_size=[32, 32, 16]),
        dict(sliding_window__patch_size=[64, 64, 64]),
        dict(postprocess__connectivity=8),
        dict(task=3),
        dict(training_timepoints=["later"]),
        dict(network__blocks_per_level=[1, 0]),
    ],
)
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(_invalid(**changes)).validate()


def test_unknown_keys_and_bad_json():
    d = preset("task1", "desk").to_dict()
    d["train"]["learning_rate"] = 1
    with pytest.raises(ConfigError, match="learning_rate"):
        PipelineConfig.from_dict(d)
    with pytest.raises(ConfigError):
        PipelineConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        preset("table5")
    with pytest.raises(ConfigError):
        preset("task1", "huge")


# ---------------------------------------------------------------- manifests


def _write_min_manifest(tmp_path, **case):
    (tmp_path / "img.nii").write_bytes(b"")
    base = {"case_id": "a", "image": "img.nii", "timepoint": "pre", "fold": 1}
    base.update(case)
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"n_folds": 2, "cases": [base]}))
    return p


@pytest.mark.parametrize(
    "case,match",
    [
        (dict(image="nope.nii"), "does not exist"),
        (dict(fold=3), "fold"),
        (dict(fold=0), "fold"),
        (dict(timepoint="post"), "timepoint"),
        (dict(colour="red"), "unknown"),
        (dict(prior="img.nii", prior_gtvp="img.nii"), "either"),
    ],
)
def test_manifest_validation(tmp_path, case, match):
    with pytest.raises(ManifestError, match=match):
        load_manifest(_write_min_manifest(tmp_path, **case))


def test_manifest_duplicates_and_missing(tmp_path):
    p = _write_min_manifest(tmp_path)
    doc = json.loads(p.read_text())
    doc["cases"].append(doc["cases"][0])
    p.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(p)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.json")


# ---------------------------------------------------------------- end-to-end CLI


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    assert main(["fixtures", "--out", str(root / "raw"), "--patients", "3", "--folds", "3",
                 "--dims", "24", "24", "20", "--seed", "1"]) == EXIT_OK
    assert main(["preprocess", "--manifest", str(root / "raw" / "manifest.json"), "--out", str(root / "pre")]) == EXIT_OK
    return root


def _toy_task2_config(path):
    cfg = preset("task2", "desk")
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=1, batch_size=1, patches_per_sample=1))
    save_config(cfg, path)
    return path


def test_preprocess_outputs(cohort):
    m = load_manifest(cohort / "pre" / "manifest.json")
    assert len(m.cases) == 6
    for e in m.cases:
        img = read_nifti(e.image, kind="image")
        assert img.spacing == (1.0, 1.0, 1.0)
        nz = img.data[img.data != 0]
        assert abs(nz.mean()) < 1e-4 and abs(nz.std() - 1) < 1e-4
        assert e.native["spacing"] == pytest.approx([0.9, 0.9, 1.2])
        if e.timepoint == "mid":
            case = e.load()
            assert case.has_priors and case.prior_gtvp.any()


def test_preprocess_is_idempotent(cohort, tmp_path):
    m = load_manifest(cohort / "pre" / "manifest.json")
    again = load_manifest(cmd_preprocess(m, tmp_path / "again"))
    for a, b in zip(m.cases, again.cases):
        x, y = read_nifti(a.image), read_nifti(b.image)
        assert x.dims == y.dims
        np.testing.assert_allclose(x.data, y.data, atol=1e-5)
        np.testing.assert_array_equal(read_nifti(a.ground_truth).data, read_nifti(b.ground_truth).data)
        assert b.native == a.native


def test_task2_pipeline_end_to_end(cohort, tmp_path):
    cfg = _toy_task2_config(tmp_path / "toy.json")
    man = str(cohort / "pre" / "manifest.json")
    ck = tmp_path / "ck"
    assert main(["train", "--config", str(cfg), "--manifest", man, "--fold", "1", "--out", str(ck), "--seed", "3"]) == 0
    weights = ck / "fold1_seed3.lsw"
    side = json.loads((ck / "fold1_seed3.json").read_text())
    assert weights.exists() and side["config_hash"] == load_config(cfg).hash() and side["seed"] == 3
    assert set(side) >= {"epoch", "val_dsc_agg", "config_hash", "seed"}

    # determinism: the same command yields the same weight bytes
    ck2 = tmp_path / "ck2"
    assert main(["train", "--config", str(cfg), "--manifest", man, "--fold", "1", "--out", str(ck2), "--seed", "3"]) == 0
    assert (ck2 / "fold1_seed3.lsw").read_bytes() == weights.read_bytes()

    pred = tmp_path / "pred"
    assert main(["infer", "--config", str(cfg), "--manifest", man, "--timepoint", "mid",
                 "--checkpoints", str(weights), str(weights), "--out", str(pred)]) == 0
    mids = [e for e in load_manifest(man).cases if e.timepoint == "mid"]
    for e in mids:
        lab = read_nifti(pred / f"{e.case_id}_label.nii")
        assert set(np.unique(lab.data)) <= {0, 1, 2}
        assert (pred / f"{e.case_id}_label_native.nii").exists()
        probs = np.stack([read_nifti(pred / f"{e.case_id}_prob{k}.nii").data for k in range(3)])
        np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-5)

    ens = tmp_path / "ens"
    assert main(["ensemble", "--config", str(cfg), "--manifest", man, "--timepoint", "mid",
                 "--inputs", str(pred), str(pred), "--out", str(ens)]) == 0
    for e in mids:
        a, b = read_nifti(pred / f"{e.case_id}_label.nii"), read_nifti(ens / f"{e.case_id}_label.nii")
        np.testing.assert_array_equal(a.data, b.data)

    rep_path = tmp_path / "report.json"
    assert main(["evaluate", "--manifest", man, "--timepoint", "mid", "--inputs", str(pred),
                 "--out", str(rep_path), "--name", "toy"]) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["name"] == "toy" and rep["summary"]["n_cases"] == 3
    assert [c["case_id"] for c in rep["cases"]] == sorted(e.case_id for e in mids)
    for c in rep["cases"]:
        for k in ("gtvp", "gtvn"):
            assert 0 <= c[k]["intersection"] <= min(c[k]["pred"], c[k]["truth"])

    verdict = tmp_path / "verdict.json"
    assert main(["compare", "--a", str(rep_path), "--b", str(rep_path), "--iterations", "200",
                 "--out", str(verdict)]) == 0
    v = json.loads(verdict.read_text())
    assert v["significant"] is False and v["win_fraction_a"] == 0.0

    post = tmp_path / "post"
    assert main(["postprocess", "--config", str(cfg), "--manifest", man, "--timepoint", "mid",
                 "--inputs", str(pred), "--out", str(post)]) == 0
    for e in mids:
        before = read_nifti(pred / f"{e.case_id}_label.nii").data
        after = read_nifti(post / f"{e.case_id}_label.nii").data
        assert np.all((after == 0) | (after == before))


def test_exit_codes(cohort, tmp_path, monkeypatch, capsys):
    man = str(cohort / "pre" / "manifest.json")
    bad = _invalid(postprocess__mpdr=True)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--manifest", man, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert not (tmp_path / "x").exists()  # rejected before any compute
    cfg = str(_toy_task2_config(tmp_path / "toy.json"))
    assert main(["infer", "--config", cfg, "--manifest", man, "--checkpoints", str(tmp_path / "missing.lsw"),
                 "--out", str(tmp_path / "p")]) == EXIT_DATA
    assert main(["evaluate", "--manifest", str(tmp_path / "nope.json"), "--inputs", "."]) == EXIT_DATA
    assert main(["train", "--config", "preset:task2:desk", "--manifest", man, "--fold", "9"]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG
    monkeypatch.setenv("LONGISEG_THREADS", "abc")
    assert main(["evaluate", "--manifest", man, "--inputs", "."]) == EXIT_CONFIG
    monkeypatch.delenv("LONGISEG_THREADS")

    # NaN weights surface as a numerical failure
    net_cfg = load_config(cfg).network
    net = build(net_cfg, 0)
    net.heads[0].bias.data[...] = np.nan
    save_weights(net, tmp_path / "nan.lsw")
    assert main(["infer", "--config", cfg, "--manifest", man, "--timepoint", "mid", "--checkpoints",
                 str(tmp_path / "nan.lsw"), "--out", str(tmp_path / "nanout")]) == EXIT_NUMERICAL


def test_task1_postprocess_flag_wiring():
    cfg = preset("task1", "desk")
    assert cfg.postprocess == PostprocessConfig(remove_small=True)
    assert NetworkConfig(**cfg.to_dict()["network"]) == cfg.network
