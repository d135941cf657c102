import json

import numpy as np
import pytest

from fewshot_seg.pipeline import (
    ENCODER_ARMS,
    PipelineConfig,
    evaluate_fold,
    fold_dir,
    run_ablation,
    run_pipeline,
)
from fewshot_seg.validation import ConfigError

TINY = {
    "data": {"image_size": 32, "images_per_class": 14, "test_per_class": 5, "seed": 5},
    "cluster": {"level_sizes": [[6, 6], [3, 3]]},
    "gamma": [0.5, 1.0],
    "baseline_train": {"total_iterations": 4, "extra_images_per_batch": 2, "pairs_per_batch": 2},
    "spfl_train": {"total_iterations": 4, "extra_images_per_batch": 2, "pairs_per_batch": 2},
    "eval": {"episodes_per_fold": 6, "shots": [1, 2], "shot_episodes_per_fold": 3,
             "tau_fg_grid": [0.7], "tau_bg_grid": [0.6], "grid_episodes_per_fold": 2},
    "folds": [0],
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig.from_dict(TINY)
    report = run_pipeline(cfg, out)
    return cfg, out, report


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict(TINY)
    assert cfg.data.image_size == 32 and cfg.data.num_classes == 8
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(path).hash() == cfg.hash()
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nonsense": 1})


def test_layout_and_report(tiny_run):
    cfg, out, report = tiny_run
    f0 = fold_dir(out, 0)
    for arm in ENCODER_ARMS:
        assert (f0 / arm / "manifest.json").exists()
    assert (f0 / "regions" / "summary.json").exists()
    assert (f0 / "prototypes" / "spfl_hierarchy").exists()
    assert (out / "reports" / "ablation.txt").read_text().startswith("Ablation")
    saved = json.loads((out / "reports" / "ablation.json").read_text())
    assert saved["config_hash"] == cfg.hash()
    assert len(saved["rows"]) == len(ENCODER_ARMS) * 3
    for row in saved["rows"]:
        assert 0.0 <= row["mean"] <= 100.0
    hier = json.loads((f0 / "spfl_hierarchy" / "manifest.json").read_text())
    single = json.loads((f0 / "spfl_single_level" / "manifest.json").read_text())
    assert len(hier["meta"]["level_sizes"]) == 2 and len(single["meta"]["level_sizes"]) == 1


def test_rerun_is_identical(tiny_run):
    cfg, out, report = tiny_run
    again = run_ablation(cfg, out)
    strip = lambda r: {k: v for k, v in r.items() if k not in ("wall_clock", "pipeline_wall_clock")}
    assert strip(again) == strip(report)


def test_identical_arms_give_identical_rows(tiny_run, tmp_path):
    import shutil

    cfg, out, _ = tiny_run
    shutil.copytree(out / "data", tmp_path / "data")
    for arm in ENCODER_ARMS:
        shutil.copytree(fold_dir(out, 0) / "baseline", fold_dir(tmp_path, 0) / arm, dirs_exist_ok=True)
    res = evaluate_fold(cfg, tmp_path, 0)
    for mode in ("matching", "srofb_support_only", "srofb_self_refined"):
        vals = {res["main"][f"{arm}/{mode}"]["miou"] for arm in ENCODER_ARMS}
        assert len(vals) == 1


def test_missing_checkpoint(tmp_path, tiny_run):
    import shutil

    cfg, out, _ = tiny_run
    shutil.copytree(out / "data", tmp_path / "data")
    with pytest.raises(ConfigError):
        run_ablation(cfg, tmp_path)
