import json
import random

import pytest

from compgan import __version__
from compgan import config as config_mod
from compgan.config import ConfigError, ExperimentConfig
from compgan.orchestration import (
    GridSpec,
    baseline_grid,
    enumerate_grid,
    find_runs,
    run_dir_for,
    run_experiment,
    select_best,
    structured_grid,
    summarize_runs,
    with_seed,
)
from compgan.training import MetricsRow, read_metrics


def _tiny(tmp_path, **train):
    raw = ExperimentConfig(name="tiny").to_dict()
    raw["data"].update(count=60, dir=str(tmp_path / "data"))
    raw["model"].update(gen_channels=32, disc_channels=8)
    raw["train"].update({**dict(batch_size=4, disc_steps_per_gen=1, total_steps=4, checkpoint_every=2, log_every=1,
                                fid_samples=6), **train})
    raw["eval"].update(embedder="untrained")
    raw["output_root"] = str(tmp_path / "runs")
    return config_mod.from_dict(raw)


# configs

def test_config_yaml_roundtrip(tmp_path):
    cfg = _tiny(tmp_path)
    path = cfg.save(tmp_path / "c.yaml")
    assert config_mod.load(path) == cfg
    assert "version: 1" in path.read_text()


def test_unknown_keys_are_errors():
    raw = ExperimentConfig().to_dict()
    raw["train"]["learning_rate"] = 1e-3
    raw["model"]["relational"]["heads"] = 2
    raw["extra"] = 1
    with pytest.raises(ConfigError) as e:
        config_mod.from_dict(raw)
    assert len(e.value.problems) == 3


def test_validation_lists_every_problem():
    raw = ExperimentConfig().to_dict()
    raw["model"].update(image_size=128, use_background=False, compose_mode="threshold_alpha")
    with pytest.raises(ConfigError) as e:
        config_mod.from_dict(raw)
    assert len(e.value.problems) == 2
    raw = ExperimentConfig().to_dict()
    raw["model"]["k"] = 0
    raw["train"]["penalty_weight"] = 3
    with pytest.raises(ConfigError) as e:
        config_mod.from_dict(raw)
    assert len(e.value.problems) == 2


def test_output_root_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("COMPGAN_OUTPUT_ROOT", str(tmp_path))
    assert ExperimentConfig().resolved_output_root == tmp_path


# grids

def test_empty_grid_is_the_base_config():
    base = ExperimentConfig(name="solo")
    cells = enumerate_grid(GridSpec(base=base))
    assert cells == [base]


def test_grid_ordering_is_lexicographic_and_stable():
    spec = GridSpec(axes={"train.seed": [0, 1], "model.k": [3, 4]}, base=ExperimentConfig(name="g"))
    cells = enumerate_grid(spec)
    assert [(c.model.k, c.train.seed) for c in cells] == [(3, 0), (3, 1), (4, 0), (4, 1)]
    assert [c.name for c in enumerate_grid(spec)] == [c.name for c in cells]


def test_baseline_grid_axes():
    cells = enumerate_grid(baseline_grid())
    combos = {(c.train.loss_kind, c.train.penalty, c.train.penalty_weight, c.train.spectral_norm, c.train.betas)
              for c in cells}
    assert len(combos) == 48
    assert {c.train.betas for c in cells} == {(0.5, 0.9), (0.5, 0.999), (0.9, 0.999)}
    assert all(c.model.k == 1 for c in cells)


def test_structured_grid_axes():
    cells = enumerate_grid(structured_grid())
    assert {c.model.k for c in cells} == {3, 4, 5}
    assert {(c.model.relational.n_blocks, c.model.relational.n_heads, c.model.relational.share_across_blocks)
            for c in cells} == {(0, 1, False), (1, 1, False), (1, 2, False), (2, 1, False), (2, 1, True),
                                (2, 2, False), (2, 2, True)}
    assert all(c.train.betas == (0.9, 0.999) for c in cells)
    assert {c.tag for c in cells} == {"3-GAN ind.", "4-GAN ind.", "5-GAN ind.", "3-GAN rel.", "4-GAN rel.",
                                      "5-GAN rel."}


def test_structured_grid_over_background_base():
    base = ExperimentConfig().to_dict()
    base["data"]["variant"] = "cifar10_mm"
    base["model"].update(compose_mode="learned_alpha", use_background=True)
    base["model"]["relational"]["include_background"] = True
    cells = enumerate_grid(structured_grid(config_mod.from_dict(base)))
    assert len(cells) == 42
    assert "3-GAN rel. bg." in {c.tag for c in cells}


def test_bad_axes():
    with pytest.raises(ConfigError):
        enumerate_grid(GridSpec(axes={"model.k": []}))
    with pytest.raises(ConfigError):
        enumerate_grid(GridSpec(axes={"model.kk": [1]}))
    with pytest.raises(ConfigError):
        enumerate_grid(GridSpec(axes={"model.k": [0]}))


# selection

def _row(step, fid):
    return MetricsRow(step, 0.0, 0.0, 0.0, fid)


def test_select_best_argmin():
    rows = [_row(20_000, 30.0), _row(40_000, 12.0), _row(60_000, 19.0)]
    assert select_best(rows).step == 40_000
    assert select_best([_row(5, 3.0)]).step == 5


def test_select_best_ties_and_order_invariance():
    rows = [_row(3, 1.0), _row(1, 2.0), _row(2, 1.0), _row(4, None)]
    for _ in range(5):
        random.shuffle(rows)
        assert select_best(rows).step == 2


def test_select_best_needs_fid_rows():
    with pytest.raises(ValueError):
        select_best([_row(1, None)])


# runs

def test_run_with_zero_steps(tmp_path):
    out = run_experiment(_tiny(tmp_path, total_steps=0))
    assert [p.name for p in (out / "checkpoints").iterdir()] == ["ckpt_00000000.pt"]
    assert read_metrics(out / "metrics.jsonl") == []
    info = json.loads((out / "run.json").read_text())
    assert info["tag"] == "3-GAN ind." and info["code_version"] == __version__
    assert config_mod.load(out / "config.yaml") == _tiny(tmp_path, total_steps=0)
    assert (tmp_path / "data" / "manifest.txt").exists()


def test_interrupted_run_resumes_to_identical_metrics(tmp_path):
    full = run_experiment(_tiny(tmp_path / "a"))
    cfg = _tiny(tmp_path / "b")
    run_experiment(cfg, stop_after=3)
    resumed = run_experiment(cfg)
    strip = lambda rows: [(r.step, r.d_loss, r.g_loss, r.penalty, r.fid) for r in rows]  # noqa: E731
    assert strip(read_metrics(resumed / "metrics.jsonl")) == strip(read_metrics(full / "metrics.jsonl"))
    assert (resumed / "best.txt").exists()


def test_summaries_across_seeds(tmp_path):
    for seed in (0, 1):
        run_experiment(with_seed(_tiny(tmp_path, total_steps=2), seed))
    runs = find_runs(tmp_path / "runs")
    assert runs == [run_dir_for(with_seed(_tiny(tmp_path), s)) for s in (0, 1)]
    groups = summarize_runs(runs)
    assert list(groups) == ["tiny"]
    summary = groups["tiny"]
    assert len(summary.best) == 2 and summary.tag == "3-GAN ind."
    assert summary.mean == pytest.approx(sum(b.fid for b in summary.best) / 2)
