from pathlib import Path

import pytest

from cshift.config import RunConfig, dump_config, load_config, parse_config
from cshift.consensus import Metric
from cshift.edges import Arch
from cshift.errors import ConfigError
from cshift.world import Corruption


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    it = cfg.iteration_config(workers=3)
    assert it.metric is Metric.PERCEPTUAL and it.arch is Arch.PATCH_MLP and it.workers == 3
    assert cfg.iteration_config(n_iters=0, metric="l1").metric is Metric.L1


def test_nested_values_are_typed():
    cfg = parse_config("""
dataset: {n_samples: 10, scene: {h: 20, w: 24, kinds: [disk]}}
tasks: [rgb, depth]
experts: {level: 0.2, overrides: {depth: {noise_sigma: 0.3}}}
training: {kernel: {kind: gaussian, sigma: 2}, metric: var}
""")
    assert cfg.dataset.scene.w == 24 and cfg.dataset.scene.kinds == ("disk",)
    assert cfg.experts.overrides["depth"] == Corruption(noise_sigma=0.3)
    assert cfg.iteration_config().metric is Metric.VARIANCE
    assert cfg.experts_for()["depth"].corruption.noise_sigma == 0.3


@pytest.mark.parametrize("text, key", [
    ("bogus: 1", "bogus"),
    ("dataset: {scene: {hh: 3}}", "dataset.scene.hh"),
    ("experiments: {mmd: {trails: 3}}", "experiments.mmd.trails"),
])
def test_unknown_keys_are_named(text, key):
    with pytest.raises(ConfigError, match=f"unknown config key '{key}'"):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "n_iters: two",
    "tasks: [depth, seg]",
    "tasks: [rgb, rgb, depth]",
    "tasks: [rgb, hologram]",
    "dataset: {scene: {h: 4}}",
    "training: {metric: cosine}",
    "training: {pin_rgb: 1}",
    "experts: {overrides: {rgb: {noise_sigma: 0.1}}}",
    "[1, 2]",
    "a: [",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_round_trip(tmp_path):
    cfg = parse_config("tasks: [rgb, depth, seg]\nexperts: {overrides: {seg: {flip_rate: 0.2}}}")
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


@pytest.mark.parametrize("name", ["default.yaml", "quick.yaml"])
def test_shipped_configs_load(name):
    path = Path(__file__).resolve().parents[1] / "configs" / name
    cfg = load_config(path)
    assert cfg.tasks[0] == "rgb" and cfg.n_iters == 2
