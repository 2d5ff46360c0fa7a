"""Tests the JSON config files"""

import json
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

from shishulm.model.config import ModelConfig
from shishulm.model.params import count_parameters
from shishulm.model.presets import get_preset
from shishulm.protocols.config_file import (
    ConfigFileError,
    canonical_json,
    config_from_dict,
    config_hash,
    load_config,
    save_config,
)
from shishulm.train.ablation import AblationSpec
from shishulm.train.config import RunConfig, TrainConfig

CONFIG_DIR = Path(__file__).parents[2] / "configs"

MODEL_CONFIGS = {
    "mobilellm_125m.json": "mobilellm-125m",
    "mobilellm_600m.json": "mobilellm-600m",
    "shishulm_125.json": "shishulm-125",
    "shishulm_600.json": "shishulm-600",
    "shishulm_125_d11.json": "shishulm-125-d11",
    "shishulm_600_d15.json": "shishulm-600-d15",
}


class TestConfigFile(unittest.TestCase):
    """Tests loading and saving config files"""

    def setUp(self):
        self.tmpdir = TemporaryDirectory()
        self.dir = Path(self.tmpdir.name)

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_shipped_model_configs(self):
        """Test the shipped model configs match the presets"""
        for name, preset in MODEL_CONFIGS.items():
            config = load_config(CONFIG_DIR / name, ModelConfig)
            self.assertEqual(config, get_preset(preset), msg=name)
        config = load_config(CONFIG_DIR / "mobilellm_125m.json", ModelConfig)
        self.assertEqual(count_parameters(config), 124_635_456)

    def test_shipped_run_configs(self):
        """Test the shipped run and ablation configs load"""
        run = load_config(CONFIG_DIR / "tiny_run.json", RunConfig)
        self.assertEqual(run.model, load_config(CONFIG_DIR / "tiny_shishu.json", ModelConfig))
        self.assertEqual(run.train.total_steps, 1000)
        parent = load_config(CONFIG_DIR / "tiny_parent.json", ModelConfig)
        self.assertEqual(parent.schedule.n_decoder, 12)

        for name in ["ablation_budget.json", "ablation_placement.json"]:
            spec = load_config(CONFIG_DIR / name, AblationSpec)
            self.assertGreater(len(spec.entries), 1, msg=name)

    def test_unknown_key(self):
        """Test unknown keys at the top level and nested"""
        data = get_preset("mobilellm-125m").to_dict()
        data["dropout"] = 0.1
        with self.assertRaises(ConfigFileError):
            config_from_dict(ModelConfig, data)

        run = json.loads((CONFIG_DIR / "tiny_run.json").read_text())
        run["train"]["lr"] = 0.1
        with self.assertRaises(ConfigFileError):
            config_from_dict(RunConfig, run)

    def test_invalid(self):
        """Test missing keys, bad values, bad JSON and missing files"""
        with self.assertRaises(ConfigFileError):
            config_from_dict(TrainConfig, {})
        with self.assertRaises(ConfigFileError):
            config_from_dict(TrainConfig, {"total_steps": 10, "batch_size": 3, "micro_batch": 2})
        with self.assertRaises(ConfigFileError):
            config_from_dict(TrainConfig, [])

        bad = self.dir / "bad.json"
        bad.write_text("{not json")
        with self.assertRaises(ConfigFileError):
            load_config(bad, TrainConfig)
        with self.assertRaises(ConfigFileError):
            load_config(self.dir / "missing.json", TrainConfig)

    def test_save_load(self):
        """Test save_config() then load_config()"""
        config = get_preset("shishulm-125")
        path = self.dir / "sub" / "model.json"
        save_config(path, config)
        self.assertEqual(load_config(path, ModelConfig), config)

    def test_hash(self):
        """Test config_hash() only depends on the values"""
        a = get_preset("shishulm-125")
        b = get_preset("shishulm-125")
        c = get_preset("shishulm-600")
        self.assertEqual(config_hash(a), config_hash(b))
        self.assertNotEqual(config_hash(a), config_hash(c))
        self.assertEqual(len(config_hash(a)), 16)
        self.assertEqual(canonical_json({"b": 1, "a": [1, 2]}), '{"a":[1,2],"b":1}')
