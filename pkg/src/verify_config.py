import os
import tempfile
import unittest
from unittest.mock import patch

import yaml

from src.config_loader import ConfigLoader
from src.errors import ConfigError

REPO_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "config.yml")
CLEAN_ENV = {"QRNZ_CORPUS_DIR": "", "QRNZ_THREADS": "", "QRNZ_PROGRESS": "", "QRNZ_CONFIG": ""}


class TestConfigLoader(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        with open(REPO_CONFIG) as f:
            self.base = yaml.safe_load(f)

    def write(self, config):
        path = os.path.join(self.tmp.name, "config.yml")
        with open(path, "w") as f:
            yaml.safe_dump(config, f)
        return path

    @patch.dict(os.environ, CLEAN_ENV)
    def test_repo_config_loads(self):
        config = ConfigLoader(REPO_CONFIG).load_config()
        self.assertEqual(config["model"]["hidden"][-1], config["model"]["embed"])
        self.assertEqual(config["bench"]["queries"], 350)
        self.assertEqual(config["sweep"]["threads"], 1)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            ConfigLoader(os.path.join(self.tmp.name, "absent.yml")).load_config()

    def test_missing_key(self):
        del self.base["gates"]
        with self.assertRaises(ConfigError) as ctx:
            ConfigLoader(self.write(self.base)).load_config()
        self.assertIn("gates", str(ctx.exception))

    def test_section_must_be_mapping(self):
        self.base["sweep"] = [1, 2]
        with self.assertRaises(ConfigError):
            ConfigLoader(self.write(self.base)).load_config()

    def test_invalid_yaml(self):
        path = os.path.join(self.tmp.name, "broken.yml")
        with open(path, "w") as f:
            f.write("seed: [0\n")
        with self.assertRaises(ConfigError):
            ConfigLoader(path).load_config()

    @patch.dict(os.environ, {**CLEAN_ENV, "QRNZ_CORPUS_DIR": "/data/ptb", "QRNZ_THREADS": "4", "QRNZ_PROGRESS": "off"})
    def test_environment_overrides_file(self):
        config = ConfigLoader(self.write(self.base)).load_config()
        self.assertEqual(config["corpus_dir"], "/data/ptb")
        self.assertEqual(config["sweep"]["threads"], 4)
        self.assertFalse(config["progress"])

    @patch.dict(os.environ, {**CLEAN_ENV, "QRNZ_THREADS": "many"})
    def test_bad_thread_count(self):
        with self.assertRaises(ConfigError):
            ConfigLoader(self.write(self.base)).load_config()

    @patch.dict(os.environ, CLEAN_ENV)
    def test_config_path_from_environment(self):
        path = self.write(self.base)
        with patch.dict(os.environ, {"QRNZ_CONFIG": path}):
            self.assertEqual(ConfigLoader().config_path, path)


if __name__ == '__main__':
    unittest.main()
