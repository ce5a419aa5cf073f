import os

import yaml
from dotenv import load_dotenv

from src.errors import ConfigError

DEFAULT_CONFIG = "config.yml"
REQUIRED_KEYS = ["seed", "corpus_dir", "model", "baseline", "gates", "sru", "bench", "sweep"]
FALSEY = {"0", "false", "no", "off"}


class ConfigLoader:
    def __init__(self, config_path=None):
        load_dotenv()
        self.config_path = config_path or os.getenv("QRNZ_CONFIG") or DEFAULT_CONFIG
        self.config = {}

    def load_config(self):
        if not os.path.exists(self.config_path):
            raise ConfigError(f"Config file not found: {self.config_path}")

        with open(self.config_path, "r") as f:
            try:
                self.config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Config file {self.config_path} is not valid YAML: {e}") from e

        self._validate_config()
        self._apply_env()
        return self.config

    def _validate_config(self):
        if not isinstance(self.config, dict):
            raise ConfigError(f"Config file {self.config_path} must hold a mapping")
        for key in REQUIRED_KEYS:
            if key not in self.config:
                raise ConfigError(f"Missing required config key: {key}")
        for key in REQUIRED_KEYS[2:]:
            if not isinstance(self.config[key], dict):
                raise ConfigError(f"Config key '{key}' must be a mapping")

    def _apply_env(self):
        """Environment beats the file; command-line flags are applied later and beat both."""
        corpus_dir = os.getenv("QRNZ_CORPUS_DIR")
        if corpus_dir:
            self.config["corpus_dir"] = corpus_dir
        threads = os.getenv("QRNZ_THREADS")
        if threads:
            try:
                self.config["sweep"]["threads"] = int(threads)
            except ValueError:
                raise ConfigError(f"QRNZ_THREADS must be an integer, got {threads!r}")
        progress = os.getenv("QRNZ_PROGRESS")
        if progress is not None and progress != "":
            self.config["progress"] = progress.strip().lower() not in FALSEY


if __name__ == "__main__":
    loader = ConfigLoader()
    print(loader.load_config())
