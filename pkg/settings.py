import json
import os

import structlog

from errors import ConfigError

logger = structlog.get_logger(__name__)

DEFAULT_SETTINGS_FILE = "ixwatch_settings.json"

# Detection parameters. alpha is not given by the measurement study; 0.9 keeps
# roughly ten intervals of memory.
DEFAULT_DETECTOR_SETTINGS = {
    "alpha": 0.9,
    "theta": 3.0,
    "tau": 0.5,
    "epsilon": 1e-6,
    "nu_bps": 5_000_000.0,
    "entropy_h": 0.4,
    "delta_t": 60,
    "warmup_intervals": 0,
    "startup_intervals": 10,
}

# Everything else the pipeline needs
DEFAULT_PIPELINE_SETTINGS = {
    "sampling_rate": 1,
    "late_grace_intervals": 1,
    "max_future_intervals": 60,
    "idle_intervals": 1440,
    "top_n": None,
    "archive_sketches": False,
    "monitored_ports": None,
    "prefix_table": None,
    "out_dir": "ixwatch-out",
    "pre_margin_s": 600,
    "post_margin_s": 3600,
}

# Descriptions shown by `ixwatch.py settings`
SETTING_DESCRIPTIONS = {
    "alpha": "EWMA weight on the previous mean, in (0, 1)",
    "theta": "Standard deviation multiplier of the tolerance band",
    "tau": "Deviation score above which an interval is anomalous",
    "epsilon": "Division guard of the deviation score",
    "nu_bps": "Minimum attack volume in bits per second",
    "entropy_h": "Normalized source-AS entropy threshold",
    "delta_t": "Aggregation interval length in seconds",
    "warmup_intervals": "Clean updates a new key needs before it can alert",
    "startup_intervals": "Intervals after start during which every key only learns its baseline",
    "sampling_rate": "Packet sampling multiplier of the exporters (1 = unsampled)",
    "late_grace_intervals": "Intervals a closed bucket still accepts late flows",
    "max_future_intervals": "Flows this many intervals ahead of the clock are dropped (0 = no limit)",
    "idle_intervals": "Silent intervals after which a key stops getting zero-sketches (0 = never)",
    "top_n": "Number of top source ASes per alert that get a filter rule (null = all)",
    "archive_sketches": "Write every closed sketch to sketches.jsonl",
    "monitored_ports": "Monitored-ports file overriding the built-in table",
    "prefix_table": "Prefix table file (cidr asn per line)",
    "out_dir": "Directory receiving alerts, anomalies, sessions and rules",
    "pre_margin_s": "Seconds before an attack included in BGP analysis",
    "post_margin_s": "Seconds after an attack included in BGP analysis",
}


class Settings:
    """Class to manage detector and pipeline settings."""

    def __init__(self, path=None):
        """Initialize settings with defaults, then overlay the settings file."""
        self.detector = DEFAULT_DETECTOR_SETTINGS.copy()
        self.pipeline = DEFAULT_PIPELINE_SETTINGS.copy()
        self.path = path
        self.load_settings()

    def load_settings(self):
        """Load settings from file.

        A missing default file leaves the defaults in place; a file named
        explicitly must exist.
        """
        path = self.path or DEFAULT_SETTINGS_FILE
        if not os.path.exists(path):
            if self.path:
                raise ConfigError(f"settings file not found: {path}")
            return

        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read settings file {path}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigError(f"settings file {path} must hold a JSON object")

        for section, target in (("detector", self.detector), ("pipeline", self.pipeline)):
            values = data.get(section, {})
            unknown = set(values) - set(target)
            if unknown:
                raise ConfigError(f"unknown {section} settings in {path}: {sorted(unknown)}")
            target.update(values)

        logger.debug("settings loaded", path=path)

    def save_settings(self, path=None):
        """Save settings to file."""
        path = path or self.path or DEFAULT_SETTINGS_FILE
        data = {"detector": self.detector, "pipeline": self.pipeline}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    def override(self, **values):
        """Apply command line overrides; None means "not given"."""
        for key, value in values.items():
            if value is None:
                continue
            if key in self.detector:
                self.detector[key] = value
            elif key in self.pipeline:
                self.pipeline[key] = value
            else:
                raise ConfigError(f"unknown setting: {key}")

    def detector_config(self):
        """Build a validated DetectorConfig from the detector section."""
        from stages.detection import DetectorConfig

        cfg = DetectorConfig(**self.detector)
        cfg.validate()
        return cfg

    def get_description(self, key):
        """Get a description for a setting."""
        return SETTING_DESCRIPTIONS.get(key, key.replace("_", " ").capitalize())
