"""Experiment configuration file (JSON, ``config_version`` 1).

Schema::

    {
      "config_version": 1,
      "rounds": 40,
      "alpha": 0.001,
      "hyper": {"lr": 0.3, "local_epochs": 1, "batch_size": 32, "seed": 42},
      "nodes": [{"id": "nih", "manifest": "nih.csv"}, ...],
      "test_manifest": "test.csv",
      "extractor": {"id": "gridpool", "config": {"grid": 4}},
      "model": {"hidden_dim": 64, "num_classes": 4, "dropout_rate": 0.2},
      "synth": {"per_site_class_counts": [[84,71,94,51],[7,11,5,8]],
                "test_class_counts": [6,6,6,6],
                "feature_dim": 16, "class_separation": 2.5, "seed": 7}
    }

``model`` and ``synth`` are optional (``model`` has the defaults shown;
``synth`` is only needed by the ``synth`` command). Manifest paths are
resolved relative to the config file's directory.
"""

import json
import os
from dataclasses import dataclass, field

from fedhorizon.errors import ConfigError
from fedhorizon.model import Hyperparameters

CONFIG_VERSION = 1

MODEL_DEFAULTS = {"hidden_dim": 64, "num_classes": 4, "dropout_rate": 0.2}


@dataclass
class NodeEntry:
    node_id: str
    manifest: str


@dataclass
class ExperimentConfig:
    rounds: int
    alpha: float
    hyper: Hyperparameters
    nodes: list
    test_manifest: str
    extractor_id: str
    extractor_config: dict
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    synth: dict = None
    base_dir: str = "."

    def resolve(self, path):
        return os.path.normpath(os.path.join(self.base_dir, path))

    @property
    def node_ids(self):
        return [n.node_id for n in self.nodes]


def _require(mapping, key, types, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required field {key!r}")
    value = mapping[key]
    if not isinstance(value, types):
        raise ConfigError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def load_config(path):
    """Parse and validate an experiment config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    version = _require(raw, "config_version", int, path)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: config_version {version} unsupported (expected 1)")

    rounds = _require(raw, "rounds", int, path)
    if rounds < 0:
        raise ConfigError(f"{path}: rounds must be >= 0")
    alpha = _require(raw, "alpha", (int, float), path)
    if alpha < 0:
        raise ConfigError(f"{path}: alpha must be >= 0")

    hraw = _require(raw, "hyper", dict, path)
    try:
        hyper = Hyperparameters(
            learning_rate=float(_require(hraw, "lr", (int, float), f"{path}:hyper")),
            local_epochs=_require(hraw, "local_epochs", int, f"{path}:hyper"),
            batch_size=_require(hraw, "batch_size", int, f"{path}:hyper"),
            seed=_require(hraw, "seed", int, f"{path}:hyper"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: hyper: {exc}") from exc

    nodes_raw = _require(raw, "nodes", list, path)
    if not nodes_raw:
        raise ConfigError(f"{path}: nodes must be nonempty")
    nodes = []
    for i, entry in enumerate(nodes_raw):
        where = f"{path}:nodes[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: must be an object")
        nodes.append(NodeEntry(
            node_id=_require(entry, "id", str, where),
            manifest=_require(entry, "manifest", str, where),
        ))
    ids = [n.node_id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate node ids {ids}")

    test_manifest = _require(raw, "test_manifest", str, path)

    extractor = _require(raw, "extractor", dict, path)
    extractor_id = _require(extractor, "id", str, f"{path}:extractor")
    extractor_config = extractor.get("config", {})
    if not isinstance(extractor_config, dict):
        raise ConfigError(f"{path}: extractor.config must be an object")

    model_cfg = dict(MODEL_DEFAULTS)
    if "model" in raw:
        if not isinstance(raw["model"], dict):
            raise ConfigError(f"{path}: model must be an object")
        unknown = set(raw["model"]) - set(MODEL_DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown model fields {sorted(unknown)}")
        model_cfg.update(raw["model"])

    synth = raw.get("synth")
    if synth is not None:
        if not isinstance(synth, dict):
            raise ConfigError(f"{path}: synth must be an object")
        counts = _require(synth, "per_site_class_counts", list, f"{path}:synth")
        if len(counts) != len(nodes):
            raise ConfigError(
                f"{path}: synth.per_site_class_counts has {len(counts)} rows "
                f"for {len(nodes)} nodes"
            )
        _require(synth, "feature_dim", int, f"{path}:synth")
        _require(synth, "class_separation", (int, float), f"{path}:synth")
        _require(synth, "seed", int, f"{path}:synth")

    return ExperimentConfig(
        rounds=rounds,
        alpha=float(alpha),
        hyper=hyper,
        nodes=nodes,
        test_manifest=test_manifest,
        extractor_id=extractor_id,
        extractor_config=extractor_config,
        model=model_cfg,
        synth=synth,
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
