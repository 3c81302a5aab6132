"""Experiment harness: repeated seeded runs per scenario, mean/STD tables.

A request for ``n_runs`` executes the scenario with training seeds
``hyper.seed + 0 .. hyper.seed + n_runs - 1`` (only the training seed
varies; data stays fixed). Aggregate rows report the mean and the
population standard deviation of macro-F1 and accuracy across runs.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from fedhorizon import data as data_mod
from fedhorizon import federation, model
from fedhorizon.errors import ConfigError

DEFAULT_TEST_CLASS_COUNTS = [6, 6, 6, 6]


@dataclass
class ExperimentResult:
    """Scores for one scenario column over n seeded runs."""

    run_id: str
    scenario: str
    node_id: str  # "" unless single_node
    seeds: list
    reports: list  # MetricsReport per run
    mean_macro_f1: float
    std_macro_f1: float
    mean_accuracy: float
    std_accuracy: float

    @property
    def column_label(self):
        if self.scenario == "single_node":
            return f"single:{self.node_id}"
        return self.scenario

    def to_dict(self):
        return {
            "run_id": self.run_id,
            "scenario": self.scenario,
            "node_id": self.node_id,
            "seeds": self.seeds,
            "per_run": [r.to_dict() for r in self.reports],
            "mean_macro_f1": self.mean_macro_f1,
            "std_macro_f1": self.std_macro_f1,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
        }


def _result(run_id, scenario, node_id, seeds, reports):
    f1s = np.array([r.macro_f1 for r in reports])
    accs = np.array([r.accuracy for r in reports])
    return ExperimentResult(
        run_id=run_id,
        scenario=scenario,
        node_id=node_id,
        seeds=list(seeds),
        reports=reports,
        mean_macro_f1=float(f1s.mean()),
        std_macro_f1=float(f1s.std()),  # population formula
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std()),
    )


def synthesize_to_dir(cfg, out_dir):
    """Write synthetic per-site manifests plus a balanced test manifest.

    Site counts come from ``cfg.synth.per_site_class_counts`` (rows match
    the configured nodes); the patient-disjoint test set uses
    ``test_class_counts`` (default 6 per class). Manifests land in
    ``out_dir`` under the basenames named by the config, so a config
    whose manifests live beside it can be run directly afterwards.
    Deterministic: the same config writes byte-identical files.
    """
    if cfg.synth is None:
        raise ConfigError("config has no synth block")
    synth = cfg.synth
    counts = [list(row) for row in synth["per_site_class_counts"]]
    test_counts = list(synth.get("test_class_counts", DEFAULT_TEST_CLASS_COUNTS))
    site_ids = cfg.node_ids + ["test"]
    datasets = data_mod.synthesize_dataset(
        counts + [test_counts],
        feature_dim=synth["feature_dim"],
        class_separation=synth["class_separation"],
        seed=synth["seed"],
        site_ids=site_ids,
    )
    os.makedirs(out_dir, exist_ok=True)
    written = []
    names = [entry.manifest for entry in cfg.nodes] + [cfg.test_manifest]
    for ds, name in zip(datasets, names):
        path = os.path.join(out_dir, os.path.basename(name))
        written.append(data_mod.save_manifest(ds, path))
    return written


def load_sites(cfg):
    """Load and materialize (features) all node datasets plus the test set."""
    sites = []
    for entry in cfg.nodes:
        ds = data_mod.load_manifest(cfg.resolve(entry.manifest))
        ds = data_mod.materialize_features(ds, cfg.extractor_id, cfg.extractor_config)
        if ds.site_id != entry.node_id:
            raise ConfigError(
                f"manifest {entry.manifest} carries site {ds.site_id!r}, "
                f"config names it {entry.node_id!r}"
            )
        sites.append(ds)
    test = data_mod.load_manifest(cfg.resolve(cfg.test_manifest))
    test = data_mod.materialize_features(test, cfg.extractor_id, cfg.extractor_config)
    return sites, test


def federation_config(cfg, input_dim, node_ids, seed=None):
    """FederationConfig for one run (training seed optionally overridden)."""
    hyper = cfg.hyper if seed is None else replace(cfg.hyper, seed=seed)
    spec = model.ModelSpec(
        input_dim=input_dim,
        hidden_dim=cfg.model["hidden_dim"],
        num_classes=cfg.model["num_classes"],
        dropout_rate=cfg.model["dropout_rate"],
    )
    return federation.FederationConfig(
        model_spec=spec,
        num_rounds=cfg.rounds,
        alpha=cfg.alpha,
        hyper=hyper,
        node_ids=tuple(node_ids),
        seed=hyper.seed,
    )


def run_scenario(cfg, scenario, n_runs, sites=None, test=None):
    """Execute one scenario n_runs times; returns a list of results.

    ``single`` yields one result per node; ``central``/``fed`` one; a
    scenario of ``all`` yields every column of the comparison table.
    """
    if scenario not in ("single", "central", "fed", "all"):
        raise ConfigError(f"unknown scenario {scenario!r}")
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    if sites is None:
        sites, test = load_sites(cfg)
    input_dim = sites[0].records[0].features.size
    base = cfg.hyper.seed
    seeds = [base + i for i in range(n_runs)]

    def column(kind, node_id, runner):
        reports = []
        for seed in seeds:
            fed_cfg = federation_config(cfg, input_dim, cfg.node_ids, seed)
            params, _ = runner(fed_cfg)
            reports.append(federation.evaluate(fed_cfg.model_spec, params, test))
        run_id = f"{kind}{'-' + node_id if node_id else ''}-seed{base}x{n_runs}"
        return _result(run_id, kind, node_id, seeds, reports)

    results = []
    if scenario in ("single", "all"):
        for ds in sites:
            results.append(column(
                "single_node", ds.site_id,
                lambda fc, ds=ds: federation.run_single_node(ds, test, fc),
            ))
    if scenario in ("central", "all"):
        results.append(column(
            "centralized", "",
            lambda fc: federation.run_centralized(sites, test, fc),
        ))
    if scenario in ("fed", "all"):
        results.append(column(
            "federated", "",
            lambda fc: federation.run_federation(fc, sites, test),
        ))
    return results


def results_table(results):
    """Mean (STD) comparison table: rows are metrics, columns scenarios."""
    labels = [r.column_label for r in results]
    width = max(22, *(len(l) + 2 for l in labels)) if labels else 22
    header = f"{'Metric':<24}" + "".join(f"{l:>{width}}" for l in labels)
    rows = [header]
    for name, mean_attr, std_attr in (
        ("Mean F1-score (STD)", "mean_macro_f1", "std_macro_f1"),
        ("Mean Accuracy (STD)", "mean_accuracy", "std_accuracy"),
    ):
        cells = [
            f"{getattr(r, mean_attr):.6f} ({getattr(r, std_attr):.6f})" for r in results
        ]
        rows.append(f"{name:<24}" + "".join(f"{c:>{width}}" for c in cells))
    return "\n".join(rows)


def results_json(results):
    """Deterministic JSON document for a list of results."""
    return json.dumps({"results": [r.to_dict() for r in results]},
                      indent=2, sort_keys=True)


def results_csv(results):
    """Per-run flat series (for external plotting): one row per run."""
    lines = ["column,scenario,node_id,run_index,seed,macro_f1,accuracy"]
    for res in results:
        for i, (seed, rep) in enumerate(zip(res.seeds, res.reports)):
            lines.append(
                f"{res.column_label},{res.scenario},{res.node_id},{i},{seed},"
                f"{rep.macro_f1!r},{rep.accuracy!r}"
            )
    return "\n".join(lines) + "\n"
