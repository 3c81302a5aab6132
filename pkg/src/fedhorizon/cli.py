"""Batch command-line front end.

Subcommands::

    fedhorizon synth --config CFG --out DIR
    fedhorizon run   --config CFG --scenario {single|central|fed|all}
                     --runs N [--out PREFIX]
    fedhorizon serve --config CFG --listen HOST:PORT [--out PREFIX]
                     [--timeout SECONDS]
    fedhorizon node  --id ID --manifest CSV --connect HOST:PORT --config CFG
    fedhorizon eval  --params FILE --manifest CSV [--binary] [--json]
                     [--config CFG]

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 protocol/timeout error. ``FEDHORIZON_LOG`` in {error, info, debug}
sets the log level (default error).
"""

import argparse
import json
import logging
import os
import sys

from fedhorizon import config as config_mod
from fedhorizon import data as data_mod
from fedhorizon import experiments, federation, metrics, model, transport
from fedhorizon.errors import ConfigError, DataError, ProtocolError

log = logging.getLogger("fedhorizon.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROTOCOL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="fedhorizon", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic site + test manifests")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run a training scenario and report metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--scenario", required=True,
                   choices=["single", "central", "fed", "all"])
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", help="write PREFIX.json and PREFIX.csv")

    p = sub.add_parser("serve", help="coordinate a networked federation")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--out", help="write PREFIX.history.json and PREFIX.params")
    p.add_argument("--timeout", type=float, default=transport.DEFAULT_TIMEOUT)

    p = sub.add_parser("node", help="run one site against a coordinator")
    p.add_argument("--id", required=True, dest="node_id")
    p.add_argument("--manifest", required=True)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--config", required=True,
                   help="experiment config supplying shared hyperparameters")

    p = sub.add_parser("eval", help="evaluate saved parameters on a manifest")
    p.add_argument("--params", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--binary", action="store_true",
                   help="also report the control-vs-pathogenic collapse")
    p.add_argument("--json", action="store_true", help="emit JSON instead of tables")
    p.add_argument("--config", help="supplies the extractor for image manifests")
    return parser


def cmd_synth(args):
    cfg = config_mod.load_config(args.config)
    try:
        written = experiments.synthesize_to_dir(cfg, args.out)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc}") from exc
    for path in written:
        print(path)
    return EXIT_OK


def cmd_run(args):
    cfg = config_mod.load_config(args.config)
    results = experiments.run_scenario(cfg, args.scenario, args.runs)
    print(experiments.results_table(results))
    if args.out:
        with open(args.out + ".json", "w", encoding="utf-8") as fh:
            fh.write(experiments.results_json(results) + "\n")
        with open(args.out + ".csv", "w", encoding="utf-8") as fh:
            fh.write(experiments.results_csv(results))
    return EXIT_OK


def _engine_from_config(cfg):
    """Build the round engine for serving: needs test data and feature width."""
    test = data_mod.load_manifest(cfg.resolve(cfg.test_manifest))
    test = data_mod.materialize_features(test, cfg.extractor_id, cfg.extractor_config)
    input_dim = test.records[0].features.size
    fed_cfg = experiments.federation_config(cfg, input_dim, cfg.node_ids)
    return federation.FedAvgEngine(fed_cfg, test)


def cmd_serve(args):
    cfg = config_mod.load_config(args.config)
    engine = _engine_from_config(cfg)
    try:
        history = transport.coordinator_serve(args.listen, engine, timeout=args.timeout)
    except OSError as exc:
        raise ProtocolError("bind_failed", f"cannot listen on {args.listen}: {exc}") from exc
    if args.out:
        with open(args.out + ".history.json", "w", encoding="utf-8") as fh:
            json.dump(history.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        model.save_params(args.out + ".params", engine.params)
    print(f"federation complete: {len(history)} rounds, digest {history.digest()}")
    return EXIT_OK


def cmd_node(args):
    cfg = config_mod.load_config(args.config)
    ds = data_mod.load_manifest(args.manifest)
    ds = data_mod.materialize_features(ds, cfg.extractor_id, cfg.extractor_config)
    if ds.site_id != args.node_id:
        raise DataError(f"manifest carries site {ds.site_id!r}, --id is {args.node_id!r}")
    return transport.node_run(args.connect, ds, cfg.hyper, args.node_id,
                              num_classes=cfg.model["num_classes"])


def cmd_eval(args):
    params = model.load_params(args.params)
    if args.config:
        cfg = config_mod.load_config(args.config)
        extractor_id, extractor_config = cfg.extractor_id, cfg.extractor_config
        model_cfg = cfg.model
    else:
        extractor_id, extractor_config = "gridpool", {}
        model_cfg = config_mod.MODEL_DEFAULTS
    ds = data_mod.load_manifest(args.manifest)
    ds = data_mod.materialize_features(ds, extractor_id, extractor_config)
    x, y0 = data_mod.site_to_arrays(ds)

    k = model_cfg["num_classes"]
    d = x.shape[1]
    hidden, rem = divmod(params.size - k, d + 1 + k)
    if rem != 0 or hidden < 1:
        raise DataError(
            f"parameter vector of length {params.size} does not fit feature "
            f"width {d} with {k} classes"
        )
    spec = model.ModelSpec(input_dim=d, hidden_dim=hidden, num_classes=k,
                           dropout_rate=0.0)
    predicted = model.predict_labels(spec, params, x) + 1
    true = y0 + 1
    four = metrics.report(true, predicted, k)
    out = {"four_class": four}
    if args.binary:
        binary_cm = metrics.collapse_to_binary(true, predicted)
        out["binary"] = metrics.report_from_confusion(binary_cm)
    if args.json:
        print(json.dumps({name: rep.to_dict() for name, rep in out.items()},
                         indent=2, sort_keys=True))
    else:
        for name, rep in out.items():
            print(f"[{name}]")
            print(rep.format_table())
    return EXIT_OK


def main(argv=None):
    level = os.environ.get("FEDHORIZON_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": cmd_synth,
            "run": cmd_run,
            "serve": cmd_serve,
            "node": cmd_node,
            "eval": cmd_eval,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as exc:
        print(f"protocol error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
