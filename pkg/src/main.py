"""
Insulator disk inspection CLI.

    python -m src.main synth     --out data/synth
    python -m src.main train     --data data/synth --mode ss_modified --out runs/ssm
    python -m src.main eval      --data data/synth --out runs/ssm
    python -m src.main inspect   --image aerial.png --boxes aerial.txt --checkpoint runs/ssm/checkpoints/instance_0.occm --threshold-from runs/ssm/eval_report.json
    python -m src.main gradcheck
    python -m src.main sweep     --data data/synth --anomalies 0,1,2,5,10

Every flag overrides one path of the JSON config (--config); --set path=value covers the rest.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error, 3 non-finite training loss.
"""
import argparse
import glob
import logging
import os
import re
import sys
from typing import Optional, Sequence

from .config import (apply_overrides, autoencoder_config_from, check_config, load_config, network_config_from,
                     parse_assignment, synth_config_from, train_config_from)
from .data import (limit_train_anomalies, load_dataset, merge_anomalies, save_dataset, split_summary,
                   synth_generate)
from .evaluation import (ae_scorer, dump_scores, evaluate_experiment, fcdd_scorer, sample_heatmaps, save_report)
from .gradcheck import run_gradcheck_suite
from .heatmap import export_heatmaps
from .helpers import write_json
from .model import load_checkpoint
from .pipeline import inspect, threshold_from_report
from .trainer import NonFiniteBatchError, normal_only, train, train_autoencoder
from .views import (show_eval_report, show_gradcheck, show_inspection_report, show_nonfinite_report,
                    show_split_summary, show_sweep, show_train_log)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_NONFINITE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _csv(kind):
    def parse(text: str) -> list:
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"expected comma-separated values: {text}") from e
    return parse


# (flag dest, JSON path) per subcommand
FLAG_PATHS = {
    "common": [("out", "output.dir")],
    "synth": [("seed", "synth.seed"), ("n_normal", "synth.n_normal"), ("n_anomalous", "synth.n_anomalous"),
              ("n_test_normal", "synth.n_test_normal"), ("n_test_anomalous", "synth.n_test_anomalous"),
              ("size", "synth.h"), ("size", "synth.w")],
    "data": [("data", "data.root"), ("train_anomalies", "data.train_anomalies"),
             ("extra_anomalies", "data.extra_anomalies"), ("network", "network.preset")],
    "train": [("mode", "train.mode"), ("gamma", "train.gamma"), ("lr", "train.lr"), ("epochs", "train.epochs"),
              ("batch_size", "train.batch_size"), ("instances", "train.n_instances"), ("seed", "train.base_seed"),
              ("skip_policy", "train.skip_policy"), ("preset", "train.preset"), ("autoencoder", "autoencoder.enabled"),
              ("progress", "train.progress"), ("hflip", "train.hflip")],
    "eval": [("checkpoints", "eval.checkpoints"), ("criterion", "eval.criterion"), ("autoencoder", "autoencoder.enabled"),
             ("export_heatmaps", "eval.export_heatmaps")],
    "inspect": [("image", "inspect.image"), ("boxes", "inspect.boxes"), ("checkpoint", "inspect.checkpoint"),
                ("threshold", "inspect.threshold"), ("threshold_from", "inspect.threshold_from"),
                ("instance", "inspect.instance")],
    "gradcheck": [("instances", "gradcheck.instances"), ("tol", "gradcheck.tol"), ("eps", "gradcheck.eps"),
                  ("seed", "gradcheck.seed")],
    "sweep": [("anomalies", "sweep.anomalies"), ("gammas", "sweep.gammas"), ("ss_mode", "sweep.ss_mode"),
              ("epochs", "train.epochs"), ("instances", "train.n_instances"), ("seed", "train.base_seed")],
}
COMMAND_GROUPS = {
    "synth": ("common", "synth"),
    "train": ("common", "data", "train"),
    "eval": ("common", "data", "eval"),
    "inspect": ("common", "inspect"),
    "gradcheck": ("common", "gradcheck"),
    "sweep": ("common", "data", "sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.main", description="Insulator disk anomaly detection")
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override any config path, e.g. --set train.lr=0.01")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--out", help="output directory")
        return p

    def data_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data", help="dataset root (default: generate the synthetic dataset in memory)")
        p.add_argument("--train-anomalies", type=int, help="keep this many anomalous training samples")
        p.add_argument("--extra-anomalies", help="dataset root whose anomalous training samples are added")
        p.add_argument("--network", choices=["desk", "paper"], help="network preset")

    p = common(sub.add_parser("synth", help="generate the synthetic blob dataset"))
    p.add_argument("--seed", type=int)
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-anomalous", type=int)
    p.add_argument("--n-test-normal", type=int)
    p.add_argument("--n-test-anomalous", type=int)
    p.add_argument("--size", type=int, help="image height and width")

    p = common(sub.add_parser("train", help="train model instances"))
    data_flags(p)
    p.add_argument("--mode", choices=["unsup_no_anom", "unsup_with_anom", "ss_original", "ss_modified", "ss_focal"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--seed", type=int, help="base seed; instance k uses seed + k")
    p.add_argument("--skip-policy", choices=["error", "skip_batch"])
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--autoencoder", action="store_true", default=None)
    p.add_argument("--progress", action="store_true", default=None)
    p.add_argument("--hflip", action="store_true", default=None)

    p = common(sub.add_parser("eval", help="evaluate trained checkpoints on the test split"))
    data_flags(p)
    p.add_argument("--checkpoints", help="checkpoint directory (default: <out>/checkpoints)")
    p.add_argument("--criterion", choices=["distance", "youden"])
    p.add_argument("--autoencoder", action="store_true", default=None)
    p.add_argument("--export-heatmaps", type=int, metavar="N", help="export heatmaps of the first N test samples")

    p = common(sub.add_parser("inspect", help="score detector-cropped disks of one image"))
    p.add_argument("--image")
    p.add_argument("--boxes")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--threshold-from", help="evaluation report JSON to take the optimal threshold from")
    p.add_argument("--instance", type=int, help="report instance the threshold belongs to")

    p = common(sub.add_parser("gradcheck", help="run the finite-difference gradient suite"))
    p.add_argument("--instances", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("sweep", help="anomaly-count or focusing-parameter sweep"))
    data_flags(p)
    p.add_argument("--anomalies", type=_csv(int), help="e.g. 0,1,2,5,10")
    p.add_argument("--gammas", type=_csv(float), help="train ss_focal for each value instead of the count sweep")
    p.add_argument("--ss-mode", choices=["ss_original", "ss_modified", "ss_focal"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--seed", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    try:
        config = load_config(args.config)
        overrides = dict(parse_assignment(text) for text in args.set)
        for group in COMMAND_GROUPS[args.command]:
            for dest, path in FLAG_PATHS[group]:
                value = getattr(args, dest, None)
                if value is not None:
                    overrides[path] = value
        apply_overrides(config, overrides)
        check_config(config)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return config


# --- commands ---

def _load_split(config: dict, limit: bool = True):
    data = config["data"]
    split = load_dataset(data["root"]) if data["root"] else synth_generate(synth_config_from(config))
    if limit and data["train_anomalies"] is not None:
        split = limit_train_anomalies(split, data["train_anomalies"], data["anomaly_seed"])
    if data["extra_anomalies"]:
        split = merge_anomalies(split, load_dataset(data["extra_anomalies"]), data["extra_limit"],
                               data["anomaly_seed"])
    return split


def cmd_synth(config: dict) -> int:
    out = config["output"]["dir"]
    split = synth_generate(synth_config_from(config))
    save_dataset(split, out, seed=config["synth"]["seed"])
    show_split_summary(split_summary(split))
    print(f"Dataset written to {out}")
    return EXIT_OK


def cmd_train(config: dict) -> int:
    out = config["output"]["dir"]
    split = _load_split(config)
    show_split_summary(split_summary(split))
    log_path = os.path.join(out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    traincfg = train_config_from(config, log_path=log_path, checkpoint_dir=os.path.join(out, "checkpoints"))
    if config["autoencoder"]["enabled"]:
        instances = train_autoencoder(normal_only(split), autoencoder_config_from(config), traincfg)
    else:
        instances = train(split, network_config_from(config), traincfg)
    show_train_log(instances)
    return EXIT_OK


def _instance_number(path: str) -> int:
    match = re.search(r"_(\d+)\.occm$", path)
    return int(match.group(1)) if match else -1


def cmd_eval(config: dict) -> int:
    out = config["output"]["dir"]
    use_ae = config["autoencoder"]["enabled"]
    ckdir = config["eval"]["checkpoints"] or os.path.join(out, "checkpoints")
    paths = sorted(glob.glob(os.path.join(ckdir, "ae_*.occm" if use_ae else "instance_*.occm")), key=_instance_number)
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {ckdir}")
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _ in loaded]
    extra = loaded[0][1]
    split = _load_split(config)

    scorer = ae_scorer(split) if use_ae else fcdd_scorer(split, extra.get("sigma"))
    metadata = {"mode": extra.get("mode"), "gamma": extra.get("gamma"), "dataset": split.name,
                "checkpoints": [os.path.basename(p) for p in paths]}
    report = evaluate_experiment(models, split, scorer, metadata, config["eval"]["criterion"])
    save_report(os.path.join(out, "eval_report.json"), report)
    for k in range(len(models)):
        dump_scores(os.path.join(out, f"scores_instance_{k}.csv"), report, k)

    n_maps = config["eval"]["export_heatmaps"]
    if n_maps and not use_ae:
        heatmaps = sample_heatmaps(models[0], split, extra.get("sigma"), n_maps)
        export_heatmaps(heatmaps, os.path.join(out, "heatmaps"))
    show_eval_report(report)
    return EXIT_OK


def cmd_inspect(config: dict) -> int:
    section = config["inspect"]
    if section["threshold"] is not None:
        threshold, source = float(section["threshold"]), "user"
    elif section["threshold_from"]:
        threshold, source = threshold_from_report(section["threshold_from"], section["instance"])
    else:
        raise ConfigError("inspect needs --threshold or --threshold-from (an evaluation report)")
    report = inspect(section["image"], section["boxes"], section["checkpoint"], threshold,
                     config["output"]["dir"], source)
    show_inspection_report(report)
    return EXIT_OK


def cmd_gradcheck(config: dict) -> int:
    section = config["gradcheck"]
    results = run_gradcheck_suite(section["instances"], section["eps"], section["tol"], section["seed"])
    show_gradcheck(results, section["tol"])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def run_sweep(config: dict) -> list[dict]:
    """One evaluation report per (mode, anomaly count) or per focal gamma."""
    out = os.path.join(config["output"]["dir"], "sweep")
    sweep = config["sweep"]
    base = _load_split(config, limit=False)
    netcfg = network_config_from(config)
    seed = config["data"]["anomaly_seed"]

    if sweep["gammas"]:
        count = config["data"]["train_anomalies"]
        runs = [("ss_focal", count, {"gamma": float(g)}, f"gamma{g}") for g in sweep["gammas"]]
    else:
        runs = [("unsup_no_anom", 0, {}, "reference")]
        runs += [(mode, n, {}, f"anomalies{n}") for mode in ("unsup_with_anom", sweep["ss_mode"])
                 for n in sweep["anomalies"]]

    rows = []
    for mode, count, extra, label in runs:
        split = base if count is None else limit_train_anomalies(base, count, seed)
        name = f"{mode}_{label}"
        traincfg = train_config_from(config, mode=mode, log_path=os.path.join(out, name + ".jsonl"), **extra)
        if os.path.exists(traincfg.log_path):
            os.remove(traincfg.log_path)
        instances = train(split, netcfg, traincfg)
        metadata = {"mode": mode, "gamma": traincfg.gamma, "dataset": split.name, "train_anomalies": count,
                    "label": label}
        report = evaluate_experiment([i.model for i in instances], split, fcdd_scorer(split, traincfg.sigma),
                                     metadata, config["eval"]["criterion"])
        path = os.path.join(out, name + ".json")
        save_report(path, report)
        for k in range(len(instances)):
            dump_scores(os.path.join(out, f"{name}_scores_{k}.csv"), report, k)
        rows.append({"mode": mode, "label": label, "train_anomalies": count, "path": path,
                     "auc_mean": report.aggregate["auc_mean"], "auc_std": report.aggregate["auc_std"]})
    write_json(os.path.join(out, "sweep_summary.json"), rows)
    return rows


def cmd_sweep(config: dict) -> int:
    show_sweep(run_sweep(config))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteBatchError as e:
        show_nonfinite_report(e)
        return EXIT_NONFINITE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
