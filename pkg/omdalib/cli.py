"""
Command-line entry point: ``omdalib <command> [--config c.json] [--seed N|A..B] [--out dir]``.

Exit codes: 0 success, 2 usage error, 1 any other failure. Failures print one ``error: ...`` line.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors
from omdalib.datamodel import SOURCE, TARGET, DomainDataset, generate_synthetic_domains, \
    load_dataset, save_dataset
from omdalib.losses import LossWeights, check_gradient_contract
from omdalib.metrics import PcaRow, export_pca_csv, pca_project
from omdalib.model import ModelState, load_checkpoint, predict_instances, save_checkpoint
from omdalib.training import VARIANTS, adapt_target, evaluate_model, pretrain_source, run_ablation, synthetic_data
from omdalib.utils import RunConfig, ensure_dir, load_config, parse_seeds, write_json

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "ablate", "grad-check", "export-pca")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_FILE = "manifest.json"


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise errors.UsageError(message)


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config: dict
    config_hash: str
    seed: Optional[List[int]]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started_at: float = 0.0

    def to_dict(self) -> dict:
        return {"command": self.command, "config_path": self.config_path, "config": self.config,
                "config_hash": self.config_hash, "seed": self.seed, "inputs": self.inputs,
                "outputs": self.outputs, "started_at": self.started_at}


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    path = os.path.join(ensure_dir(out_dir), MANIFEST_FILE)
    write_json(path, manifest.to_dict())
    return path


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON; defaults are used for missing keys")
    common.add_argument("--seed", help="seed, comma list or inclusive range A..B")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = ArgumentParser(prog="omdalib", description="Ordinal multi-instance domain adaptation")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic source/target datasets")
    p.add_argument("--print-defaults", action="store_true", help="print the default config document and exit")

    p = sub.add_parser("pretrain", parents=[common], help="stage 1: source pre-training")

    p = sub.add_parser("adapt", parents=[common], help="stage 2: target adaptation")
    p.add_argument("--checkpoint", help="pre-trained checkpoint; overrides the config's checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation variants over seeds")
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma list of {}".format(", ".join(VARIANTS)))
    p.add_argument("--both-directions", action="store_true", help="also run target -> source")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every loss gradient")
    p.add_argument("--configs", type=int, default=10, help="random configurations per loss")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("export-pca", parents=[common], help="2-D PCA of both domains' embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    return parser


def _single_seed(args) -> Optional[int]:
    if args.seed is None:
        return None
    seeds = parse_seeds(args.seed)
    if len(seeds) != 1:
        raise errors.UsageError("{} takes a single --seed, got {!r}".format(args.command, args.seed))
    return seeds[0]


def _require_out(args) -> str:
    if not args.out:
        raise errors.UsageError("{} requires --out".format(args.command))
    return args.out


def _resolve_config(args) -> Tuple[RunConfig, Optional[int]]:
    cfg = load_config(args.config)
    seed = _single_seed(args) if args.command != "ablate" else None
    if seed is not None:
        cfg.shift.seed = seed
        cfg.train.seed = seed
    return cfg, seed


def _manifest(args, cfg: RunConfig, seeds: Optional[List[int]], **inputs) -> RunManifest:
    return RunManifest(command=args.command, config_path=args.config, config=cfg.to_dict(), config_hash=cfg.hash(),
                       seed=seeds, inputs={k: v for k, v in inputs.items() if v}, started_at=time.time())


def load_domains(cfg: RunConfig) -> Tuple[DomainDataset, DomainDataset]:
    """Dataset files from ``data`` when both are set, otherwise the synthetic generator."""
    if cfg.data.get("source") and cfg.data.get("target"):
        source, target = load_dataset(cfg.data["source"]), load_dataset(cfg.data["target"])
        if source.domain != SOURCE or target.domain != TARGET:
            raise errors.DatasetError("data.source must hold source bags and data.target target bags")
        return source, target
    if cfg.data:
        raise errors.ConfigError("needs both source and target paths", key="data")
    return generate_synthetic_domains(cfg.shift)


def cmd_gen_data(args) -> int:
    if args.print_defaults:
        sys.stdout.write(json.dumps(load_config(None).to_dict(), indent=2, sort_keys=True) + "\n")
        return 0
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    manifest = _manifest(args, cfg, [cfg.shift.seed])
    manifest.outputs = ["source.jsonl", "target.jsonl"]
    write_manifest(out, manifest)
    source, target = generate_synthetic_domains(cfg.shift)
    save_dataset(source, os.path.join(out, "source.jsonl"))
    save_dataset(target, os.path.join(out, "target.jsonl"))
    logger.info("wrote %d source and %d target bags to %s", len(source.bags), len(target.bags), out)
    return 0


def cmd_pretrain(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    manifest = _manifest(args, cfg, [cfg.train.seed], **cfg.data)
    manifest.outputs = ["checkpoint.json", "train_log.json", "eval.json"]
    write_manifest(out, manifest)
    source, target = load_domains(cfg)
    state, log = pretrain_source(cfg.train, source)
    save_checkpoint(state, os.path.join(out, "checkpoint.json"))
    write_json(os.path.join(out, "train_log.json"), _log_report(log))
    write_json(os.path.join(out, "eval.json"), {"source": evaluate_model(state, source).to_dict(),
                                                "target": evaluate_model(state, target).to_dict()})
    logger.info("pre-training finished at best epoch %s", log.best_epoch)
    return 0


def _log_report(log) -> dict:
    report = log.to_dict()
    # wall clock varies between identical runs
    report.pop("wall_clock", None)
    return report


def cmd_adapt(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    checkpoint = args.checkpoint or cfg.checkpoint
    if not checkpoint:
        raise errors.ConfigError("a pre-trained checkpoint path is required (config or --checkpoint)",
                                 key="checkpoint")
    manifest = _manifest(args, cfg, [cfg.train.seed], checkpoint=checkpoint, **cfg.data)
    manifest.outputs = ["checkpoint.json", "adapt_log.json", "eval.json"]
    write_manifest(out, manifest)
    state = load_checkpoint(checkpoint)
    source, target = load_domains(cfg)
    adapted, log = adapt_target(cfg.train, state, source, target)
    save_checkpoint(adapted, os.path.join(out, "checkpoint.json"))
    write_json(os.path.join(out, "adapt_log.json"), _log_report(log))
    write_json(os.path.join(out, "eval.json"), {"source": evaluate_model(adapted, source).to_dict(),
                                                "target": evaluate_model(adapted, target).to_dict()})
    return 0


def cmd_eval(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    manifest = _manifest(args, cfg, None, checkpoint=args.checkpoint, dataset=args.dataset)
    manifest.outputs = ["eval.json"]
    write_manifest(out, manifest)
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    report = evaluate_model(state, ds)
    write_json(os.path.join(out, "eval.json"), report.to_dict())
    if report.instance is not None:
        logger.info("%s instance accuracy %.4f, macro-F1 %.4f, kappa %s", ds.domain, report.instance.accuracy,
                    report.instance.macro_f1, report.instance.qwk)
    return 0


def _pca_rows(state: ModelState, datasets: Sequence[DomainDataset]) -> Tuple[List[PcaRow], np.ndarray]:
    rows, embs = [], []
    for ds in datasets:
        emb, pred = predict_instances(state, ds.instance_matrix(), ds.domain)
        embs.append(emb)
        i = 0
        for bag in ds.bags:
            for inst in bag.instances:
                rows.append(PcaRow(domain=ds.domain, bag_id=bag.bag_id, instance_id=inst.id,
                                   true_label=inst.label, pred_label=int(pred[i])))
                i += 1
    return rows, np.concatenate(embs, axis=0)


def write_pca(path: str, state: ModelState, source: DomainDataset, target: DomainDataset) -> None:
    rows, emb = _pca_rows(state, (source, target))
    export_pca_csv(path, rows, pca_project(emb, dims=2))


def cmd_ablate(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    seeds = parse_seeds(args.seed) if args.seed is not None else [cfg.train.seed]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise errors.UsageError("unknown variant(s) {}; choose from {}".format(unknown, list(VARIANTS)))
    directions = ("forward", "reverse") if args.both_directions else ("forward",)
    manifest = _manifest(args, cfg, seeds, **cfg.data)
    manifest.outputs = ["ablation.json"] + ["seed_{}/".format(s) for s in seeds]
    write_manifest(out, manifest)

    if cfg.data:
        pair = load_domains(cfg)

        def data(seed):
            return pair
    else:
        data = synthetic_data(cfg.shift)
    table = run_ablation(cfg.train, variants, data, seeds=seeds, directions=directions, keep_states=True)
    write_json(os.path.join(out, "ablation.json"), table.to_dict())

    for seed in seeds:
        seed_dir = os.path.join(out, "seed_{}".format(seed))
        seed_manifest = _manifest(args, cfg, [seed], **cfg.data)
        seed_manifest.outputs = []
        by_variant = {r.variant: r.state for r in table.rows if r.seed == seed and r.direction == "forward"}
        if "source_only" in by_variant and "full" in by_variant:
            seed_manifest.outputs = ["pca_before.csv", "pca_after.csv"]
        write_manifest(seed_dir, seed_manifest)
        if seed_manifest.outputs:
            source, target = data(seed)
            write_pca(os.path.join(seed_dir, "pca_before.csv"), by_variant["source_only"], source, target)
            write_pca(os.path.join(seed_dir, "pca_after.csv"), by_variant["full"], source, target)
    for direction, per_variant in table.means().items():
        for variant, row in per_variant.items():
            logger.info("%s %s: mean target accuracy %s over %d runs", direction, variant, row["accuracy"],
                        row["runs"])
    return 0


def cmd_grad_check(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    if args.configs < 1:
        raise errors.UsageError("--configs must be at least 1")
    manifest = _manifest(args, cfg, [cfg.train.seed])
    manifest.outputs = ["grad_check.json"]
    write_manifest(out, manifest)
    weights = LossWeights(alpha=cfg.train.alpha, margin=cfg.train.margin, reduction=cfg.train.reduction)
    cases = check_gradient_contract(n_configs=args.configs, seed=cfg.train.seed, tol=args.tol, weights=weights)
    failed = [c for c in cases if not c.report.passed]
    write_json(os.path.join(out, "grad_check.json"), {"passed": not failed, "cases": [c.to_dict() for c in cases]})
    if failed:
        worst = max(failed, key=lambda c: c.report.max_rel_error)
        raise errors.NumericalError("{} of {} gradient checks failed; worst {} config {} rel error {:.3g}".format(
            len(failed), len(cases), worst.loss, worst.config, worst.report.max_rel_error))
    logger.info("all %d gradient checks passed", len(cases))
    return 0


def cmd_export_pca(args) -> int:
    out = _require_out(args)
    cfg, _ = _resolve_config(args)
    manifest = _manifest(args, cfg, None, checkpoint=args.checkpoint, source=args.source, target=args.target)
    manifest.outputs = ["pca.csv"]
    write_manifest(out, manifest)
    state = load_checkpoint(args.checkpoint)
    source, target = load_dataset(args.source), load_dataset(args.target)
    if source.domain != SOURCE or target.domain != TARGET:
        raise errors.DatasetError("--source must hold source bags and --target target bags")
    write_pca(os.path.join(out, "pca.csv"), state, source, target)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "export-pca": cmd_export_pca,
}


def _configure_logging(level: str) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def run_command(argv: Sequence[str]) -> int:
    try:
        args = build_parser().parse_args(list(argv))
        if args.command is None:
            raise errors.UsageError("a command is required: {}".format(", ".join(COMMANDS)))
        _configure_logging(args.log_level)
        return HANDLERS[args.command](args)
    except errors.UsageError as e:
        sys.stderr.write("error: {}\n".format(_one_line(e)))
        return 2
    except errors.BaseError as e:
        sys.stderr.write("error: {}\n".format(_one_line(e)))
        return 1
    except OSError as e:
        sys.stderr.write("error: {}\n".format(_one_line(e)))
        return 1


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)
