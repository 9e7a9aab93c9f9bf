"""
Two-stage training.

Stage 1 (``pretrain_source``) fits the source encoder and k-rank instance head on instance
labels and the aggregation tokens and bag heads on bag labels, early-stopping on bag-level
kappa of a held-out split. Stage 2 (``adapt_target``) trains only the target encoder (and the
domain discriminator) against frozen source components.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors
from omdalib.datamodel import SOURCE, TARGET, DomainDataset, ShiftConfig, generate_synthetic_domains, \
    oversample_indices, swap_domains
from omdalib.losses import LossWeights, TargetSwitches, bag_objective, instance_objective, loss_bag, \
    loss_disc, target_objective
from omdalib.metrics import AlignmentScore, EvalReport, alignment_score, evaluate_labels, group_by_class
from omdalib.model import (BAG_HEADS, DISCRIMINATOR, GROUPS, INSTANCE_HEAD, SHARED_GROUPS, SOURCE_ENCODER,
                           TARGET_ENCODER, TOKENS, ModelState, bag_logits, compute_prototypes, encode,
                           group_bytes, init_model_state, krank_decode_rows, predict_bag, predict_instances)
from omdalib.numerics import Adam, sigmoid
from omdalib.utils import config_hash, dataclass_to_dict, split_seed

logger = logging.getLogger(__name__)

STAGE_PRETRAIN = 1
STAGE_ADAPT = 2

VARIANTS = {
    "full": TargetSwitches(use_adv=True, use_shared_tokens=True, use_triplet=True),
    "no_triplet": TargetSwitches(use_adv=True, use_shared_tokens=True, use_triplet=False),
    "adv_only": TargetSwitches(use_adv=True, use_shared_tokens=False, use_triplet=False),
    "source_only": TargetSwitches(use_adv=False, use_shared_tokens=False, use_triplet=False),
}
DIRECTIONS = ("forward", "reverse")


@dataclass
class TrainConfig:
    d_in: Optional[int] = None
    k: Optional[int] = None
    d: int = 8
    hidden: List[int] = field(default_factory=lambda: [32])
    disc_hidden: int = 32
    # stage 1
    lr_encoder: float = 1e-3
    lr_instance_head: float = 1e-3
    lr_bag: float = 1e-3
    max_epochs: int = 1500
    patience: int = 100
    val_fraction: float = 0.2
    # stage 2
    lr_disc: float = 1e-3
    lr_target_encoder: float = 1e-4
    stage2_epochs: int = 150
    # rates for pre-trained image backbones, used when use_backbone_rates is set
    backbone_lr_encoder: float = 3e-6
    backbone_lr_bag: float = 1e-5
    backbone_lr_disc: float = 1e-4
    backbone_lr_target_encoder: float = 1e-6
    use_backbone_rates: bool = False
    batch_size: int = 16
    alpha: float = 0.01
    margin: float = 1.0
    reduction: str = "mean"
    seed: int = 0
    use_adv: bool = True
    use_shared_tokens: bool = True
    use_triplet: bool = True
    precision: str = "float64"
    log_every: int = 50

    def validate(self) -> None:
        positive = ("d", "disc_hidden", "lr_encoder", "lr_instance_head", "lr_bag", "lr_disc", "lr_target_encoder",
                    "backbone_lr_encoder", "backbone_lr_bag", "backbone_lr_disc", "backbone_lr_target_encoder", "max_epochs",
                    "stage2_epochs", "batch_size", "log_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise errors.ConfigError("must be positive", key="train." + name)
        if self.patience < 0:
            raise errors.ConfigError("must be non-negative", key="train.patience")
        if not 0.0 < self.val_fraction < 1.0:
            raise errors.ConfigError("must lie in (0, 1)", key="train.val_fraction")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise errors.ConfigError("needs at least one positive width", key="train.hidden")
        if self.alpha < 0:
            raise errors.ConfigError("must be non-negative", key="train.alpha")
        if self.margin < 0:
            raise errors.ConfigError("must be non-negative", key="train.margin")
        if self.reduction not in ("mean", "sum"):
            raise errors.ConfigError("must be 'mean' or 'sum'", key="train.reduction")
        if self.precision not in ("float64", "float32"):
            raise errors.ConfigError("must be 'float64' or 'float32'", key="train.precision")

    @property
    def switches(self) -> TargetSwitches:
        return TargetSwitches(use_adv=self.use_adv, use_shared_tokens=self.use_shared_tokens,
                              use_triplet=self.use_triplet)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, margin=self.margin, reduction=self.reduction)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def rates(self) -> Dict[str, float]:
        if self.use_backbone_rates:
            return {"encoder": self.backbone_lr_encoder, "instance_head": self.backbone_lr_encoder,
                    "bag": self.backbone_lr_bag, "disc": self.backbone_lr_disc,
                    "target_encoder": self.backbone_lr_target_encoder}
        return {"encoder": self.lr_encoder, "instance_head": self.lr_instance_head, "bag": self.lr_bag,
                "disc": self.lr_disc, "target_encoder": self.lr_target_encoder}

    def with_switches(self, switches: TargetSwitches) -> "TrainConfig":
        out = TrainConfig(**dataclass_to_dict(self))
        out.use_adv, out.use_shared_tokens, out.use_triplet = (switches.use_adv, switches.use_shared_tokens,
                                                               switches.use_triplet)
        return out

    def check_dataset(self, ds: DomainDataset) -> None:
        if self.d_in is not None and self.d_in != ds.d_in:
            raise errors.ConfigError("{} != dataset d_in {}".format(self.d_in, ds.d_in), key="train.d_in")
        if self.k is not None and self.k != ds.k:
            raise errors.ConfigError("{} != dataset K {}".format(self.k, ds.k), key="train.k")


@dataclass
class TrainLog:
    stage: int
    seed: int
    config_hash: str
    records: List[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    wall_clock: float = 0.0
    # groups whose bytes were compared before and after adaptation
    freeze_verified: Optional[List[str]] = None

    def append(self, record: dict) -> None:
        self.records.append(record)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "seed": self.seed, "config_hash": self.config_hash, "records": self.records,
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early, "wall_clock": self.wall_clock,
                "freeze_verified": self.freeze_verified}


def _bag_arrays(ds: DomainDataset, dtype) -> List[np.ndarray]:
    return [b.features.astype(dtype) for b in ds.bags]


def split_validation(ds: DomainDataset, fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    n = len(ds.bags)
    if n < 2:
        raise errors.TrainingError("need at least 2 source bags to hold out a validation split")
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    order = np.random.default_rng(split_seed(seed, 0)).permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _check_source(source_ds: DomainDataset) -> None:
    if source_ds.domain != SOURCE:
        raise errors.TrainingError("pre-training needs a source dataset, got {}".format(source_ds.domain))
    labels = source_ds.instance_labels()
    if any(y is None for y in labels):
        raise errors.TrainingError("every source instance must be labeled")
    present = set(labels)
    missing = [c for c in range(1, source_ds.k + 1) if c not in present]
    if missing:
        raise errors.TrainingError("source has no instances of class {}".format(missing), payload=missing)


def bag_level_predictions(state: ModelState, bags_x: Sequence[np.ndarray], domain: str) -> List[int]:
    encoder = state.encoder_for(domain)
    return [predict_bag(state, encode(encoder, x)) for x in bags_x]


def validate_bags(state: ModelState, bags_x: Sequence[np.ndarray], bag_y: Sequence[int],
                  k: int) -> Tuple[EvalReport, float]:
    """Bag-level report and mean bag k-rank loss of the source model on held-out bags."""
    g = state.groups
    rows = np.stack([bag_logits(g[TOKENS], g[BAG_HEADS], encode(g[SOURCE_ENCODER], x)) for x in bags_x])
    loss, _ = loss_bag(rows, bag_y, k)
    preds = [int(p) for p in krank_decode_rows(sigmoid(rows))]
    return evaluate_labels(bag_y, preds, k, level="bag"), loss


def selection_key(qwk: Optional[float], val_loss: float) -> Tuple[float, float]:
    """
    Early-stopping order: validation bag kappa first (undefined counts as -1), lower validation
    bag loss breaks ties.
    """
    return (-1.0 if qwk is None else qwk, -val_loss)


def pretrain_source(cfg: TrainConfig, source_ds: DomainDataset) -> Tuple[ModelState, TrainLog]:
    cfg.validate()
    cfg.check_dataset(source_ds)
    _check_source(source_ds)
    started = time.time()
    dtype = cfg.dtype
    rates = cfg.rates()
    state = init_model_state(source_ds.k, source_ds.d_in, cfg.d, cfg.hidden, cfg.disc_hidden, cfg.seed, dtype)
    log = TrainLog(stage=STAGE_PRETRAIN, seed=cfg.seed, config_hash=config_hash(dataclass_to_dict(cfg)))

    train_idx, val_idx = split_validation(source_ds, cfg.val_fraction, cfg.seed)
    train, val = source_ds.subset(train_idx), source_ds.subset(val_idx)
    bags_x = _bag_arrays(train, dtype)
    bag_y = train.bag_labels()
    inst_x = np.concatenate(bags_x, axis=0)
    inst_y = np.asarray(train.instance_labels())
    val_x = _bag_arrays(val, dtype)
    val_y = val.bag_labels()
    k = source_ds.k

    opt_enc = Adam(rates["encoder"])
    opt_head = Adam(rates["instance_head"])
    opt_tokens = Adam(rates["bag"])
    opt_bag_heads = Adam(rates["bag"])
    best_key, best_state, bad_epochs = (-math.inf, -math.inf), state.copy(), 0

    for epoch in range(1, cfg.max_epochs + 1):
        g = state.groups
        bag_order = oversample_indices(bag_y, split_seed(cfg.seed, STAGE_PRETRAIN, epoch, 0))
        inst_order = oversample_indices(inst_y.tolist(), split_seed(cfg.seed, STAGE_PRETRAIN, epoch, 1))
        n_steps = int(math.ceil(len(bag_order) / cfg.batch_size))
        inst_batch = int(math.ceil(len(inst_order) / n_steps))
        inst_loss = bag_loss = 0.0
        for step in range(n_steps):
            ib = inst_order[step * inst_batch:(step + 1) * inst_batch]
            if len(ib):
                value, grads = instance_objective(g[SOURCE_ENCODER], g[INSTANCE_HEAD], inst_x[ib], inst_y[ib], k,
                                                  cfg.reduction)
                g[SOURCE_ENCODER] = opt_enc.step(g[SOURCE_ENCODER], grads["encoder"])
                g[INSTANCE_HEAD] = opt_head.step(g[INSTANCE_HEAD], grads["head"])
                inst_loss += value
            bb = bag_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            embs = [encode(g[SOURCE_ENCODER], bags_x[i]) for i in bb]
            value, grads, _ = bag_objective(g[TOKENS], g[BAG_HEADS], embs, [bag_y[i] for i in bb], k, cfg.reduction)
            g[TOKENS] = opt_tokens.step(g[TOKENS], grads["tokens"])
            g[BAG_HEADS] = opt_bag_heads.step(g[BAG_HEADS], grads["bag_heads"])
            bag_loss += value

        report, val_loss = validate_bags(state, val_x, val_y, k)
        key = selection_key(report.qwk, val_loss)
        log.append({"epoch": epoch, "instance_loss": inst_loss / n_steps, "bag_loss": bag_loss / n_steps,
                    "val_qwk": report.qwk, "val_bag_loss": val_loss, "val_bag_accuracy": report.accuracy})
        if key > best_key:
            best_key, best_state, bad_epochs = key, state.copy(), 0
            log.best_epoch = epoch
        else:
            bad_epochs += 1
        if epoch % cfg.log_every == 0:
            logger.info("pretrain epoch %d: instance %.4f bag %.4f val kappa %s", epoch, inst_loss / n_steps,
                        bag_loss / n_steps, report.qwk)
        if bad_epochs > cfg.patience:
            log.stopped_early = True
            logger.info("early stop at epoch %d, best epoch %d (val kappa %.4f)", epoch, log.best_epoch, best_key[0])
            break

    best_state.groups[TARGET_ENCODER] = {n: a.copy() for n, a in best_state.groups[SOURCE_ENCODER].items()}
    log.wall_clock = time.time() - started
    return best_state, log


def _next_source_batch(cursor: dict, n_source: int, size: int, seed: int) -> List[int]:
    out = []
    while len(out) < size:
        if cursor["pos"] >= len(cursor["order"]):
            cursor["round"] += 1
            cursor["order"] = np.random.default_rng(split_seed(seed, STAGE_ADAPT, cursor["round"])).permutation(
                n_source).tolist()
            cursor["pos"] = 0
        take = min(size - len(out), len(cursor["order"]) - cursor["pos"])
        out.extend(cursor["order"][cursor["pos"]:cursor["pos"] + take])
        cursor["pos"] += take
    return out


def adapt_target(cfg: TrainConfig, state: ModelState, source_ds: DomainDataset,
                 target_ds: DomainDataset) -> Tuple[ModelState, TrainLog]:
    """
    Train the target encoder (initialised from the source encoder) against frozen source components.

    Every batch runs one discriminator step on ``loss_disc`` and one target-encoder step on
    ``L_bag + L_enc + alpha * L_triplet``; switches drop the corresponding terms.
    """
    cfg.validate()
    if target_ds.domain != TARGET:
        raise errors.TrainingError("adaptation needs a target dataset, got {}".format(target_ds.domain))
    if source_ds.k != target_ds.k or source_ds.d_in != target_ds.d_in:
        raise errors.TrainingError("source (K={}, d_in={}) and target (K={}, d_in={}) disagree".format(
            source_ds.k, source_ds.d_in, target_ds.k, target_ds.d_in))
    if state.k != target_ds.k or state.d_in != target_ds.d_in:
        raise errors.TrainingError("checkpoint (K={}, d_in={}) does not fit the data (K={}, d_in={})".format(
            state.k, state.d_in, target_ds.k, target_ds.d_in))
    missing = [b.bag_id for b in target_ds.bags if b.bag_label is None]
    if missing:
        raise errors.TrainingError("target bags without bag labels: {}".format(missing[:5]), payload=missing)
    started = time.time()
    dtype = cfg.dtype
    rates = cfg.rates()
    switches, weights = cfg.switches, cfg.weights
    k = target_ds.k

    state = state.copy()
    state.groups[TARGET_ENCODER] = {n: a.copy() for n, a in state.groups[SOURCE_ENCODER].items()}
    state.freeze(*SHARED_GROUPS)
    trainable = state.unfrozen(*GROUPS)
    frozen_before = {grp: group_bytes(state, grp) for grp in GROUPS if grp not in trainable}
    log = TrainLog(stage=STAGE_ADAPT, seed=cfg.seed, config_hash=config_hash(dataclass_to_dict(cfg)))

    g = state.groups
    prototypes = compute_prototypes(source_ds, g[SOURCE_ENCODER]) if switches.use_triplet else None
    source_embs = [encode(g[SOURCE_ENCODER], x) for x in _bag_arrays(source_ds, dtype)]
    target_x = _bag_arrays(target_ds, dtype)
    # only bag labels of the target are read here
    target_y = target_ds.bag_labels()

    opt_disc = Adam(rates["disc"])
    opt_target = Adam(rates["target_encoder"])
    cursor = {"order": [], "pos": 0, "round": 0}

    for epoch in range(1, cfg.stage2_epochs + 1):
        order = oversample_indices(target_y, split_seed(cfg.seed, STAGE_ADAPT, epoch))
        n_steps = int(math.ceil(len(order) / cfg.batch_size))
        sums = {"disc": 0.0, "total": 0.0, "bag": 0.0, "enc": 0.0, "triplet": 0.0, "anchors": 0}
        for step in range(n_steps):
            tb = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch_x = [target_x[i] for i in tb]
            batch_y = [target_y[i] for i in tb]
            if switches.use_adv:
                sb = _next_source_batch(cursor, len(source_embs), len(tb), cfg.seed)
                es = np.concatenate([source_embs[i] for i in sb], axis=0)
                et = encode(g[TARGET_ENCODER], np.concatenate(batch_x, axis=0))
                value, out = loss_disc(es, et, g[DISCRIMINATOR], weights.reduction)
                g[DISCRIMINATOR] = opt_disc.step(g[DISCRIMINATOR], out["discriminator"])
                sums["disc"] += value
            if switches.any:
                frozen = {INSTANCE_HEAD: g[INSTANCE_HEAD], TOKENS: g[TOKENS], BAG_HEADS: g[BAG_HEADS],
                          DISCRIMINATOR: g[DISCRIMINATOR]}
                breakdown, grads = target_objective(g[TARGET_ENCODER], frozen, prototypes, batch_x, batch_y, k,
                                                    weights, switches)
                g[TARGET_ENCODER] = opt_target.step(g[TARGET_ENCODER], grads)
                sums["total"] += breakdown.total
                sums["bag"] += breakdown.bag
                sums["enc"] += breakdown.enc
                sums["triplet"] += breakdown.triplet
                sums["anchors"] += breakdown.anchors
        record = {"epoch": epoch}
        record.update({key: (v / n_steps if key != "anchors" else v) for key, v in sums.items()})
        log.append(record)
        if epoch % cfg.log_every == 0:
            logger.info("adapt epoch %d: disc %.4f total %.4f (bag %.4f enc %.4f triplet %.4f, %d anchors)", epoch,
                        record["disc"], record["total"], record["bag"], record["enc"], record["triplet"],
                        record["anchors"])

    changed = [grp for grp, before in frozen_before.items() if group_bytes(state, grp) != before]
    if changed:
        raise errors.FreezeViolation("frozen group(s) {} changed during adaptation".format(changed), payload=changed)
    log.freeze_verified = sorted(frozen_before)
    log.best_epoch = cfg.stage2_epochs
    log.wall_clock = time.time() - started
    return state, log


@dataclass
class DomainEvaluation:
    domain: str
    instance: Optional[EvalReport]
    bag: EvalReport
    embeddings: np.ndarray
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"domain": self.domain, "instance": None if self.instance is None else self.instance.to_dict(),
                "bag": self.bag.to_dict()}


def evaluate_model(state: ModelState, ds: DomainDataset) -> DomainEvaluation:
    """
    Instance predictions go through the frozen instance head on the dataset's domain encoder;
    bag predictions through the frozen tokens and heads. Instance metrics need every instance labeled.
    """
    if state.k != ds.k or state.d_in != ds.d_in:
        raise errors.ValidationError("checkpoint (K={}, d_in={}) does not fit the data (K={}, d_in={})".format(
            state.k, state.d_in, ds.k, ds.d_in))
    x = ds.instance_matrix()
    emb, pred = predict_instances(state, x, ds.domain)
    labels = ds.instance_labels()
    instance = None
    if all(y is not None for y in labels):
        instance = evaluate_labels(labels, pred, ds.k, level="instance")
    bag_pred = bag_level_predictions(state, [b.features for b in ds.bags], ds.domain)
    bag = evaluate_labels(ds.bag_labels(), bag_pred, ds.k, level="bag")
    return DomainEvaluation(domain=ds.domain, instance=instance, bag=bag, embeddings=emb, predictions=pred)


def domain_alignment(state: ModelState, source_ds: DomainDataset, target_ds: DomainDataset) -> AlignmentScore:
    """Class-wise centroid distance between source and target embeddings, grouped by ground-truth labels."""
    es = encode(state.groups[SOURCE_ENCODER], source_ds.instance_matrix())
    et = encode(state.groups[TARGET_ENCODER], target_ds.instance_matrix())
    t_labels = target_ds.instance_labels()
    if any(y is None for y in t_labels):
        raise errors.ValidationError("alignment needs ground-truth target labels")
    return alignment_score(group_by_class(es, source_ds.instance_labels()), group_by_class(et, t_labels))


@dataclass
class AblationRow:
    variant: str
    seed: int
    direction: str
    evaluation: DomainEvaluation
    alignment: AlignmentScore
    freeze_verified: bool
    state: Optional[ModelState] = None

    def to_dict(self) -> dict:
        ev = self.evaluation
        return {"variant": self.variant, "seed": self.seed, "direction": self.direction,
                "instance": ev.instance.to_dict() if ev.instance else None, "bag": ev.bag.to_dict(),
                "alignment": self.alignment.to_dict(), "freeze_verified": self.freeze_verified}


@dataclass
class AblationTable:
    rows: List[AblationRow]
    variants: List[str]
    seeds: List[int]
    directions: List[str]

    def means(self) -> Dict[str, Dict[str, dict]]:
        out = {}
        for direction in self.directions:
            out[direction] = {}
            for variant in self.variants:
                rows = [r for r in self.rows if r.variant == variant and r.direction == direction]
                inst = [r.evaluation.instance for r in rows if r.evaluation.instance is not None]
                kappas = [rep.qwk for rep in inst if rep.qwk is not None]
                out[direction][variant] = {
                    "accuracy": float(np.mean([rep.accuracy for rep in inst])) if inst else None,
                    "macro_f1": float(np.mean([rep.macro_f1 for rep in inst])) if inst else None,
                    "qwk": float(np.mean(kappas)) if kappas else None,
                    "alignment": float(np.mean([r.alignment.mean for r in rows])) if rows else None,
                    "runs": len(rows),
                }
        return out

    def to_dict(self) -> dict:
        return {"variants": self.variants, "seeds": self.seeds, "directions": self.directions,
                "rows": [r.to_dict() for r in self.rows], "means": self.means()}


DataFactory = Callable[[int], Tuple[DomainDataset, DomainDataset]]


def synthetic_data(shift: ShiftConfig) -> DataFactory:
    def factory(seed: int) -> Tuple[DomainDataset, DomainDataset]:
        cfg = ShiftConfig(**dataclass_to_dict(shift))
        cfg.seed = seed
        return generate_synthetic_domains(cfg)
    return factory


def run_ablation(cfg: TrainConfig, variants: Sequence[str], data: DataFactory, seeds: Sequence[int] = (0,),
                 directions: Sequence[str] = ("forward",), keep_states: bool = False) -> AblationTable:
    """
    One pre-trained state per (seed, direction) is shared by every variant; each row reports
    target-domain instance metrics of one variant.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise errors.ValidationError("unknown ablation variant(s): {}".format(unknown))
    bad_dirs = [d for d in directions if d not in DIRECTIONS]
    if bad_dirs:
        raise errors.ValidationError("unknown direction(s): {}".format(bad_dirs))
    ordered = [v for v in VARIANTS if v in variants]
    rows = []
    for seed in seeds:
        source, target = data(seed)
        for direction in directions:
            src, tgt = (source, target) if direction == "forward" else swap_domains(source, target)
            seeded = TrainConfig(**dataclass_to_dict(cfg))
            seeded.seed = seed
            pretrained, _ = pretrain_source(seeded, src)
            for variant in ordered:
                adapted, adapt_log = adapt_target(seeded.with_switches(VARIANTS[variant]), pretrained, src, tgt)
                rows.append(AblationRow(variant=variant, seed=seed, direction=direction,
                                        evaluation=evaluate_model(adapted, tgt),
                                        alignment=domain_alignment(adapted, src, tgt),
                                        freeze_verified=set(adapt_log.freeze_verified or ()) >= set(SHARED_GROUPS),
                                        state=adapted if keep_states else None))
                acc = rows[-1].evaluation.instance.accuracy if rows[-1].evaluation.instance else float("nan")
                logger.info("seed %d %s %s: target instance accuracy %.4f", seed, direction, variant, acc)
    return AblationTable(rows=rows, variants=ordered, seeds=list(seeds), directions=list(directions))
