"""
Training objectives with hand-derived gradients.

Primitive losses return ``(value, gradient w.r.t. their inputs)``. The ``*_objective``
functions compose them with the model forward passes and return gradients keyed by
parameter group, which is what the trainers and ``check_gradient_contract`` consume.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors
from omdalib.model import (PrototypeSet, bag_backward, bag_forward, discriminator_backward, discriminator_forward,
                           instance_logits, krank_decode_rows, krank_encode_label)
from omdalib.numerics import (GradCheckReport, Params, PROB_FLOOR, clamp_probability, flatten_groups, grad_check,
                              init_mlp, mlp_backward, mlp_forward, sigmoid, unflatten_groups)

logger = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")


@dataclass
class LossWeights:
    alpha: float = 0.01
    margin: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.alpha < 0:
            raise errors.ValidationError("alpha must be non-negative, got {}".format(self.alpha))
        if self.margin < 0:
            raise errors.ValidationError("margin must be non-negative, got {}".format(self.margin))
        if self.reduction not in REDUCTIONS:
            raise errors.ValidationError("reduction must be one of {}, got {!r}".format(REDUCTIONS, self.reduction))


@dataclass(frozen=True)
class TripletGate:
    bag_index: int
    instance_index: int
    bag_label: int
    predicted: int


def _denominator(n: int, reduction: str) -> float:
    if reduction not in REDUCTIONS:
        raise errors.ValidationError("unknown reduction {!r}".format(reduction))
    return float(n) if reduction == "mean" else 1.0


def bce_with_logits(logits: np.ndarray, targets: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    if z.size == 0:
        raise errors.ValidationError("empty batch")
    if z.shape != t.shape:
        raise errors.ShapeError("logits {} and targets {} differ in shape".format(z.shape, t.shape))
    if np.any((t != 0) & (t != 1)):
        raise errors.ValidationError("targets must be binary")
    raw = sigmoid(z)
    p = clamp_probability(raw)
    live = (raw > PROB_FLOOR) & (raw < 1.0 - PROB_FLOOR)
    denom = _denominator(z.size, reduction)
    value = float(-np.sum(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)) / denom)
    grad = np.where(live, raw - t, 0.0) / denom
    return value, grad


def loss_instance_krank(logit_rows: np.ndarray, target_rows: np.ndarray,
                        reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy over instances and rank tasks."""
    return bce_with_logits(logit_rows, target_rows, reduction)


def krank_targets(labels: Sequence[int], k: int) -> np.ndarray:
    if len(labels) == 0:
        raise errors.ValidationError("empty batch")
    return np.stack([krank_encode_label(int(y), k) for y in labels])


def loss_bag(bag_logit_rows: np.ndarray, bag_labels: Sequence[int], k: int,
             reduction: str = "mean") -> Tuple[float, np.ndarray]:
    return bce_with_logits(bag_logit_rows, krank_targets(bag_labels, k), reduction)


def loss_disc(source_embeddings: np.ndarray, target_embeddings: np.ndarray, d_params: Params,
              reduction: str = "mean") -> Tuple[float, Dict[str, object]]:
    """
    ``-sum log d(e_s) - sum log(1 - d(e_t))``, divided by ``n_s + n_t`` under the mean reduction.

    :return: (value, {"discriminator": grads, "source": d/d e_s, "target": d/d e_t})
    """
    es, et = np.atleast_2d(source_embeddings), np.atleast_2d(target_embeddings)
    if es.shape[0] == 0 or et.shape[0] == 0:
        raise errors.ValidationError("loss_disc needs both source and target embeddings")
    denom = _denominator(es.shape[0] + et.shape[0], reduction)
    ps, live_s, cache_s = discriminator_forward(d_params, es)
    pt, live_t, cache_t = discriminator_forward(d_params, et)
    value = float((-np.sum(np.log(ps)) - np.sum(np.log(1.0 - pt))) / denom)
    g_s, d_es = discriminator_backward(d_params, ps, live_s, cache_s, -1.0 / ps / denom)
    g_t, d_et = discriminator_backward(d_params, pt, live_t, cache_t, 1.0 / (1.0 - pt) / denom)
    grads = {name: g_s[name] + g_t[name] for name in g_s}
    return value, {"discriminator": grads, "source": d_es, "target": d_et}


def loss_enc(target_embeddings: np.ndarray, d_params: Params,
             reduction: str = "mean") -> Tuple[float, Dict[str, object]]:
    et = np.atleast_2d(target_embeddings)
    if et.shape[0] == 0:
        raise errors.ValidationError("loss_enc needs target embeddings")
    denom = _denominator(et.shape[0], reduction)
    pt, live, cache = discriminator_forward(d_params, et)
    value = float(-np.sum(np.log(pt)) / denom)
    grads, d_et = discriminator_backward(d_params, pt, live, cache, -1.0 / pt / denom)
    return value, {"discriminator": grads, "target": d_et}


def select_triplet_anchors(bag_label: int, predicted_labels: Sequence[int], k: int,
                           bag_index: int = 0) -> List[TripletGate]:
    """Instances predicted more severe than their bag label, in bags whose label is below K."""
    if bag_label > k - 1:
        return []
    return [TripletGate(bag_index=bag_index, instance_index=j, bag_label=int(bag_label), predicted=int(p))
            for j, p in enumerate(predicted_labels) if p > bag_label]


def loss_triplet(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, margin: float,
                 reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """``max(|e - p+| - |e - p-| + margin, 0)`` averaged over anchors; 0 for no anchors."""
    if margin < 0:
        raise errors.ValidationError("margin must be non-negative, got {}".format(margin))
    e = np.asarray(anchors, dtype=float)
    if e.size == 0:
        width = e.shape[1] if e.ndim == 2 else 0
        return 0.0, np.zeros((0, width))
    e = np.atleast_2d(e)
    pos, neg = np.atleast_2d(positives), np.atleast_2d(negatives)
    if pos.shape != e.shape or neg.shape != e.shape:
        raise errors.ShapeError("anchors {}, positives {}, negatives {} differ".format(e.shape, pos.shape, neg.shape))
    diff_p, diff_n = e - pos, e - neg
    dist_p = np.linalg.norm(diff_p, axis=1)
    dist_n = np.linalg.norm(diff_n, axis=1)
    hinge = dist_p - dist_n + margin
    active = hinge > 0
    denom = _denominator(e.shape[0], reduction)
    value = float(np.sum(np.where(active, hinge, 0.0)) / denom)
    # zero-length differences take the zero subgradient
    unit_p = np.divide(diff_p, dist_p[:, None], out=np.zeros_like(diff_p), where=dist_p[:, None] > 0)
    unit_n = np.divide(diff_n, dist_n[:, None], out=np.zeros_like(diff_n), where=dist_n[:, None] > 0)
    grad = np.where(active[:, None], unit_p - unit_n, 0.0) / denom
    return value, grad


def loss_target_total(l_bag: float, l_enc: float, l_triplet: float, weights: LossWeights) -> float:
    return l_bag + l_enc + weights.alpha * l_triplet


def instance_objective(encoder: Params, head: Params, x: np.ndarray, labels: Sequence[int], k: int,
                       reduction: str = "mean") -> Tuple[float, Dict[str, Params]]:
    """k-rank instance loss through encoder and instance head; grads keyed ``encoder`` / ``head``."""
    emb, cache = mlp_forward(encoder, np.atleast_2d(x))
    logits = instance_logits(head, emb)
    value, g = loss_instance_krank(logits, krank_targets(labels, k), reduction)
    g_rows = g.sum(axis=1)
    head_grads = {"w": emb.T @ g_rows, "b": g.sum(axis=0)}
    enc_grads, _ = mlp_backward(encoder, cache, g_rows[:, None] * head["w"][None, :])
    return value, {"encoder": enc_grads, "head": head_grads}


def bag_objective(tokens: Params, bag_heads: Params, bag_embeddings: Sequence[np.ndarray],
                  bag_labels: Sequence[int], k: int,
                  reduction: str = "mean") -> Tuple[float, Dict[str, Params], List[np.ndarray]]:
    """
    Bag k-rank loss over token-pooled bag embeddings.

    :return: (value, {"tokens": ..., "bag_heads": ...}, gradient per bag w.r.t. its instance embeddings)
    """
    if len(bag_embeddings) == 0:
        raise errors.ValidationError("empty batch")
    forwards = [bag_forward(tokens, bag_heads, e) for e in bag_embeddings]
    rows = np.stack([logits for logits, _ in forwards])
    value, g = loss_bag(rows, bag_labels, k, reduction)
    d_tokens = {"A": np.zeros_like(tokens["A"])}
    d_heads = {"V": np.zeros_like(bag_heads["V"]), "c": np.zeros_like(bag_heads["c"])}
    d_embs = []
    for (_, cache), g_row in zip(forwards, g):
        gt, gh, de = bag_backward(tokens, bag_heads, cache, g_row)
        d_tokens["A"] += gt["A"]
        d_heads["V"] += gh["V"]
        d_heads["c"] += gh["c"]
        d_embs.append(de)
    return value, {"tokens": d_tokens, "bag_heads": d_heads}, d_embs


def triplet_gates_for_batch(head: Params, bag_embeddings: Sequence[np.ndarray], bag_labels: Sequence[int],
                            k: int) -> List[TripletGate]:
    """Predictions come from the frozen instance head applied to the current embeddings."""
    gates = []
    for i, (emb, y) in enumerate(zip(bag_embeddings, bag_labels)):
        pred = krank_decode_rows(sigmoid(instance_logits(head, np.atleast_2d(emb))))
        gates.extend(select_triplet_anchors(int(y), pred, k, bag_index=i))
    return gates


@dataclass
class TargetSwitches:
    use_adv: bool = True
    use_shared_tokens: bool = True
    use_triplet: bool = True

    @property
    def any(self) -> bool:
        return self.use_adv or self.use_shared_tokens or self.use_triplet


@dataclass
class TargetLossBreakdown:
    total: float
    bag: float
    enc: float
    triplet: float
    anchors: int


def target_objective(target_encoder: Params, frozen: Dict[str, Params], prototypes: Optional[PrototypeSet],
                     bags_x: Sequence[np.ndarray], bag_labels: Sequence[int], k: int, weights: LossWeights,
                     switches: TargetSwitches) -> Tuple[TargetLossBreakdown, Params]:
    """
    ``L_bag + L_enc + alpha * L_triplet`` on a batch of target bags, gradient w.r.t. the target encoder only.

    :param frozen: ``instance_head``, ``tokens``, ``bag_heads`` and ``discriminator`` parameter groups
    """
    if len(bags_x) == 0:
        raise errors.ValidationError("empty batch")
    sizes = [len(x) for x in bags_x]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    emb, cache = mlp_forward(target_encoder, np.concatenate([np.atleast_2d(x) for x in bags_x], axis=0))
    bag_embs = [emb[offsets[i]:offsets[i + 1]] for i in range(len(sizes))]
    d_emb = np.zeros_like(emb)
    l_bag = l_enc = l_trip = 0.0
    n_anchors = 0
    if switches.use_shared_tokens:
        l_bag, _, d_bags = bag_objective(frozen["tokens"], frozen["bag_heads"], bag_embs, bag_labels, k,
                                         weights.reduction)
        for i, de in enumerate(d_bags):
            d_emb[offsets[i]:offsets[i + 1]] += de
    if switches.use_adv:
        l_enc, g = loss_enc(emb, frozen["discriminator"], weights.reduction)
        d_emb += g["target"]
    if switches.use_triplet:
        if prototypes is None:
            raise errors.TrainingError("triplet loss needs source prototypes")
        gates = triplet_gates_for_batch(frozen["instance_head"], bag_embs, bag_labels, k)
        n_anchors = len(gates)
        if gates:
            rows = np.asarray([offsets[gate.bag_index] + gate.instance_index for gate in gates])
            pos = np.stack([prototypes.get(gate.bag_label) for gate in gates])
            neg = np.stack([prototypes.get(gate.predicted) for gate in gates])
            l_trip, g_anchor = loss_triplet(emb[rows], pos, neg, weights.margin, weights.reduction)
            np.add.at(d_emb, rows, weights.alpha * g_anchor)
    total = loss_target_total(l_bag, l_enc, l_trip, weights)
    grads, _ = mlp_backward(target_encoder, cache, d_emb)
    return TargetLossBreakdown(total=total, bag=l_bag, enc=l_enc, triplet=l_trip, anchors=n_anchors), grads


# --- gradient contract -------------------------------------------------------------------------

@dataclass
class ContractCase:
    loss: str
    config: int
    report: GradCheckReport

    def to_dict(self) -> dict:
        out = {"loss": self.loss, "config": self.config}
        out.update(self.report.to_dict())
        return out


CONTRACT_LOSSES = ("loss_instance_krank", "loss_bag", "loss_disc", "loss_enc", "loss_triplet", "loss_target_total")


def _random_setup(rng: np.random.Generator) -> dict:
    d_in = int(rng.integers(2, 9))
    d = int(rng.integers(2, 7))
    k = int(rng.choice([3, 4]))
    hidden = int(rng.integers(2, 6))
    n_bags = int(rng.integers(1, 5))
    bags_x = [rng.standard_normal((int(rng.integers(1, 6)), d_in)) for _ in range(n_bags)]
    labels = [[int(v) for v in rng.integers(1, k + 1, size=len(x))] for x in bags_x]
    return {
        "d_in": d_in, "d": d, "k": k,
        "encoder": init_mlp([d_in, hidden, d], rng),
        "source_encoder": init_mlp([d_in, hidden, d], rng),
        "head": {"w": rng.standard_normal(d), "b": rng.standard_normal(k - 1)},
        "tokens": {"A": rng.standard_normal((k - 1, d))},
        "bag_heads": {"V": rng.standard_normal((k - 1, d)), "c": rng.standard_normal(k - 1)},
        "discriminator": init_mlp([d, 4, 1], rng),
        "bags_x": bags_x,
        "instance_labels": labels,
        "bag_labels": [max(lab) for lab in labels],
        "prototypes": PrototypeSet(prototypes=rng.standard_normal((k, d)) * 2.0, counts=np.ones(k, dtype=int)),
    }


def _triplet_setup(rng: np.random.Generator, h: float, attempts: int = 200) -> dict:
    """A configuration with at least one anchor, every hinge and every gating logit at least 10*h from its kink."""
    for _ in range(attempts):
        s = _random_setup(rng)
        k = s["k"]
        # bias thresholds upward so over-severe predictions (anchors) are common
        s["head"]["b"] = np.abs(s["head"]["b"]) + 1.0
        s["bag_labels"] = [int(rng.integers(1, k)) for _ in s["bags_x"]]
        emb = [mlp_forward(s["encoder"], x)[0] for x in s["bags_x"]]
        logits = np.concatenate([instance_logits(s["head"], e) for e in emb])
        if np.min(np.abs(logits)) < 1e3 * h:
            continue
        gates = triplet_gates_for_batch(s["head"], emb, s["bag_labels"], k)
        if not gates:
            continue
        ok = True
        for gate in gates:
            e = emb[gate.bag_index][gate.instance_index]
            dp = np.linalg.norm(e - s["prototypes"].get(gate.bag_label))
            dn = np.linalg.norm(e - s["prototypes"].get(gate.predicted))
            if abs(dp - dn + 1.0) < 10 * h or min(dp, dn) < 10 * h:
                ok = False
                break
        if ok:
            s["gates"] = gates
            return s
    raise errors.NumericalError("could not sample a triplet configuration away from the hinge")


def _contract_fn(name: str, s: dict, weights: LossWeights):
    k = s["k"]
    if name == "loss_instance_krank":
        x = np.concatenate(s["bags_x"])
        labels = [y for lab in s["instance_labels"] for y in lab]
        params = {"encoder": s["encoder"], "head": s["head"]}

        def fn(flat):
            g = unflatten_groups(flat)
            v, grads = instance_objective(g["encoder"], g["head"], x, labels, k, weights.reduction)
            return v, flatten_groups(grads)
        return fn, flatten_groups(params)

    if name == "loss_bag":
        params = {"encoder": s["encoder"], "tokens": s["tokens"], "bag_heads": s["bag_heads"]}

        def fn(flat):
            g = unflatten_groups(flat)
            outs = [mlp_forward(g["encoder"], x) for x in s["bags_x"]]
            v, grads, d_embs = bag_objective(g["tokens"], g["bag_heads"], [o for o, _ in outs], s["bag_labels"], k,
                                             weights.reduction)
            enc = _zeros_like(g["encoder"])
            for (_, cache), de in zip(outs, d_embs):
                eg, _ = mlp_backward(g["encoder"], cache, de)
                for key in enc:
                    enc[key] += eg[key]
            grads["encoder"] = enc
            return v, flatten_groups(grads)
        return fn, flatten_groups(params)

    if name == "loss_disc":
        source_emb = np.concatenate([mlp_forward(s["source_encoder"], x)[0] for x in s["bags_x"]])
        x_t = np.concatenate(s["bags_x"])
        params = {"discriminator": s["discriminator"], "encoder": s["encoder"]}

        def fn(flat):
            g = unflatten_groups(flat)
            et, cache = mlp_forward(g["encoder"], x_t)
            v, out = loss_disc(source_emb, et, g["discriminator"], weights.reduction)
            enc, _ = mlp_backward(g["encoder"], cache, out["target"])
            return v, flatten_groups({"discriminator": out["discriminator"], "encoder": enc})
        return fn, flatten_groups(params)

    if name == "loss_enc":
        x_t = np.concatenate(s["bags_x"])
        params = {"discriminator": s["discriminator"], "encoder": s["encoder"]}

        def fn(flat):
            g = unflatten_groups(flat)
            et, cache = mlp_forward(g["encoder"], x_t)
            v, out = loss_enc(et, g["discriminator"], weights.reduction)
            enc, _ = mlp_backward(g["encoder"], cache, out["target"])
            return v, flatten_groups({"discriminator": out["discriminator"], "encoder": enc})
        return fn, flatten_groups(params)

    if name in ("loss_triplet", "loss_target_total"):
        switches = TargetSwitches(use_adv=name == "loss_target_total", use_shared_tokens=name == "loss_target_total",
                                  use_triplet=True)
        frozen = {"instance_head": s["head"], "tokens": s["tokens"], "bag_heads": s["bag_heads"],
                  "discriminator": s["discriminator"]}
        # alpha = 1 checks the triplet term at full weight
        w = weights if name == "loss_target_total" else LossWeights(alpha=1.0, margin=weights.margin,
                                                                    reduction=weights.reduction)

        def fn(flat):
            g = unflatten_groups(flat)
            out, grads = target_objective(g["encoder"], frozen, s["prototypes"], s["bags_x"], s["bag_labels"], k,
                                          w, switches)
            return out.total, flatten_groups({"encoder": grads})
        return fn, flatten_groups({"encoder": s["encoder"]})

    raise errors.ValidationError("unknown loss {!r}".format(name))


def _zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_gradient_contract(n_configs: int = 10, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                            losses: Sequence[str] = CONTRACT_LOSSES,
                            weights: Optional[LossWeights] = None) -> List[ContractCase]:
    """grad_check every loss, through every parameter group it touches, on random small configurations."""
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    cases = []
    for name in losses:
        if name not in CONTRACT_LOSSES:
            raise errors.ValidationError("unknown loss {!r}".format(name))
        for i in range(n_configs):
            setup = _triplet_setup(rng, h) if name in ("loss_triplet", "loss_target_total") else _random_setup(rng)
            fn, params = _contract_fn(name, setup, weights)
            report = grad_check(fn, params, h=h, tol=tol)
            logger.debug("%s config %d: max rel error %.3g at %s", name, i, report.max_rel_error,
                         report.worst_parameter)
            cases.append(ContractCase(loss=name, config=i, report=report))
    return cases
