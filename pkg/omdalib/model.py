"""
Model components and their forward semantics.

Parameter groups (all ``{name: ndarray}``):

- ``source_encoder`` / ``target_encoder``: tanh MLP ``d_in -> hidden... -> d``
- ``instance_head``: k-rank head, ``w`` (d,) shared weight and ``b`` (K-1,) thresholds
- ``tokens``: ``A`` (K-1, d), one aggregation token per rank task
- ``bag_heads``: ``V`` (K-1, d) and ``c`` (K-1,), one binary scorer per token
- ``discriminator``: tanh MLP ``d -> disc_hidden -> 1``
"""
import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from omdalib import errors
from omdalib.datamodel import DomainDataset, check_label
from omdalib.numerics import (DEFAULT_DTYPE, MlpCache, Params, clamp_probability, init_mlp, mlp_backward,
                              mlp_forward, mlp_sizes, sigmoid, softmax, PROB_FLOOR)
from omdalib.utils import canonical_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

SOURCE_ENCODER = "source_encoder"
TARGET_ENCODER = "target_encoder"
INSTANCE_HEAD = "instance_head"
TOKENS = "tokens"
BAG_HEADS = "bag_heads"
DISCRIMINATOR = "discriminator"
GROUPS = (SOURCE_ENCODER, TARGET_ENCODER, INSTANCE_HEAD, TOKENS, BAG_HEADS, DISCRIMINATOR)
# groups that stage 2 must never change
SHARED_GROUPS = (SOURCE_ENCODER, INSTANCE_HEAD, TOKENS, BAG_HEADS)


def krank_encode_label(y: int, k: int) -> np.ndarray:
    """Component ``r`` (0-based) is 1 iff ``y > r + 1``."""
    check_label(y, k)
    return (y > np.arange(1, k)).astype(np.float64)


def krank_decode(probabilities) -> int:
    p = np.asarray(probabilities, dtype=float)
    if p.ndim != 1:
        raise errors.ShapeError("expected one probability per rank, got shape {}".format(p.shape))
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise errors.ValidationError("rank probabilities must lie in [0, 1], got {}".format(p.tolist()))
    return 1 + int(np.count_nonzero(p > 0.5))


def krank_decode_rows(probabilities: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(probabilities)
    return 1 + np.count_nonzero(p > 0.5, axis=1)


def instance_logits(head: Params, e: np.ndarray) -> np.ndarray:
    w, b = head["w"], head["b"]
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != w.shape[0]:
        raise errors.ShapeError("instance head expects embedding width {}, got {}".format(w.shape[0], e.shape[-1]))
    if e.ndim == 1:
        return float(e @ w) + b
    return (e @ w)[:, None] + b[None, :]


def bag_attention(token: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.atleast_2d(embeddings)
    if embeddings.shape[0] == 0:
        raise errors.ValidationError("attention over an empty bag")
    if embeddings.shape[1] != token.shape[0]:
        raise errors.ShapeError("token width {} != embedding width {}".format(token.shape[0], embeddings.shape[1]))
    return softmax(embeddings @ token / np.sqrt(token.shape[0]))


def bag_embedding(weights: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    embeddings = np.atleast_2d(embeddings)
    if weights.shape != (embeddings.shape[0],):
        raise errors.ShapeError("{} attention weights for {} instances".format(weights.shape[0], embeddings.shape[0]))
    return weights @ embeddings


@dataclass
class BagCache:
    embeddings: np.ndarray
    weights: np.ndarray  # (n, K-1), column r is the attention of token r
    pooled: np.ndarray   # (K-1, d)


def bag_forward(tokens: Params, bag_heads: Params, embeddings: np.ndarray) -> Tuple[np.ndarray, BagCache]:
    a, v, c = tokens["A"], bag_heads["V"], bag_heads["c"]
    if a.shape[0] != v.shape[0]:
        raise errors.ShapeError("{} tokens but {} bag heads".format(a.shape[0], v.shape[0]))
    e = np.atleast_2d(embeddings)
    if e.shape[0] == 0:
        raise errors.ValidationError("attention over an empty bag")
    if e.shape[1] != a.shape[1]:
        raise errors.ShapeError("token width {} != embedding width {}".format(a.shape[1], e.shape[1]))
    weights = softmax(e @ a.T / np.sqrt(a.shape[1]), axis=0)
    pooled = weights.T @ e
    logits = np.sum(v * pooled, axis=1) + c
    return logits, BagCache(embeddings=e, weights=weights, pooled=pooled)


def bag_backward(tokens: Params, bag_heads: Params, cache: BagCache,
                 grad_logits: np.ndarray) -> Tuple[Params, Params, np.ndarray]:
    """:return: (token grads, bag-head grads, gradient w.r.t. the instance embeddings)"""
    a, v = tokens["A"], bag_heads["V"]
    scale = 1.0 / np.sqrt(a.shape[1])
    g = np.asarray(grad_logits, dtype=float)
    d_v = g[:, None] * cache.pooled
    d_pooled = g[:, None] * v
    d_weights = cache.embeddings @ d_pooled.T
    d_e = cache.weights @ d_pooled
    w = cache.weights
    d_scores = w * (d_weights - np.sum(w * d_weights, axis=0, keepdims=True))
    d_e = d_e + scale * d_scores @ a
    d_a = scale * d_scores.T @ cache.embeddings
    return {"A": d_a}, {"V": d_v, "c": g.copy()}, d_e


def bag_logits(tokens: Params, bag_heads: Params, embeddings: np.ndarray) -> np.ndarray:
    logits, _ = bag_forward(tokens, bag_heads, embeddings)
    return logits


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (K, d); row k-1 is the prototype of class k
    counts: np.ndarray      # (K,)

    def get(self, k: int) -> np.ndarray:
        if not 1 <= k <= len(self.counts) or self.counts[k - 1] < 1:
            raise errors.ValidationError("no prototype for class {}".format(k))
        return self.prototypes[k - 1]


def compute_prototypes(source_ds: DomainDataset, source_encoder: Params) -> PrototypeSet:
    labels = source_ds.instance_labels()
    if any(y is None for y in labels):
        raise errors.TrainingError("prototypes need every source instance labeled")
    labels = np.asarray(labels)
    emb = encode(source_encoder, source_ds.instance_matrix())
    k = source_ds.k
    counts = np.bincount(labels - 1, minlength=k)
    missing = [c + 1 for c in range(k) if counts[c] == 0]
    if missing:
        raise errors.TrainingError("source has no instances of class {}".format(missing), payload=missing)
    protos = np.zeros((k, emb.shape[1]))
    for c in range(k):
        protos[c] = emb[labels == c + 1].mean(axis=0)
    return PrototypeSet(prototypes=protos, counts=counts)


def encode(encoder: Params, x: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(encoder, x)
    return out


def discriminator_forward(d_params: Params, embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray, MlpCache]:
    """:return: (clamped probabilities, mask of unclamped entries, MLP cache)"""
    z, cache = mlp_forward(d_params, np.atleast_2d(embeddings))
    raw = sigmoid(z[:, 0])
    p = clamp_probability(raw)
    live = (raw > PROB_FLOOR) & (raw < 1.0 - PROB_FLOOR)
    return p, live, cache


def discriminator_backward(d_params: Params, probs: np.ndarray, live: np.ndarray, cache: MlpCache,
                           grad_probs: np.ndarray) -> Tuple[Params, np.ndarray]:
    grad_z = np.where(live, grad_probs * probs * (1.0 - probs), 0.0)
    return mlp_backward(d_params, cache, grad_z[:, None])


def discriminate(d_params: Params, e: np.ndarray) -> float:
    e = np.asarray(e, dtype=float)
    if e.ndim != 1:
        raise errors.ShapeError("discriminate takes one embedding, got shape {}".format(e.shape))
    p, _, _ = discriminator_forward(d_params, e)
    return float(p[0])


@dataclass
class ModelState:
    k: int
    d_in: int
    d: int
    hidden: List[int]
    disc_hidden: int
    groups: Dict[str, Params]
    frozen: Dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def unfrozen(self, *names: str) -> Dict[str, Params]:
        return {g: self.groups[g] for g in names if not self.frozen.get(g, False)}

    def freeze(self, *names: str) -> None:
        for g in names:
            self.frozen[g] = True

    def encoder_for(self, domain: str) -> Params:
        return self.groups[SOURCE_ENCODER if domain == "source" else TARGET_ENCODER]


def init_model_state(k: int, d_in: int, d: int, hidden: List[int], disc_hidden: int, seed: int,
                     dtype=DEFAULT_DTYPE) -> ModelState:
    if k < 2:
        raise errors.ValidationError("K must be at least 2, got {}".format(k))
    rng = np.random.default_rng(seed)
    source_encoder = init_mlp([d_in] + list(hidden) + [d], rng, dtype)
    limit = np.sqrt(6.0 / (d + 1))
    head = {"w": rng.uniform(-limit, limit, size=d).astype(dtype), "b": np.zeros(k - 1, dtype=dtype)}
    limit = np.sqrt(6.0 / (d + k - 1))
    tokens = {"A": rng.uniform(-limit, limit, size=(k - 1, d)).astype(dtype)}
    bag_heads = {"V": rng.uniform(-limit, limit, size=(k - 1, d)).astype(dtype), "c": np.zeros(k - 1, dtype=dtype)}
    disc = init_mlp([d, disc_hidden, 1], rng, dtype)
    groups = {
        SOURCE_ENCODER: source_encoder,
        TARGET_ENCODER: copy.deepcopy(source_encoder),
        INSTANCE_HEAD: head,
        TOKENS: tokens,
        BAG_HEADS: bag_heads,
        DISCRIMINATOR: disc,
    }
    return ModelState(k=k, d_in=d_in, d=d, hidden=list(hidden), disc_hidden=disc_hidden, groups=groups)


def predict_instances(state: ModelState, x: np.ndarray, domain: str) -> Tuple[np.ndarray, np.ndarray]:
    """:return: (embeddings, predicted labels 1..K) through the frozen instance head"""
    emb = encode(state.encoder_for(domain), x)
    probs = sigmoid(instance_logits(state.groups[INSTANCE_HEAD], emb))
    return emb, krank_decode_rows(probs)


def predict_bag(state: ModelState, embeddings: np.ndarray) -> int:
    logits = bag_logits(state.groups[TOKENS], state.groups[BAG_HEADS], embeddings)
    return krank_decode(sigmoid(logits))


def _group_to_json(params: Params) -> dict:
    return {name: {"shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}
            for name, arr in sorted(params.items())}


def state_to_dict(state: ModelState) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "k": state.k,
        "d_in": state.d_in,
        "d": state.d,
        "hidden": list(state.hidden),
        "disc_hidden": state.disc_hidden,
        "frozen": {g: bool(state.frozen.get(g, False)) for g in GROUPS},
        "groups": {g: _group_to_json(state.groups[g]) for g in GROUPS},
    }


def state_from_dict(obj: dict) -> ModelState:
    version = obj.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise errors.ValidationError("unsupported checkpoint format_version {!r}".format(version))
    try:
        groups = {}
        for g in GROUPS:
            groups[g] = {name: np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
                         for name, rec in obj["groups"][g].items()}
        state = ModelState(k=int(obj["k"]), d_in=int(obj["d_in"]), d=int(obj["d"]), hidden=list(obj["hidden"]),
                           disc_hidden=int(obj["disc_hidden"]), groups=groups,
                           frozen={g: bool(obj["frozen"].get(g, False)) for g in GROUPS})
    except (KeyError, TypeError, ValueError) as e:
        raise errors.ValidationError("malformed checkpoint: {}".format(e)) from e
    _check_state_shapes(state)
    return state


def _check_state_shapes(state: ModelState) -> None:
    k1, d = state.k - 1, state.d
    expected = {
        (INSTANCE_HEAD, "w"): (d,), (INSTANCE_HEAD, "b"): (k1,), (TOKENS, "A"): (k1, d),
        (BAG_HEADS, "V"): (k1, d), (BAG_HEADS, "c"): (k1,),
    }
    for (g, name), shape in expected.items():
        if state.groups[g][name].shape != shape:
            raise errors.ShapeError("{}.{} has shape {}, expected {}".format(
                g, name, state.groups[g][name].shape, shape))
    layouts = {SOURCE_ENCODER: [state.d_in] + list(state.hidden) + [d],
               TARGET_ENCODER: [state.d_in] + list(state.hidden) + [d],
               DISCRIMINATOR: [d, state.disc_hidden, 1]}
    for g, sizes in layouts.items():
        found = mlp_sizes(state.groups[g])
        if found != sizes:
            raise errors.ShapeError("{} layer widths {} != expected {}".format(g, found, sizes))


def group_bytes(state: ModelState, group: str) -> bytes:
    """Canonical serialization of one parameter group; equal bytes mean equal parameters."""
    return canonical_json(_group_to_json(state.groups[group])).encode("utf-8")


def save_checkpoint(state: ModelState, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(canonical_json(state_to_dict(state)))
        fp.write("\n")


def load_checkpoint(path: str) -> ModelState:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            obj = json.load(fp)
    except OSError as e:
        raise errors.ValidationError("{}: cannot read checkpoint: {}".format(path, e)) from e
    except ValueError as e:
        raise errors.ValidationError("{}: not a JSON checkpoint: {}".format(path, e)) from e
    return state_from_dict(obj)
