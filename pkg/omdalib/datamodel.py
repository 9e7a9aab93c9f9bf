"""
Bags of instance feature vectors, the synthetic two-domain generator and dataset files.

Labels are ordinal severities ``1..K`` in memory; files use the clinical ``0..K-1`` convention.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


def check_label(y: int, k: int) -> int:
    if y is None or isinstance(y, bool) or not isinstance(y, (int, np.integer)) or not 1 <= y <= k:
        raise errors.LabelError("severity label {} outside 1..{}".format(y, k))
    return int(y)


def bag_label_from_instances(labels: Sequence[int]) -> int:
    if len(labels) == 0:
        raise errors.ValidationError("cannot derive a bag label from an empty list")
    return int(max(labels))


@dataclass(frozen=True, eq=False)
class Instance:
    id: str
    features: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Bag:
    bag_id: str
    domain: str
    instances: Tuple[Instance, ...]
    bag_label: int

    def __len__(self):
        return len(self.instances)

    @property
    def features(self) -> np.ndarray:
        return np.stack([inst.features for inst in self.instances])

    @property
    def instance_labels(self) -> List[Optional[int]]:
        return [inst.label for inst in self.instances]

    @property
    def fully_labeled(self) -> bool:
        return all(inst.label is not None for inst in self.instances)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain: str
    k: int
    d_in: int
    bags: Tuple[Bag, ...]

    def __post_init__(self):
        validate_dataset(self)

    def __len__(self):
        return len(self.bags)

    @property
    def n_instances(self) -> int:
        return sum(len(b) for b in self.bags)

    def instance_matrix(self) -> np.ndarray:
        return np.concatenate([b.features for b in self.bags], axis=0)

    def instance_labels(self) -> List[Optional[int]]:
        return [inst.label for b in self.bags for inst in b.instances]

    def bag_labels(self) -> List[int]:
        return [b.bag_label for b in self.bags]

    def subset(self, indices: Iterable[int]) -> "DomainDataset":
        return replace(self, bags=tuple(self.bags[i] for i in indices))


def validate_bag(bag: Bag, k: int, d_in: int) -> None:
    if bag.domain not in DOMAINS:
        raise errors.DatasetError("bag {}: unknown domain {!r}".format(bag.bag_id, bag.domain))
    if len(bag.instances) == 0:
        raise errors.DatasetError("bag {} has no instances".format(bag.bag_id))
    check_label(bag.bag_label, k)
    present = []
    for inst in bag.instances:
        if inst.features.shape != (d_in,):
            raise errors.DatasetError("bag {} instance {}: feature length {} != d_in {}".format(
                bag.bag_id, inst.id, inst.features.shape[0] if inst.features.ndim else 0, d_in))
        if not np.all(np.isfinite(inst.features)):
            raise errors.DatasetError("bag {} instance {}: non-finite features".format(bag.bag_id, inst.id))
        if inst.label is None:
            if bag.domain == SOURCE:
                raise errors.DatasetError("bag {} instance {}: source instances must be labeled".format(
                    bag.bag_id, inst.id))
            continue
        present.append(check_label(inst.label, k))
    if present:
        top = bag_label_from_instances(present)
        if len(present) == len(bag.instances) and top != bag.bag_label:
            raise errors.DatasetError("bag {}: bag_label {} != max instance label {}".format(
                bag.bag_id, bag.bag_label, top))
        if top > bag.bag_label:
            raise errors.DatasetError("bag {}: instance label {} exceeds bag_label {}".format(
                bag.bag_id, top, bag.bag_label))


def validate_dataset(ds: DomainDataset) -> None:
    if ds.domain not in DOMAINS:
        raise errors.DatasetError("unknown domain {!r}".format(ds.domain))
    if ds.k < 2:
        raise errors.DatasetError("K must be at least 2, got {}".format(ds.k))
    if ds.d_in < 1:
        raise errors.DatasetError("d_in must be positive, got {}".format(ds.d_in))
    for bag in ds.bags:
        if bag.domain != ds.domain:
            raise errors.DatasetError("bag {} is tagged {} inside a {} dataset".format(
                bag.bag_id, bag.domain, ds.domain))
        validate_bag(bag, ds.k, ds.d_in)


@dataclass
class ShiftConfig:
    d_in: int = 16
    k: int = 4
    spacing: float = 3.0
    spread: float = 1.0
    rotation: List[float] = field(default_factory=lambda: [0.8])
    translation: Optional[List[float]] = None
    translation_norm: float = 2.0
    scale: float = 1.2
    target_noise: float = 0.0
    bag_size: Tuple[int, int] = (4, 30)
    bag_label_mixture: Optional[List[float]] = None
    instance_mixture: Optional[List[float]] = None
    n_bags: int = 60
    seed: int = 0

    def validate(self) -> None:
        if self.d_in < 1:
            raise errors.ConfigError("must be positive", key="shift.d_in")
        if self.k < 2:
            raise errors.ConfigError("must be at least 2", key="shift.k")
        if not self.spacing > 0:
            raise errors.ConfigError("must be positive", key="shift.spacing")
        if not self.spread > 0:
            raise errors.ConfigError("must be positive", key="shift.spread")
        if not self.scale > 0:
            raise errors.ConfigError("must be positive", key="shift.scale")
        if self.target_noise < 0:
            raise errors.ConfigError("must be non-negative", key="shift.target_noise")
        lo, hi = self.bag_size
        if lo < 1 or hi < lo:
            raise errors.ConfigError("must satisfy 1 <= min <= max, got {}".format(list(self.bag_size)),
                                     key="shift.bag_size")
        if self.n_bags < 1:
            raise errors.ConfigError("at least one bag per domain is required", key="shift.n_bags")
        if 2 * len(self.rotation) > self.d_in:
            raise errors.ConfigError("{} rotation planes need d_in >= {}".format(
                len(self.rotation), 2 * len(self.rotation)), key="shift.rotation")
        if self.translation is not None and len(self.translation) != self.d_in:
            raise errors.ConfigError("length {} != d_in {}".format(len(self.translation), self.d_in),
                                     key="shift.translation")
        for name in ("bag_label_mixture", "instance_mixture"):
            mix = getattr(self, name)
            if mix is None:
                continue
            if len(mix) != self.k:
                raise errors.ConfigError("needs {} weights".format(self.k), key="shift." + name)
            if any(w < 0 for w in mix) or sum(mix) <= 0:
                raise errors.ConfigError("empty or negative mixture", key="shift." + name)
        if self.instance_mixture is not None and self.instance_mixture[0] <= 0:
            # bags of severity 1 may only draw class 1
            raise errors.ConfigError("class 1 needs positive weight", key="shift.instance_mixture")

    def centroids(self) -> np.ndarray:
        """Collinear, equally spaced class centres on the first axis, centred on the origin."""
        c = np.zeros((self.k, self.d_in))
        c[:, 0] = (np.arange(1, self.k + 1) - (self.k + 1) / 2.0) * self.spacing
        return c

    def translation_vector(self) -> np.ndarray:
        if self.translation is not None:
            return np.asarray(self.translation, dtype=float)
        t = np.zeros(self.d_in)
        t[0] = self.translation_norm
        return t

    def rotation_matrix(self) -> np.ndarray:
        r = np.eye(self.d_in)
        for i, angle in enumerate(self.rotation):
            a, b = 2 * i, 2 * i + 1
            c, s = np.cos(angle), np.sin(angle)
            r[a, a], r[a, b], r[b, a], r[b, b] = c, -s, s, c
        return r


def _mixture(weights: Optional[List[float]], upto: int) -> np.ndarray:
    w = np.ones(upto) if weights is None else np.asarray(weights[:upto], dtype=float)
    return w / w.sum()


def _sample_bags(cfg: ShiftConfig, rng: np.random.Generator) -> List[Tuple[int, List[int]]]:
    bag_probs = _mixture(cfg.bag_label_mixture, cfg.k)
    out = []
    for _ in range(cfg.n_bags):
        y = int(rng.choice(cfg.k, p=bag_probs)) + 1
        size = int(rng.integers(cfg.bag_size[0], cfg.bag_size[1] + 1))
        labels = (rng.choice(y, size=size, p=_mixture(cfg.instance_mixture, y)) + 1).tolist()
        labels[int(rng.integers(size))] = y
        out.append((y, labels))
    return out


def generate_synthetic_domains(cfg: ShiftConfig) -> Tuple[DomainDataset, DomainDataset]:
    """
    Source class ``k`` is drawn from N(c_k, spread^2 I); the target applies
    ``x -> scale * R x + t`` to the same process and adds ``target_noise``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centroids = cfg.centroids()
    rot, shift = cfg.rotation_matrix(), cfg.translation_vector()
    datasets = []
    for domain in DOMAINS:
        bags = []
        for i, (y, labels) in enumerate(_sample_bags(cfg, rng)):
            lab = np.asarray(labels) - 1
            x = centroids[lab] + cfg.spread * rng.standard_normal((len(labels), cfg.d_in))
            if domain == TARGET:
                x = cfg.scale * x @ rot.T + shift
                if cfg.target_noise > 0:
                    x = x + cfg.target_noise * rng.standard_normal(x.shape)
            bag_id = "{}-{:04d}".format(domain[0], i)
            instances = tuple(Instance(id="{}-{:03d}".format(bag_id, j), features=x[j], label=labels[j])
                              for j in range(len(labels)))
            bags.append(Bag(bag_id=bag_id, domain=domain, instances=instances,
                            bag_label=bag_label_from_instances(labels)))
        datasets.append(DomainDataset(domain=domain, k=cfg.k, d_in=cfg.d_in, bags=tuple(bags)))
        logger.debug("generated %s: %d bags, %d instances", domain, len(bags), datasets[-1].n_instances)
    return datasets[0], datasets[1]


def retag(ds: DomainDataset, domain: str) -> DomainDataset:
    bags = tuple(replace(b, domain=domain) for b in ds.bags)
    return DomainDataset(domain=domain, k=ds.k, d_in=ds.d_in, bags=bags)


def swap_domains(source: DomainDataset, target: DomainDataset) -> Tuple[DomainDataset, DomainDataset]:
    """Reverse the transfer direction: the former target becomes the labeled source."""
    return retag(target, SOURCE), retag(source, TARGET)


def oversample_indices(labels: Sequence, seed: int) -> np.ndarray:
    """
    Duplicate-to-max oversampling. Every class is topped up, with replacement inside the class,
    to the largest class count; the result is shuffled.
    """
    if len(labels) == 0:
        raise errors.ValidationError("cannot oversample an empty label list")
    rng = np.random.default_rng(seed)
    by_class: Dict = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    target = max(len(idx) for idx in by_class.values())
    out = []
    for y in sorted(by_class):
        idx = by_class[y]
        out.extend(idx)
        if len(idx) < target:
            out.extend(rng.choice(idx, size=target - len(idx), replace=True).tolist())
    out = np.asarray(out, dtype=np.int64)
    rng.shuffle(out)
    return out


def _bag_to_json(bag: Bag) -> dict:
    return {
        "bag_id": bag.bag_id,
        "domain": bag.domain,
        "bag_label": bag.bag_label - 1,
        "instances": [{"id": inst.id, "features": [float(v) for v in inst.features],
                       "label": None if inst.label is None else inst.label - 1} for inst in bag.instances],
    }


def save_dataset(ds: DomainDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(json.dumps({"k": ds.k, "d_in": ds.d_in}) + "\n")
        for bag in ds.bags:
            fp.write(json.dumps(_bag_to_json(bag)) + "\n")


def _clinical(v, k, where) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise errors.DatasetError("{}: label {!r} is not an integer".format(where, v))
    if not 0 <= v <= k - 1:
        raise errors.LabelError("{}: label {} outside 0..{}".format(where, v, k - 1))
    return v + 1


def _as_list(value, where) -> list:
    if not isinstance(value, list):
        raise errors.DatasetError("{}: instances must be a list".format(where))
    return value


def _instance_from_json(raw, k: int, d_in: int, where: str) -> Instance:
    try:
        inst_id = str(raw["id"])
        feats = np.asarray(raw["features"], dtype=np.float64)
        label = raw.get("label")
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise errors.DatasetError("{}: malformed instance record: {}".format(where, e)) from e
    if feats.shape != (d_in,):
        raise errors.ShapeError("{} instance {}: feature length {} != d_in {}".format(
            where, inst_id, feats.size, d_in))
    if label is not None:
        label = _clinical(label, k, "{} instance {}".format(where, inst_id))
    return Instance(id=inst_id, features=feats, label=label)


def load_dataset(path: str) -> DomainDataset:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            lines = [line for line in fp.read().splitlines() if line.strip()]
    except OSError as e:
        raise errors.DatasetError("{}: cannot read dataset: {}".format(path, e)) from e
    if not lines:
        raise errors.DatasetError("{}: empty dataset file".format(path))
    try:
        header = json.loads(lines[0])
        k, d_in = int(header["k"]), int(header["d_in"])
    except (ValueError, KeyError, TypeError) as e:
        raise errors.DatasetError("{}: malformed header: {}".format(path, e)) from e
    bags = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            bag_id = str(obj["bag_id"])
            domain = obj["domain"]
            raw_instances = obj["instances"]
            raw_label = obj["bag_label"]
        except (ValueError, KeyError, TypeError) as e:
            raise errors.DatasetError("{}:{}: malformed bag record: {}".format(path, lineno, e)) from e
        instances = [_instance_from_json(raw, k, d_in, "{}:{}: bag {}".format(path, lineno, bag_id))
                     for raw in _as_list(raw_instances, "{}:{}: bag {}".format(path, lineno, bag_id))]
        bags.append(Bag(bag_id=bag_id, domain=domain, instances=tuple(instances),
                        bag_label=_clinical(raw_label, k, "bag {}".format(bag_id))))
    if not bags:
        raise errors.DatasetError("{}: no bags".format(path))
    domains = {b.domain for b in bags}
    if len(domains) != 1:
        raise errors.DatasetError("{}: mixed domains {}".format(path, sorted(domains)))
    return DomainDataset(domain=bags[0].domain, k=k, d_in=d_in, bags=tuple(bags))
