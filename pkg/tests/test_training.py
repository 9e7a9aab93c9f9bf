import numpy as np
import pytest

from omdalib import errors, training
from omdalib.datamodel import SOURCE, TARGET, Bag, DomainDataset, Instance, ShiftConfig, generate_synthetic_domains
from omdalib.model import (GROUPS, SHARED_GROUPS, SOURCE_ENCODER, TARGET_ENCODER, TOKENS, group_bytes,
                           state_to_dict)
from omdalib.training import (VARIANTS, TrainConfig, adapt_target, domain_alignment, evaluate_model,
                              pretrain_source, run_ablation, selection_key, split_validation, synthetic_data)


def _shift(**kw):
    base = dict(d_in=4, k=3, n_bags=16, bag_size=(3, 6), rotation=[0.5], seed=1)
    base.update(kw)
    return ShiftConfig(**base)


def _cfg(**kw):
    base = dict(d=4, hidden=[8], disc_hidden=6, max_epochs=5, patience=2, stage2_epochs=3, batch_size=4,
                log_every=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def domains():
    return generate_synthetic_domains(_shift())


@pytest.fixture(scope="module")
def pretrained(domains):
    return pretrain_source(_cfg(), domains[0])


def test_train_config_validate_names_key():
    for key, value in (("alpha", -0.5), ("reduction", "max"), ("val_fraction", 1.0), ("patience", -1)):
        with pytest.raises(errors.ConfigError, match="train." + key):
            _cfg(**{key: value}).validate()
    with pytest.raises(errors.ConfigError, match="train.hidden"):
        _cfg(hidden=[]).validate()


def test_train_config_rates():
    cfg = _cfg()
    assert cfg.rates()["target_encoder"] == 1e-4
    cfg.use_backbone_rates = True
    assert cfg.rates() == {"encoder": 3e-6, "instance_head": 3e-6, "bag": 1e-5, "disc": 1e-4,
                           "target_encoder": 1e-6}


def test_with_switches_keeps_other_fields():
    cfg = _cfg(alpha=0.3)
    out = cfg.with_switches(VARIANTS["adv_only"])
    assert (out.use_adv, out.use_shared_tokens, out.use_triplet) == (True, False, False)
    assert out.alpha == 0.3 and cfg.use_triplet


def test_split_validation_is_disjoint(domains):
    train, val = split_validation(domains[0], 0.25, seed=3)
    assert len(val) == 4
    assert sorted(train + val) == list(range(16))
    assert split_validation(domains[0], 0.25, seed=3) == (train, val)


def test_selection_key_orders_kappa_then_loss():
    assert selection_key(0.5, 2.0) > selection_key(0.4, 0.1)
    assert selection_key(0.5, 0.1) > selection_key(0.5, 0.2)
    assert selection_key(None, 0.0) < selection_key(-0.5, 9.0)


def test_pretrain_is_deterministic(domains, pretrained):
    state, log = pretrained
    again, log2 = pretrain_source(_cfg(), domains[0])
    assert state_to_dict(state) == state_to_dict(again)
    assert [r["val_bag_loss"] for r in log.records] == [r["val_bag_loss"] for r in log2.records]


def test_pretrain_copies_source_encoder_into_target(pretrained):
    state, log = pretrained
    assert group_bytes(state, SOURCE_ENCODER) == group_bytes(state, TARGET_ENCODER)
    assert 1 <= log.best_epoch <= len(log.records) <= 5
    assert {"instance_loss", "bag_loss", "val_qwk", "val_bag_loss"} <= set(log.records[0])


def test_pretrain_patience_zero_stops_on_first_miss(domains):
    _, log = pretrain_source(_cfg(max_epochs=30, patience=0), domains[0])
    keys = [selection_key(r["val_qwk"], r["val_bag_loss"]) for r in log.records]
    for prev, cur in zip(keys[:-2], keys[1:-1]):
        assert cur > prev
    if log.stopped_early:
        assert keys[-1] <= max(keys[:-1])
        assert log.best_epoch == len(keys) - 1


def test_pretrain_rejects_target_dataset(domains):
    with pytest.raises(errors.TrainingError, match="source"):
        pretrain_source(_cfg(), domains[1])


def test_pretrain_rejects_missing_class():
    bags = tuple(Bag(bag_id="b{}".format(i), domain=SOURCE, bag_label=3,
                     instances=(Instance("b{}-0".format(i), np.zeros(2), 1), Instance("b{}-1".format(i), np.ones(2), 3)))
                 for i in range(3))
    ds = DomainDataset(domain=SOURCE, k=3, d_in=2, bags=bags)
    with pytest.raises(errors.TrainingError, match="class"):
        pretrain_source(_cfg(), ds)


def test_pretrain_checks_configured_dimensions(domains):
    with pytest.raises(errors.ConfigError, match="train.d_in"):
        pretrain_source(_cfg(d_in=7), domains[0])


def test_adapt_keeps_shared_groups_and_input_state(domains, pretrained):
    state, _ = pretrained
    before = {g: group_bytes(state, g) for g in GROUPS}
    adapted, log = adapt_target(_cfg(), state, *domains)
    assert len(log.records) == 3
    for g in SHARED_GROUPS:
        assert group_bytes(adapted, g) == before[g]
        assert adapted.frozen[g]
    assert group_bytes(adapted, TARGET_ENCODER) != before[TARGET_ENCODER]
    assert {g: group_bytes(state, g) for g in GROUPS} == before
    assert {"disc", "total", "bag", "enc", "triplet", "anchors"} <= set(log.records[0])


def test_adapt_with_switches_off_leaves_target_encoder(domains, pretrained):
    state, _ = pretrained
    adapted, log = adapt_target(_cfg().with_switches(VARIANTS["source_only"]), state, *domains)
    assert group_bytes(adapted, TARGET_ENCODER) == group_bytes(state, SOURCE_ENCODER)
    assert all(r["total"] == 0.0 and r["disc"] == 0.0 for r in log.records)


def test_adapt_rejects_swapped_domains(domains, pretrained):
    state, _ = pretrained
    with pytest.raises(errors.TrainingError, match="target"):
        adapt_target(_cfg(), state, domains[0], domains[0])


def test_adapt_rejects_mismatched_datasets(pretrained):
    state, _ = pretrained
    source, target = generate_synthetic_domains(_shift(k=4))
    with pytest.raises(errors.TrainingError):
        adapt_target(_cfg(), state, source, target)


def test_evaluate_model_reports_both_levels(domains, pretrained):
    state, _ = pretrained
    ev = evaluate_model(state, domains[1])
    assert ev.domain == TARGET
    assert ev.instance.count == domains[1].n_instances
    assert ev.bag.count == 16
    assert ev.embeddings.shape == (domains[1].n_instances, 4)
    assert set(ev.to_dict()) == {"domain", "instance", "bag"}


def test_evaluate_model_skips_instance_metrics_when_unlabeled(domains, pretrained):
    state, _ = pretrained
    bags = tuple(Bag(bag_id=b.bag_id, domain=TARGET, bag_label=b.bag_label,
                     instances=tuple(Instance(i.id, i.features, None) for i in b.instances))
                 for b in domains[1].bags)
    ds = DomainDataset(domain=TARGET, k=3, d_in=4, bags=bags)
    ev = evaluate_model(state, ds)
    assert ev.instance is None
    assert ev.bag.count == 16
    with pytest.raises(errors.ValidationError):
        domain_alignment(state, domains[0], ds)


def test_run_ablation_shape_and_source_only_row(domains, pretrained):
    table = run_ablation(_cfg(), list(VARIANTS), synthetic_data(_shift()), seeds=[1])
    assert len(table.rows) == 4
    assert table.variants == ["full", "no_triplet", "adv_only", "source_only"]
    assert all(r.freeze_verified for r in table.rows)
    # seed 1 regenerates the fixture's data; the training seed is overridden to 1 as well
    state, _ = pretrain_source(_cfg(seed=1), domains[0])
    source_only = [r for r in table.rows if r.variant == "source_only"][0]
    expected = evaluate_model(state, domains[1])
    np.testing.assert_array_equal(source_only.evaluation.predictions, expected.predictions)
    means = table.to_dict()["means"]["forward"]
    assert means["full"]["runs"] == 1


def test_run_ablation_rejects_unknown_variant(domains):
    with pytest.raises(errors.ValidationError, match="no_such"):
        run_ablation(_cfg(), ["full", "no_such"], lambda seed: domains)
    with pytest.raises(errors.ValidationError):
        run_ablation(_cfg(), ["full"], lambda seed: domains, directions=["sideways"])


def test_run_ablation_reverse_direction(domains):
    table = run_ablation(_cfg(stage2_epochs=1), ["source_only"], lambda seed: domains, seeds=[0],
                         directions=["forward", "reverse"])
    assert [r.direction for r in table.rows] == ["forward", "reverse"]


@pytest.mark.slow
def test_pretrain_fits_well_separated_source():
    source, _ = generate_synthetic_domains(_shift(spacing=8.0, spread=0.5, n_bags=60, seed=4))
    state, _ = pretrain_source(_cfg(max_epochs=300, patience=60, batch_size=8, log_every=50,
                                    lr_encoder=1e-2, lr_instance_head=1e-2, lr_bag=1e-2), source)
    assert evaluate_model(state, source).instance.accuracy >= 0.95


@pytest.mark.slow
def test_default_ablation_orders_variants_and_aligns_classes():
    table = run_ablation(TrainConfig(), list(VARIANTS), synthetic_data(ShiftConfig()), seeds=[1, 2, 3, 4, 5])
    acc = {v: row["accuracy"] for v, row in table.means()["forward"].items()}
    assert acc["full"] >= acc["no_triplet"] >= acc["adv_only"] >= acc["source_only"]
    assert acc["full"] - acc["source_only"] >= 0.10
    # the source-only row keeps the pre-trained target encoder, so it is the "before" picture
    by_key = {(r.variant, r.seed): r.alignment.mean for r in table.rows}
    improved = [s for s in table.seeds if by_key[("full", s)] < by_key[("source_only", s)]]
    assert len(improved) >= 4


def test_adapt_records_verified_groups(domains, pretrained):
    state, _ = pretrained
    _, log = adapt_target(_cfg(stage2_epochs=1), state, *domains)
    assert log.freeze_verified == sorted(SHARED_GROUPS)
    assert log.to_dict()["freeze_verified"] == sorted(SHARED_GROUPS)


def test_adapt_detects_frozen_group_change(domains, pretrained, monkeypatch):
    state, _ = pretrained
    before = group_bytes(state, TOKENS)
    real = training.target_objective

    def tampering(encoder, frozen, *args, **kwargs):
        frozen[TOKENS]["A"] += 1.0
        return real(encoder, frozen, *args, **kwargs)

    monkeypatch.setattr(training, "target_objective", tampering)
    with pytest.raises(errors.FreezeViolation, match="tokens"):
        adapt_target(_cfg(stage2_epochs=1), state, *domains)
    assert group_bytes(state, TOKENS) == before
