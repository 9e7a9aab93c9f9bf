import numpy as np
import pytest

from omdalib import errors
from omdalib.losses import (CONTRACT_LOSSES, LossWeights, TargetSwitches, bce_with_logits, check_gradient_contract,
                            loss_bag, loss_disc, loss_enc, loss_instance_krank, loss_target_total, loss_triplet,
                            select_triplet_anchors, target_objective)
from omdalib.model import PrototypeSet
from omdalib.numerics import init_mlp

LN2 = np.log(2.0)


def _zero_disc(d=2, hidden=3, bias=0.0):
    return {"W0": np.zeros((d, hidden)), "b0": np.zeros(hidden), "W1": np.zeros((hidden, 1)), "b1": np.array([bias])}


def _bce_reference(z, t):
    p = 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def test_instance_krank_bce_cases():
    value, _ = loss_instance_krank(np.full((1, 3), 40.0), np.ones((1, 3)))
    assert value < 1e-6
    value, _ = loss_instance_krank(np.zeros((2, 3)), np.array([[1, 0, 1], [0, 0, 0]]))
    assert value == pytest.approx(LN2)
    value, grad = loss_instance_krank(np.array([[1.0, -1.0]]), np.array([[1.0, 0.0]]))
    assert value == pytest.approx(_bce_reference([1.0, -1.0], np.array([1.0, 0.0])), abs=1e-12)
    assert grad.shape == (1, 2)


def test_bce_sum_reduction_scales_mean():
    z = np.array([[0.3, -1.2], [2.0, 0.1]])
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    mean, _ = bce_with_logits(z, t, "mean")
    total, _ = bce_with_logits(z, t, "sum")
    assert total == pytest.approx(4 * mean)


def test_bce_rejects_bad_input():
    with pytest.raises(errors.ShapeError):
        bce_with_logits(np.zeros((1, 2)), np.zeros((1, 3)))
    with pytest.raises(errors.ValidationError):
        bce_with_logits(np.zeros((1, 2)), np.array([[0.5, 1.0]]))


def test_loss_bag_cases():
    value, _ = loss_bag(np.array([[40.0, -40.0]]), [2], 3)
    assert value < 1e-6
    value, _ = loss_bag(np.zeros((2, 2)), [1, 3], 3)
    assert value == pytest.approx(LN2)
    value, _ = loss_bag(np.array([[2.0, -2.0]]), [2], 3)
    assert value == pytest.approx(_bce_reference([2.0, -2.0], np.array([1.0, 0.0])), abs=1e-12)


def test_loss_disc_uninformative_is_ln2():
    value, grads = loss_disc(np.ones((3, 2)), np.zeros((2, 2)), _zero_disc())
    assert value == pytest.approx(LN2)
    assert set(grads) == {"discriminator", "source", "target"}


def test_loss_disc_perfect_discriminator_hits_floor():
    # sign of the first coordinate separates the domains
    d_params = {"W0": np.array([[50.0], [0.0]]), "b0": np.zeros(1), "W1": np.array([[50.0]]), "b1": np.zeros(1)}
    value, _ = loss_disc(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), d_params)
    assert value < 1e-6


def test_loss_disc_reference():
    d_params = {"W0": np.array([[0.5], [-1.0]]), "b0": np.array([0.1]), "W1": np.array([[2.0]]), "b1": np.array([-0.3])}
    es = np.array([[1.0, 0.5], [-0.2, 0.3]])
    et = np.array([[0.4, -0.6]])

    def d(e):
        return 1.0 / (1.0 + np.exp(-(2.0 * np.tanh(e @ np.array([0.5, -1.0]) + 0.1) - 0.3)))

    expected = -(np.log(d(es[0])) + np.log(d(es[1])) + np.log(1 - d(et[0]))) / 3
    value, _ = loss_disc(es, et, d_params)
    assert value == pytest.approx(expected, abs=1e-12)
    summed, _ = loss_disc(es, et, d_params, reduction="sum")
    assert summed == pytest.approx(3 * expected, abs=1e-12)


def test_loss_disc_needs_both_domains():
    with pytest.raises(errors.ValidationError):
        loss_disc(np.zeros((0, 2)), np.zeros((1, 2)), _zero_disc())


def test_loss_enc_cases():
    value, _ = loss_enc(np.zeros((4, 2)), _zero_disc(bias=40.0))
    assert value < 1e-6
    value, _ = loss_enc(np.ones((3, 2)), _zero_disc())
    assert value == pytest.approx(LN2)
    d_params = {"W0": np.array([[1.0], [1.0]]), "b0": np.zeros(1), "W1": np.array([[-1.5]]), "b1": np.array([0.2])}
    et = np.array([[0.3, 0.2], [-1.0, 0.4]])
    z = -1.5 * np.tanh(et.sum(axis=1)) + 0.2
    expected = float(np.mean(np.log1p(np.exp(-z))))
    value, _ = loss_enc(et, d_params)
    assert value == pytest.approx(expected, abs=1e-12)


def test_select_triplet_anchors_examples():
    gates = select_triplet_anchors(2, [1, 3, 2], 4)
    assert [(g.instance_index, g.predicted, g.bag_label) for g in gates] == [(1, 3, 2)]
    assert select_triplet_anchors(4, [4, 4, 4], 4) == []
    assert select_triplet_anchors(2, [1, 2, 2], 4) == []


def test_select_triplet_anchors_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        y = int(rng.integers(1, k + 1))
        preds = [int(p) for p in rng.integers(1, k + 1, size=int(rng.integers(1, 10)))]
        expected = [j for j, p in enumerate(preds) if y <= k - 1 and p > y]
        gates = select_triplet_anchors(y, preds, k)
        assert [g.instance_index for g in gates] == expected
        if not gates:
            anchors = np.zeros((0, 3))
            value, _ = loss_triplet(anchors, anchors, anchors, margin=1.0)
            assert value == 0.0


def test_loss_triplet_examples():
    value, _ = loss_triplet(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[3.0, 0.0]]), margin=1.0)
    assert value == 0.0
    e = np.array([[0.4, -0.3]])
    value, _ = loss_triplet(e, e.copy(), np.array([[2.0, 2.0]]), margin=0.0)
    assert value == 0.0
    value, grad = loss_triplet(np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]]), np.array([[0.0, 1.0]]), margin=0.5)
    assert value == pytest.approx(1.5)
    np.testing.assert_allclose(grad, [[-1.0, 1.0]])


def test_loss_triplet_rejects_negative_margin():
    with pytest.raises(errors.ValidationError):
        loss_triplet(np.zeros((1, 2)), np.ones((1, 2)), np.ones((1, 2)), margin=-0.1)


def test_loss_target_total():
    assert loss_target_total(1.0, 2.0, 3.0, LossWeights(alpha=0.01)) == pytest.approx(3.03)
    assert loss_target_total(1.0, 2.0, 99.0, LossWeights(alpha=0.0)) == 3.0
    assert loss_target_total(0.0, 0.0, 0.0, LossWeights()) == 0.0


def test_loss_weights_validate():
    with pytest.raises(errors.ValidationError):
        LossWeights(alpha=-1.0)
    with pytest.raises(errors.ValidationError):
        LossWeights(reduction="max")


def test_target_objective_switches_off_gives_zero_gradient():
    rng = np.random.default_rng(1)
    encoder = init_mlp([3, 4, 2], rng)
    frozen = {"instance_head": {"w": np.ones(2), "b": np.zeros(2)},
              "tokens": {"A": rng.standard_normal((2, 2))},
              "bag_heads": {"V": rng.standard_normal((2, 2)), "c": np.zeros(2)},
              "discriminator": init_mlp([2, 3, 1], rng)}
    bags = [rng.standard_normal((4, 3)), rng.standard_normal((2, 3))]
    out, grads = target_objective(encoder, frozen, None, bags, [1, 3], 3, LossWeights(),
                                  TargetSwitches(False, False, False))
    assert out.total == 0.0 and out.anchors == 0
    assert all(not np.any(g) for g in grads.values())


def test_target_objective_triplet_needs_prototypes():
    rng = np.random.default_rng(2)
    encoder = init_mlp([3, 2], rng)
    frozen = {"instance_head": {"w": np.ones(2), "b": np.zeros(2)}, "tokens": {"A": np.ones((2, 2))},
              "bag_heads": {"V": np.ones((2, 2)), "c": np.zeros(2)}, "discriminator": init_mlp([2, 2, 1], rng)}
    with pytest.raises(errors.TrainingError):
        target_objective(encoder, frozen, None, [np.ones((2, 3))], [1], 3, LossWeights(),
                         TargetSwitches(False, False, True))


def test_target_objective_counts_anchors():
    # identity encoder; the instance head predicts 3 for the first instance and 1 for the second
    encoder = {"W0": np.eye(2), "b0": np.zeros(2)}
    frozen = {"instance_head": {"w": np.array([1.0, 0.0]), "b": np.array([0.0, -1.0])},
              "tokens": {"A": np.zeros((2, 2))}, "bag_heads": {"V": np.zeros((2, 2)), "c": np.zeros(2)},
              "discriminator": _zero_disc()}
    protos = PrototypeSet(prototypes=np.array([[-5.0, 0.0], [0.0, 0.0], [5.0, 0.0]]), counts=np.ones(3, dtype=int))
    bag = np.array([[3.0, 0.0], [-3.0, 0.0]])
    out, grads = target_objective(encoder, frozen, protos, [bag], [1], 3, LossWeights(alpha=1.0, margin=1.0),
                                  TargetSwitches(False, False, True))
    assert out.anchors == 1
    # |e - p1| - |e - p3| + 1 = 8 - 2 + 1
    assert out.triplet == pytest.approx(7.0)
    assert np.any(grads["W0"])


@pytest.mark.parametrize("reduction, n_configs", [("mean", 10), ("sum", 3)])
def test_gradient_contract(reduction, n_configs):
    cases = check_gradient_contract(n_configs=n_configs, seed=0, h=1e-5, tol=1e-4,
                                    weights=LossWeights(reduction=reduction))
    assert {c.loss for c in cases} == set(CONTRACT_LOSSES)
    assert len(cases) == n_configs * len(CONTRACT_LOSSES)
    worst = max(cases, key=lambda c: c.report.max_rel_error)
    assert worst.report.passed, worst.to_dict()


@pytest.mark.parametrize("es, et", [
    (np.array([[1.0, 0.0], [0.5, 0.2]]), np.array([[-1.0, 0.0]])),
    (np.array([[0.3, -0.4]]), np.array([[-0.8, 0.1], [-0.2, 0.9]])),
])
def test_disc_and_enc_move_in_opposite_directions(es, et):
    # larger scale makes d push targets toward "target" and sources toward "source"
    disc, enc = [], []
    for scale in (0.0, 0.5, 1.0, 2.0, 4.0):
        d_params = {"W0": np.array([[1.0], [0.0]]), "b0": np.zeros(1), "W1": np.array([[scale]]),
                    "b1": np.zeros(1)}
        disc.append(loss_disc(es, et, d_params)[0])
        enc.append(loss_enc(et, d_params)[0])
    assert all(b < a for a, b in zip(disc, disc[1:]))
    assert all(b >= a for a, b in zip(enc, enc[1:]))
