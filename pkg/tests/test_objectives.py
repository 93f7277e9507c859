import math

import numpy as np
import pytest
import torch

from sdacd.errors import ConfigError, NumericalError, ShapeError
from sdacd.objectives import (
    LossBundle, LossWeights, change_detection_loss, combine_objective, dice_loss, hybrid_loss,
    inverse_frequency_weights, total_objective, weighted_cross_entropy,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_wce_single_pixel():
    assert weighted_cross_entropy(t([0.5]), t([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert weighted_cross_entropy(t([0.5]), t([1.0]), (1.0, 2.0)).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_wce_perfect_prediction_near_zero():
    gt = t([[1.0, 0.0], [0.0, 1.0]])
    assert weighted_cross_entropy(gt.clone(), gt, (3.0, 5.0)).item() < 1e-5


def test_wce_rejects_nonpositive_weights():
    with pytest.raises(ConfigError):
        weighted_cross_entropy(t([0.5]), t([1.0]), (0.0, 1.0))


def test_dice_examples():
    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[0] = 1
    assert dice_loss(gt.clone(), gt).item() == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(torch.zeros_like(gt), gt).item() == pytest.approx(0.8, abs=1e-12)
    z = torch.zeros_like(gt)
    assert dice_loss(z, z).item() == pytest.approx(0.0, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_inverse_frequency_weights():
    gt = torch.zeros(100)
    gt[:10] = 1
    w0, w1 = inverse_frequency_weights(gt)
    assert w1 == pytest.approx(5.0)
    assert w0 == pytest.approx(100 / 180)
    gt[:] = 0
    assert inverse_frequency_weights(gt)[1] == 10.0
    gt[:1] = 1
    big = torch.zeros(10000)
    big[:1] = 1
    assert inverse_frequency_weights(big)[1] == 10.0


def _fixed(values):
    it = iter(values)
    return lambda *a, **k: torch.tensor(next(it), dtype=torch.float64)


def test_cd_loss_sums():
    preds = [torch.zeros(1)] * 3
    _, _, total = change_detection_loss(preds, torch.zeros(1), torch.zeros(1), (1, 1), loss_fn=_fixed([0.1, 0.2, 0.3, 0.4]))
    assert total.item() == pytest.approx(1.0, abs=1e-12)
    _, _, total = change_detection_loss(preds[:2], torch.zeros(1), torch.zeros(1), (1, 1), loss_fn=_fixed([0.1, 0.2, 0.3]))
    assert total.item() == pytest.approx(0.6, abs=1e-12)
    _, _, total = change_detection_loss(preds, torch.zeros(1), torch.zeros(1), (1, 1), loss_fn=_fixed([0.7] * 4))
    assert total.item() == pytest.approx(2.8, abs=1e-12)


def test_cd_loss_empty():
    with pytest.raises(ConfigError):
        change_detection_loss([], None, torch.zeros(1))


def test_hybrid_is_wce_plus_dice():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 1, 8, 8, generator=g) > 0.7).double()
    w = inverse_frequency_weights(y)
    assert hybrid_loss(p, y).item() == pytest.approx(
        (weighted_cross_entropy(p, y, w) + dice_loss(p, y)).item(), abs=1e-12)


def test_total_objective_examples():
    ones = LossBundle(cyc=1.0, adv_i=1.0, adv_f_conf=1.0, cd_per_pair=[1.0], cd_final=0.0)
    assert total_objective(ones, LossWeights()) == 12.1
    assert total_objective(LossBundle(), LossWeights()) == 0.0
    b = LossBundle(cyc=2.0, adv_i=3.0, adv_f_conf=4.0, cd_per_pair=[5.0])
    assert total_objective(b, LossWeights(1, 1, 1, 1)) == 14.0


def test_total_objective_linear_in_each_weight():
    b = LossBundle(cyc=0.3, adv_i=0.7, adv_f_conf=1.1, adv_f_disc=9.0, cd_per_pair=[0.2, 0.4], cd_final=0.5)
    base = LossWeights(0, 0, 0, 0)
    for name, comp in (("lambda_cyc", 0.3), ("lambda_i", 0.7), ("lambda_f", 1.1), ("lambda_cd", 1.1)):
        for k in (1.0, 2.0, 5.0):
            w = LossWeights(**{**base.__dict__, name: k})
            assert total_objective(b, w) == pytest.approx(k * comp, rel=1e-12)
    assert total_objective(b, LossWeights(0, 0, 1, 0), phase="domain") == pytest.approx(9.0)


def test_total_objective_names_bad_component():
    with pytest.raises(NumericalError, match="cd_1"):
        total_objective(LossBundle(cd_per_pair=[0.0, float("nan")]), LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_cyc=-1)
    with pytest.raises(ConfigError):
        LossWeights(lambda_f=float("inf"))


def test_combine_objective_dot_product():
    assert combine_objective(2, 3, 4, 5, LossWeights(1, 1, 1, 1)) == 14


def test_bundle_row_pads_missing_pairs():
    row = LossBundle(cd_per_pair=[0.1]).row()
    assert row["cd_0"] == 0.1 and row["cd_1"] == "" and row["cd_2"] == ""
