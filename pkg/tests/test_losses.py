import math

import pytest
import torch

from jointgan.discriminators import DiscriminatorOutput
from jointgan.losses import (
    DEFAULT_LAMBDA,
    LossReport,
    discriminator_loss,
    generator_stage_loss,
    total_generator_loss,
)

LN2 = 0.6931471805599453

# hand-checked with a high-precision evaluator
GEN_09_01 = 1.2039728043259360      # -1/2 (ln .9 + ln .1)
GEN_025_075 = 0.8369882167858358    # -1/2 (ln .25 + ln .75)
DISC_MIXED = 0.7236595314788326     # -1/2 (ln .8 + ln .7 + ln(1-.3) + ln(1-.4))
DISC_GOOD = 0.2107210313156526      # real (.9,.9), fake (.1,.1)
COMPOSE = 3.0794415416798359        # 3 ln 2 + 5 * 0.2


def out(u, c):
    return DiscriminatorOutput(
        uncond_score=torch.tensor([u], dtype=torch.float64),
        cond_score=torch.tensor([c], dtype=torch.float64),
    )


def out_batch(us, cs):
    return DiscriminatorOutput(
        uncond_score=torch.tensor(us, dtype=torch.float64),
        cond_score=torch.tensor(cs, dtype=torch.float64),
    )


# ---- generator stage loss ----


def test_stage_loss_at_half_is_ln2():
    assert abs(float(generator_stage_loss(out(0.5, 0.5))) - LN2) <= 1e-9


def test_stage_loss_perfect_fooling_approaches_zero():
    eps = 1e-9
    assert float(generator_stage_loss(out(1 - eps, 1 - eps))) <= 1e-8


def test_stage_loss_hand_values():
    assert abs(float(generator_stage_loss(out(0.9, 0.1))) - GEN_09_01) <= 1e-12
    assert abs(float(generator_stage_loss(out(0.25, 0.75))) - GEN_025_075) <= 1e-12


def test_stage_loss_averages_over_batch():
    got = float(generator_stage_loss(out_batch([0.5, 0.9], [0.5, 0.1])))
    want = 0.5 * (LN2 + GEN_09_01)
    assert abs(got - want) <= 1e-12


def test_stage_loss_decreases_as_scores_improve():
    worse = float(generator_stage_loss(out(0.3, 0.3)))
    better = float(generator_stage_loss(out(0.7, 0.7)))
    assert better < worse


def test_stage_loss_gradient_sign():
    # pushing fake scores up must lower the loss
    p = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
    loss = generator_stage_loss(DiscriminatorOutput(p, p.clone()))
    loss.backward()
    assert p.grad.item() < 0


def test_stage_loss_rejects_degenerate_probabilities():
    with pytest.raises(ValueError):
        generator_stage_loss(out(0.0, 0.5))
    with pytest.raises(ValueError):
        generator_stage_loss(out(0.5, 1.0))
    with pytest.raises(ValueError):
        generator_stage_loss(out(-0.1, 0.5))


# ---- total generator loss ----


def test_total_composition_value():
    got = total_generator_loss([LN2, LN2, LN2], 0.2, 5.0)
    assert abs(got - COMPOSE) <= 1e-9


def test_total_composition_is_exact():
    stages = [0.7, 1.1, 0.9]
    got = total_generator_loss(stages, 0.33, 5.0)
    assert got == sum(stages) + 5.0 * 0.33


def test_total_with_zero_damsm_or_lambda():
    stages = [0.5, 0.6]
    assert total_generator_loss(stages, 0.0, 5.0) == sum(stages)
    assert total_generator_loss(stages, 0.9, 0.0) == sum(stages)


def test_total_validates_stage_count():
    with pytest.raises(ValueError, match="3"):
        total_generator_loss([0.5, 0.6], 0.1, 5.0, stage_count=3)
    assert total_generator_loss([0.5, 0.6], 0.1, 5.0, stage_count=2) > 0


def test_default_lambda():
    assert DEFAULT_LAMBDA == 5.0


# ---- discriminator loss ----


def test_disc_loss_all_half_is_2ln2():
    got = float(discriminator_loss(out(0.5, 0.5), out(0.5, 0.5)))
    assert abs(got - 2 * LN2) <= 1e-9


def test_disc_loss_perfect_discriminator_near_zero():
    eps = 1e-9
    got = float(discriminator_loss(out(1 - eps, 1 - eps), out(eps, eps)))
    assert got <= 1e-8


def test_disc_loss_hand_values():
    assert abs(float(discriminator_loss(out(0.8, 0.7), out(0.3, 0.4))) - DISC_MIXED) <= 1e-12
    assert abs(float(discriminator_loss(out(0.9, 0.9), out(0.1, 0.1))) - DISC_GOOD) <= 1e-12


def test_disc_loss_monotone_in_scores():
    base = float(discriminator_loss(out(0.6, 0.6), out(0.4, 0.4)))
    better_real = float(discriminator_loss(out(0.8, 0.8), out(0.4, 0.4)))
    better_fake = float(discriminator_loss(out(0.6, 0.6), out(0.2, 0.2)))
    assert better_real < base
    assert better_fake < base


def test_disc_loss_gradient_signs():
    real = torch.tensor([0.6], dtype=torch.float64, requires_grad=True)
    fake = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
    loss = discriminator_loss(
        DiscriminatorOutput(real, real.clone()), DiscriminatorOutput(fake, fake.clone())
    )
    loss.backward()
    assert real.grad.item() < 0  # raising real scores lowers the loss
    assert fake.grad.item() > 0  # raising fake scores raises it


def test_disc_loss_mismatched_caption_term():
    base = float(discriminator_loss(out(0.5, 0.5), out(0.5, 0.5)))
    with_wrong = float(
        discriminator_loss(out(0.5, 0.5), out(0.5, 0.5), wrong_out=out(0.9, 0.5))
    )
    # adds -1/2 ln(1 - .5) on the conditional head; uncond part of wrong ignored
    assert abs(with_wrong - (base + 0.5 * LN2)) <= 1e-12
    also_wrong_uncond = float(
        discriminator_loss(out(0.5, 0.5), out(0.5, 0.5), wrong_out=out(0.1, 0.5))
    )
    assert with_wrong == also_wrong_uncond


def test_disc_loss_validates_all_four_inputs():
    good = out(0.5, 0.5)
    for bad in (out(1.0, 0.5), out(0.5, 0.0)):
        with pytest.raises(ValueError):
            discriminator_loss(bad, good)
        with pytest.raises(ValueError):
            discriminator_loss(good, bad)


# ---- loss report ----


def test_report_composes_totals_exactly():
    report = LossReport.from_terms(
        stage_losses=[torch.tensor(0.7), torch.tensor(1.1)],
        damsm=torch.tensor(0.33),
        lam=5.0,
        d_losses=[torch.tensor(1.4), torch.tensor(1.3)],
        text_grad_norm=0.25,
    )
    assert report.stage_total == sum(report.stage_losses)
    assert report.total == report.stage_total + report.lam * report.damsm


def test_report_dict_layout():
    report = LossReport.from_terms([0.5], 0.1, 5.0, [1.2], text_grad_norm=0.0)
    record = report.as_dict(step=7)
    assert record["step"] == 7
    assert set(record) == {
        "step", "L_G", "L_stage", "L_stage_total", "L_DAMSM",
        "lambda", "L_D", "text_grad_norm",
    }
    assert record["L_stage"] == [0.5]
    assert record["L_D"] == [1.2]
    assert record["L_G"] == 0.5 + 5.0 * 0.1
    no_step = report.as_dict()
    assert "step" not in no_step


def test_report_accepts_live_tensors():
    live = torch.tensor(0.5, requires_grad=True)
    report = LossReport.from_terms([live * 2], live, 5.0, [])
    assert report.stage_losses == [1.0]
    assert math.isclose(report.total, 1.0 + 5.0 * 0.5)
