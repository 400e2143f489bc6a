import json

import numpy as np
import pytest
import torch

from fedleak import attacks, nn
from fedleak.attacks import AttackConfig, AttackTarget
from fedleak.leakage import infer_all_layers

D64 = torch.float64


@pytest.fixture(scope="module")
def small_lr():
    spec = nn.build_model("logreg", input_shape=(1, 6, 6))
    params = nn.init_params(spec, 0)
    x = torch.rand((1, 1, 6, 6), generator=torch.Generator().manual_seed(1), dtype=D64)
    return spec, params, x


@pytest.fixture(scope="module")
def tiny():
    spec = nn.build_model("tiny-convfc", input_shape=(1, 8, 8))
    params = nn.init_params(spec, 2)
    x = torch.rand((1, 1, 8, 8), generator=torch.Generator().manual_seed(5), dtype=D64)
    return spec, params, x


def test_mse_examples():
    x = torch.zeros(1, 2, 2)
    assert attacks.mse(x, x) == 0.0
    assert attacks.mse(x, torch.ones(1, 2, 2)) == 1.0
    assert attacks.mse(x, x + 0.1) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        attacks.mse(x, torch.zeros(2, 2))


def test_infer_label_single_sample(tiny):
    spec, params, x = tiny
    g = nn.batch_gradient(spec, params, x, torch.tensor([3]))
    assert attacks.infer_label(g["3.weight"]) == 3
    assert attacks.infer_label(-0.1 * g["3.weight"], is_delta=True) == 3


def test_infer_label_two_class_uniform_logits():
    # C=2, equal logits, label 1: coefficients (0.5, -0.5) times a positive r
    r = torch.tensor([0.2, 1.0, 0.4], dtype=D64)
    g = torch.outer(torch.tensor([0.5, -0.5], dtype=D64), r)
    assert attacks.infer_label(g) == 1


def test_infer_label_mixed_batch_is_ambiguous(tiny):
    spec, params, _ = tiny
    x = torch.rand((2, 1, 8, 8), generator=torch.Generator().manual_seed(0), dtype=D64)
    g = nn.batch_gradient(spec, params, x, torch.tensor([1, 6]))
    with pytest.raises(attacks.LabelAmbiguityError):
        attacks.infer_label(g["3.weight"])
    with pytest.raises(attacks.LabelAmbiguityError):
        attacks.infer_label(torch.zeros(3, 4))


def test_objectives_vanish_at_truth(tiny):
    spec, params, x = tiny
    names = list(params)
    target = AttackTarget(spec, params, nn.batch_gradient(spec, params, x, torch.tensor([4])), x, 4)
    p = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    tgt = [target.gradient[n] for n in names]
    assert float(attacks.dlg_objective(spec, p, names, tgt, x, 4).detach()) == 0.0
    assert abs(float(attacks.gs_objective(spec, p, names, tgt, x, 4).detach())) < 1e-12
    delta = {k: -v for k, v in target.gradient.items()}
    inferred = infer_all_layers(delta, spec, tau=1.0)
    reps = {3: inferred.reps[(4, 3)]}
    assert float(attacks.rep_objective(spec, params, reps, x)) == pytest.approx(-1.0, abs=1e-12)


def test_dlg_from_truth_needs_no_iterations(tiny):
    spec, params, x = tiny
    target = attacks.capture_target(spec, params, x, 2)
    res = attacks.dlg_attack(target, AttackConfig("dlg", iterations=5), init=x)
    assert res.iterations == 0 and res.mse == 0.0


def test_dlg_recovers_linear_model_input(small_lr):
    spec, params, x = small_lr
    target = attacks.capture_target(spec, params, x, 7)
    res = attacks.dlg_attack(target, AttackConfig("dlg", iterations=300))
    assert res.label == 7
    assert res.mse < 1e-6
    accepted = res.loss_trace
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))


def test_gs_trajectory_ignores_target_scale(tiny):
    spec, params, x = tiny
    target = attacks.capture_target(spec, params, x, 1)
    scaled = AttackTarget(spec, params, {k: 5 * v for k, v in target.gradient.items()}, x, 1)
    cfg = AttackConfig("gs", iterations=15)
    a = attacks.gs_attack(target, cfg)
    b = attacks.gs_attack(scaled, cfg)
    assert np.allclose(a.loss_trace, b.loss_trace, atol=1e-10)
    assert torch.allclose(a.x, b.x, atol=1e-8)


def test_gs_rejects_zero_gradient(tiny):
    spec, params, x = tiny
    zero = AttackTarget(spec, params, {k: torch.zeros_like(v) for k, v in params.items()}, x, 0)
    with pytest.raises(ValueError):
        attacks.gs_attack(zero, AttackConfig("gs", iterations=2))


def test_attack_results_are_deterministic_and_clamped(tiny):
    spec, params, x = tiny
    target = attacks.capture_target(spec, params, x, 1)
    cfg = AttackConfig("gs", iterations=10, seed=3)
    a, b = attacks.gs_attack(target, cfg), attacks.gs_attack(target, cfg)
    assert torch.equal(a.x, b.x) and a.loss_trace == b.loss_trace
    assert float(a.x.min()) >= 0 and float(a.x.max()) <= 1
    assert a.x.shape == x.shape
    d = json.loads(a.to_json())
    assert "wall_clock" not in d and "wall_clock" in a.to_dict(timing=True)


def test_clg_portion_uses_conv_gradients_only(tiny):
    spec, params, _ = tiny
    assert attacks._selected(spec, list(params), "clg") == ["0.weight"]
    logreg = nn.build_model("logreg")
    target = AttackTarget(logreg, nn.init_params(logreg, 0), {"1.weight": torch.ones(10, 784)})
    with pytest.raises(ValueError):
        attacks.gradient_attack(target, AttackConfig("dlg", portion="clg", iterations=1))


def test_joint_label_fallback(tiny):
    spec, params, x = tiny
    x2 = torch.cat([x, torch.rand_like(x)])
    grads = nn.batch_gradient(spec, params, x2, torch.tensor([1, 6]))
    res = attacks.dlg_attack(AttackTarget(spec, params, grads), AttackConfig("dlg", iterations=3))
    assert res.extra["joint_label"]


def test_rep_attack_scale_calibration(tiny):
    spec, params, x = tiny
    target = attacks.capture_target(spec, params, x, 5)
    inferred = infer_all_layers({k: -v for k, v in target.gradient.items()}, spec, tau=1.0)
    res = attacks.rep_attack(inferred, spec, params, AttackConfig("rep", iterations=200), true_x=x,
                             init=0.5 * x, update_scale=1.0)
    assert res.extra["scale"] == pytest.approx(2.0, rel=1e-6)
    assert res.mse < 1e-10
    with pytest.raises(ValueError):
        flat = type(inferred)([5], {(5, 3): torch.ones(192, dtype=D64)})
        attacks.rep_attack(flat, spec, params)


def test_config_defaults_and_validation():
    assert AttackConfig("gs").optimizer == "adam" and AttackConfig("gs").iterations == 120
    assert AttackConfig("dlg").optimizer == "lbfgs" and AttackConfig("dlg").iterations == 300
    with pytest.raises(ValueError):
        AttackConfig("mystery")
    with pytest.raises(ValueError):
        AttackConfig("dlg", iterations=0)


@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_roundtrip(tmp_path, channels):
    gen = torch.Generator().manual_seed(channels)
    img = torch.randint(0, 256, (channels, 5, 7), generator=gen).double() / 255
    attacks.write_pnm(tmp_path / "i.pnm", img)
    raw = (tmp_path / "i.pnm").read_bytes()
    assert raw.startswith(b"P5" if channels == 1 else b"P6")
    assert torch.equal(attacks.read_pnm(tmp_path / "i.pnm"), img)
