import numpy as np
import pytest

from dropleak import autodiff as ad
from dropleak.attack import (AmbiguousLabelError, AttackConfig, GradientCapture, attack_objective,
                             attack_objective_grad, capture_gradients, extract_label, gradient_distance, rmse,
                             run_attack)
from dropleak.nn import Expected, Fixed, build_lenet, param_gradients


def micro(p=0.0, seed=0, classes=2):
    model = build_lenet(classes, p, seed=seed, image_size=4)
    x = np.random.default_rng([seed, 1]).random(model.input_shape)
    return model, x


def test_rmse_examples():
    assert rmse(np.ones(4), np.ones(4)) == 0.0
    assert rmse(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 1.0
    assert rmse([0.0, 0.5], [0.5, 0.5]) == pytest.approx(0.35355339, abs=1e-8)
    with pytest.raises(ValueError):
        rmse(np.ones(3), np.ones(4))


def test_gradient_distance_examples():
    a = {"w": ad.constant(np.array([1.0, 2.0]))}
    b = {"w": ad.constant(np.array([1.0, 4.0]))}
    assert gradient_distance(a, a).item() == 0.0
    assert gradient_distance(a, b).item() == 4.0
    assert gradient_distance(b, a).item() == gradient_distance(a, b).item()
    with pytest.raises(ValueError):
        gradient_distance(a, {"v": np.zeros(2)})
    with pytest.raises(ValueError):
        gradient_distance(a, {"w": np.zeros(3)})


def test_extract_label_micro_model_sign_pattern():
    model = build_lenet(4, 0.0, seed=5, image_size=4)
    x = np.random.default_rng(5).random(model.input_shape)
    capture = capture_gradients(model, x, 2)
    rows = capture.grads["fc.weight"].sum(axis=1)
    assert rows[2] < 0 and np.all(np.delete(rows, 2) > 0)
    assert extract_label(capture) == 2


def test_extract_label_errors():
    with pytest.raises(KeyError):
        extract_label({"conv1.weight": np.zeros(3)})
    tie = np.zeros((3, 4))
    tie[0] = tie[2] = -1.0
    with pytest.raises(AmbiguousLabelError) as info:
        extract_label({"fc.weight": tie})
    assert info.value.candidates == [0, 2]


@pytest.mark.parametrize("p", [0.0, 0.5])
def test_extract_label_agrees_with_brute_force(p):
    # oracle: the true label is the unique candidate whose gradient reproduces the capture
    model = build_lenet(10, p, seed=11, image_size=8)
    for trial in range(5):
        rng = np.random.default_rng([trial, 2])
        x = rng.random(model.input_shape)
        label = int(rng.integers(10))
        capture = capture_gradients(model, x, label, victim_seed=trial)
        policy = Fixed(capture.mask) if capture.mask is not None else Expected()
        dists = [sum(np.sum((g - capture.grads[k]) ** 2) for k, g in param_gradients(model, x, c, policy).items())
                 for c in range(10)]
        assert int(np.argmin(dists)) == label == extract_label(capture)
        assert min(dists) == 0.0


def test_capture_rejects_non_finite():
    with pytest.raises(ValueError):
        GradientCapture({"w": np.array([np.nan])})


def test_objective_zero_at_truth_with_victim_mask():
    model, x = micro(p=0.5, seed=3)
    capture = capture_gradients(model, x, 1, victim_seed=4)
    d, g = attack_objective(model, x, 1, capture, Fixed(capture.mask))
    assert d == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_objective_gradient_matches_finite_differences():
    model, truth = micro(seed=1)
    capture = capture_gradients(model, truth, 0)
    x = np.random.default_rng(12).random(model.input_shape)
    analytic = attack_objective_grad(model, x, 0, capture, Expected())
    eps = 1e-5
    numeric = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        numeric.flat[i] = (attack_objective(model, x + e, 0, capture, Expected())[0]
                           - attack_objective(model, x - e, 0, capture, Expected())[0]) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-3


def test_objective_is_bit_identical_on_recompute():
    model, truth = micro(seed=2)
    capture = capture_gradients(model, truth, 1)
    x = np.random.default_rng(0).random(model.input_shape)
    a = attack_objective(model, x, 1, capture, Expected())
    b = attack_objective(model, x, 1, capture, Expected())
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_attack_from_truth_with_oracle_mask_stays_put():
    model, x = micro(p=0.5, seed=6)
    capture = capture_gradients(model, x, 0, victim_seed=1)
    trace = run_attack(model, capture, x, AttackConfig(iterations=10, mask_policy="oracle"), init=x)
    assert len(trace) == 10
    assert max(trace.rmse) < 1e-6


def test_attack_trace_invariants_and_determinism():
    model, x = micro(seed=7)
    capture = capture_gradients(model, x, 1)
    cfg = AttackConfig(iterations=25, init_seed=3)
    a = run_attack(model, capture, x, cfg)
    b = run_attack(model, capture, x, cfg)
    assert len(a) == 25 and a.label == 1
    assert all(d >= 0 for d in a.distance) and all(r >= 0 for r in a.rmse)
    assert a.distance == b.distance and a.rmse == b.rmse
    assert np.all((a.reconstruction >= 0) & (a.reconstruction <= 1))


def test_distance_non_increasing_at_p0():
    model = build_lenet(10, 0.0, seed=1, image_size=16)
    x = np.random.default_rng(1).random(model.input_shape)
    capture = capture_gradients(model, x, 3)
    trace = run_attack(model, capture, x, AttackConfig(iterations=60, init_seed=1))
    d = np.array(trace.distance)
    non_increasing = np.mean(np.diff(d) <= 0)
    assert non_increasing >= 0.95


def test_oracle_mask_attack_drives_distance_down_on_micro_model():
    model = build_lenet(10, 0.5, seed=2, image_size=8)
    x = np.random.default_rng(2).random(model.input_shape)
    capture = capture_gradients(model, x, 5, victim_seed=9)
    trace = run_attack(model, capture, x, AttackConfig(iterations=150, mask_policy="oracle", init_seed=2))
    assert trace.final_distance < 1e-6


def test_joint_label_mode_runs_and_reports_label():
    model, x = micro(seed=8)
    capture = capture_gradients(model, x, 1)
    trace = run_attack(model, capture, x, AttackConfig(iterations=15, label_mode="joint", init_seed=0))
    assert len(trace) == 15 and trace.label in (0, 1)


def test_adam_and_clamp_options():
    model, x = micro(seed=9)
    capture = capture_gradients(model, x, 0)
    trace = run_attack(model, capture, x, AttackConfig(iterations=10, optimizer="adam", lr=0.05,
                                                        clamp_pixels=True))
    assert len(trace) == 10


def test_expected_policy_attack_runs_with_dropout():
    model, x = micro(p=0.3, seed=10)
    capture = capture_gradients(model, x, 0, victim_seed=2)
    trace = run_attack(model, capture, x, AttackConfig(iterations=5, mask_policy="expected"))
    assert len(trace) == 5


def test_oracle_requires_mask():
    model, x = micro(p=0.3, seed=10)
    capture = capture_gradients(model, x, 0)
    capture.mask = None
    with pytest.raises(ValueError):
        run_attack(model, capture, x, AttackConfig(iterations=2, mask_policy="oracle"))


@pytest.mark.parametrize("kwargs", [dict(iterations=0), dict(lr=-1.0), dict(history=0),
                                    dict(optimizer="sgd"), dict(mask_policy="x"), dict(label_mode="x")])
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)
