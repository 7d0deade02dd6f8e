"""Finite-difference verification of every primitive and of the LeNet loss."""

import numpy as np

from . import autodiff as ad
from .attack import attack_objective, capture_gradients
from .nn import Fixed, build_lenet, cross_entropy, dropout, forward


def _cases(rng):
    """(name, f, x) triples on micro shapes drawn from ``rng``."""
    n, m = rng.integers(2, 5, 2)
    c = ad.constant(rng.standard_normal((n, m)))
    row = ad.constant(rng.standard_normal(m))
    mat = ad.constant(rng.standard_normal((m, 3)))
    img_c = int(rng.integers(1, 3))
    kern = ad.constant(rng.uniform(-0.5, 0.5, (2, img_c, 3, 3)))
    bias = ad.constant(rng.standard_normal(2))
    mask = (rng.random((n, m)) > 0.5).astype(float)
    idx = rng.integers(0, n * m, 3)
    w = ad.constant(rng.standard_normal((3, m)))
    b = ad.constant(rng.standard_normal(3))
    label = int(rng.integers(0, 3))
    x2 = rng.standard_normal((n, m))
    conv_in = ad.constant(rng.standard_normal((1, img_c, 5, 5)))
    return [
        ("add", lambda x: ((x + c) * (x + row)).sum(), x2),
        ("sub", lambda x: ((x - c) * (row - x)).sum(), x2),
        ("mul", lambda x: (x * c * x).sum(), x2),
        ("scale", lambda x: ((x * 2.5) * x).sum(), x2),
        ("matmul", lambda x: ((x @ mat) * (x @ mat)).sum(), x2),
        ("transpose", lambda x: (ad.transpose(x) @ c).sum(), x2),
        ("reshape", lambda x: (ad.reshape(x, (-1,)) * ad.reshape(c, (-1,))).sum(), x2),
        ("sum", lambda x: (x.sum(axis=0) * x.sum(axis=0)).sum(), x2),
        ("exp", lambda x: ad.exp(x * 0.5).sum(), x2),
        ("sigmoid", lambda x: ad.sigmoid(x).sum(), x2),
        ("logsumexp", lambda x: (ad.logsumexp(x, axis=1) * ad.logsumexp(x, axis=1)).sum(), x2),
        ("take", lambda x: (ad.take(x, idx) * ad.take(x, idx)).sum(), x2),
        ("conv2d", lambda x: _conv_loss(x, kern, bias), rng.standard_normal((1, img_c, 5, 5))),
        ("conv2d_weight", lambda k: _conv_loss(conv_in, k, bias), kern.data.copy()),
        ("dropout", lambda x: (dropout(x, 0.5, Fixed(mask)) * x).sum(), x2),
        ("linear", lambda x: ad.sigmoid(x @ ad.transpose(w) + b).sum(), x2),
        ("cross_entropy", lambda x: cross_entropy(x @ ad.transpose(w) + b, [label] * n), x2),
    ]


def _conv_loss(x, kern, bias):
    y = ad.conv2d(x, kern, bias, stride=2, pad=1)
    return (y * y).sum()


def layer_gradient_errors(seeds, eps=1e-5):
    """Yield ``(check name, worst relative error over seeds)`` per layer type."""
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, x in _cases(rng):
            err = ad.grad_check(f, x, eps)
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in lenet_errors(seed, eps):
            worst[name] = max(worst.get(name, 0.0), err)
    yield from worst.items()


def lenet_errors(seed, eps=1e-5):
    """Full-loss checks on a 2-class 4x4 micro LeNet, w.r.t. input and classifier weight."""
    rng = np.random.default_rng([seed, 11])
    p = 0.5 if seed % 2 else 0.0
    model = build_lenet(2, p, seed=seed, image_size=4)
    x = rng.random(model.input_shape)
    label = int(rng.integers(0, 2))
    policy = Fixed(np.ones((1,) + model.feature_shape)) if p else None

    def loss_x(xt):
        return cross_entropy(forward(model, xt, policy), label)

    def loss_w(wt):
        params = dict(model.params)
        params["fc.weight"] = wt
        return cross_entropy(forward(model, x, policy, params=params), label)

    yield "lenet_loss_wrt_input", ad.grad_check(loss_x, x, eps)
    yield "lenet_loss_wrt_classifier", ad.grad_check(loss_w, model.params["fc.weight"], eps)


def second_order_error(seed=0, eps=1e-5):
    """Relative error of the attack objective's input gradient vs. finite differences of D."""
    rng = np.random.default_rng([seed, 5])
    model = build_lenet(2, 0.0, seed=seed, image_size=4)
    truth = rng.random(model.input_shape)
    capture = capture_gradients(model, truth, 1)
    x = rng.random(model.input_shape)
    _, analytic = attack_objective(model, x, 1, capture, None)
    numeric = np.empty_like(x)
    flat, num = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = attack_objective(model, x, 1, capture, None)[0]
        flat[i] = orig - eps
        fm = attack_objective(model, x, 1, capture, None)[0]
        flat[i] = orig
        num[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
