"""Gradient-matching reconstruction of a single training image.

The attacker sees the victim's per-parameter gradients and the architecture.
It recovers the label from the sign pattern of the classifier-weight gradient,
then searches for an input whose gradients match the captured ones.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, backward, constant
from .nn import Expected, Fixed, cross_entropy, forward, param_gradients, sample_mask, soft_cross_entropy
from .optim import LBFGS, Adam

log = logging.getLogger(__name__)

CLASSIFIER_WEIGHT = "fc.weight"


class AmbiguousLabelError(ValueError):
    """Two or more classes tie for the most negative classifier-gradient row."""

    def __init__(self, candidates):
        super().__init__(f"label extraction is ambiguous between classes {candidates}")
        self.candidates = candidates


@dataclass
class GradientCapture:
    """What an eavesdropper intercepts from one worker's update."""

    grads: dict
    dropout_rate: float = 0.0
    mask_policy: str = "resample"
    victim_seed: int = 0
    mask: np.ndarray = None  # the victim's dropout mask; only an oracle attacker may read it

    def __post_init__(self):
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"captured gradient {name!r} is not finite")


def capture_gradients(model, x, label, victim_seed=0):
    """Run the victim's training step and return its shared gradients.

    With dropout active the victim samples exactly one mask, as a real worker
    computing one update would.
    """
    mask = None
    policy = Expected()
    if model.has_dropout():
        rng = np.random.default_rng(victim_seed)
        mask = sample_mask((1,) + model.feature_shape, model.dropout_rate, rng)
        policy = Fixed(mask)
    grads = param_gradients(model, x, label, policy)
    return GradientCapture(grads, model.dropout_rate, "resample", victim_seed, mask)


def extract_label(capture, weight_key=CLASSIFIER_WEIGHT):
    """Recover the victim's label from the classifier-weight gradient.

    Row ``i`` of that gradient is ``(softmax_i - onehot_i) * h`` with ``h >= 0``
    after a sigmoid encoder, so only the true class has a negative row sum.
    """
    grads = capture.grads if isinstance(capture, GradientCapture) else capture
    if weight_key not in grads:
        raise KeyError(f"capture has no classifier gradient {weight_key!r}")
    rows = np.asarray(grads[weight_key]).sum(axis=1)
    best = rows.min()
    candidates = [int(i) for i in np.flatnonzero(rows == best)]
    if len(candidates) > 1:
        raise AmbiguousLabelError(candidates)
    return candidates[0]


def gradient_distance(dummy, target):
    """Sum over parameters of squared elementwise differences."""
    target = target.grads if isinstance(target, GradientCapture) else target
    if set(dummy) != set(target):
        raise ValueError(f"gradient key sets differ: {sorted(set(dummy) ^ set(target))}")
    total = None
    for name, d in dummy.items():
        t = target[name]
        t_shape = t.shape if isinstance(t, Tensor) else np.shape(t)
        if d.shape != t_shape:
            raise ValueError(f"shape mismatch for {name!r}: {d.shape} vs {t_shape}")
        diff = d - t
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total


def attack_objective(model, dummy_x, label, target, policy, dummy_label=None):
    """Distance ``D`` and its gradient with respect to the dummy input.

    ``label`` is a hard class index; when ``dummy_label`` (soft label logits)
    is given instead, the gradient with respect to it is returned too.
    Returns ``(D, grad_x)`` or ``(D, grad_x, grad_label)``.
    """
    target = target.grads if isinstance(target, GradientCapture) else target
    with Tape() as tape:
        x = tape.watch(dummy_x)
        leaves = {name: tape.watch(p) for name, p in model.params.items()}
        logits = forward(model, x, policy, params=leaves)
        if dummy_label is None:
            loss = cross_entropy(logits, label)
        else:
            soft = tape.watch(dummy_label)
            loss = soft_cross_entropy(logits, soft)
        grads = backward(loss, list(leaves.values()), create_graph=True)
        dist = gradient_distance(dict(zip(leaves, grads)), {k: constant(v) for k, v in target.items()})
        if dummy_label is None:
            (gx,) = backward(dist, [x])
            return dist.item(), gx.data
        gx, gl = backward(dist, [x, soft])
        return dist.item(), gx.data, gl.data


def attack_objective_grad(model, dummy_x, label, target, policy):
    """Gradient of the gradient-matching distance with respect to ``dummy_x``."""
    return attack_objective(model, dummy_x, label, target, policy)[1]


def rmse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class AttackConfig:
    iterations: int = 5800
    optimizer: str = "lbfgs"  # lbfgs | adam
    lr: float = 1.0
    history: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    mask_policy: str = "resample"  # resample | expected | oracle
    label_mode: str = "extracted"  # extracted | joint
    init_seed: int = 0
    clamp_pixels: bool = False

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_policy not in ("resample", "expected", "oracle"):
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")
        if self.label_mode not in ("extracted", "joint"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")


@dataclass
class AttackTrace:
    distance: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    reconstruction: np.ndarray = None
    label: int = None
    diverged: bool = False
    nonmonotone: int = 0

    def __len__(self):
        return len(self.distance)

    @property
    def records(self):
        return [(i, d, r) for i, (d, r) in enumerate(zip(self.distance, self.rmse))]

    @property
    def final_rmse(self):
        return self.rmse[-1] if self.rmse else float("nan")

    @property
    def final_distance(self):
        return self.distance[-1] if self.distance else float("nan")


def _make_optimizer(config):
    if config.optimizer == "lbfgs":
        return LBFGS(history_size=config.history, lr=config.lr)
    return Adam(lr=config.lr, beta1=config.beta1, beta2=config.beta2)


def run_attack(model, capture, ground_truth, config=None, init=None, callback=None):
    """Reconstruct the victim's input from ``capture``.

    ``init`` overrides the standard-normal dummy initialisation. The recorded
    RMSE compares pixels clipped to [0, 1] against ``ground_truth``; the
    optimisation variable itself is left unclipped unless ``clamp_pixels``.
    """
    config = config or AttackConfig()
    gt = np.asarray(ground_truth, dtype=np.float64)
    shape = tuple(model.input_shape)
    rng = np.random.default_rng(config.init_seed)
    x0 = rng.standard_normal(shape) if init is None else np.array(init, dtype=np.float64).reshape(shape)
    npix = x0.size
    joint = config.label_mode == "joint"
    trace = AttackTrace()
    if joint:
        z = np.concatenate([x0.ravel(), rng.standard_normal(model.num_classes)])
    else:
        trace.label = extract_label(capture)
        z = x0.ravel().copy()

    mask_rng = np.random.default_rng([config.init_seed, 1])
    if not model.has_dropout() or config.mask_policy == "expected":
        policy = Expected()
    elif config.mask_policy == "oracle":
        if capture.mask is None:
            raise ValueError("oracle mask policy needs the victim mask in the capture")
        policy = Fixed(capture.mask)
    else:
        policy = None  # fresh mask each iteration

    def closure_for(pol):
        def closure(v):
            try:
                if joint:
                    d, gx, gl = attack_objective(model, v[:npix].reshape(shape), None, capture, pol,
                                                 dummy_label=v[npix:])
                    return d, np.concatenate([gx.ravel(), gl])
                d, gx = attack_objective(model, v.reshape(shape), trace.label, capture, pol)
                return d, gx.ravel()
            except NonFiniteError:
                return float("inf"), np.full_like(v, np.nan)
        return closure

    opt = _make_optimizer(config)
    stochastic = policy is None
    f = g = None
    if not stochastic:
        closure = closure_for(policy)
        f, g = closure(z)
    for it in range(config.iterations):
        if stochastic:
            closure = closure_for(Fixed(sample_mask((1,) + model.feature_shape, model.dropout_rate, mask_rng)))
            f, g = closure(z)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            trace.diverged = True
            break
        z_new, f_new, g_new = opt.step(z, f, g, closure)
        if not np.isfinite(f_new):
            trace.diverged = True
            log.warning("attack diverged at iteration %d", it)
            break
        if config.clamp_pixels:
            z_new[:npix] = np.clip(z_new[:npix], 0.0, 1.0)
            if not stochastic:
                f_new, g_new = closure(z_new)
        z, f, g = z_new, f_new, g_new
        trace.distance.append(float(f))
        trace.rmse.append(rmse(np.clip(z[:npix].reshape(shape), 0.0, 1.0), gt))
        if callback is not None:
            callback(it, trace)
    trace.reconstruction = np.clip(z[:npix].reshape(shape), 0.0, 1.0)
    if joint:
        trace.label = int(np.argmax(z[npix:]))
    trace.nonmonotone = getattr(opt, "nonmonotone", 0)
    return trace
