"""Dropout-rate sweeps, classifier training, and report/figure emission."""

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data
from .attack import AmbiguousLabelError, AttackConfig, capture_gradients, extract_label, run_attack
from .autodiff import Tape, backward
from .nn import Expected, Resample, build_lenet, cross_entropy, forward

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


# Configuration ----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    dropout_rates: list = field(default_factory=lambda: list(DEFAULT_RATES))
    seeds: list = field(default_factory=lambda: [0])
    jobs: int = 1
    image_source: str = "synth"  # synth | cifar
    synth_kind: str = "noise"
    image_size: int = 32
    cifar_path: str = ""
    image_indices: list = field(default_factory=lambda: [0])
    iterations: int = 5800
    optimizer: str = "lbfgs"
    lr: float = 1.0
    history: int = 100
    mask_policy: str = "resample"
    label_mode: str = "extracted"
    clamp_pixels: bool = False
    out_dir: str = "runs/sweep"
    record_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dropout_rates or any(not 0.0 <= p < 1.0 for p in self.dropout_rates):
            raise ValueError(f"dropout rates must be non-empty and in [0, 1): {self.dropout_rates}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.image_indices:
            raise ValueError("image source is empty")
        if self.image_source not in ("synth", "cifar"):
            raise ValueError(f"unknown image source {self.image_source!r}")
        if self.image_source == "cifar" and not self.cifar_path:
            raise ValueError("image.source = cifar needs image.cifar_path")
        if self.image_source == "cifar" and self.image_size != 32:
            raise ValueError("CIFAR-10 images are 32x32")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.attack_config(0)

    def attack_config(self, init_seed):
        return AttackConfig(iterations=self.iterations, optimizer=self.optimizer, lr=self.lr,
                            history=self.history, mask_policy=self.mask_policy,
                            label_mode=self.label_mode, init_seed=init_seed,
                            clamp_pixels=self.clamp_pixels)

    def to_text(self):
        lines = []
        for key, attr in CONFIG_KEYS.items():
            value = getattr(self, attr)
            if isinstance(value, list):
                text = ", ".join(_fmt_scalar(v) for v in value)
            else:
                text = _fmt_scalar(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            attr = CONFIG_KEYS[key]
            kwargs[attr] = _parse_value(_FIELD_TYPES.get(attr, str), value)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


CONFIG_KEYS = {
    "sweep.dropout_rates": "dropout_rates",
    "sweep.seeds": "seeds",
    "sweep.jobs": "jobs",
    "image.source": "image_source",
    "image.synth_kind": "synth_kind",
    "image.size": "image_size",
    "image.cifar_path": "cifar_path",
    "image.indices": "image_indices",
    "attack.iterations": "iterations",
    "attack.optimizer": "optimizer",
    "attack.lr": "lr",
    "attack.history": "history",
    "attack.mask_policy": "mask_policy",
    "attack.label_mode": "label_mode",
    "attack.clamp_pixels": "clamp_pixels",
    "output.dir": "out_dir",
    "report.timing": "record_timing",
}

_FIELD_TYPES = {
    "dropout_rates": [float], "seeds": [int], "image_indices": [int],
    "jobs": int, "image_size": int, "iterations": int, "history": int,
    "lr": float, "clamp_pixels": bool, "record_timing": bool,
}


def _fmt_scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(kind, text):
    if isinstance(kind, list):
        return [_parse_value(kind[0], part.strip()) for part in text.split(",") if part.strip()]
    if kind is bool:
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if kind in (int, float):
        return kind(text)
    return text


# Sweep --------------------------------------------------------------------------

REPORT_HEADER = ["rate", "seed", "image", "true_label", "extracted_label", "label_correct",
                 "final_rmse", "final_distance", "iterations_run", "diverged", "status"]


@dataclass
class RunResult:
    rate: float
    seed: int
    image: int
    true_label: int = -1
    extracted_label: int = -1
    final_rmse: float = float("nan")
    final_distance: float = float("nan")
    iterations_run: int = 0
    diverged: bool = False
    status: str = "ok"
    wall_clock: float = 0.0
    rmse_curve: list = field(default_factory=list, repr=False)
    reconstruction: np.ndarray = field(default=None, repr=False)
    ground_truth: np.ndarray = field(default=None, repr=False)

    @property
    def label_correct(self):
        return self.true_label == self.extracted_label

    def row(self, timing=False):
        cells = [_fmt_scalar(float(self.rate)), self.seed, self.image, self.true_label,
                 self.extracted_label, int(self.label_correct), f"{self.final_rmse:.9g}",
                 f"{self.final_distance:.9g}", self.iterations_run, int(self.diverged), self.status]
        if timing:
            cells.append(f"{self.wall_clock:.3f}")
        return cells


@dataclass
class SweepReport:
    rows: list
    config: ExperimentConfig = None

    def rates(self):
        return sorted({r.rate for r in self.rows})

    def medians(self):
        """Per-rate median final RMSE, median distance and label accuracy."""
        out = {}
        for rate in self.rates():
            sel = [r for r in self.rows if r.rate == rate and r.status == "ok"]
            out[rate] = {
                "runs": len(sel),
                "median_rmse": float(np.median([r.final_rmse for r in sel])) if sel else float("nan"),
                "median_distance": float(np.median([r.final_distance for r in sel])) if sel else float("nan"),
                "label_accuracy": float(np.mean([r.label_correct for r in sel])) if sel else float("nan"),
            }
        return out

    def median_curves(self):
        """Per-rate median RMSE at each iteration, NaN where no run reached it."""
        curves = {}
        for rate in self.rates():
            runs = [r.rmse_curve for r in self.rows if r.rate == rate and r.rmse_curve]
            if not runs:
                continue
            length = max(len(c) for c in runs)
            stack = np.full((len(runs), length), np.nan)
            for i, c in enumerate(runs):
                stack[i, :len(c)] = c
            with np.errstate(all="ignore"):
                curves[rate] = np.array([np.median(col[~np.isnan(col)]) if np.any(~np.isnan(col)) else np.nan
                                         for col in stack.T])
        return curves


def _derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def load_image(config, index):
    """Ground-truth image and label for one image index of the sweep source."""
    if config.image_source == "cifar":
        rec = data.load_cifar10(config.cifar_path, index)
        return rec.image, rec.label
    image = data.synth_image(index, config.synth_kind, size=config.image_size)
    label = int(np.random.default_rng([index, 17]).integers(10))
    return image, label


def run_file_stem(rate, seed, image):
    return f"p{rate:.2f}_s{seed}_i{image}"


def run_one(config, rate, seed, image_index):
    """One (rate, seed, image) cell of the sweep. Failures land in ``status``."""
    result = RunResult(rate=rate, seed=seed, image=image_index)
    start = time.perf_counter()
    try:
        truth, label = load_image(config, image_index)
        result.true_label = label
        result.ground_truth = truth
        model = build_lenet(10, rate, seed=seed, image_size=config.image_size)
        capture = capture_gradients(model, truth, label, victim_seed=_derive_seed(seed, image_index, 1))
        try:
            result.extracted_label = extract_label(capture)
        except AmbiguousLabelError:
            result.extracted_label = -1
        trace = run_attack(model, capture, truth, config.attack_config(_derive_seed(seed, image_index, 2)))
        result.final_rmse = trace.final_rmse
        result.final_distance = trace.final_distance
        result.iterations_run = len(trace)
        result.diverged = trace.diverged
        result.rmse_curve = list(trace.rmse)
        result.reconstruction = trace.reconstruction
        result._trace = trace
    except Exception as exc:  # recorded in the report; the sweep continues
        log.exception("run rate=%s seed=%s image=%s failed", rate, seed, image_index)
        result.status = f"error: {type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
    result.wall_clock = time.perf_counter() - start
    return result


def _run_one_args(args):
    return run_one(*args)


def run_sweep(config, config_text=None):
    """Run every (rate, seed, image) triple and write all artefacts under ``out_dir``.

    ``config_text`` is copied verbatim as the config snapshot when given
    (i.e. when the config came from a file).
    """
    out = config.out_dir
    runs_dir = os.path.join(out, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", newline="\n") as fh:
        fh.write(config_text if config_text is not None else config.to_text())

    tasks = [(config, rate, seed, idx) for rate in config.dropout_rates
             for seed in config.seeds for idx in config.image_indices]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_run_one_args, tasks))
    else:
        rows = [run_one(*t) for t in tasks]

    for r in rows:
        stem = os.path.join(runs_dir, run_file_stem(r.rate, r.seed, r.image))
        trace = getattr(r, "_trace", None)
        if trace is not None:
            data.export_trace_csv(trace, stem + ".trace.csv")
            data.export_ppm(r.reconstruction, stem + ".recon.ppm")
        if r.ground_truth is not None:
            data.export_ppm(r.ground_truth, stem + ".truth.ppm")
        log.info("rate=%.2f seed=%d image=%d rmse=%.4f (%.1fs)", r.rate, r.seed, r.image,
                 r.final_rmse, r.wall_clock)

    report = SweepReport(rows, config)
    write_report(report, out)
    return report


def write_report(report, out):
    timing = bool(report.config and report.config.record_timing)
    header = REPORT_HEADER + (["wall_clock_s"] if timing else [])
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in report.rows:
            writer.writerow(r.row(timing))
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rate", "runs", "median_rmse", "median_distance", "label_accuracy"])
        for rate, m in report.medians().items():
            writer.writerow([_fmt_scalar(float(rate)), m["runs"], f"{m['median_rmse']:.9g}",
                             f"{m['median_distance']:.9g}", f"{m['label_accuracy']:.9g}"])


def emit_figures(report, out):
    """Write ``rmse_curves.csv`` and a reconstruction strip ``strip.ppm``.

    The strip shows the ground truth followed by one reconstruction per rate,
    all for the first (seed, image) pair in the report.
    """
    rates = report.rates()
    if not report.rows or not rates:
        raise ValueError("report has no rows")
    first = report.rows[0]
    picks = []
    for rate in rates:
        match = [r for r in report.rows if r.rate == rate and r.seed == first.seed and r.image == first.image
                 and r.reconstruction is not None]
        if not match:
            raise ValueError(f"no reconstruction for rate {rate} at seed {first.seed}, image {first.image}")
        picks.append(match[0].reconstruction)
    if first.ground_truth is None:
        raise ValueError("report row has no ground truth image")
    os.makedirs(out, exist_ok=True)

    curves = report.median_curves()
    length = max((len(c) for c in curves.values()), default=0)
    with open(os.path.join(out, "rmse_curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration"] + [f"rmse_p{rate:.2f}" for rate in rates])
        for i in range(length):
            row = [i]
            for rate in rates:
                c = curves.get(rate)
                v = c[i] if c is not None and i < len(c) else np.nan
                row.append("" if np.isnan(v) else f"{v:.9g}")
            writer.writerow(row)

    strip = np.concatenate([first.ground_truth] + picks, axis=2)
    data.export_ppm(strip, os.path.join(out, "strip.ppm"))


# Classifier training -------------------------------------------------------------

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


def load_split(data_dir, train_subset, test_subset=None):
    """Train/test arrays from a directory of CIFAR-10 binary batches."""
    missing = [f for f in TRAIN_FILES[:1] + [TEST_FILE] if not os.path.exists(os.path.join(data_dir, f))]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing in {data_dir!r}: {missing}")
    if train_subset > 50000:
        raise ValueError("train_subset must be <= 50000")
    labels, images = [], []
    remaining = train_subset
    for name in TRAIN_FILES:
        path = os.path.join(data_dir, name)
        if remaining <= 0 or not os.path.exists(path):
            break
        y, x = data.read_cifar10(path, limit=remaining)
        labels.append(y)
        images.append(x)
        remaining -= len(y)
    ytest, xtest = data.read_cifar10(os.path.join(data_dir, TEST_FILE), limit=test_subset)
    return np.concatenate(labels), np.concatenate(images), ytest, xtest


def evaluate_accuracy(model, images, labels, batch_size=500):
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = forward(model, images[start:start + batch_size], Expected())
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[start:start + batch_size]))
    return correct / len(labels)


def train_classifier(dropout_rate, train_subset, epochs, seed, data_dir, batch_size=64, lr=0.01,
                     momentum=0.9, test_subset=None):
    """Train the LeNet variant with momentum SGD and return held-out accuracy.

    Dropout masks are resampled per batch during training; evaluation runs
    in expected (identity) mode.
    """
    ytrain, xtrain, ytest, xtest = load_split(data_dir, train_subset, test_subset)
    model = build_lenet(10, dropout_rate, seed=seed)
    rng = np.random.default_rng([seed, 3])
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for _ in range(epochs):
        order = rng.permutation(len(ytrain))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                leaves = {k: tape.watch(v) for k, v in params.items()}
                logits = forward(model, xtrain[idx], Resample(rng), params=leaves)
                loss = cross_entropy(logits, ytrain[idx].astype(np.int64))
                grads = backward(loss, list(leaves.values()))
            for (name, g) in zip(leaves, grads):
                velocity[name] = momentum * velocity[name] + g.data
                params[name] -= lr * velocity[name]
    return evaluate_accuracy(model.with_params(params), xtest, ytest.astype(np.int64))


def write_synthetic_cifar(data_dir, n_train=2000, n_test=1000, seed=0):
    """Populate ``data_dir`` with CIFAR-10-format batches of synthetic images."""
    os.makedirs(data_dir, exist_ok=True)
    y, x = data.synth_dataset(n_train + n_test, seed)
    data.write_cifar10(os.path.join(data_dir, TRAIN_FILES[0]), zip(y[:n_train], x[:n_train]))
    data.write_cifar10(os.path.join(data_dir, TEST_FILE), zip(y[n_train:], x[n_train:]))
    return data_dir
