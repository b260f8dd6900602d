"""Experiment harness: run configuration, training runs with divergence
tracking, learning-rate sweeps, verification suites, and checkpoints.

A run is fully determined by (RunConfig, seed): batch order, initialization,
and arithmetic are all seeded, so repeated runs emit byte-identical CSV.
Divergence (non-finite loss, loss above a threshold multiple of the initial
one, or a linear-algebra failure during a step) is a recorded outcome of a
run, never a crash.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from . import nn, olm, stiefel
from .data import FormatError, LengthError
from .linalg import LinalgError, qr_unique

CHECKPOINT_MAGIC = b"OLM1"
LR_GRID_DEFAULT = (0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0)


class ConfigError(ValueError):
    """Raised for unknown config keys or invalid values."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    dataset: str = "mnist"  # mnist | synth
    dataset_dir: str = "data/mnist"
    hidden_layers: int = 4
    hidden_width: int = 100
    method: str = "olm"
    methods: tuple = ()  # sweep only; empty means (method,)
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr: float = 0.1
    lr_grid: tuple = LR_GRID_DEFAULT
    lr_decay: str = "none"  # none | exponential
    lr_decay_target: float = 0.01  # final-epoch lr as a fraction of lr
    batch_size: int = 1024
    epochs: int = 20
    group_size: int = 64
    with_scale: bool = False
    batchnorm: bool = False
    seed: int = 0
    divergence_factor: float = 10.0
    weight_decay: float = 0.0
    decay_v: bool = False
    eps_reg: Optional[float] = None
    synth_classes: int = 10
    synth_dim: int = 20
    synth_per_class: int = 200

    def __post_init__(self) -> None:
        if self.dataset not in ("mnist", "synth"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.method not in nn.METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        for m in self.methods:
            if m not in nn.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "exponential"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if not self.lr_grid or any(v <= 0 for v in self.lr_grid):
            raise ConfigError("lr_grid must be nonempty with positive entries")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ConfigError("bad architecture dimensions")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.divergence_factor <= 1:
            raise ConfigError("divergence_factor must be > 1")
        if not (0.0 < self.lr_decay_target <= 1.0):
            raise ConfigError("lr_decay_target must be in (0, 1]")


_BOOL_WORDS = {
    "true": True,
    "1": True,
    "yes": True,
    "false": False,
    "0": False,
    "no": False,
}


def _coerce(name: str, kind, value: str):
    try:
        if name == "eps_reg":
            word = value.strip().lower()
            return None if word in ("none", "") else float(value)
        if name == "lr_grid":
            return tuple(float(v) for v in value.split(",") if v.strip())
        if name == "methods":
            return tuple(v.strip() for v in value.split(",") if v.strip())
        if kind is bool:
            word = value.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {value!r}")
            return _BOOL_WORDS[word]
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from exc


_FIELD_TYPES = {
    "dataset": str,
    "dataset_dir": str,
    "hidden_layers": int,
    "hidden_width": int,
    "method": str,
    "methods": tuple,
    "optimizer": str,
    "momentum": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "lr": float,
    "lr_grid": tuple,
    "lr_decay": str,
    "lr_decay_target": float,
    "batch_size": int,
    "epochs": int,
    "group_size": int,
    "with_scale": bool,
    "batchnorm": bool,
    "seed": int,
    "divergence_factor": float,
    "weight_decay": float,
    "decay_v": bool,
    "eps_reg": float,
    "synth_classes": int,
    "synth_dim": int,
    "synth_per_class": int,
}


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse key=value lines (# starts a comment) into a RunConfig.

    Unknown keys and malformed values raise ConfigError.
    """
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            overrides[key] = _coerce(key, _FIELD_TYPES[key], value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    if base is None:
        return RunConfig(**overrides)
    return dataclasses.replace(base, **overrides)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _find_idx(dataset_dir: str, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        path = os.path.join(dataset_dir, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {dataset_dir}")


def load_datasets(config: RunConfig, dataset_dir: Optional[str] = None):
    """Resolve the (train, test) dataset pair named by the config."""
    if config.dataset == "mnist":
        base = dataset_dir or config.dataset_dir
        train = data_mod.load_idx(
            _find_idx(base, "train-images-idx3-ubyte"),
            _find_idx(base, "train-labels-idx1-ubyte"),
        )
        test = data_mod.load_idx(
            _find_idx(base, "t10k-images-idx3-ubyte"),
            _find_idx(base, "t10k-labels-idx1-ubyte"),
        )
        return train, test
    # synth: one draw, split in half so train and test share class means
    per = config.synth_per_class
    whole = data_mod.synth_gaussians(
        config.synth_classes, config.synth_dim, 2 * per, seed=config.seed
    )
    cols = np.arange(whole.count).reshape(config.synth_classes, 2 * per)
    train_idx = cols[:, :per].ravel()
    test_idx = cols[:, per:].ravel()
    train = data_mod.Dataset(
        whole.features[:, train_idx], whole.labels[train_idx], whole.num_classes
    )
    test = data_mod.Dataset(
        whole.features[:, test_idx], whole.labels[test_idx], whole.num_classes
    )
    return train, test


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    lr: float
    train_loss: list = field(default_factory=list)  # per completed epoch
    train_err: list = field(default_factory=list)
    test_err: list = field(default_factory=list)
    diverged: bool = False
    diverged_epoch: Optional[int] = None
    trigger_loss: float = float("nan")
    wall_time: float = 0.0
    csv_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)

    @property
    def final_train_loss(self) -> float:
        return self.train_loss[-1] if self.train_loss else float("nan")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _lr_schedule(config: RunConfig, epoch: int) -> float:
    if config.lr_decay == "none" or config.epochs == 1:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr * config.lr_decay_target**frac


def run_name(config: RunConfig) -> str:
    return f"{config.method}_lr{config.lr:g}"


def _write_meta(config: RunConfig, train, path: str) -> None:
    lines = [
        f"dataset={config.dataset}",
        f"train_count={train.count}",
        f"feature_dim={train.dim}",
        f"num_classes={train.num_classes}",
        "normalization=divide_by_255" if config.dataset == "mnist" else "normalization=none",
        f"method={config.method}",
        f"optimizer={config.optimizer}",
        f"lr={config.lr:g}",
        f"lr_decay={config.lr_decay}",
        f"batch_size={config.batch_size}",
        f"epochs={config.epochs}",
        f"group_size={config.group_size}",
        f"with_scale={config.with_scale}",
        f"batchnorm={config.batchnorm}",
        f"weight_decay={config.weight_decay:g}",
        f"seed={config.seed}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def build_run_net(config: RunConfig, in_dim: int, num_classes: int) -> nn.NetState:
    rng = np.random.default_rng([config.seed, 0xFFFFFFFF])
    net = nn.build_mlp(
        in_dim,
        num_classes,
        config.hidden_width,
        config.hidden_layers,
        config.method,
        config.group_size,
        rng,
        with_scale=config.with_scale,
        with_batchnorm=config.batchnorm,
        eps_reg=config.eps_reg,
    )
    net.opt = nn.OptConfig(
        kind=config.optimizer,
        momentum=config.momentum,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        decay_v=config.decay_v,
    )
    return net


def run_experiment(
    config: RunConfig,
    dataset_dir: Optional[str] = None,
    out_dir: Optional[str] = None,
    datasets=None,
) -> RunResult:
    """Train one (method, lr) configuration and record its learning curve.

    Per-epoch rows are appended to `<method>_lr<lr>.csv` under out_dir as
    they are produced; a divergence terminates the run with a final row
    carrying diverged=1. The trained weights are checkpointed next to the
    CSV when the run completes all epochs.
    """
    start = time.perf_counter()
    train, test = datasets if datasets is not None else load_datasets(config, dataset_dir)
    net = build_run_net(config, train.dim, train.num_classes)
    result = RunResult(method=config.method, lr=config.lr)

    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, run_name(config))
        result.csv_path = stem + ".csv"
        _write_meta(config, train, stem + ".meta")
        csv_file = open(result.csv_path, "w", encoding="utf-8")
        csv_file.write("epoch,train_loss,train_err,test_err,diverged\n")

    def emit(row: str) -> None:
        if csv_file is not None:
            csv_file.write(row + "\n")
            csv_file.flush()

    init_loss = None
    try:
        for epoch in range(config.epochs):
            lr = _lr_schedule(config, epoch)
            for feats, labels in data_mod.batches(
                train, config.batch_size, config.seed, epoch
            ):
                try:
                    with np.errstate(all="ignore"):
                        logits, caches = nn.net_forward(net, feats, train=True)
                        loss, d_logits = nn.softmax_xent(logits, labels)
                except LinalgError:
                    loss = float("nan")
                if init_loss is None:
                    init_loss = loss
                if not np.isfinite(loss) or loss > config.divergence_factor * init_loss:
                    result.diverged = True
                    result.diverged_epoch = epoch
                    result.trigger_loss = loss
                    break
                try:
                    with np.errstate(all="ignore"):
                        grads, _ = nn.net_backward(net, d_logits, caches)
                        nn.net_apply_grads(net, grads, lr)
                except LinalgError:
                    result.diverged = True
                    result.diverged_epoch = epoch
                    result.trigger_loss = loss
                    break
            if result.diverged:
                emit(
                    f"{result.diverged_epoch},{_fmt(result.trigger_loss)},"
                    f"{_fmt(float('nan'))},{_fmt(float('nan'))},1"
                )
                break
            with np.errstate(all="ignore"):
                train_loss, train_err = nn.net_eval(
                    net, train.features, train.labels, config.batch_size
                )
                _, test_err = nn.net_eval(
                    net, test.features, test.labels, config.batch_size
                )
            result.train_loss.append(train_loss)
            result.train_err.append(train_err)
            result.test_err.append(test_err)
            emit(
                f"{epoch},{_fmt(train_loss)},{_fmt(train_err)},{_fmt(test_err)},0"
            )
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None and not result.diverged:
        result.checkpoint_path = os.path.join(out_dir, run_name(config) + ".ckpt")
        export_checkpoint(net, result.checkpoint_path)
    result.wall_time = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_SWEEP_DATASETS = None  # set in the parent before forking workers


def _sweep_point(args):
    config, dataset_dir, out_dir = args
    return run_experiment(
        config, dataset_dir=dataset_dir, out_dir=out_dir, datasets=_SWEEP_DATASETS
    )


def sweep(
    config: RunConfig,
    dataset_dir: Optional[str] = None,
    out_dir: Optional[str] = None,
    jobs: int = 1,
):
    """Run the full methods x lr_grid grid and pick per-method best lrs.

    The best lr for a method minimizes the final-epoch training loss among
    runs that did not diverge; a method whose every lr diverged is marked
    "no stable lr". Returns (results, summary_text).
    """
    global _SWEEP_DATASETS
    methods = config.methods or (config.method,)
    points = [
        (dataclasses.replace(config, method=m, methods=(), lr=lr), dataset_dir, out_dir)
        for m in methods
        for lr in config.lr_grid
    ]
    _SWEEP_DATASETS = load_datasets(config, dataset_dir)
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_sweep_point, points))
        else:
            results = [_sweep_point(p) for p in points]
    finally:
        _SWEEP_DATASETS = None

    summary = summarize(config, methods, results)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(summary)
    return results, summary


def summarize(config: RunConfig, methods, results) -> str:
    lines = [
        "sweep summary",
        f"dataset={config.dataset} seed={config.seed} epochs={config.epochs} "
        f"batch_size={config.batch_size} optimizer={config.optimizer}",
        f"lr_grid={','.join(f'{v:g}' for v in config.lr_grid)}",
    ]
    by_method: dict = {m: [] for m in methods}
    for res in results:
        by_method[res.method].append(res)
    for m in methods:
        runs = by_method[m]
        stable = [r for r in runs if not r.diverged]
        diverged_lrs = ",".join(f"{r.lr:g}" for r in runs if r.diverged) or "-"
        if not stable:
            lines.append(f"method={m} no stable lr diverged_lrs=[{diverged_lrs}]")
            continue
        best = min(stable, key=lambda r: r.final_train_loss)
        lines.append(
            f"method={m} best_lr={best.lr:g} "
            f"final_train_loss={best.final_train_loss:.6g} "
            f"final_train_err={best.train_err[-1]:.6g} "
            f"final_test_err={best.test_err[-1]:.6g} "
            f"diverged_lrs=[{diverged_lrs}]"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------


@dataclass
class Report:
    suite: str
    total: int
    failures: list = field(default_factory=list)  # instance descriptors
    worst: float = 0.0
    lines: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        head = (
            f"[{status}] suite={self.suite} instances={self.total} "
            f"failures={len(self.failures)} worst={self.worst:.3e}"
        )
        body = [head]
        body.extend(f"  failed: {f}" for f in self.failures)
        body.extend(f"  {line}" for line in self.lines)
        return "\n".join(body)


def _fd_grad(fn, x, step: float = 1e-5):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = fn()
        x[idx] = old - step
        lo = fn()
        x[idx] = old
        g[idx] = (hi - lo) / (2.0 * step)
        it.iternext()
    return g


def _rel_err(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _distinct_gap_params(rng, n, d, group_size, with_scale, tries=100):
    """Draw OlmParams whose per-group covariance spectra are well separated,
    so finite differences of the eigendecomposition are trustworthy."""
    for _ in range(tries):
        params = olm.init_olm_params(n, d, group_size, rng, with_scale=with_scale)
        ok = True
        for start, stop in olm.group_slices(n, group_size):
            v_c, _ = olm.center(params.v[start:stop])
            sigma = (v_c @ v_c.T + (v_c @ v_c.T).T) / 2.0
            lam = np.sort(np.linalg.eigvalsh(sigma))[::-1]
            if lam.size > 1 and np.min(np.diff(-lam)) < 1e-3 * max(lam[0], 1e-12):
                ok = False
                break
        if ok:
            return params
    raise RuntimeError("could not draw a well-separated spectrum")


def gradcheck_suite(instances: int = 50, seed: int = 0, tol: float = 1e-5) -> Report:
    """Finite-difference validation of the orthogonalization backward pass
    (V, bias, scale, input) plus whole-network checks on 2-layer nets."""
    report = Report(suite="gradcheck", total=instances)
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(1, 7))
        # d >= 3 always: the 1x2 group transform is constant with an exactly
        # zero gradient, which finite differences cannot meaningfully rate
        d = int(rng.integers(max(3, n + 1), 13))
        gs_pick = int(rng.choice([1, 2, n]))
        gs = max(1, min(gs_pick, n, d - 1))
        with_scale = bool(i % 2)
        m = int(rng.integers(1, 8))
        params = _distinct_gap_params(rng, n, d, gs, with_scale)
        h = np.ascontiguousarray(rng.normal(size=(d, m)))
        probe = rng.normal(size=(n, m))
        method = "olm_var" if i % 3 == 2 else "olm"

        def loss():
            s, _ = olm.olm_forward(params, h, method=method)
            return float((s * probe).sum())

        s, cache = olm.olm_forward(params, h, method=method)
        d_v, d_b, d_g, d_h = olm.olm_backward(probe, cache, params, method=method)
        worst = _rel_err(d_v, _fd_grad(loss, params.v))
        worst = max(worst, _rel_err(d_b, _fd_grad(loss, params.bias)))
        if with_scale:
            worst = max(worst, _rel_err(d_g, _fd_grad(loss, params.scale)))
        worst = max(worst, _rel_err(d_h, _fd_grad(loss, h)))
        report.worst = max(report.worst, worst)
        if worst >= tol:
            report.failures.append(f"olm instance seed=[{seed},{i}] rel_err={worst:.3e}")
    report.lines.append(f"olm layer instances: {instances}, tol {tol:g}")

    # whole-network checks: 2-layer nets, every training method family
    net_tol = 1e-4
    for j, method in enumerate(("plain", "wn", "olm", "olm_var", "ei_qr")):
        rng = np.random.default_rng([seed, 1000 + j])
        net = nn.build_mlp(
            5, 3, 7, 1, method, group_size=3, rng=rng,
            with_scale=method.startswith("olm"),
        )
        x = np.ascontiguousarray(rng.normal(size=(5, 6)))
        y = rng.integers(0, 3, size=6)

        def net_loss():
            logits, _ = nn.net_forward(net, x, train=True)
            return nn.softmax_xent(logits, y)[0]

        logits, caches = nn.net_forward(net, x, train=True)
        _, d_logits = nn.softmax_xent(logits, y)
        grads, _ = nn.net_backward(net, d_logits, caches)
        worst = 0.0
        for li, layer in enumerate(net.layers):
            if not grads[li]:
                continue
            for name, g in grads[li].items():
                num = _fd_grad(net_loss, getattr(layer, name))
                worst = max(worst, _rel_err(g, num))
        report.worst = max(report.worst, worst)
        if worst >= net_tol:
            report.failures.append(f"net method={method} rel_err={worst:.3e}")
    report.lines.append(f"whole-net 2-layer checks: 5 methods, tol {net_tol:g}")
    return report


def distortion_suite(instances: int = 20, seed: int = 0) -> Report:
    """The symmetric inverse-square-root transform beats random competing
    orthogonalizations, and beats the eigenbasis variant on most draws."""
    report = Report(suite="distortion", total=instances)
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2, 7))
        d = int(rng.integers(n + 1, 13))
        v = rng.normal(size=(n, d))
        w_star, cache = olm.orth_transform(v)
        if not olm.min_distortion_check(cache.v_c, w_star, trials=1000, seed=seed + i):
            report.failures.append(f"min_distortion instance seed=[{seed},{i}]")
    report.lines.append("min-distortion vs 1000 random rotations per instance")

    wins = 0
    trials = 20
    for i in range(trials):
        rng = np.random.default_rng([seed, 500 + i])
        v = rng.normal(size=(3, 6))
        w_star, cache = olm.orth_transform(v)
        w_var = olm.orth_transform_var(v)
        if olm.distortion(w_var, cache.v_c) > olm.distortion(w_star, cache.v_c):
            wins += 1
    report.lines.append(f"variant transform distortion higher on {wins}/{trials} draws")
    if wins < 19:
        report.failures.append(f"variant beat minimal-distortion too often: {wins}/{trials}")
    report.worst = float(trials - wins)
    return report


def manifold_suite(instances: int = 1000, seed: int = 0) -> Report:
    """Tangency of both Riemannian gradients and orthonormality of every
    step rule's output, plus the zero-step identity of the Cayley curve."""
    report = Report(suite="manifold", total=instances)
    tol_orth = 1e-8
    tol_tangent = 1e-9
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        d = int(rng.integers(1, 7))
        n = int(rng.integers(d, 11))
        st = stiefel.StiefelState(qr_unique(rng.normal(size=(n, d))).q)
        g = rng.normal(size=(n, d))
        lr = float(rng.uniform(1e-4, 1.0))
        for riem in (stiefel.riem_grad_euclidean, stiefel.riem_grad_canonical):
            z = riem(st, g)
            tang = np.abs(st.w.T @ z + z.T @ st.w).max()
            report.worst = max(report.worst, tang)
            if tang > tol_tangent:
                report.failures.append(
                    f"tangency instance seed=[{seed},{i}] {riem.__name__} {tang:.3e}"
                )
        steps = (
            ("ei_qr", stiefel.qr_retraction_step(st, stiefel.riem_grad_euclidean(st, g), lr)),
            ("ci_qr", stiefel.qr_retraction_step(st, stiefel.riem_grad_canonical(st, g), lr)),
            ("cayt", stiefel.cayley_step(st, g, lr)),
            ("qr_proj", stiefel.qr_projection_step(st, g, lr)),
        )
        for name, out in steps:
            err = np.abs(out.w.T @ out.w - np.eye(d)).max()
            report.worst = max(report.worst, err)
            if err > tol_orth:
                report.failures.append(
                    f"orthonormality instance seed=[{seed},{i}] {name} {err:.3e}"
                )
        if not np.array_equal(stiefel.cayley_step(st, g, 0.0).w, st.w):
            report.failures.append(f"cayley zero-step instance seed=[{seed},{i}]")
    report.lines.append(
        f"orthonormality tol {tol_orth:g}, tangency tol {tol_tangent:g}, "
        "zero-step Cayley identity"
    )
    return report


def theorem1_suite(seed: int = 0, samples: int = 100_000) -> Report:
    """Norm/gradient preservation of square orthogonal maps and covariance
    propagation of the orthogonalizing transform under Gaussian input."""
    report = Report(suite="theorem1", total=3)
    rng = np.random.default_rng(seed)
    tol = 1e-10

    worst_norm = 0.0
    worst_grad = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 9))
        w = qr_unique(rng.normal(size=(d, d))).q
        x = rng.normal(size=d)
        g = rng.normal(size=d)
        nx = np.linalg.norm(x)
        worst_norm = max(worst_norm, abs(np.linalg.norm(w @ x) - nx) / max(nx, 1e-300))
        ng = np.linalg.norm(g)
        worst_grad = max(worst_grad, abs(np.linalg.norm(w.T @ g) - ng) / max(ng, 1e-300))
    report.lines.append(f"norm preservation worst rel dev {worst_norm:.3e}")
    report.lines.append(f"gradient norm preservation worst rel dev {worst_grad:.3e}")
    if worst_norm > tol:
        report.failures.append(f"norm preservation {worst_norm:.3e} > {tol:g}")
    if worst_grad > tol:
        report.failures.append(f"gradient norm preservation {worst_grad:.3e} > {tol:g}")

    n, d = 3, 8
    sigma2 = 1.7
    w, _ = olm.orth_transform(rng.normal(size=(n, d)))
    x = rng.normal(0.0, np.sqrt(sigma2), size=(d, samples))
    s = w @ x
    cov = (s @ s.T) / samples
    bound = 3.0 * sigma2 / np.sqrt(samples)
    dev = np.abs(cov - sigma2 * np.eye(n)).max()
    report.lines.append(
        f"covariance propagation max entry dev {dev:.3e} (bound {bound:.3e})"
    )
    if dev > bound:
        report.failures.append(f"covariance deviation {dev:.3e} > {bound:.3e}")
    report.worst = max(worst_norm, worst_grad, dev / bound * tol)
    return report


def inference_equiv_suite(configs: int = 20, batches_per: int = 10, seed: int = 0) -> Report:
    """Exported effective weights driven through the plain affine map must
    reproduce the training-time forward outputs bit for bit."""
    report = Report(suite="inference_equiv", total=configs)
    for i in range(configs):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(1, 9))
        d = int(rng.integers(max(2, n + 1), 15))
        gs = max(1, min(int(rng.choice([1, 2, n])), n, d - 1))
        with_scale = bool(i % 2)
        method = "olm_var" if i % 3 == 2 else "olm"
        params = olm.init_olm_params(n, d, gs, rng, with_scale=with_scale)
        w, bias, scale = olm.export_weights(params, method=method)
        for b in range(batches_per):
            h = np.ascontiguousarray(rng.normal(size=(d, int(rng.integers(1, 9)))))
            s_train, _ = olm.olm_forward(params, h, method=method)
            s_infer = olm.linear_apply(w, bias, scale, h)
            if not np.array_equal(s_train, s_infer):
                report.failures.append(
                    f"instance seed=[{seed},{i}] batch={b} outputs differ"
                )
                break
    report.lines.append(f"{configs} configurations x {batches_per} batches, bit-exact")
    return report


SUITES = {
    "gradcheck": gradcheck_suite,
    "distortion": distortion_suite,
    "manifold": manifold_suite,
    "theorem1": theorem1_suite,
    "inference_equiv": inference_equiv_suite,
}


def verify(suite: str, seed: int = 0) -> Report:
    """Run one named verification suite; see SUITES for the options."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; options: {sorted(SUITES)}")
    return SUITES[suite](seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_KIND_TAGS = {"linear": 1, "wn": 2, "olm": 3, "relu": 4, "batchnorm": 5}


def _pack_array(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise LengthError(
                f"{self.path}: truncated checkpoint "
                f"(needed {self.pos + count} bytes, have {len(self.raw)})"
            )
        out = self.raw[self.pos : self.pos + count]
        self.pos += count
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        buf = self.take(8 * count)
        return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def export_checkpoint(net: nn.NetState, path) -> None:
    """Serialize every layer's parameters (little-endian binary).

    Layout: magic, method id, net group size, layer count, then one record
    per layer (kind tag, dims, raw float64 arrays in field order). Optimizer
    slots are not part of a checkpoint; it captures the model, which is all
    inference needs.
    """
    chunks = [CHECKPOINT_MAGIC]
    chunks.append(struct.pack("<B", nn.METHODS.index(net.method)))
    chunks.append(struct.pack("<I", net.group_size))
    chunks.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        if isinstance(layer, olm.OlmParams):
            n, d = layer.v.shape
            has_scale = layer.scale is not None
            eps = float("nan") if layer.eps_reg is None else layer.eps_reg
            chunks.append(
                struct.pack(
                    "<BIIIBd", _KIND_TAGS["olm"], n, d, layer.group_size,
                    int(has_scale), eps,
                )
            )
            chunks.append(_pack_array(layer.v))
            chunks.append(_pack_array(layer.bias))
            if has_scale:
                chunks.append(_pack_array(layer.scale))
        elif isinstance(layer, nn.LinearParams):
            n, d = layer.w.shape
            chunks.append(struct.pack("<BII", _KIND_TAGS["linear"], n, d))
            chunks.append(_pack_array(layer.w))
            chunks.append(_pack_array(layer.bias))
        elif isinstance(layer, nn.WnParams):
            n, d = layer.v.shape
            chunks.append(struct.pack("<BII", _KIND_TAGS["wn"], n, d))
            chunks.append(_pack_array(layer.v))
            chunks.append(_pack_array(layer.g))
            chunks.append(_pack_array(layer.bias))
        elif isinstance(layer, nn.ReluMarker):
            chunks.append(struct.pack("<BI", _KIND_TAGS["relu"], layer.dim))
        elif isinstance(layer, nn.BatchNormState):
            dim = layer.gamma.shape[0]
            chunks.append(
                struct.pack("<BIdd", _KIND_TAGS["batchnorm"], dim,
                            layer.momentum, layer.eps)
            )
            chunks.append(_pack_array(layer.gamma))
            chunks.append(_pack_array(layer.beta))
            chunks.append(_pack_array(layer.running_mean))
            chunks.append(_pack_array(layer.running_var))
        else:  # pragma: no cover
            raise TypeError(f"unknown layer type {type(layer)!r}")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> nn.NetState:
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw, path)
    magic = rd.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    method_id = rd.u8()
    if method_id >= len(nn.METHODS):
        raise FormatError(f"{path}: unknown method id {method_id}")
    method = nn.METHODS[method_id]
    group_size = rd.u32()
    layer_count = rd.u32()
    layers: list = []
    for _ in range(layer_count):
        tag = rd.u8()
        if tag == _KIND_TAGS["olm"]:
            n, d, gs = rd.u32(), rd.u32(), rd.u32()
            has_scale = rd.u8()
            eps = rd.f64()
            v = rd.array((n, d))
            bias = rd.array((n,))
            scale = rd.array((n,)) if has_scale else None
            layers.append(
                olm.OlmParams(
                    v=v, bias=bias, group_size=gs, scale=scale,
                    eps_reg=None if np.isnan(eps) else eps,
                )
            )
        elif tag == _KIND_TAGS["linear"]:
            n, d = rd.u32(), rd.u32()
            layers.append(nn.LinearParams(w=rd.array((n, d)), bias=rd.array((n,))))
        elif tag == _KIND_TAGS["wn"]:
            n, d = rd.u32(), rd.u32()
            layers.append(
                nn.WnParams(v=rd.array((n, d)), g=rd.array((n,)), bias=rd.array((n,)))
            )
        elif tag == _KIND_TAGS["relu"]:
            layers.append(nn.ReluMarker(rd.u32()))
        elif tag == _KIND_TAGS["batchnorm"]:
            dim = rd.u32()
            momentum = rd.f64()
            eps = rd.f64()
            layers.append(
                nn.BatchNormState(
                    gamma=rd.array((dim,)),
                    beta=rd.array((dim,)),
                    running_mean=rd.array((dim,)),
                    running_var=rd.array((dim,)),
                    momentum=momentum,
                    eps=eps,
                )
            )
        else:
            raise FormatError(f"{path}: unknown layer tag {tag}")
    return nn.NetState(layers=layers, method=method, group_size=group_size)


def export_inference_checkpoint(src_path, dst_path) -> None:
    """Rewrite a checkpoint with every constrained layer materialized to its
    effective plain weights (scales folded in), ready for plain inference."""
    net = load_checkpoint(src_path)
    layers: list = []
    for layer, desc in zip(net.layers, nn.net_effective_layers(net)):
        if desc[0] == "affine":
            _, w, bias, scale = desc
            if scale is not None:
                w = scale[:, None] * w
            layers.append(nn.LinearParams(w=np.ascontiguousarray(w), bias=bias.copy()))
        else:
            layers.append(layer)
    out = nn.NetState(layers=layers, method="plain", group_size=net.group_size)
    export_checkpoint(out, dst_path)
