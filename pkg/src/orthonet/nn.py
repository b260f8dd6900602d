"""Minimal feed-forward network stack for the experiments.

Everything is laid out feature-major: activations are (features x batch)
matrices, so a layer is s = W h + b with W of shape (out_dim, in_dim). The
functional layer ops return explicit caches; NetState glues them into a
trainable network. Supported layer kinds: plain linear, weight-normalized
linear, orthogonalized (OLM) linear, ReLU, batch normalization.

Constrained training methods share one NetState shape: for the "olm" and
"olm_var" methods the linear layers hold proxy parameters and orthogonalize
on every forward; for the manifold methods (ei_qr, ci_qr, cayt, qr_proj) the
linear layers hold ordinary weights kept row-orthonormal per group by the
stiefel update rules instead of the plain optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import olm as olm_mod
from . import stiefel
from .linalg import DimensionError, NonFiniteError, as_matrix, qr_unique

METHODS = ("plain", "wn", "olm", "olm_var", "ei_qr", "ci_qr", "cayt", "qr_proj")
MANIFOLD_METHODS = ("ei_qr", "ci_qr", "cayt", "qr_proj")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    w: NDArray[np.float64]
    bias: NDArray[np.float64]


@dataclass
class WnParams:
    v: NDArray[np.float64]
    g: NDArray[np.float64]
    bias: NDArray[np.float64]


@dataclass
class ReluMarker:
    dim: int


@dataclass
class BatchNormState:
    gamma: NDArray[np.float64]
    beta: NDArray[np.float64]
    running_mean: NDArray[np.float64]
    running_var: NDArray[np.float64]
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("batchnorm momentum must be in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("batchnorm eps must be > 0")
        if np.any(self.running_var < 0.0):
            raise ValueError("running variance must be >= 0")


@dataclass
class LayerSpec:
    """Declarative description of one layer; see build_net."""

    kind: str  # linear | wn_linear | olm_linear | relu | batchnorm
    in_dim: int
    out_dim: int
    group_size: Optional[int] = None
    with_scale: bool = False
    eps_reg: Optional[float] = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "wn_linear", "olm_linear", "relu", "batchnorm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.kind in ("relu", "batchnorm") and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layer must preserve dimension")
        if self.kind == "olm_linear":
            if self.group_size is None:
                raise ValueError("olm_linear needs a group_size")
            if self.group_size > self.in_dim:
                raise ValueError("olm_linear group_size must be <= in_dim")


# ---------------------------------------------------------------------------
# functional layer ops
# ---------------------------------------------------------------------------


def linear_forward(params: LinearParams, h):
    h = as_matrix(h, "h")
    if h.shape[0] != params.w.shape[1]:
        raise DimensionError(
            f"input has {h.shape[0]} rows, layer expects {params.w.shape[1]}"
        )
    return olm_mod.linear_apply(params.w, params.bias, None, h), h


def linear_backward(params: LinearParams, d_s, h_cache):
    d_s = as_matrix(d_s, "d_s")
    d_w = d_s @ h_cache.T
    d_b = d_s.sum(axis=1)
    d_h = params.w.T @ d_s
    return d_w, d_b, d_h


def relu_forward(h):
    h = np.asarray(h, dtype=np.float64)
    return np.maximum(h, 0.0), h > 0.0


def relu_backward(d_s, mask):
    return np.asarray(d_s, dtype=np.float64) * mask


def wn_forward(v, g, h):
    """Weight-normalized product s = diag(g) (v / row_norms(v)) h.

    Bias handling is the caller's job. Rows of v with norm <= 1e-12 are
    rejected: the reparameterization is undefined there.
    """
    v = as_matrix(v, "v")
    g = np.asarray(g, dtype=np.float64)
    h = as_matrix(h, "h")
    if h.shape[0] != v.shape[1]:
        raise DimensionError(f"input has {h.shape[0]} rows, expected {v.shape[1]}")
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms <= 1e-12):
        bad = int(np.argmax(norms <= 1e-12))
        raise ValueError(f"weight row {bad} has (near-)zero norm")
    w_hat = v / norms[:, None]
    z = w_hat @ h
    return g[:, None] * z, (w_hat, norms, z, h)


def wn_backward(cache, g, d_s):
    """Gradients (d_v, d_g, d_h) for wn_forward."""
    w_hat, norms, z, h = cache
    d_s = as_matrix(d_s, "d_s")
    d_g = (d_s * z).sum(axis=1)
    d_what = (g[:, None] * d_s) @ h.T
    # project out the radial component: row norms are fixed at 1
    d_v = (d_what - (d_what * w_hat).sum(axis=1)[:, None] * w_hat) / norms[:, None]
    d_h = (g[:, None] * w_hat).T @ d_s
    return d_v, d_g, d_h


def batchnorm_forward(bn: BatchNormState, h, train: bool):
    """Normalize each feature row; train mode uses batch statistics and
    updates the running ones, eval mode consumes the running statistics."""
    h = as_matrix(h, "h")
    if h.shape[0] != bn.gamma.shape[0]:
        raise DimensionError(
            f"input has {h.shape[0]} features, layer expects {bn.gamma.shape[0]}"
        )
    if train:
        m = h.shape[1]
        if m < 2:
            raise ValueError("batchnorm training needs batch size >= 2")
        mu = h.mean(axis=1)
        var = h.var(axis=1)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        x_hat = (h - mu[:, None]) * inv_std[:, None]
        out = bn.gamma[:, None] * x_hat + bn.beta[:, None]
        bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * var
        return out, (x_hat, inv_std)
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    x_hat = (h - bn.running_mean[:, None]) * inv_std[:, None]
    return bn.gamma[:, None] * x_hat + bn.beta[:, None], None


def batchnorm_backward(bn: BatchNormState, cache, d_out):
    """Train-mode gradients (d_h, d_gamma, d_beta)."""
    if cache is None:
        raise ValueError("batchnorm_backward needs a train-mode cache")
    x_hat, inv_std = cache
    d_out = as_matrix(d_out, "d_out")
    m = d_out.shape[1]
    d_gamma = (d_out * x_hat).sum(axis=1)
    d_beta = d_out.sum(axis=1)
    d_xhat = d_out * bn.gamma[:, None]
    d_h = (
        inv_std[:, None]
        / m
        * (
            m * d_xhat
            - d_xhat.sum(axis=1)[:, None]
            - x_hat * (d_xhat * x_hat).sum(axis=1)[:, None]
        )
    )
    return d_h, d_gamma, d_beta


def softmax_xent(logits, labels):
    """Mean negative log-likelihood of integer labels under a softmax over
    the rows, with the max-subtraction stabilization. Returns
    (loss, d_loss/d_logits)."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels)
    c, m = logits.shape
    if labels.shape != (m,):
        raise DimensionError(f"labels shape {labels.shape} != ({m},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=0)[None, :]
    exp = np.exp(shifted)
    total = exp.sum(axis=0)
    log_total = np.log(total)
    idx = np.arange(m)
    loss = float(np.mean(log_total - shifted[labels, idx]))
    d_logits = exp / total[None, :]
    d_logits[labels, idx] -= 1.0
    d_logits /= m
    return loss, d_logits


# ---------------------------------------------------------------------------
# optimizers (pure update rules; NetState owns the slot arrays)
# ---------------------------------------------------------------------------


def _checked(grad) -> NDArray[np.float64]:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return grad


def sgd_step(param, grad, lr: float, weight_decay: float = 0.0):
    grad = _checked(grad)
    if weight_decay:
        grad = grad + weight_decay * param
    return param - lr * grad


def momentum_step(param, grad, buf, lr: float, momentum: float, weight_decay: float = 0.0):
    grad = _checked(grad)
    if weight_decay:
        grad = grad + weight_decay * param
    buf = momentum * buf + grad
    return param - lr * buf, buf


def adam_step(
    param,
    grad,
    m,
    v,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """Bias-corrected Adam update; t is the 1-based step counter."""
    grad = _checked(grad)
    if weight_decay:
        grad = grad + weight_decay * param
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class OptConfig:
    kind: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_v: bool = False  # extend weight decay to proxy parameters V

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


# ---------------------------------------------------------------------------
# network state
# ---------------------------------------------------------------------------


@dataclass
class NetState:
    layers: list
    method: str
    group_size: int
    opt: OptConfig = field(default_factory=OptConfig)
    slots: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _olm_group_size(requested: int, n: int, d: int) -> int:
    # centering removes one degree of freedom, so a group can hold at most
    # d - 1 rows
    return max(1, min(requested, n, d - 1))


def _manifold_group_size(requested: int, n: int, d: int) -> int:
    return max(1, min(requested, n, d))


def build_net(
    specs: list[LayerSpec], method: str, rng: np.random.Generator, group_size: int = 0
) -> NetState:
    """Materialize a network from layer specs.

    The linear specs should carry kind "linear"; the training method decides
    how those layers are parameterized and initialized (plain Gaussian
    1/sqrt(fan_in), weight-normalized, OLM proxy parameters, or per-group
    orthonormal rows for the manifold methods).
    """
    layers: list = []
    for spec in specs:
        if spec.kind == "relu":
            layers.append(ReluMarker(spec.in_dim))
        elif spec.kind == "batchnorm":
            dim = spec.in_dim
            layers.append(
                BatchNormState(
                    gamma=np.ones(dim),
                    beta=np.zeros(dim),
                    running_mean=np.zeros(dim),
                    running_var=np.ones(dim),
                    momentum=spec.bn_momentum,
                    eps=spec.bn_eps,
                )
            )
        elif spec.kind in ("linear", "wn_linear", "olm_linear"):
            n, d = spec.out_dim, spec.in_dim
            if method in ("olm", "olm_var"):
                gs = _olm_group_size(spec.group_size or group_size or n, n, d)
                layers.append(
                    olm_mod.init_olm_params(
                        n, d, gs, rng, with_scale=spec.with_scale, eps_reg=spec.eps_reg
                    )
                )
            elif method in MANIFOLD_METHODS:
                gs = _manifold_group_size(spec.group_size or group_size or n, n, d)
                w = np.empty((n, d))
                for start, stop in olm_mod.group_slices(n, gs):
                    k = stop - start
                    w[start:stop] = qr_unique(rng.normal(size=(d, k))).q.T
                layers.append(LinearParams(w=w, bias=np.zeros(n)))
            elif method == "wn":
                v = rng.normal(size=(n, d)) / np.sqrt(d)
                layers.append(WnParams(v=v, g=np.ones(n), bias=np.zeros(n)))
            else:  # plain
                w = rng.normal(size=(n, d)) / np.sqrt(d)
                layers.append(LinearParams(w=w, bias=np.zeros(n)))
        else:  # pragma: no cover - LayerSpec already validates
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return NetState(layers=layers, method=method, group_size=group_size)


def mlp_specs(
    in_dim: int,
    num_classes: int,
    hidden_width: int,
    hidden_count: int,
    group_size: int = 0,
    with_scale: bool = False,
    with_batchnorm: bool = False,
    eps_reg: Optional[float] = None,
) -> list[LayerSpec]:
    """Layer specs for an MLP with `hidden_count` hidden layers of equal
    width, ReLU nonlinearities, optional batch normalization after each
    hidden linear layer, and a final linear classifier layer."""
    specs: list[LayerSpec] = []
    d = in_dim
    for _ in range(hidden_count):
        specs.append(
            LayerSpec(
                "linear",
                d,
                hidden_width,
                group_size=group_size or None,
                with_scale=with_scale,
                eps_reg=eps_reg,
            )
        )
        if with_batchnorm:
            specs.append(LayerSpec("batchnorm", hidden_width, hidden_width))
        specs.append(LayerSpec("relu", hidden_width, hidden_width))
        d = hidden_width
    specs.append(
        LayerSpec(
            "linear",
            d,
            num_classes,
            group_size=group_size or None,
            with_scale=with_scale,
            eps_reg=eps_reg,
        )
    )
    return specs


def build_mlp(
    in_dim: int,
    num_classes: int,
    hidden_width: int,
    hidden_count: int,
    method: str,
    group_size: int,
    rng: np.random.Generator,
    with_scale: bool = False,
    with_batchnorm: bool = False,
    eps_reg: Optional[float] = None,
) -> NetState:
    specs = mlp_specs(
        in_dim,
        num_classes,
        hidden_width,
        hidden_count,
        group_size=group_size,
        with_scale=with_scale,
        with_batchnorm=with_batchnorm,
        eps_reg=eps_reg,
    )
    return build_net(specs, method, rng, group_size=group_size)


# ---------------------------------------------------------------------------
# forward / backward / update
# ---------------------------------------------------------------------------


def net_forward(net: NetState, x, train: bool = True):
    """Run the network; returns (logits, caches) with one cache per layer."""
    h = as_matrix(x, "x")
    caches = []
    olm_method = "olm_var" if net.method == "olm_var" else "olm"
    for layer in net.layers:
        if isinstance(layer, olm_mod.OlmParams):
            h, cache = olm_mod.olm_forward(layer, h, method=olm_method)
        elif isinstance(layer, LinearParams):
            h, cache = linear_forward(layer, h)
        elif isinstance(layer, WnParams):
            z, cache = wn_forward(layer.v, layer.g, h)
            h = z + layer.bias[:, None]
        elif isinstance(layer, BatchNormState):
            h, cache = batchnorm_forward(layer, h, train)
        elif isinstance(layer, ReluMarker):
            h, cache = relu_forward(h)
        else:  # pragma: no cover
            raise TypeError(f"unknown layer type {type(layer)!r}")
        caches.append(cache)
    return h, caches


def net_backward(net: NetState, d_logits, caches):
    """Propagate the loss gradient back through every layer.

    Returns (grads, d_input) where grads[i] is a dict of parameter-name ->
    gradient for layer i (empty for parameterless layers).
    """
    d_h = as_matrix(d_logits, "d_logits")
    olm_method = "olm_var" if net.method == "olm_var" else "olm"
    grads: list[dict] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        if isinstance(layer, olm_mod.OlmParams):
            d_v, d_b, d_g, d_h = olm_mod.olm_backward(
                d_h, cache, layer, method=olm_method
            )
            grads[i] = {"v": d_v, "bias": d_b}
            if d_g is not None:
                grads[i]["scale"] = d_g
        elif isinstance(layer, LinearParams):
            d_w, d_b, d_h = linear_backward(layer, d_h, cache)
            grads[i] = {"w": d_w, "bias": d_b}
        elif isinstance(layer, WnParams):
            d_b = d_h.sum(axis=1)
            d_v, d_g, d_h = wn_backward(cache, layer.g, d_h)
            grads[i] = {"v": d_v, "g": d_g, "bias": d_b}
        elif isinstance(layer, BatchNormState):
            d_h, d_gamma, d_beta = batchnorm_backward(layer, cache, d_h)
            grads[i] = {"gamma": d_gamma, "beta": d_beta}
        elif isinstance(layer, ReluMarker):
            d_h = relu_backward(d_h, cache)
            grads[i] = {}
        else:  # pragma: no cover
            raise TypeError(f"unknown layer type {type(layer)!r}")
    return grads, d_h


_PARAM_FIELDS = {
    olm_mod.OlmParams: ("v", "bias", "scale"),
    LinearParams: ("w", "bias"),
    WnParams: ("v", "g", "bias"),
    BatchNormState: ("gamma", "beta"),
}


def _decay_for(net: NetState, layer, name: str) -> float:
    wd = net.opt.weight_decay
    if wd == 0.0:
        return 0.0
    if name == "bias":
        return wd
    if isinstance(layer, LinearParams) and name == "w" and net.method == "plain":
        return wd
    if isinstance(layer, WnParams) and name == "v":
        return wd
    if isinstance(layer, olm_mod.OlmParams) and name == "v" and net.opt.decay_v:
        return wd
    return 0.0


def _apply_update(net: NetState, layer, i: int, name: str, grad, lr: float) -> None:
    param = getattr(layer, name)
    wd = _decay_for(net, layer, name)
    opt = net.opt
    key = (i, name)
    if opt.kind == "sgd":
        new = sgd_step(param, grad, lr, weight_decay=wd)
    elif opt.kind == "momentum":
        buf = net.slots.get(key)
        if buf is None:
            buf = np.zeros_like(param)
        new, buf = momentum_step(param, grad, buf, lr, opt.momentum, weight_decay=wd)
        net.slots[key] = buf
    else:
        mv = net.slots.get(key)
        if mv is None:
            mv = (np.zeros_like(param), np.zeros_like(param))
        new, m, v = adam_step(
            param,
            grad,
            mv[0],
            mv[1],
            net.step_count,
            lr,
            beta1=opt.beta1,
            beta2=opt.beta2,
            eps=opt.eps,
            weight_decay=wd,
        )
        net.slots[key] = (m, v)
    setattr(layer, name, new)


def net_apply_grads(net: NetState, grads, lr: float) -> None:
    """One optimizer step over every parameter.

    Manifold methods route linear weights through their constrained update
    rule with the raw learning rate (the baselines use plain steps, never
    momentum or Adam on the manifold); everything else goes through the
    configured optimizer.
    """
    net.step_count += 1
    for i, layer in enumerate(net.layers):
        g = grads[i]
        if not g:
            continue
        if isinstance(layer, LinearParams) and net.method in MANIFOLD_METHODS:
            w = layer.w
            n, d = w.shape
            gs = _manifold_group_size(net.group_size or n, n, d)
            new_w = np.empty_like(w)
            grad_w = _checked(g["w"])
            for start, stop in olm_mod.group_slices(n, gs):
                new_w[start:stop] = stiefel.step_row_weights(
                    w[start:stop], grad_w[start:stop], lr, net.method
                )
            layer.w = new_w
            _apply_update(net, layer, i, "bias", g["bias"], lr)
            continue
        for name in _PARAM_FIELDS[type(layer)]:
            if name in g:
                _apply_update(net, layer, i, name, g[name], lr)


def net_loss_and_grads(net: NetState, x, labels, train: bool = True):
    """Convenience composition: forward, softmax cross-entropy, backward."""
    logits, caches = net_forward(net, x, train=train)
    loss, d_logits = softmax_xent(logits, labels)
    grads, _ = net_backward(net, d_logits, caches)
    return loss, grads


def net_effective_layers(net: NetState):
    """Inference view of the network: OLM layers are materialized to their
    effective weights (one orthogonalization per group), other layers pass
    through. Used for evaluation so repeated forward passes skip the
    transform."""
    olm_method = "olm_var" if net.method == "olm_var" else "olm"
    out = []
    for layer in net.layers:
        if isinstance(layer, olm_mod.OlmParams):
            w, bias, scl = olm_mod.export_weights(layer, method=olm_method)
            out.append(("affine", w, bias, scl))
        elif isinstance(layer, LinearParams):
            out.append(("affine", layer.w, layer.bias, None))
        elif isinstance(layer, WnParams):
            norms = np.sqrt((layer.v * layer.v).sum(axis=1))
            out.append(("affine", layer.v / norms[:, None], layer.bias, layer.g))
        elif isinstance(layer, BatchNormState):
            out.append(("batchnorm", layer))
        elif isinstance(layer, ReluMarker):
            out.append(("relu",))
        else:  # pragma: no cover
            raise TypeError(f"unknown layer type {type(layer)!r}")
    return out


def effective_forward(effective_layers, x):
    h = as_matrix(x, "x")
    for desc in effective_layers:
        if desc[0] == "affine":
            _, w, bias, scl = desc
            h = olm_mod.linear_apply(w, bias, scl, h)
        elif desc[0] == "batchnorm":
            h, _ = batchnorm_forward(desc[1], h, train=False)
        else:
            h = np.maximum(h, 0.0)
    return h


def net_eval(net: NetState, features, labels, batch_size: int = 1024):
    """Full-dataset loss and error rate in inference mode."""
    eff = net_effective_layers(net)
    count = features.shape[1]
    total_loss = 0.0
    wrong = 0
    for start in range(0, count, batch_size):
        stop = min(start + batch_size, count)
        logits = effective_forward(eff, features[:, start:stop])
        loss, _ = softmax_xent(logits, labels[start:stop])
        total_loss += loss * (stop - start)
        wrong += int(np.sum(np.argmax(logits, axis=0) != labels[start:stop]))
    return total_loss / count, wrong / count
