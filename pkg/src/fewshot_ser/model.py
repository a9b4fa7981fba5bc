"""CNN classifier over MFCC patches, built on the autodiff tape.

Architecture: a stack of conv blocks (3x3 conv, stride 1, zero padding 1 ->
ReLU -> batch norm -> 2x2 max pool), an adaptive average pool to a fixed
spatial size, and a linear head. With the default 4 blocks of 64 filters and
a 3x3 pooled output the flattened width is 64*3*3 = 576.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ShapeError(ValueError):
    """Mismatched tensor/parameter shapes."""


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 4
    filters: int = 64
    in_channels: int = 1
    input_hw: tuple[int, int] = (40, 300)
    n_out: int = 7
    pool_out: tuple[int, int] = (3, 3)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def flat_width(self) -> int:
        return self.filters * self.pool_out[0] * self.pool_out[1]


class ParamSet:
    """Named, ordered collection of trainable tensors plus batchnorm
    running-statistic buffers.

    The name set and shapes are fixed at construction. `clone()` gives a
    fully independent copy so adapted parameters can coexist with the
    originals.
    """

    def __init__(self, tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.tensors = dict(tensors)
        self.buffers = {k: np.array(v, dtype=np.float64) for k, v in buffers.items()}

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self) -> "ParamSet":
        return ParamSet(
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def congruent_with(self, grads: dict[str, Tensor]) -> bool:
        return set(grads) == set(self.tensors) and all(
            grads[k].shape == t.shape for k, t in self.tensors.items()
        )


GradMap = dict  # name -> Tensor, congruent with some ParamSet


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = cfg.in_channels
    for b in range(cfg.blocks):
        fan_in = c_in * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cfg.filters, c_in, 3, 3))
        tensors[f"conv{b}.w"] = Tensor(w, requires_grad=True)
        tensors[f"conv{b}.b"] = Tensor(np.zeros(cfg.filters), requires_grad=True)
        tensors[f"bn{b}.gamma"] = Tensor(np.ones(cfg.filters), requires_grad=True)
        tensors[f"bn{b}.beta"] = Tensor(np.zeros(cfg.filters), requires_grad=True)
        buffers[f"bn{b}.running_mean"] = np.zeros(cfg.filters)
        buffers[f"bn{b}.running_var"] = np.ones(cfg.filters)
        c_in = cfg.filters
    feat = cfg.flat_width
    w = rng.normal(0.0, np.sqrt(1.0 / feat), size=(cfg.n_out, feat))
    tensors["head.w"] = Tensor(w, requires_grad=True)
    tensors["head.b"] = Tensor(np.zeros(cfg.n_out), requires_grad=True)
    return ParamSet(tensors, buffers)


def zero_params(cfg: ModelConfig) -> ParamSet:
    p = init_params(cfg, np.random.default_rng(0))
    return ParamSet(
        {k: Tensor(np.zeros(t.shape), requires_grad=True) for k, t in p.tensors.items()},
        p.buffers,
    )


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    bs, _, h, wd = x.shape
    f = w.shape[0]
    cols = ad.im2col(x, (3, 3), 1)  # (B, H*W, C*9)
    wmat = ad.reshape(w, (f, -1))
    out = ad.matmul(cols, ad.swap_last(ad.reshape(wmat, (1, f, wmat.shape[1]))))
    out = out + ad.reshape(b, (1, 1, f))
    out = ad.reshape(out, (bs, h, wd, f))
    return ad.permute(out, (0, 3, 1, 2))


def _batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    params: ParamSet,
    key: str,
    cfg: ModelConfig,
    train: bool,
    update_stats: bool,
) -> Tensor:
    c = x.shape[1]
    if train:
        mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = ad.mean(ad.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        if update_stats:
            m = cfg.bn_momentum
            params.buffers[f"{key}.running_mean"] = (
                (1 - m) * params.buffers[f"{key}.running_mean"]
                + m * mu.data.reshape(c)
            )
            params.buffers[f"{key}.running_var"] = (
                (1 - m) * params.buffers[f"{key}.running_var"]
                + m * var.data.reshape(c)
            )
    else:
        mu = Tensor(params.buffers[f"{key}.running_mean"].reshape(1, c, 1, 1))
        var = Tensor(params.buffers[f"{key}.running_var"].reshape(1, c, 1, 1))
        xc = x - mu
    inv = ad.powi(var + cfg.bn_eps, -0.5)
    g = ad.reshape(gamma, (1, c, 1, 1))
    bt = ad.reshape(beta, (1, c, 1, 1))
    return ad.mul(ad.mul(xc, inv), g) + bt


def forward(
    cfg: ModelConfig,
    params: ParamSet,
    batch: Tensor,
    train: bool = True,
    update_stats: bool = False,
) -> Tensor:
    """Logits (B, n_out) for a batch (B, C_in, H, W).

    train=True normalizes with batch statistics (transductive); eval mode
    uses the running buffers. update_stats folds the batch statistics into
    the running buffers in place (only meaningful with train=True).
    """
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, H, W), got {batch.shape}")
    if batch.shape[2:] != cfg.input_hw:
        raise ShapeError(
            f"expected spatial size {cfg.input_hw}, got {batch.shape[2:]}"
        )
    x = batch
    for b in range(cfg.blocks):
        x = _conv3x3(x, params[f"conv{b}.w"], params[f"conv{b}.b"])
        x = ad.relu(x)
        x = _batchnorm(
            x,
            params[f"bn{b}.gamma"],
            params[f"bn{b}.beta"],
            params,
            f"bn{b}",
            cfg,
            train,
            update_stats,
        )
        x = ad.max_pool2(x)
    x = ad.adaptive_avg_pool(x, cfg.pool_out)
    flat = ad.reshape(x, (x.shape[0], cfg.flat_width))
    return ad.matmul(flat, ad.swap_last(params["head.w"])) + params["head.b"]


def log_softmax(logits: Tensor) -> Tensor:
    shift = Tensor(np.max(logits.data, axis=-1, keepdims=True))  # constant
    s = logits - shift
    lse = ad.log(ad.tsum(ad.exp(s), axis=-1, keepdims=True))
    return s - lse


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of -sum(y * log softmax(logits))."""
    if not isinstance(labels, Tensor):
        labels = Tensor(labels)
    if logits.shape != labels.shape or logits.data.ndim != 2:
        raise ShapeError("logits and one-hot labels must both be (B, C)")
    if logits.shape[0] == 0:
        raise ShapeError("empty batch")
    rows = labels.data
    if not (
        np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=1) == 1.0)
    ):
        raise ValueError("labels must be one-hot rows")
    logp = log_softmax(logits)
    return ad.mul(ad.tsum(ad.mul(labels, logp)), -1.0 / logits.shape[0])


def sgd_step(params: ParamSet, grads: GradMap, lr: float) -> ParamSet:
    """One gradient-descent step; returns a new ParamSet, input untouched."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not params.congruent_with(grads):
        raise ShapeError("grads not congruent with params")
    new = {
        k: Tensor(t.data - lr * grads[k].data, requires_grad=True)
        for k, t in params.tensors.items()
    }
    return ParamSet(new, {k: v.copy() for k, v in params.buffers.items()})


def backward(loss: Tensor, params: ParamSet, build_graph: bool = False) -> GradMap:
    """GradMap of a scalar loss w.r.t. every tensor in `params`.

    Parameters the loss does not reach get zero gradients.
    """
    wrt = list(params.tensors.values())
    gs = ad.grad_of(loss, wrt, build_graph=build_graph)
    return dict(zip(params.tensors.keys(), gs))


def finite_diff_grad(loss_fn, params: ParamSet, eps: float = 1e-5) -> GradMap:
    """Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / 2eps.

    loss_fn maps a ParamSet to a float and must be deterministic.
    """
    out: GradMap = {}
    for name, t in params.tensors.items():
        g = np.zeros(t.shape)
        base = t.data
        flat = g.reshape(-1)
        for i in range(base.size):
            for sign in (+1.0, -1.0):
                perturbed = base.copy().reshape(-1)
                perturbed[i] += sign * eps
                trial = ParamSet(
                    {
                        k: Tensor(
                            perturbed.reshape(base.shape) if k == name else p.data,
                            requires_grad=True,
                        )
                        for k, p in params.tensors.items()
                    },
                    params.buffers,
                )
                val = float(loss_fn(trial))
                if not np.isfinite(val):
                    raise ad.NonFiniteError("non-finite loss during finite differences")
                flat[i] += sign * val
            flat[i] /= 2.0 * eps
        out[name] = Tensor(g)
    return out
