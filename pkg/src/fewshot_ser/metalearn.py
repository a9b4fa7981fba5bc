"""Training engines: meta-learning, fine-tuning, baselines, evaluation.

The outer optimizer is plain SGD on the mean of per-task query losses;
the inner loop is full-batch gradient descent on the support loss. Both
first-order (adapted-parameter gradients re-keyed to the initializer) and
exact second-order meta-gradients are available; second order is gated by
a parameter-count cap.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import cepstral_mean_normalize, pad_or_crop
from .autodiff import NonFiniteError, Tensor
from .episodes import (
    DatasetRegistry,
    Episode,
    EpisodeSpec,
    build_target_task,
    sample_meta_task,
)
from .model import (
    ModelConfig,
    ParamSet,
    backward,
    cross_entropy,
    forward,
    init_params,
    sgd_step,
)
from .streams import derive_rng
from .synth import FIXED_LABELS

FIRST_ORDER = "first_order"
SECOND_ORDER = "second_order"
VARIANTS = ("supervised", "maml", "fmaml")


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.001
    meta_batch: int = 16
    inner_steps: int = 5
    meta_iters: int = 2000
    finetune_iters: int | None = None  # defaults to inner_steps
    grad_mode: str = FIRST_ORDER
    variant: str = "fmaml"
    seed: int = 0
    t_fixed: int = 300
    apply_cmn: bool = True
    freeze_fixed_slots: bool = True
    second_order_cap: int = 20_000
    supervised_epochs: int = 100

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.grad_mode not in (FIRST_ORDER, SECOND_ORDER):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def ft_iters(self) -> int:
        return self.inner_steps if self.finetune_iters is None else self.finetune_iters


@dataclass
class TrainTrace:
    meta_loss: list = field(default_factory=list)
    query_acc: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)


def assemble_batch(items, n_way: int, cfg: TrainConfig):
    """(x, y) tensors from (FeatureClip, slot) pairs."""
    if not items:
        raise ValueError("empty batch")
    key = (cfg.t_fixed, cfg.apply_cmn)
    mats, slots = [], []
    for clip, slot in items:
        cache = getattr(clip, "_prep_cache", None)
        if cache is None or cache[0] != key:
            m = clip.mfcc
            if cfg.apply_cmn:
                m = cepstral_mean_normalize(m)
            m = pad_or_crop(m, cfg.t_fixed)
            m.setflags(write=False)
            clip._prep_cache = (key, m)
        else:
            m = cache[1]
        mats.append(m)
        slots.append(slot)
    x = np.stack(mats)[:, None, :, :]
    y = np.zeros((len(items), n_way))
    y[np.arange(len(items)), slots] = 1.0
    return Tensor(x), Tensor(y)


def _support_loss(model_cfg, params, x, y, update_stats=False):
    logits = forward(model_cfg, params, x, train=True, update_stats=update_stats)
    return cross_entropy(logits, y), logits


def inner_adapt(
    model_cfg: ModelConfig,
    params: ParamSet,
    x: Tensor,
    y: Tensor,
    alpha: float,
    steps: int,
    frozen_slots=(),
    update_stats: bool = False,
) -> ParamSet:
    """`steps` full-batch gradient steps on the support loss.

    Returns a new ParamSet; the input is never mutated. Rows/biases of the
    linear head listed in frozen_slots receive zero updates.
    """
    cur = params.clone()
    for it in range(steps):
        try:
            loss, _ = _support_loss(model_cfg, cur, x, y, update_stats=update_stats)
            grads = backward(loss, cur)
            if frozen_slots:
                _freeze_head_rows(grads, frozen_slots)
            cur = sgd_step(cur, grads, alpha)
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged at inner step {it}") from exc
    return cur


def _freeze_head_rows(grads, frozen_slots):
    gw = grads["head.w"].data.copy()
    gb = grads["head.b"].data.copy()
    for s in frozen_slots:
        gw[s] = 0.0
        gb[s] = 0.0
    grads["head.w"] = Tensor(gw)
    grads["head.b"] = Tensor(gb)


def meta_gradient(
    model_cfg: ModelConfig,
    params: ParamSet,
    support,
    query,
    alpha: float,
    inner_steps: int,
    mode: str = FIRST_ORDER,
    cap: int = 20_000,
):
    """Meta-gradient of the query loss w.r.t. the initial parameters.

    support/query are (x, y) tensor pairs. first_order re-keys the adapted
    parameters' gradient to the initializer; second_order differentiates
    through the inner update chain (gated by the parameter-count cap).
    Returns (grad_map, query_loss_value, query_logits).
    """
    xs, ys = support
    xq, yq = query
    if mode == SECOND_ORDER:
        if params.n_params() > cap:
            raise TrainingError(
                f"second-order meta-gradient capped at {cap} parameters, "
                f"model has {params.n_params()}"
            )
        cur = params
        for _ in range(inner_steps):
            loss, _ = _support_loss(model_cfg, cur, xs, ys)
            g = backward(loss, cur, build_graph=True)
            cur = ParamSet(
                {k: ad.sub(t, ad.mul(g[k], alpha)) for k, t in cur.tensors.items()},
                cur.buffers,
            )
        logits = forward(model_cfg, cur, xq, train=True)
        loss_q = cross_entropy(logits, yq)
        grads = backward(loss_q, params)
        return grads, loss_q.item(), logits.data
    if mode != FIRST_ORDER:
        raise ValueError(f"unknown grad mode {mode!r}")
    adapted = inner_adapt(model_cfg, params, xs, ys, alpha, inner_steps)
    logits = forward(model_cfg, adapted, xq, train=True)
    loss_q = cross_entropy(logits, yq)
    grads = backward(loss_q, adapted)
    return grads, loss_q.item(), logits.data


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.argmax(y, axis=1)))


def meta_step(model_cfg: ModelConfig, params: ParamSet, task_batch, cfg: TrainConfig):
    """One outer update over a batch of episodes.

    Per-task meta-gradients are summed in episode_id order and scaled by
    1/|batch| so the outer rate is batch-size independent.
    Returns (new_params, batch_meta_loss, batch_query_acc).
    """
    if not task_batch:
        raise ValueError("empty task batch")
    batch = sorted(task_batch, key=lambda e: e.episode_id)
    n_way = len(batch[0].slot_map)
    total: dict | None = None
    losses, accs = [], []
    for ep in batch:
        sup = assemble_batch(ep.support, n_way, cfg)
        qry = assemble_batch(ep.query, n_way, cfg)
        grads, loss_q, logits = meta_gradient(
            model_cfg,
            params,
            sup,
            qry,
            cfg.alpha,
            cfg.inner_steps,
            mode=cfg.grad_mode,
            cap=cfg.second_order_cap,
        )
        losses.append(loss_q)
        accs.append(_accuracy(logits, qry[1].data))
        if total is None:
            total = {k: g.data.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                total[k] += g.data
    scale = 1.0 / len(batch)
    mean_grads = {k: Tensor(v * scale) for k, v in total.items()}
    new_params = sgd_step(params, mean_grads, cfg.beta)
    return new_params, float(np.mean(losses)), float(np.mean(accs))


def meta_train(
    reg: DatasetRegistry,
    spec: EpisodeSpec,
    source_languages,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
):
    """Learn an initializer across sampled meta-tasks.

    variant='fmaml' keeps the fixed classes pinned to tail slots and out of
    support sets; variant='maml' treats them as ordinary classes in a plain
    (N+F)-way problem.
    """
    if cfg.variant == "fmaml" and spec.n_fixed == 0:
        raise ValueError("variant='fmaml' requires n_fixed > 0")
    fixed_as_ordinary = cfg.variant == "maml"
    params = init_params(model_cfg, derive_rng(cfg.seed, "init"))
    trace = TrainTrace()
    ep_counter = 0
    for it in range(cfg.meta_iters):
        t0 = time.perf_counter()
        rng = derive_rng(cfg.seed, "episodes", it)
        batch = []
        for _ in range(cfg.meta_batch):
            batch.append(
                sample_meta_task(
                    reg,
                    spec,
                    source_languages,
                    rng,
                    episode_id=ep_counter,
                    fixed_as_ordinary=fixed_as_ordinary,
                )
            )
            ep_counter += 1
        params, loss, acc = meta_step(model_cfg, params, batch, cfg)
        trace.meta_loss.append(loss)
        trace.query_acc.append(acc)
        trace.wall_ms.append((time.perf_counter() - t0) * 1000.0)
    return params, trace


def calibrate_stats(model_cfg: ModelConfig, params: ParamSet, x: Tensor) -> None:
    """Set batchnorm running statistics to this batch's statistics."""
    cal_cfg = dataclasses.replace(model_cfg, bn_momentum=1.0)
    forward(cal_cfg, params, x, train=True, update_stats=True)


def fine_tune(
    model_cfg: ModelConfig,
    params: ParamSet,
    support,
    slot_map: dict,
    cfg: TrainConfig,
) -> ParamSet:
    """Adapt an initializer on the target support set.

    Under variant='fmaml' with freezing on (the default), the linear-head
    rows and biases of the fixed output slots are left untouched. Batchnorm
    running statistics are recalibrated to the support batch so eval-mode
    inference is well-defined after adaptation.
    """
    n_way = len(slot_map)
    x, y = assemble_batch(support, n_way, cfg)
    frozen = ()
    if cfg.variant == "fmaml" and cfg.freeze_fixed_slots:
        frozen = tuple(
            sorted(slot_map[lab] for lab in FIXED_LABELS if lab in slot_map)
        )
    adapted = inner_adapt(
        model_cfg, params, x, y, cfg.alpha, cfg.ft_iters, frozen_slots=frozen
    )
    calibrate_stats(model_cfg, adapted, x)
    return adapted


def evaluate(model_cfg: ModelConfig, params: ParamSet, eval_query, cfg: TrainConfig) -> float:
    """Fraction of eval clips whose argmax logit (lowest index on ties)
    hits the true slot. Eval-mode batchnorm (running statistics)."""
    if not eval_query:
        raise ValueError("empty eval query")
    x, y = assemble_batch(eval_query, model_cfg.n_out, cfg)
    logits = forward(model_cfg, params, x, train=False)
    return _accuracy(logits.data, y.data)


def supervised_baseline(
    model_cfg: ModelConfig,
    support,
    slot_map: dict,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ParamSet:
    """Random init trained on the target support set only."""
    params = init_params(model_cfg, rng)
    n_way = len(slot_map)
    x, y = assemble_batch(support, n_way, cfg)
    adapted = inner_adapt(
        model_cfg, params, x, y, cfg.alpha, cfg.supervised_epochs, update_stats=True
    )
    calibrate_stats(model_cfg, adapted, x)
    return adapted


def run_protocol(
    reg: DatasetRegistry,
    spec: EpisodeSpec,
    target_language: str,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    trials: int,
    eval_per_label: int,
    initializer: ParamSet | None = None,
):
    """Repeated random target tasks: build, adapt, evaluate.

    Returns {"accuracies": [...], "mean": m, "std": s}. Trial i's RNG
    stream depends only on (seed, variant, k_shot, i).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if cfg.variant != "supervised" and initializer is None:
        raise ValueError(f"variant {cfg.variant!r} needs a meta-trained initializer")
    purpose = f"protocol:{cfg.variant}:k{spec.k_shot}"
    accs = []
    for i in range(trials):
        rng = derive_rng(cfg.seed, purpose, i)
        support, eval_query, slot_map = build_target_task(
            reg,
            spec,
            target_language,
            eval_per_label,
            rng,
            # plain N+F-way framing: fixed classes are ordinary, so the
            # baseline adapts on K shots of them like any other class
            fixed_in_support=cfg.variant == "maml",
        )
        if cfg.variant == "supervised":
            theta = supervised_baseline(
                model_cfg, support, slot_map, cfg, derive_rng(cfg.seed, purpose + ":init", i)
            )
        else:
            theta = fine_tune(model_cfg, initializer, support, slot_map, cfg)
        accs.append(evaluate(model_cfg, theta, eval_query, cfg))
    return {
        "accuracies": accs,
        "mean": float(np.mean(accs)),
        "std": float(np.std(accs)),
    }


# ---------------------------------------------------------------------------
# checkpoints: uint32 header length, JSON header, then little-endian float64
# blobs in header order (parameters, then buffers)


def save_checkpoint(path, params: ParamSet, config_hash: str = "", seed: int = 0) -> None:
    header = {
        "names": list(params.tensors),
        "shapes": {k: list(t.shape) for k, t in params.tensors.items()},
        "buffers": {k: list(v.shape) for k, v in params.buffers.items()},
        "config_hash": config_hash,
        "seed": seed,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in header["names"]:
            fh.write(np.ascontiguousarray(params.tensors[k].data, dtype="<f8").tobytes())
        for k in header["buffers"]:
            fh.write(np.ascontiguousarray(params.buffers[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ParamSet, header dict)."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        tensors, buffers = {}, {}
        for k in header["names"]:
            shape = tuple(header["shapes"][k])
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            tensors[k] = Tensor(data.copy(), requires_grad=True)
        for k, shape in header["buffers"].items():
            shape = tuple(shape)
            n = int(np.prod(shape)) if shape else 1
            buffers[k] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    return ParamSet(tensors, buffers), header
