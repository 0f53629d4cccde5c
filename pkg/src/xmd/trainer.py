"""Desk-scale distillation loop: point encoder and two projection heads trained
against frozen superpixel features with SGD, momentum and a cosine schedule."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import losses, matcore
from .correspond import pool_backward, pool_pair_embeddings
from .losses import LossConfig, LossResult
from .similarity import (
    balance_weights,
    knn_mask,
    percent_to_k,
    rescale_unit_interval,
    superpixel_similarity,
    threshold_alpha,
)
from .synth import Scenario, SyntheticBatch, _stream, generate_batch, to_point_granularity

logger = logging.getLogger(__name__)

Balance = Literal["off", "paper", "conventional"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class LinearHead:
    weight: np.ndarray  # in_dim x out_dim
    bias: np.ndarray

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearHead":
        bound = 1.0 / math.sqrt(in_dim)
        return cls(rng.uniform(-bound, bound, (in_dim, out_dim)), rng.uniform(-bound, bound, out_dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias


@dataclass
class Model:
    encoder: LinearHead
    head_p: LinearHead
    head_i: LinearHead
    activation: Literal["none", "tanh"] = "none"

    def params(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{part}": getattr(getattr(self, name), part)
            for name in ("encoder", "head_p", "head_i")
            for part in ("weight", "bias")
        }

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        heads = {
            name: LinearHead(params[f"{name}.weight"], params[f"{name}.bias"])
            for name in ("encoder", "head_p", "head_i")
        }
        return Model(activation=self.activation, **heads)

    def copy(self) -> "Model":
        return self.with_params({k: v.copy() for k, v in self.params().items()})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 1
    batch_size: int | None = None  # superpixels per step; None keeps the scenario's M
    lr0: float = 0.05
    momentum: float = 0.9
    dampening: float = 0.1
    weight_decay: float = 1e-4
    temperature: float = 0.07
    variant: losses.Variant = "st"
    k_percent: float = 5.0
    alpha_min: float = 0.0
    balance: Balance = "paper"
    rescale_alpha: bool = True
    hidden_dim: int = 4
    embed_dim: int = 16
    activation: Literal["none", "tanh"] = "none"
    granularity: Literal["superpixel", "point"] = "superpixel"
    max_pairs: int | None = None  # point granularity only
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be >= 0")
        if not 0 <= self.momentum < 1 or not 0 <= self.dampening < 1:
            raise ValueError("momentum and dampening must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.variant not in ("slidr", "alpha", "knn", "st"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.balance not in ("off", "paper", "conventional"):
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.granularity not in ("superpixel", "point"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class Cache:
    points: np.ndarray
    pre_act: np.ndarray
    hidden: np.ndarray
    point_emb: np.ndarray
    features: np.ndarray
    point_members: np.ndarray
    point_labels: np.ndarray
    pixel_members: np.ndarray
    pixel_labels: np.ndarray
    activation: str


def init_model(scenario: Scenario, cfg: TrainConfig) -> Model:
    rng = _stream(cfg.seed, "init")
    return Model(
        encoder=LinearHead.init(scenario.point_dim, cfg.hidden_dim, rng),
        head_p=LinearHead.init(cfg.hidden_dim, cfg.embed_dim, rng),
        head_i=LinearHead.init(scenario.feature_dim, cfg.embed_dim, rng),
        activation=cfg.activation,
    )


def forward(batch: SyntheticBatch, model: Model) -> tuple[np.ndarray, np.ndarray, Cache]:
    """Pooled superpoint embeddings Q and superpixel embeddings K."""
    x = batch.point_features
    f = batch.superpixel_features
    if x.shape[1] != model.encoder.weight.shape[0] or f.shape[1] != model.head_i.weight.shape[0]:
        raise ValueError("input dimensions do not match the model")
    if model.encoder.weight.shape[1] != model.head_p.weight.shape[0]:
        raise ValueError("encoder output does not match head_p input")
    pre = model.encoder(x)
    hidden = np.tanh(pre) if model.activation == "tanh" else pre
    point_emb = model.head_p(hidden)
    pixel_emb = model.head_i(f)
    q, k = pool_pair_embeddings(point_emb, pixel_emb, batch.pair_set)
    pm, pl = batch.pair_set.point_labels()
    xm, xl = batch.pair_set.pixel_labels()
    return q, k, Cache(x, pre, hidden, point_emb, f, pm, pl, xm, xl, model.activation)


def backward(cache: Cache, result: LossResult, model: Model) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradients w.r.t. Q and K."""
    g_point = pool_backward(result.grad_q, cache.point_members, cache.point_labels, cache.point_emb.shape[0])
    g_pixel = pool_backward(result.grad_k, cache.pixel_members, cache.pixel_labels, cache.features.shape[0])
    g_hidden = g_point @ model.head_p.weight.T
    if cache.activation == "tanh":
        g_pre = g_hidden * (1.0 - cache.hidden**2)
    else:
        g_pre = g_hidden
    return {
        "encoder.weight": cache.points.T @ g_pre,
        "encoder.bias": g_pre.sum(axis=0),
        "head_p.weight": cache.hidden.T @ g_point,
        "head_p.bias": g_point.sum(axis=0),
        "head_i.weight": cache.features.T @ g_pixel,
        "head_i.bias": g_pixel.sum(axis=0),
    }


def cosine_lr(lr0: float, step_index: int, total_steps: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step_index / total_steps))


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray] | None,
    step_index: int,
    total_steps: int,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One SGD update; momentum buffers start at zero.

    ``b <- momentum * b + (1 - dampening) * (g + weight_decay * p)``, then
    ``p <- p - lr(t) * b`` with the cosine-annealed ``lr(t)``.
    """
    if not 0 <= step_index < total_steps:
        raise ValueError("step_index must lie in [0, total_steps)")
    lr = cosine_lr(cfg.lr0, step_index, total_steps)
    buffers = buffers or {}
    new_params, new_buffers = {}, {}
    for name, p in params.items():
        d = grads[name] + cfg.weight_decay * p
        b = cfg.momentum * buffers.get(name, np.zeros_like(p)) + (1.0 - cfg.dampening) * d
        new_buffers[name] = b
        new_params[name] = p - lr * b
    return new_params, new_buffers


def batch_loss(batch: SyntheticBatch, q: np.ndarray, k: np.ndarray, cfg: TrainConfig) -> LossResult:
    """Loss of the configured variant; similarity terms come from the frozen features only."""
    lcfg = LossConfig(temperature=cfg.temperature, variant=cfg.variant)
    if cfg.variant == "slidr":
        return losses.loss_slidr(q, k, lcfg, keep_probs=False)
    alpha = superpixel_similarity(batch.superpixel_features)
    if cfg.rescale_alpha:
        alpha = rescale_unit_interval(alpha)
    if cfg.variant == "alpha":
        return losses.loss_alpha(q, k, threshold_alpha(alpha, cfg.alpha_min), lcfg, keep_probs=False)
    mask = knn_mask(alpha, percent_to_k(cfg.k_percent, alpha.shape[0]))
    if cfg.variant == "knn":
        return losses.loss_knn(q, k, mask, lcfg, keep_probs=False)
    if cfg.balance == "off":
        weights, wsum = np.ones(alpha.shape[0]), float(alpha.shape[0])
    else:
        _, weights, wsum = balance_weights(alpha, cfg.balance)
    return losses.loss_st(q, k, mask, weights, wsum, lcfg, keep_probs=False)


def _scenario_for(scenario: Scenario, cfg: TrainConfig) -> Scenario:
    if cfg.batch_size is None or cfg.batch_size == scenario.superpixels_per_batch:
        return scenario
    return replace(scenario, superpixels_per_batch=cfg.batch_size)


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


def training_batch(scenario: Scenario, cfg: TrainConfig, index: int) -> SyntheticBatch:
    batch = generate_batch(scenario, index=index)
    if cfg.granularity == "point":
        batch = to_point_granularity(batch, cfg.max_pairs, cfg.seed, index)
    return batch


def train(scenario: Scenario, cfg: TrainConfig, model: Model | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` SGD steps, one fresh synthetic batch per step.

    Raises TrainingDiverged if the loss or any parameter becomes non-finite.
    """
    scenario = _scenario_for(scenario, cfg)
    model = init_model(scenario, cfg) if model is None else model.copy()
    params = model.params()
    buffers: dict[str, np.ndarray] | None = None
    total = cfg.total_steps
    history = []
    for t in range(total):
        batch = training_batch(scenario, cfg, t)
        q, k, cache = forward(batch, model)
        res = batch_loss(batch, q, k, cfg)
        if not math.isfinite(res.value):
            raise TrainingDiverged(t, res.value)
        grads = backward(cache, res, model)
        history.append({"step": t, "lr": cosine_lr(cfg.lr0, t, total), "loss": res.value, "variant": cfg.variant})
        params, buffers = sgd_step(params, grads, buffers, t, total, cfg)
        if not all(np.isfinite(p).all() for p in params.values()):
            raise TrainingDiverged(t, float("nan"))
        model = model.with_params(params)
    return TrainResult(model, history)


def embed(model: Model, batch: SyntheticBatch) -> np.ndarray:
    """Pooled superpoint embeddings of a batch (what the probe sees)."""
    q, _, _ = forward(batch, model)
    return q


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "variant"])
        for h in history:
            w.writerow([h["step"], repr(h["lr"]), repr(h["loss"]), h["variant"]])


def save_checkpoint(directory, model: Model) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"activation": model.activation, "tensors": []}
    for name, value in model.params().items():
        mat = value if value.ndim == 2 else value[None, :]
        matcore.write_binary(directory / f"{name}.xmd", mat)
        manifest["tensors"].append({"name": name, "shape": list(value.shape), "file": f"{name}.xmd"})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {}
    for t in manifest["tensors"]:
        params[t["name"]] = matcore.read_binary(directory / t["file"]).reshape(t["shape"])
    heads = {
        name: LinearHead(params[f"{name}.weight"], params[f"{name}.bias"])
        for name in ("encoder", "head_p", "head_i")
    }
    return Model(activation=manifest.get("activation", "none"), **heads)


def parameter_gradient_check(batch: SyntheticBatch, model: Model, cfg: TrainConfig,
                             epsilon: float = 1e-5, perturb: float = 0.0) -> float:
    """Max relative error of ``backward`` against central differences over every parameter.

    ``perturb`` is added to each analytic gradient entry; it exists so callers can
    confirm that a broken gradient is actually caught.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    q, k, cache = forward(batch, model)
    grads = backward(cache, batch_loss(batch, q, k, cfg), model)
    params = model.params()
    worst = 0.0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = {n: v.copy() for n, v in params.items()}
                p[name][idx] += sign * epsilon
                qq, kk, _ = forward(batch, model.with_params(p))
                vals.append(batch_loss(batch, qq, kk, cfg).value)
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            analytic = grads[name][idx] + perturb
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
