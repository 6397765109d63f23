"""Autoencoder parameters, the direction-aware reconstruction loss, and Adam training.

Two forward paths exist on purpose: a plain numpy one (``ae_forward``,
``loss_eval``) used for evaluation and as the finite-difference reference, and
a torch float64 one that supplies exact reverse-mode gradients for training.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .linalg import ZERO_NORM

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("identity", "leaky_relu", "tanh")

Params = dict[str, np.ndarray]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass(frozen=True)
class AEArch:
    """Encoder/decoder layer stacks; each entry is ``(width, activation)``."""

    input_dim: int
    latent_dim: int
    encoder_spec: tuple[tuple[int, str], ...]
    decoder_spec: tuple[tuple[int, str], ...]
    preserve_norm: bool = False
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_spec", tuple((int(w), a) for w, a in self.encoder_spec))
        object.__setattr__(self, "decoder_spec", tuple((int(w), a) for w, a in self.decoder_spec))
        if not self.encoder_spec or not self.decoder_spec:
            raise ValueError("encoder and decoder need at least one layer")
        if self.encoder_spec[-1][0] != self.latent_dim:
            raise ValueError("encoder output width must equal latent_dim")
        if self.decoder_spec[-1][0] != self.input_dim:
            raise ValueError("decoder output width must equal input_dim")
        for _, act in self.encoder_spec + self.decoder_spec:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.latent_dim < 1 or self.input_dim < 1:
            raise ValueError("dimensions must be positive")

    @classmethod
    def linear(cls, m: int, k: int, preserve_norm: bool = False, bias: bool = True) -> "AEArch":
        return cls(m, k, ((k, "identity"),), ((m, "identity"),), preserve_norm, bias)

    @classmethod
    def mlp(cls, m: int, k: int, hidden: Sequence[int], activation: str = "leaky_relu",
            preserve_norm: bool = False, bias: bool = True) -> "AEArch":
        enc = tuple((h, activation) for h in hidden) + ((k, "identity"),)
        dec = tuple((h, activation) for h in reversed(hidden)) + ((m, "identity"),)
        return cls(m, k, enc, dec, preserve_norm, bias)

    @property
    def is_linear(self) -> bool:
        return len(self.encoder_spec) == 1 and len(self.decoder_spec) == 1 and \
            self.encoder_spec[0][1] == "identity" and self.decoder_spec[0][1] == "identity"

    def with_latent(self, k: int) -> "AEArch":
        enc = self.encoder_spec[:-1] + ((k, self.encoder_spec[-1][1]),)
        return AEArch(self.input_dim, k, enc, self.decoder_spec, self.preserve_norm, self.bias)

    def layer_dims(self, part: str) -> list[tuple[int, int, str]]:
        spec, fan_in = (self.encoder_spec, self.input_dim) if part == "enc" else (self.decoder_spec, self.latent_dim)
        dims = []
        for width, act in spec:
            dims.append((fan_in, width, act))
            fan_in = width
        return dims

    def decoder_param_count(self) -> int:
        return sum(i * o + (o if self.bias else 0) for i, o, _ in self.layer_dims("dec"))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "encoder_spec": [list(x) for x in self.encoder_spec],
            "decoder_spec": [list(x) for x in self.decoder_spec],
            "preserve_norm": self.preserve_norm,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AEArch":
        return cls(d["input_dim"], d["latent_dim"], tuple(map(tuple, d["encoder_spec"])),
                   tuple(map(tuple, d["decoder_spec"])), d["preserve_norm"], d["bias"])


@dataclass(frozen=True)
class LossSpec:
    beta: float = 0.0
    row_weights: np.ndarray | None = None
    batch_norm_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.row_weights is not None:
            w = np.asarray(self.row_weights, dtype=np.float64)
            if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("row_weights must be a finite non-negative vector")
            object.__setattr__(self, "row_weights", w)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 256
    max_steps: int = 20_000
    patience: int = 20
    eval_every: int = 100
    seed: int = 0
    # on a plateau of `patience` evaluations, scale the learning rate by
    # `plateau_decay`; stop once that has happened `max_decays` times
    plateau_decay: float = 0.5
    max_decays: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.plateau_decay <= 1 or self.max_decays < 0:
            raise ValueError("plateau_decay must lie in (0, 1] and max_decays be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]]
    steps_run: int
    best_step: int
    best_loss: float
    seed: int
    config: dict
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "loss_curve": [[s, l] for s, l in self.loss_curve],
            "steps_run": self.steps_run,
            "best_step": self.best_step,
            "best_loss": self.best_loss,
            "seed": self.seed,
            "config": self.config,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True)


def batch_weights(spec: LossSpec, n_rows: int, rows: np.ndarray | None = None) -> np.ndarray:
    """Row weights for one batch, after optional mean-1 rescaling.

    Rescaling divides by the max before the mean so an all-equal weight vector
    comes out as exact ones.
    """
    if spec.row_weights is None:
        return np.ones(n_rows)
    w = spec.row_weights if rows is None else spec.row_weights[rows]
    if w.shape != (n_rows,):
        raise ValueError(f"row weights have shape {w.shape}, batch has {n_rows} rows")
    if spec.batch_norm_weights:
        top = w.max()
        if top <= 0:
            return np.ones(n_rows)
        w = w / top
        w = w / w.mean()
    return w


# ---------------------------------------------------------------------------
# numpy reference path


def init_params(arch: AEArch, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for part in ("enc", "dec"):
        for i, (fan_in, fan_out, _) in enumerate(arch.layer_dims(part)):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{part}.{i}.w"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if arch.bias:
                params[f"{part}.{i}.b"] = np.zeros(fan_out)
    return params


def _np_act(x: np.ndarray, act: str) -> np.ndarray:
    if act == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if act == "tanh":
        return np.tanh(x)
    return x


def _np_stack(params: Params, arch: AEArch, part: str, h: np.ndarray) -> np.ndarray:
    for i, (_, _, act) in enumerate(arch.layer_dims(part)):
        h = h @ params[f"{part}.{i}.w"]
        if arch.bias:
            h = h + params[f"{part}.{i}.b"]
        h = _np_act(h, act)
    return h


def rescale_rows(recon: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Give every row the target norm; rows whose target is below 1e-12 pass through."""
    cur = np.linalg.norm(recon, axis=1)
    scale = np.where(norms >= ZERO_NORM, norms / np.maximum(cur, ZERO_NORM), 1.0)
    return recon * scale[:, None]


def decode(params: Params, arch: AEArch, latent: np.ndarray, norms: np.ndarray | None = None) -> np.ndarray:
    recon = _np_stack(params, arch, "dec", np.asarray(latent, dtype=np.float64))
    if norms is not None:
        recon = rescale_rows(recon, norms)
    return recon


def ae_forward(params: Params, arch: AEArch, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"input shape {X.shape} does not match input_dim={arch.input_dim}")
    latent = _np_stack(params, arch, "enc", X)
    norms = np.linalg.norm(X, axis=1) if arch.preserve_norm else None
    return latent, decode(params, arch, latent, norms)


def loss_eval(spec: LossSpec, X: np.ndarray, recon: np.ndarray, rows: np.ndarray | None = None) -> float:
    """``(1 - beta) * weighted RMSE + beta * weighted mean cosine distance``.

    ``rows`` selects which entries of ``spec.row_weights`` belong to this batch.
    Weights act multiplicatively (uniform weights of 1 give the plain metrics).
    """
    X = np.asarray(X, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if X.shape != recon.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {recon.shape}")
    b, m = X.shape
    w = batch_weights(spec, b, rows)
    total = 0.0
    if spec.beta < 1.0:
        sq = np.sum((X - recon) ** 2, axis=1)
        total += (1.0 - spec.beta) * np.sqrt(np.dot(w, sq) / (b * m))
    if spec.beta > 0.0:
        nx = np.linalg.norm(X, axis=1)
        nr = np.linalg.norm(recon, axis=1)
        live = (nx >= ZERO_NORM) & (nr >= ZERO_NORM)
        cos = np.zeros(b)
        cos[live] = 1.0 - np.einsum("ij,ij->i", X[live], recon[live]) / (nx[live] * nr[live])
        total += spec.beta * np.dot(w, cos) / b
    return float(total)


# ---------------------------------------------------------------------------
# torch path (gradients)


def _t_act(x: torch.Tensor, act: str) -> torch.Tensor:
    if act == "leaky_relu":
        return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)
    if act == "tanh":
        return torch.tanh(x)
    return x


def _t_stack(tp: dict[str, torch.Tensor], arch: AEArch, part: str, h: torch.Tensor) -> torch.Tensor:
    for i, (_, _, act) in enumerate(arch.layer_dims(part)):
        h = h @ tp[f"{part}.{i}.w"]
        if arch.bias:
            h = h + tp[f"{part}.{i}.b"]
        h = _t_act(h, act)
    return h


def t_rescale_rows(recon: torch.Tensor, norms: torch.Tensor) -> torch.Tensor:
    cur = torch.linalg.vector_norm(recon, dim=1)
    keep = norms >= ZERO_NORM
    scale = torch.where(keep, norms / torch.clamp(cur, min=ZERO_NORM), torch.ones_like(norms))
    return recon * scale[:, None]


def t_forward(tp: dict[str, torch.Tensor], arch: AEArch, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    latent = _t_stack(tp, arch, "enc", X)
    recon = _t_stack(tp, arch, "dec", latent)
    if arch.preserve_norm:
        recon = t_rescale_rows(recon, torch.linalg.vector_norm(X, dim=1))
    return latent, recon


def t_loss(beta: float, X: torch.Tensor, recon: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    b, m = X.shape
    total = X.new_zeros(())
    if beta < 1.0:
        sq = torch.sum((X - recon) ** 2, dim=1)
        mse = torch.dot(w, sq) / (b * m)
        # sqrt has an infinite slope at 0; a perfect fit is a minimum anyway
        total = total + (1.0 - beta) * torch.sqrt(torch.clamp(mse, min=1e-300))
    if beta > 0.0:
        nx = torch.linalg.vector_norm(X, dim=1)
        nr = torch.linalg.vector_norm(recon, dim=1)
        live = (nx >= ZERO_NORM) & (nr.detach() >= ZERO_NORM)
        denom = torch.where(live, nx * nr, torch.ones_like(nx))
        cos = torch.where(live, 1.0 - torch.sum(X * recon, dim=1) / denom, torch.zeros_like(nx))
        total = total + beta * torch.dot(w, cos) / b
    return total


def _to_torch(params: Params, grad: bool) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(v, dtype=torch.float64, requires_grad=grad) for k, v in params.items()}


def backward(params: Params, arch: AEArch, spec: LossSpec, X: np.ndarray,
             rows: np.ndarray | None = None, scale: float = 1.0) -> Params:
    """Exact gradient of ``scale * loss_eval(spec, X, ae_forward(params, arch, X)[1])``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"input shape {X.shape} does not match input_dim={arch.input_dim}")
    tp = _to_torch(params, grad=True)
    Xt = torch.from_numpy(X)
    w = torch.from_numpy(batch_weights(spec, X.shape[0], rows))
    _, recon = t_forward(tp, arch, Xt)
    loss = scale * t_loss(spec.beta, Xt, recon, w)
    loss.backward()
    return {k: v.grad.numpy().copy() for k, v in tp.items()}


def train(X: np.ndarray, arch: AEArch, spec: LossSpec, cfg: TrainConfig,
          init: Params | None = None) -> tuple[Params, TrainReport]:
    """Mini-batch Adam over shuffled row batches with early stopping on the full-matrix loss."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 1:
        raise ValueError("need at least one row to train on")
    if X.shape[1] != arch.input_dim:
        raise ValueError(f"input has {X.shape[1]} columns, arch expects {arch.input_dim}")
    if spec.row_weights is not None and spec.row_weights.shape != (n,):
        raise ValueError(f"row_weights length {spec.row_weights.shape[0]} != rows {n}")

    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, cfg.seed) if init is None else copy.deepcopy(init)
    tp = _to_torch(params, grad=True)
    opt = torch.optim.Adam(list(tp.values()), lr=cfg.learning_rate, betas=cfg.adam_betas,
                           eps=cfg.adam_eps, foreach=False)
    Xt = torch.from_numpy(X)
    w_full = torch.from_numpy(batch_weights(spec, n))
    bs = min(cfg.batch_size, n)

    def full_loss() -> float:
        with torch.no_grad():
            _, recon = t_forward(tp, arch, Xt)
            return float(t_loss(spec.beta, Xt, recon, w_full))

    best = full_loss()
    if not np.isfinite(best):
        raise TrainingDivergedError(0)
    best_params = {k: v.detach().numpy().copy() for k, v in tp.items()}
    best_step, stale, decays = 0, 0, 0
    curve = [(0, best)]
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    step = 0
    while step < cfg.max_steps:
        if cursor >= order.size:
            order = rng.permutation(n)
            cursor = 0
        rows = order[cursor : cursor + bs]
        cursor += bs
        xb = Xt[rows]
        wb = torch.from_numpy(batch_weights(spec, rows.size, rows))
        opt.zero_grad(set_to_none=True)
        _, recon = t_forward(tp, arch, xb)
        loss = t_loss(spec.beta, xb, recon, wb)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step + 1)
        loss.backward()
        opt.step()
        step += 1
        # fixed evaluation grid keeps best-loss monotone in max_steps
        if step % cfg.eval_every == 0:
            cur = full_loss()
            if not np.isfinite(cur):
                raise TrainingDivergedError(step)
            curve.append((step, cur))
            if cur < best:
                best, best_step, stale = cur, step, 0
                best_params = {k: v.detach().numpy().copy() for k, v in tp.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    if decays >= cfg.max_decays:
                        break
                    decays += 1
                    stale = 0
                    for group in opt.param_groups:
                        group["lr"] *= cfg.plateau_decay

    report = TrainReport(
        loss_curve=curve,
        steps_run=step,
        best_step=best_step,
        best_loss=best,
        seed=cfg.seed,
        config={"arch": arch.to_dict(), "beta": spec.beta,
                "weighted": spec.row_weights is not None,
                "batch_norm_weights": spec.batch_norm_weights, **_cfg_dict(cfg)},
        wall_time=time.perf_counter() - started,
    )
    return best_params, report


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d
