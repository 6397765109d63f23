"""Compressors (autoencoder, SVD, FWSVD, Kronecker, L1 pruning) and parameter accounting.

Every compressor returns a substitution module that can be materialized back
to dense form and whose compression ratio is ``original elements / stored
parameters``. Encoder weights are never part of a substitution module.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch

from . import autodiff
from .autodiff import AEArch, LossSpec, Params, TrainConfig, TrainReport
from .fisher import FisherTransform, FisherWeights, apply_transform
from .linalg import kron, truncated_svd
from .tensor_io import TensorBundle

FWSVD_EPS = 1e-12
MODES = ("separated", "concatenated")


class InfeasibleRatioError(ValueError):
    def __init__(self, target: float, max_cr: float | None, detail: str = ""):
        msg = f"target compression ratio {target:g} is infeasible"
        if max_cr is not None:
            msg += f"; max achievable CR is {max_cr:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.target = target
        self.max_cr = max_cr


def _meets(original: int, count: int, target: float) -> bool:
    return Fraction(original, count) >= Fraction(target)


@dataclass
class ModuleGroup:
    members: list[tuple[str, np.ndarray]]
    mode: str = "concatenated"
    label: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.members:
            raise ValueError("empty module group")
        names = [n for n, _ in self.members]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError("member names must be unique and non-empty")
        self.members = [(n, np.asarray(a, dtype=np.float64)) for n, a in self.members]
        cols = {a.shape[1] for _, a in self.members}
        if len(cols) != 1:
            raise ValueError(f"members disagree on column count: {sorted(cols)}")
        if self.label is None:
            self.label = group_label(names)

    @property
    def cols(self) -> int:
        return self.members[0][1].shape[1]

    @property
    def rows(self) -> int:
        return sum(a.shape[0] for _, a in self.members)

    def stacked(self) -> np.ndarray:
        return np.vstack([a for _, a in self.members])

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, a in self.members:
            out[name] = (start, start + a.shape[0])
            start += a.shape[0]
        return out


def group_label(names: Sequence[str]) -> str:
    if len(names) == 1:
        return names[0]
    wild = {re.sub(r"(?<=\.)\d+(?=\.|$)", "*", n) for n in names}
    return wild.pop() if len(wild) == 1 else "+".join(names)


@dataclass
class FactorizedModule:
    kind: str
    original_shape: tuple[int, int]
    latent: np.ndarray | None = None
    decoder: Params | None = None
    arch: AEArch | None = None
    stored_row_norms: np.ndarray | None = None
    factors: tuple[np.ndarray, np.ndarray] | None = None
    member_offsets: dict[str, tuple[int, int]] = field(default_factory=dict)
    module_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def decoder_param_count(self) -> int:
        return 0 if self.decoder is None else int(sum(v.size for v in self.decoder.values()))

    @property
    def parameter_count(self) -> int:
        if self.kind == "kronecker":
            B, C = self.factors
            return int(B.size + C.size)
        n = self.latent.shape[0]
        count = self.latent.size + self.decoder_param_count
        if self.stored_row_norms is not None:
            count += n
        return int(count)

    @property
    def latent_dim(self) -> int | None:
        return None if self.latent is None else self.latent.shape[1]


@dataclass
class SparseModule:
    shape: tuple[int, int]
    indices: np.ndarray
    values: np.ndarray
    member_offsets: dict[str, tuple[int, int]] = field(default_factory=dict)
    module_id: str = ""
    meta: dict = field(default_factory=dict)
    kind: str = "prune"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m = self.shape
        if self.indices.size > n * m or np.unique(self.indices).size != self.indices.size:
            raise ValueError("sparse indices must be unique")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n * m):
            raise ValueError("sparse index out of range")

    @property
    def parameter_count(self) -> int:
        return int(self.values.size)


Module = FactorizedModule | SparseModule


def _original_count(module: Module) -> int:
    n, m = module.original_shape if isinstance(module, FactorizedModule) else module.shape
    return n * m


def compression_ratio(module: Module) -> Fraction:
    """Exact ``original element count / stored parameter count``."""
    return Fraction(_original_count(module), module.parameter_count)


def _ae_param_count(rows: int, arch: AEArch) -> int:
    return rows * arch.latent_dim + arch.decoder_param_count() + (rows if arch.preserve_norm else 0)


def plan_latent_dim(group: ModuleGroup | tuple[int, int], target_cr: float, arch: AEArch) -> tuple[int, Fraction]:
    """Largest latent width whose substitution module still reaches ``target_cr``.

    ``group`` may also be a bare ``(rows, cols)`` shape. Latent width is capped at
    the column count.
    """
    rows, cols = (group.rows, group.cols) if isinstance(group, ModuleGroup) else group
    if cols != arch.input_dim:
        raise ValueError(f"arch input_dim {arch.input_dim} != group column count {cols}")
    original = rows * cols
    best = None
    for k in range(1, cols + 1):
        count = _ae_param_count(rows, arch.with_latent(k))
        if _meets(original, count, target_cr):
            best = (k, Fraction(original, count))
        else:
            break
    if best is None:
        max_cr = original / _ae_param_count(rows, arch.with_latent(1))
        raise InfeasibleRatioError(target_cr, max_cr, f"{rows}x{cols} with k=1")
    return best


def _rank_for_ratio(n: int, m: int, target_cr: float) -> int:
    k = 0
    for cand in range(1, min(n, m) + 1):
        if _meets(n * m, cand * (n + m), target_cr):
            k = cand
        else:
            break
    if k == 0:
        raise InfeasibleRatioError(target_cr, n * m / (n + m), f"{n}x{m} with rank 1")
    return k


def _linear_decoder(weight: np.ndarray) -> tuple[Params, AEArch]:
    k, m = weight.shape
    return {"dec.0.w": weight}, AEArch.linear(m, k, bias=False)


def compress_svd(matrix: np.ndarray, target_cr: float, power_iters: int = 4, seed: int = 0) -> FactorizedModule:
    M = np.asarray(matrix, dtype=np.float64)
    n, m = M.shape
    k = _rank_for_ratio(n, m, target_cr)
    f = truncated_svd(M, k, power_iters=power_iters, seed=seed)
    dec, arch = _linear_decoder(f.V.T.copy())
    return FactorizedModule("svd", (n, m), latent=f.U * f.S, decoder=dec, arch=arch,
                            meta={"k": k, "power_iters": power_iters, "seed": seed})


def compress_fwsvd(matrix: np.ndarray, fisher_row: np.ndarray, target_cr: float,
                   power_iters: int = 4, seed: int = 0) -> FactorizedModule:
    M = np.asarray(matrix, dtype=np.float64)
    n, m = M.shape
    f_row = np.asarray(fisher_row, dtype=np.float64)
    if f_row.shape != (n,):
        raise ValueError(f"fisher_row has shape {f_row.shape}, matrix has {n} rows")
    if np.any(f_row < 0):
        raise ValueError("fisher_row must be non-negative")
    k = _rank_for_ratio(n, m, target_cr)
    d = np.maximum(f_row, FWSVD_EPS)
    f = truncated_svd(d[:, None] * M, k, power_iters=power_iters, seed=seed)
    latent = (f.U * f.S) / d[:, None]
    dec, arch = _linear_decoder(f.V.T.copy())
    return FactorizedModule("fwsvd", (n, m), latent=latent, decoder=dec, arch=arch,
                            meta={"k": k, "power_iters": power_iters, "seed": seed})


def kronecker_shapes(n: int, m: int, target_cr: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """Most balanced ``(n1, m1), (n2, m2)`` split that fits the parameter budget."""
    best, best_key, max_cr = None, None, 0.0
    for n1 in (d for d in range(1, n + 1) if n % d == 0):
        for m1 in (d for d in range(1, m + 1) if m % d == 0):
            n2, m2 = n // n1, m // m1
            count = n1 * m1 + n2 * m2
            max_cr = max(max_cr, n * m / count)
            if not _meets(n * m, count, target_cr):
                continue
            key = (abs(n1 - n2) + abs(m1 - m2), n1, m1)
            if best_key is None or key < best_key:
                best, best_key = ((n1, m1), (n2, m2)), key
    if best is None:
        raise InfeasibleRatioError(target_cr, max_cr, f"no Kronecker factorization of {n}x{m}")
    return best


def compress_kronecker(matrix: np.ndarray, target_cr: float, cfg: TrainConfig) -> FactorizedModule:
    """Fit ``matrix ~ kron(B, C)`` by full-batch Adam.

    Adam descends the mean squared error (same minimizer as the RMSE, but its
    gradient vanishes at the optimum, so exactly representable inputs converge
    to machine precision); progress and the stored ``best_rmse`` are in RMSE.
    """
    M = np.asarray(matrix, dtype=np.float64)
    n, m = M.shape
    (n1, m1), (n2, m2) = kronecker_shapes(n, m, target_cr)
    gen = torch.Generator().manual_seed(cfg.seed)
    scale = float(np.sqrt(np.abs(M).mean() + 1e-12))
    B = (torch.rand(n1, m1, generator=gen, dtype=torch.float64) * 2 - 1) * scale
    C = (torch.rand(n2, m2, generator=gen, dtype=torch.float64) * 2 - 1) * scale
    B.requires_grad_(True)
    C.requires_grad_(True)
    opt = torch.optim.Adam([B, C], lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps, foreach=False)
    Mt = torch.from_numpy(M)

    def loss_fn():
        return torch.mean((Mt - torch.kron(B, C)) ** 2)

    with torch.no_grad():
        best = float(loss_fn()) ** 0.5
    best_bc = (B.detach().numpy().copy(), C.detach().numpy().copy())
    curve, stale, step, decays = [(0, best)], 0, 0, 0
    while step < cfg.max_steps:
        opt.zero_grad(set_to_none=True)
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise autodiff.TrainingDivergedError(step + 1)
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.eval_every == 0:
            with torch.no_grad():
                cur = float(loss_fn()) ** 0.5
            curve.append((step, cur))
            if cur < best:
                best, stale = cur, 0
                best_bc = (B.detach().numpy().copy(), C.detach().numpy().copy())
            else:
                stale += 1
                if stale >= cfg.patience:
                    if decays >= cfg.max_decays:
                        break
                    decays, stale = decays + 1, 0
                    for group in opt.param_groups:
                        group["lr"] *= cfg.plateau_decay
    return FactorizedModule("kronecker", (n, m), factors=best_bc,
                            meta={"seed": cfg.seed, "steps_run": step, "best_rmse": best})


def prune_l1(matrix: np.ndarray, target_cr: float) -> SparseModule:
    """Keep the ``floor(n*m / target_cr)`` largest-magnitude entries; ties go to the earlier (row, col)."""
    M = np.asarray(matrix, dtype=np.float64)
    if target_cr < 1:
        raise ValueError("target_cr must be >= 1")
    n, m = M.shape
    keep = int(Fraction(n * m) / Fraction(target_cr))
    if keep < 1:
        raise InfeasibleRatioError(target_cr, float(n * m), "pruning would keep no entries")
    flat = M.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")[:keep]
    order.sort()
    return SparseModule((n, m), order, flat[order].copy())


def materialize(module: Module, member: str | None = None) -> np.ndarray:
    if isinstance(module, SparseModule):
        n, m = module.shape
        out = np.zeros(n * m)
        out[module.indices] = module.values
        full = out.reshape(n, m)
    elif module.kind == "kronecker":
        full = kron(*module.factors)
    else:
        full = autodiff.decode(module.decoder, module.arch, module.latent, module.stored_row_norms)

    offsets = module.member_offsets
    if len(offsets) > 1 and member is None:
        raise ValueError(f"module {module.module_id!r} is concatenated; name a member")
    if member is None or (not offsets and member == module.module_id):
        return full
    if member not in offsets:
        raise KeyError(f"unknown member {member!r} for module {module.module_id!r}")
    a, b = offsets[member]
    return full[a:b]


# ---------------------------------------------------------------------------
# autoencoder compression


def _row_weights(names: list[str], fisher: FisherWeights | None, transform: FisherTransform | None) -> np.ndarray | None:
    if fisher is None:
        return None
    missing = [n for n in names if n not in fisher.rowwise]
    if missing:
        raise ValueError(f"no row-wise Fisher weights for {missing}")
    raw = np.concatenate([fisher.rowwise[n] for n in names])
    return apply_transform(raw, transform or FisherTransform())


def _compress_one_ae(members: list[tuple[str, np.ndarray]], arch: AEArch, spec: LossSpec, cfg: TrainConfig,
                     fisher: FisherWeights | None, transform: FisherTransform | None,
                     target_cr: float, module_id: str) -> tuple[FactorizedModule, TrainReport]:
    group = ModuleGroup(members, "concatenated")
    X = group.stacked()
    k, achieved = plan_latent_dim(group, target_cr, arch)
    arch_k = arch.with_latent(k)
    weights = _row_weights([n for n, _ in members], fisher, transform)
    bn = spec.batch_norm_weights or bool(transform and transform.batch_norm)
    loss = LossSpec(spec.beta, weights if weights is not None else spec.row_weights, bn)
    params, report = autodiff.train(X, arch_k, loss, cfg)
    latent, _ = autodiff.ae_forward(params, arch_k, X)
    decoder = {k_: v for k_, v in params.items() if k_.startswith("dec.")}
    norms = np.linalg.norm(X, axis=1) if arch_k.preserve_norm else None
    module = FactorizedModule(
        "ae", X.shape, latent=latent, decoder=decoder, arch=arch_k, stored_row_norms=norms,
        member_offsets=group.offsets() if len(members) > 1 else {},
        module_id=module_id,
        meta={"k": k, "seed": cfg.seed, "beta": spec.beta, "batch_norm": bn,
              "fisher": transform.label() if (fisher is not None and transform) else
              ("vanilla" if fisher is not None else None)},
    )
    assert module.parameter_count == _ae_param_count(X.shape[0], arch_k)
    assert compression_ratio(module) == achieved
    return module, report


def compress_ae(group: ModuleGroup, arch: AEArch, spec: LossSpec, cfg: TrainConfig,
                fisher: FisherWeights | None = None, transform: FisherTransform | None = None,
                target_cr: float = 10.0, jobs: int = 1) -> tuple[list[FactorizedModule], list[TrainReport]]:
    """Train autoencoder substitution modules for ``group``.

    Concatenated mode stacks the members and trains one shared decoder;
    separated mode trains an independent autoencoder per member (on up to
    ``jobs`` worker threads). Modules and reports come back in member order.
    """
    if group.mode == "concatenated":
        mod, rep = _compress_one_ae(group.members, arch, spec, cfg, fisher, transform, target_cr, group.label)
        return [mod], [rep]

    def job(member):
        return _compress_one_ae([member], arch, spec, cfg, fisher, transform, target_cr, member[0])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, group.members))
    else:
        results = [job(m) for m in group.members]
    return [r[0] for r in results], [r[1] for r in results]


def compress_group(group: ModuleGroup, method: str, target_cr: float, *, arch: AEArch | None = None,
                   spec: LossSpec | None = None, cfg: TrainConfig | None = None,
                   fisher: FisherWeights | None = None, transform: FisherTransform | None = None,
                   jobs: int = 1) -> tuple[list[Module], list[TrainReport], float]:
    """Dispatch one group to a compressor; returns modules, training reports, wall time."""
    cfg = cfg or TrainConfig()
    started = time.perf_counter()
    if method == "ae":
        if arch is None:
            arch = AEArch.linear(group.cols, 1)
        mods, reps = compress_ae(group, arch, spec or LossSpec(), cfg, fisher, transform, target_cr, jobs)
        return mods, reps, time.perf_counter() - started

    units = [(group.label, group.members)] if group.mode == "concatenated" else [(n, [(n, a)]) for n, a in group.members]
    mods: list[Module] = []
    for module_id, members in units:
        sub = ModuleGroup(members, "concatenated")
        X = sub.stacked()
        if method == "svd":
            mod = compress_svd(X, target_cr, seed=cfg.seed)
        elif method == "fwsvd":
            if fisher is None:
                raise ValueError("fwsvd needs Fisher weights")
            row = np.concatenate([fisher.rowwise[n] for n, _ in members])
            mod = compress_fwsvd(X, row, target_cr, seed=cfg.seed)
        elif method == "kronecker":
            mod = compress_kronecker(X, target_cr, cfg)
        elif method == "prune":
            mod = prune_l1(X, target_cr)
        else:
            raise ValueError(f"unknown method {method!r}")
        mod.module_id = module_id
        mod.member_offsets = sub.offsets() if len(members) > 1 else {}
        mods.append(mod)
    return mods, [], time.perf_counter() - started


def member_names(module: Module) -> list[str]:
    return list(module.member_offsets) if module.member_offsets else [module.module_id]


# ---------------------------------------------------------------------------
# serialization


def modules_to_bundle(modules: Sequence[Module], manifest: dict | None = None) -> TensorBundle:
    entries: dict[str, np.ndarray] = {}
    records = []
    for mod in modules:
        mid = mod.module_id
        members = member_names(mod)
        rec = {"id": mid, "kind": mod.kind, "members": members,
               "offsets": {k: list(v) for k, v in mod.member_offsets.items()},
               "param_count": mod.parameter_count,
               "achieved_cr": float(compression_ratio(mod)), "meta": mod.meta}
        if isinstance(mod, SparseModule):
            rec["shape"] = list(mod.shape)
            entries[f"sparse.{mid}.idx"] = mod.indices.astype(np.float64)[:, None]
            entries[f"sparse.{mid}.val"] = mod.values[:, None]
        elif mod.kind == "kronecker":
            rec["shape"] = list(mod.original_shape)
            entries[f"kron.{mid}.B"], entries[f"kron.{mid}.C"] = mod.factors
        else:
            rec["shape"] = list(mod.original_shape)
            rec["arch"] = mod.arch.to_dict()
            rec["k"] = mod.latent_dim
            for name in members:
                a, b = mod.member_offsets.get(name, (0, mod.original_shape[0]))
                entries[f"latent.{name}"] = mod.latent[a:b]
                if mod.stored_row_norms is not None:
                    entries[f"norms.{name}"] = mod.stored_row_norms[a:b, None]
            for pname, arr in mod.decoder.items():
                _, layer, wb = pname.split(".")
                entries[f"decoder.{mid}.{layer}.{wb}"] = arr if arr.ndim == 2 else arr[None, :]
        records.append(rec)
    return TensorBundle(entries, {"producer": "matcrush.compress", "modules": records, **(manifest or {})})


def modules_from_bundle(bundle: TensorBundle) -> list[Module]:
    mods: list[Module] = []
    for rec in bundle.manifest["modules"]:
        mid = rec["id"]
        offsets = {k: tuple(v) for k, v in rec["offsets"].items()}
        shape = tuple(rec["shape"])
        if rec["kind"] == "prune":
            mods.append(SparseModule(shape, bundle[f"sparse.{mid}.idx"][:, 0].astype(np.int64),
                                     bundle[f"sparse.{mid}.val"][:, 0], offsets, mid, rec["meta"]))
        elif rec["kind"] == "kronecker":
            mods.append(FactorizedModule("kronecker", shape, factors=(bundle[f"kron.{mid}.B"], bundle[f"kron.{mid}.C"]),
                                         member_offsets=offsets, module_id=mid, meta=rec["meta"]))
        else:
            arch = AEArch.from_dict(rec["arch"])
            latent = np.vstack([bundle[f"latent.{n}"] for n in rec["members"]])
            norms = None
            if f"norms.{rec['members'][0]}" in bundle:
                norms = np.concatenate([bundle[f"norms.{n}"][:, 0] for n in rec["members"]])
            decoder = {}
            prefix = f"decoder.{mid}."
            for name, arr in bundle.entries.items():
                if name.startswith(prefix):
                    layer, wb = name[len(prefix):].split(".")
                    decoder[f"dec.{layer}.{wb}"] = arr if wb == "w" else arr[0]
            mods.append(FactorizedModule(rec["kind"], shape, latent=latent, decoder=decoder, arch=arch,
                                         stored_row_norms=norms, member_offsets=offsets, module_id=mid,
                                         meta=rec["meta"]))
    return mods
