"""Empirical Fisher information for weight matrices and the importance-weight transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor_io import TensorBundle

LOG_EPS = 1e-12
TRANSFORM_KINDS = ("power", "log_shift", "vanilla")

GradOracle = Callable[[object], Mapping[str, np.ndarray]]


class FisherError(ValueError):
    pass


@dataclass
class FisherWeights:
    elementwise: dict[str, np.ndarray]
    rowwise: dict[str, np.ndarray]
    sample_count: int

    def to_bundle(self) -> TensorBundle:
        entries = {}
        for name, arr in self.elementwise.items():
            entries[f"fisher.elem.{name}"] = arr
        for name, vec in self.rowwise.items():
            entries[f"fisher.row.{name}"] = vec[:, None]
        return TensorBundle(entries, {"sample_count": self.sample_count, "producer": "matcrush.fisher"})

    @classmethod
    def from_bundle(cls, bundle: TensorBundle) -> "FisherWeights":
        elem, row = {}, {}
        for name, arr in bundle.entries.items():
            if name.startswith("fisher.elem."):
                elem[name[len("fisher.elem."):]] = arr
            elif name.startswith("fisher.row."):
                row[name[len("fisher.row."):]] = arr[:, 0]
        return cls(elem, row, int(bundle.manifest["sample_count"]))


@dataclass(frozen=True)
class FisherTransform:
    kind: str = "vanilla"
    exponent: float = 1.0
    extra: float = 0.0
    batch_norm: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "power" and not self.exponent > 0:
            raise ValueError("power exponent must be positive")

    @classmethod
    def power(cls, a: float, batch_norm: bool = False) -> "FisherTransform":
        return cls("power", exponent=a, batch_norm=batch_norm)

    @classmethod
    def log_shift(cls, extra: float = 0.0, batch_norm: bool = False) -> "FisherTransform":
        return cls("log_shift", extra=extra, batch_norm=batch_norm)

    def label(self) -> str:
        base = {"power": f"x^{self.exponent}", "log_shift": f"ln(x)+C+{self.extra:g}",
                "vanilla": "vanilla"}[self.kind]
        return base + ("+BN" if self.batch_norm else "")


def rowwise_diag(elementwise: np.ndarray) -> np.ndarray:
    """Per-row ``sqrt(sum_j F_ij)``."""
    F = np.asarray(elementwise, dtype=np.float64)
    if np.any(F < 0):
        raise FisherError("element-wise Fisher values must be non-negative")
    return np.sqrt(F.sum(axis=1))


def estimate_fisher(grad_oracle: GradOracle, dataset: Iterable, targets: Iterable[str]) -> FisherWeights:
    """Mean squared gradient per dataset unit (one unit = one item of ``dataset``)."""
    targets = list(targets)
    acc: dict[str, np.ndarray] = {}
    count = 0
    for batch in dataset:
        grads = grad_oracle(batch)
        for name in targets:
            if name not in grads:
                raise FisherError(f"gradient oracle returned nothing for target {name!r}")
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise FisherError(f"non-finite gradient for {name!r} in dataset unit {count}")
            if name in acc:
                acc[name] += g * g
            else:
                acc[name] = g * g
        count += 1
    if count == 0:
        raise FisherError("empty dataset")
    elem = {name: acc[name] / count for name in targets}
    return FisherWeights(elem, {name: rowwise_diag(v) for name, v in elem.items()}, count)


def apply_transform(values: np.ndarray, t: FisherTransform) -> np.ndarray:
    """Reshape raw row importances. ``t.batch_norm`` is honoured later, per training batch."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0):
        raise FisherError("Fisher values must be non-negative")
    if t.kind == "power":
        return np.power(v, t.exponent)
    if t.kind == "log_shift":
        logs = np.log(v + LOG_EPS)
        shift = -logs.min() + LOG_EPS
        return logs + shift + t.extra
    return v.copy()
