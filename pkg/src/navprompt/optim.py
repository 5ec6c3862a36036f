"""Named parameter store with a freeze mask, optimizers, and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import CheckError, ContractError, ParameterError
from .tensor import Tensor


class ParamStore:
    """Named tensors partitioned into trainable and frozen sets.

    Frozen entries are guaranteed bitwise unchanged by ``Optimizer.step``;
    they also drop out of gradient computation entirely (``requires_grad``
    is cleared), so backpropagation through a frozen backbone only pays for
    the paths that can reach trainable parameters.
    """

    def __init__(self) -> None:
        self.entries: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.entries[name] = t
        if not trainable:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.entries[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, t in self.entries.items():
            dup.add(name, t.data.copy(), trainable=name not in self.frozen)
        dup.frozen = set(self.frozen)
        return dup

    def set_frozen(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.entries)
        if unknown:
            raise ContractError(f"cannot freeze unknown parameters: {sorted(unknown)}")
        self.frozen = names
        for name, t in self.entries.items():
            t.requires_grad = name not in names
            t.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n in self.entries if n not in self.frozen]

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Collect populated gradients for trainable entries."""
        return {
            name: t.grad
            for name, t in self.entries.items()
            if name not in self.frozen and t.grad is not None
        }


def backward(loss: Tensor, store: ParamStore) -> dict[str, np.ndarray]:
    """Run reverse-mode differentiation and return grads keyed by store name."""
    store.zero_grads()
    loss.backward()
    return store.gradients()


@dataclass
class OptimConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.algorithm not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer algorithm {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ParameterError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ParameterError("adam_eps must be positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be nonnegative")


class Optimizer:
    """SGD or Adam update that never touches frozen entries.

    Adam first/second moments persist per parameter name across steps.
    """

    def __init__(self, cfg: OptimConfig):
        cfg.validate()
        self.cfg = cfg
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._steps: dict[str, int] = {}

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        for name, g in grads.items():
            if name not in store.entries:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if name in store.frozen:
                continue
            p = store.entries[name]
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.algorithm == "sgd":
                p.data -= cfg.learning_rate * g
            else:
                m, v = self._moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
                t = self._steps.get(name, 0) + 1
                m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
                v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * (g * g)
                self._moments[name] = (m, v)
                self._steps[name] = t
                mhat = m / (1 - cfg.adam_beta1 ** t)
                vhat = v / (1 - cfg.adam_beta2 ** t)
                p.data -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def optimizer_step(store: ParamStore, grads: dict[str, np.ndarray], cfg: OptimConfig,
                   optimizer: Optimizer | None = None) -> Optimizer:
    """One-shot convenience wrapper; returns the optimizer so moments persist."""
    opt = optimizer if optimizer is not None else Optimizer(cfg)
    opt.step(store, grads)
    return opt


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    eps: float = 1e-5

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def finite_difference_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    params: Iterable[str] | None = None,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic scalar function of the store's trainable
    entries; determinism is verified by evaluating it twice.  The error metric
    is |analytic - numeric| / max(1, |analytic|, |numeric|), reported per
    parameter and as a global maximum.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    first = f(store).item()
    second = f(store).item()
    if first != second:
        raise CheckError(f"f is not deterministic: {first!r} vs {second!r}")

    analytic = backward(f(store), store)
    names = list(params) if params is not None else store.trainable_names()
    report = FiniteDifferenceReport(max_rel_error=0.0, eps=eps)
    for name in names:
        if name in store.frozen:
            continue
        p = store.entries[name]
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f(store).item()
            flat[i] = keep - eps
            lo = f(store).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if rel > worst:
                worst = rel
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
