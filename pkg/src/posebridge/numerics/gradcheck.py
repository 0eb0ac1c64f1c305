"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import NonFiniteError
from .tape import Tape, Tensor


@dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    n_checked: int
    worst: list[GradEntry] = field(default_factory=list)

    def summary(self) -> str:
        head = f"{'PASS' if self.passed else 'FAIL'} checked={self.n_checked} max_err={self.max_error:.3e}"
        lines = [head] + [
            f"  {e.name}{list(e.index)} analytic={e.analytic:+.6e} fd={e.numeric:+.6e} err={e.error:.2e}"
            for e in self.worst
        ]
        return "\n".join(lines)


def _scalar(out) -> float:
    v = out.value if isinstance(out, Tensor) else np.asarray(out)
    if v.size != 1:
        raise ValueError("scalar_fn must return a single value")
    v = float(v.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("loss is not finite")
    return v


def analytic_gradients(scalar_fn, params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        watched = {k: tape.watch(v, name=k) for k, v in params.items()}
        out = scalar_fn(watched)
        value = _scalar(out)
        grads = tape.gradient(out, list(watched.values()))
    return value, dict(zip(watched, grads))


def grad_check(
    scalar_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    rtol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    n_worst: int = 5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central differences entry by entry.

    An entry passes when ``|analytic - fd| <= rtol * max(1, |fd|)``. With
    ``max_entries`` set, at most that many entries per parameter are probed
    (chosen with a seeded permutation). ``analytic`` overrides the tape
    gradients, which is how a deliberately wrong gradient is injected.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        _, analytic = analytic_gradients(scalar_fn, params)
    rng = np.random.default_rng(seed)

    def evaluate(arrays):
        return _scalar(scalar_fn({k: Tensor(v) for k, v in arrays.items()}))

    entries: list[GradEntry] = []
    for name, arr in params.items():
        flat_ids = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_ids = np.sort(rng.permutation(arr.size)[:max_entries])
        for flat in flat_ids:
            idx = np.unravel_index(flat, arr.shape) if arr.ndim else ()
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = evaluate(params)
            arr[idx] = orig - step
            f_minus = evaluate(params)
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(np.asarray(analytic[name])[idx])
            err = abs(a - fd) / max(1.0, abs(fd))
            entries.append(GradEntry(name, tuple(int(i) for i in np.atleast_1d(idx)) if arr.ndim else (), a, fd, err))
    entries.sort(key=lambda e: -e.error)
    max_err = entries[0].error if entries else 0.0
    return GradCheckReport(
        passed=max_err <= rtol,
        max_error=max_err,
        n_checked=len(entries),
        worst=entries[:n_worst],
    )
