"""Central finite-difference verification of analytic gradients.

The checker perturbs every entry of every trainable parameter twice and
compares (f(x+e) - f(x-e)) / 2e against the tape's gradient, with relative
error measured against max(|analytic|, |numeric|, 1e-8). Frozen parameters
are reported with identically-zero analytic gradients and are not perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, no_grad


class NonFiniteLossError(RuntimeError):
    """Loss evaluated to NaN/Inf during checking; names the culprit parameter."""


@dataclass
class ParamCheck:
    name: str
    frozen: bool
    max_rel_err: float        # worst single entry (dominated by FD truncation
    #                           on small-gradient coordinates; diagnostic)
    norm_rel_err: float       # ||a - n|| / max(||a||, ||n||, 1e-8), the gate
    worst_index: tuple
    analytic_at_worst: float
    numeric_at_worst: float

    def ok(self, tol: float) -> bool:
        return self.frozen or self.norm_rel_err <= tol


@dataclass
class GradCheckReport:
    epsilon: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        errs = [p.max_rel_err for p in self.params if not p.frozen]
        return max(errs) if errs else 0.0

    @property
    def max_norm_rel_err(self) -> float:
        errs = [p.norm_rel_err for p in self.params if not p.frozen]
        return max(errs) if errs else 0.0

    def ok(self, tol: float) -> bool:
        return all(p.ok(tol) for p in self.params)

    def summary_lines(self, tol: float):
        for p in self.params:
            status = "FROZEN" if p.frozen else ("ok" if p.norm_rel_err <= tol else "FAIL")
            yield (f"{p.name:60s} {status:6s} norm_rel_err={p.norm_rel_err:.3e} "
                   f"worst_entry={p.max_rel_err:.3e} "
                   f"analytic={p.analytic_at_worst:+.6e} numeric={p.numeric_at_worst:+.6e}")


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def finite_difference_check(f, params, epsilon: float = 1e-3,
                            max_entries_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph on every call (it is re-evaluated twice per
    perturbed entry). ``max_entries_per_param`` optionally subsamples large
    tensors; the acceptance harness runs exhaustively.
    """
    params = list(params)
    for p in params:
        if not isinstance(p, Parameter):
            raise TypeError(f"expected Parameter, got {type(p)}")
        p.grad = None

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError("loss is non-finite before any perturbation")
    loss.backward()
    analytic = {}
    for p in params:
        if p.frozen:
            analytic[id(p)] = np.zeros_like(p.data)
        else:
            analytic[id(p)] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    report = GradCheckReport(epsilon=epsilon)
    for p in params:
        a = analytic[id(p)]
        name = p.name or f"param{params.index(p)}"
        if p.frozen:
            report.params.append(ParamCheck(name, True, 0.0, 0.0, (), 0.0, 0.0))
            continue
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if max_entries_per_param is not None and n_entries > max_entries_per_param:
            gen = rng or np.random.default_rng(0)
            idxs = gen.choice(n_entries, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n_entries)
        numeric = np.zeros_like(a).reshape(-1)
        checked = np.zeros(n_entries, dtype=bool)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                fp = float(f().data)
                flat[i] = orig - epsilon
                fm = float(f().data)
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{i}]")
            numeric[i] = (fp - fm) / (2.0 * epsilon)
            checked[i] = True
        a_flat = a.reshape(-1)
        rel = relative_error(a_flat, numeric)
        rel[~checked] = 0.0
        worst = int(np.argmax(rel))
        a_sel = a_flat[checked]
        n_sel = numeric[checked]
        norm_rel = float(np.linalg.norm(a_sel - n_sel)
                         / max(np.linalg.norm(a_sel), np.linalg.norm(n_sel), 1e-8))
        report.params.append(ParamCheck(
            name, False, float(rel[worst]), norm_rel,
            tuple(np.unravel_index(worst, p.data.shape)),
            float(a_flat[worst]), float(numeric[worst]),
        ))
    return report
