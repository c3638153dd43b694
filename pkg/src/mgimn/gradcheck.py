"""Central finite-difference gradient checking."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad, record_branches


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    diagnostic: str = ""
    worst_entry: dict[str, tuple] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self):
        return not self.diagnostic and all(e <= self.tolerance for e in self.errors.values())

    def lines(self):
        out = []
        for name, err in self.errors.items():
            note = f" ({self.refined[name]} refined)" if self.refined.get(name) else ""
            out.append(f"{name:36s} {err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}{note}")
        if self.diagnostic:
            out.append(f"diagnostic: {self.diagnostic}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} at tolerance {self.tolerance:g}")
        return out


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _evaluate(model_fn, params):
    with record_branches() as log:
        value = model_fn(params).item()
    digest = hashlib.blake2b(digest_size=16)
    for decision in log:
        digest.update(np.ascontiguousarray(decision).tobytes())
    return value, digest.digest()


def grad_check(model_fn, params, tolerance=1e-4, step=1e-4, names=None, analytic=None,
               max_halvings=8):
    """Compare backprop gradients of ``model_fn(params)`` with central differences.

    ``model_fn`` must return a scalar Tensor and be deterministic.  Every entry
    of every parameter is perturbed by ``+-step``.  If a perturbation flips a
    ReLU, max or abs branch relative to the unperturbed point, the difference
    straddles a kink and says nothing about the derivative there, so the step
    for that entry is halved until both sides stay on the base branch.
    ``analytic`` may supply precomputed gradients (used to test the checker).
    """
    names = list(params) if names is None else list(names)

    params.zero_grad()
    loss = model_fn(params)
    base = loss.item()
    with no_grad():
        again, base_sig = _evaluate(model_fn, params)
    if base != again:
        return GradCheckReport({n: float("inf") for n in names}, tolerance,
                               diagnostic=f"model_fn is not deterministic ({base!r} vs {again!r})")
    if analytic is None:
        loss.backward()
        analytic = {n: (np.zeros_like(params[n].data) if params[n].grad is None
                        else params[n].grad.copy()) for n in names}
    params.zero_grad()

    errors, worst, refined = {}, {}, {}
    with no_grad():
        for name in names:
            p = params[name]
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            n_refined = 0
            for i in range(flat.size):
                orig = flat[i]
                h = step
                for attempt in range(max_halvings + 1):
                    flat[i] = orig + h
                    up, sig_up = _evaluate(model_fn, params)
                    flat[i] = orig - h
                    down, sig_down = _evaluate(model_fn, params)
                    flat[i] = orig
                    if sig_up == base_sig and sig_down == base_sig:
                        break
                    h *= 0.5
                n_refined += attempt > 0
                numeric[i] = (up - down) / (2.0 * h)
            err = relative_error(analytic[name].reshape(-1), numeric)
            j = int(np.argmax(err))
            errors[name] = float(err[j])
            worst[name] = (j, float(analytic[name].reshape(-1)[j]), float(numeric[j]))
            refined[name] = n_refined
    return GradCheckReport(errors, tolerance, worst_entry=worst, refined=refined)
