"""Reverse-mode differentiation helpers and a finite-difference harness.

Graphs are plain callables over torch tensors; torch.autograd records the tape.
The finite-difference side runs on numpy copies so it never shares a code
path with the analytic gradients it checks.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch


class SecondOrderError(RuntimeError):
    """An op inside a penalty sub-graph has no double-backward rule."""


def evaluate(graph: Callable[..., torch.Tensor], bindings: Mapping[str, object]) -> torch.Tensor:
    """Run ``graph(**bindings)`` without recording a tape.

    Missing bindings raise TypeError from the call itself; numpy inputs are
    converted to float64 tensors.
    """
    inputs = {k: torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
              for k, v in bindings.items()}
    with torch.no_grad():
        return graph(**inputs)


def backward(root: torch.Tensor, wrt: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``root`` w.r.t. each tensor in ``wrt``.

    Tensors that do not reach ``root`` get an exact zero gradient.
    """
    if root.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    names = list(wrt)
    tensors = [wrt[n] for n in names]
    grads = torch.autograd.grad(root.reshape(()), tensors, allow_unused=True, retain_graph=True)
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}


def grad_norm_penalty(logit_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Squared input-gradient norm of ``logit_fn``, averaged over the batch.

    The result stays on the tape, so its gradient w.r.t. the parameters of
    ``logit_fn`` is available (second order).
    """
    x = x.detach().requires_grad_(True)
    logit = logit_fn(x)
    if not logit.requires_grad:  # constant logit: no path to x
        return logit.detach().sum() * 0.0
    (g,) = torch.autograd.grad(logit.sum(), x, create_graph=True, allow_unused=True)
    if g is None:
        return (logit * 0.0).sum()
    batch = x.shape[0] if x.dim() > 1 else 1
    return g.pow(2).sum() / batch


def penalty_parameter_grads(penalty: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Backward through a :func:`grad_norm_penalty` result."""
    try:
        return backward(penalty, params)
    except RuntimeError as exc:  # torch signals a missing double-backward this way
        if "double backward" in str(exc) or "not implemented" in str(exc):
            raise SecondOrderError(str(exc)) from exc
        raise


# finite differences -------------------------------------------------------


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4,
                           indices=None) -> np.ndarray:
    """Central differences of a scalar function at ``x`` (float64).

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.size, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_tensor_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, *,
                          n_points: int = 5, step: float = 1e-4, seed: int = 0,
                          scale_floor: float | None = None) -> float:
    """Compare autograd and central differences at ``n_points`` random entries of ``x``.

    ``fn`` maps a float64 tensor to a scalar tensor. Returns the worst relative
    error, measured against ``max(|grad|, scale_floor)`` where the floor
    defaults to 1e-3 of the largest analytic gradient entry.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = fn(x)
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    g = torch.zeros_like(x) if g is None else g
    g = g.detach().numpy()
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.numel(), size=min(n_points, x.numel()), replace=False)

    def scalar(arr):
        with torch.no_grad():
            return float(fn(torch.from_numpy(arr)))

    num = finite_difference_grad(scalar, x.detach().numpy(), step=step, indices=idx)
    floor = scale_floor if scale_floor is not None else max(1e-3 * float(np.abs(g).max()), 1e-8)
    return relative_error(g.ravel()[idx], num.ravel()[idx], floor=floor)


def check_parameter_gradients(module: torch.nn.Module, loss_fn: Callable[[], torch.Tensor], *,
                              n_points: int = 5, step: float = 1e-4, seed: int = 0,
                              names=None) -> dict[str, float]:
    """Finite-difference spot checks on ``n_points`` entries of each parameter.

    ``loss_fn`` must be deterministic and re-read the module's parameters on
    every call. Returns the worst relative error per parameter name.
    """
    params = dict(module.named_parameters())
    if names is not None:
        params = {k: params[k] for k in names}
    loss = loss_fn()
    grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        g = grads[name].detach().reshape(-1).numpy()
        idx = rng.choice(p.numel(), size=min(n_points, p.numel()), replace=False)
        flat = p.data.reshape(-1)
        num = np.empty(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = float(loss_fn())
                flat[i] = orig - step
                fm = float(loss_fn())
                flat[i] = orig
                num[k] = (fp - fm) / (2 * step)
        floor = max(1e-3 * float(np.abs(g).max()), 1e-8)
        report[name] = relative_error(g[idx], num, floor=floor)
    return report
