"""Differentiable tensor primitives, finite-difference oracles and optimizers.

Tensors are ``torch.Tensor`` objects in float64. Gradients are produced with
``create_graph=True`` so they stay attached to the autograd graph and can be
differentiated again, which is what gradient-matching attacks need.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class LineSearchError(RuntimeError):
    """Backtracking failed to find a step satisfying the Armijo condition."""


def tensor(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


# ---------------------------------------------------------------------------
# ops with explicit shape checks
# ---------------------------------------------------------------------------


def linear(r: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """b = W r for a batch of row vectors ``r`` of shape (N, in)."""
    if r.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {r.shape[-1]} != weight columns {weight.shape[1]}")
    return F.linear(r, weight, bias)


def conv2d(x: torch.Tensor, weight: torch.Tensor, padding: int = 0) -> torch.Tensor:
    """Stride-1 cross-correlation, no bias. ``x`` is (N, C, H, W)."""
    if x.dim() != 4:
        raise ShapeError(f"conv2d expects a 4-d input, got shape {tuple(x.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: {x.shape[1]} input channels, kernel expects {weight.shape[1]}")
    k = weight.shape[-1]
    if x.shape[-1] + 2 * padding < k or x.shape[-2] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {tuple(x.shape[-2:])}")
    return F.conv2d(x, weight, padding=padding)


def maxpool2d(x: torch.Tensor, k: int) -> torch.Tensor:
    """Kernel = stride = k. Ties route the gradient to the first maximal entry."""
    if x.shape[-1] < k or x.shape[-2] < k:
        raise ShapeError(f"maxpool2d: window {k} larger than input {tuple(x.shape[-2:])}")
    return F.max_pool2d(x, k, stride=k)


def relu(x: torch.Tensor) -> torch.Tensor:
    # subgradient at 0 is 0
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def gradient(
    output: torch.Tensor,
    wrt: Sequence[torch.Tensor],
    create_graph: bool = True,
    allow_unused: bool = False,
) -> list[torch.Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    The returned tensors are themselves differentiable when ``create_graph``
    is true, so calling :func:`gradient` on a function of them yields
    second-order derivatives.

    Raises:
        ShapeError: ``output`` is not scalar-shaped.
        ValueError: some target does not influence ``output`` and
            ``allow_unused`` is false.
    """
    if output.numel() != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {tuple(output.shape)}")
    wrt = list(wrt)
    grads = torch.autograd.grad(
        output.reshape(()), wrt, create_graph=create_graph, retain_graph=True, allow_unused=True
    )
    out = []
    for i, (g, w) in enumerate(zip(grads, wrt)):
        if g is None:
            if not allow_unused:
                raise ValueError(f"target {i} is not reachable from the output")
            g = torch.zeros_like(w)
        out.append(g)
    return out


def finite_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor, h: float = 1e-5
) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = x.detach().to(DTYPE)
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            e = torch.zeros_like(flat)
            e[i] = h
            hi = float(fn((flat + e).reshape(x.shape)))
            lo = float(fn((flat - e).reshape(x.shape)))
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            grad[i] = (hi - lo) / (2 * h)
    return grad.reshape(x.shape)


def finite_difference_directional(
    fn: Callable[[torch.Tensor], torch.Tensor | float],
    x: torch.Tensor,
    direction: torch.Tensor,
    h: float = 1e-5,
) -> float:
    """Central difference of ``fn`` along ``direction``; cheap check for large inputs."""
    if h <= 0:
        raise ValueError("step h must be positive")
    with torch.no_grad():
        hi = float(fn(x + h * direction))
        lo = float(fn(x - h * direction))
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise FloatingPointError("non-finite function value")
    return (hi - lo) / (2 * h)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float) -> list[torch.Tensor]:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_shapes(params, grads)
    return [p - lr * g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float
) -> tuple[AdamState, list[torch.Tensor]]:
    """One bias-corrected Adam update. Returns a new state; inputs are not mutated."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_shapes(params, grads)
    m_prev = state.m or [torch.zeros_like(p) for p in params]
    v_prev = state.v or [torch.zeros_like(p) for p in params]
    _check_shapes(params, m_prev)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(m_prev, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(v_prev, grads)]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = [p - lr * (mi / c1) / (torch.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return AdamState(t, m, v, b1, b2, state.eps), new


@dataclass
class LBFGSState:
    memory: int = 20
    c1: float = 1e-4
    shrink: float = 0.5
    max_trials: int = 30
    s: deque = field(default_factory=deque)
    y: deque = field(default_factory=deque)
    step: int = 0
    loss: float | None = None
    grad: torch.Tensor | None = None

    def reset(self) -> None:
        self.s.clear()
        self.y.clear()


def _two_loop(g: torch.Tensor, s_hist, y_hist) -> torch.Tensor:
    q = g.clone()
    alphas = []
    rhos = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / torch.dot(y, s)
        a = rho * torch.dot(s, q)
        q = q - a * y
        alphas.append(a)
        rhos.append(rho)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q = q * (torch.dot(s, y) / torch.dot(y, y))
    for (s, y), a, rho in zip(zip(s_hist, y_hist), reversed(alphas), reversed(rhos)):
        b = rho * torch.dot(y, q)
        q = q + s * (a - b)
    return -q


def lbfgs_step(
    state: LBFGSState,
    x: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], tuple[float, torch.Tensor]],
) -> tuple[LBFGSState, torch.Tensor]:
    """One L-BFGS iteration with backtracking Armijo line search.

    ``loss_fn(x)`` returns ``(loss, grad)`` with ``grad`` shaped like ``x``.
    The search direction comes from the two-loop recursion over the stored
    curvature pairs (steepest descent when the history is empty). The trial
    step starts at 1, or at ``min(1, 1/||g||_1)`` on an empty history, and
    halves until ``f(x + t d) <= f(x) + c1 t g.d``.

    Raises:
        LineSearchError: no acceptable step within ``max_trials`` halvings.
            ``x`` and the state are left unchanged.
    """
    shape = x.shape
    xf = x.detach().reshape(-1)
    if state.grad is None or state.loss is None:
        f0, g0 = loss_fn(xf.reshape(shape))
        state.loss, state.grad = float(f0), g0.detach().reshape(-1)
    f0, g0 = state.loss, state.grad
    if not torch.any(g0 != 0):
        return state, x.detach()
    d = _two_loop(g0, list(state.s), list(state.y))
    slope = float(torch.dot(g0, d))
    if slope >= 0:
        # history produced an ascent direction; fall back to steepest descent
        state.reset()
        d = -g0
        slope = float(torch.dot(g0, d))
    t = 1.0 if state.s else min(1.0, 1.0 / float(g0.abs().sum()))
    for _ in range(state.max_trials):
        x_new = xf + t * d
        f_new, g_new = loss_fn(x_new.reshape(shape))
        f_new = float(f_new)
        if math.isfinite(f_new) and f_new <= f0 + state.c1 * t * slope:
            g_new = g_new.detach().reshape(-1)
            s_vec = x_new - xf
            y_vec = g_new - g0
            if float(torch.dot(s_vec, y_vec)) > 1e-10 * float(torch.dot(y_vec, y_vec)):
                state.s.append(s_vec)
                state.y.append(y_vec)
                while len(state.s) > state.memory:
                    state.s.popleft()
                    state.y.popleft()
            state.loss, state.grad = f_new, g_new
            state.step += 1
            return state, x_new.reshape(shape)
        t *= state.shrink
    raise LineSearchError(f"no Armijo step after {state.max_trials} trials (loss {f0:.3e})")
