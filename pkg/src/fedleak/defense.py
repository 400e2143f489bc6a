"""Representation-perturbation defense, its certified bound, and baseline defenses.

The defense zeroes the ``eps`` entries of the defended layer's input ``r``
that are cheapest to change in representation space yet most expensive in
input space, i.e. the largest ``|r_i| / ||grad_X f_i(X)||_2``, and then
forms that layer's weight gradient from the perturbed ``r'``. Everything
else in the model trains normally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch.func import jvp, vjp

from . import nn
from .nn import ModelSpec, Params

KINDS = ("none", "soteria", "gc", "dp_gauss", "dp_laplace")


@dataclass(frozen=True)
class DefenseConfig:
    """One defense setting.

    ``soteria`` takes either ``eps`` (number of pruned representation
    entries) or ``p_fc`` (percent of the defended width; converted as
    ``round(p_fc * L / 100)``). ``gc`` takes ``p_model`` percent. The DP
    kinds take ``sigma``: the Gaussian standard deviation, or the Laplace
    scale parameter (variance ``2 sigma^2``).
    """

    kind: str = "none"
    eps: int | None = None
    p_fc: float | None = None
    layer: int | None = None
    p_model: float = 0.0
    gc_scope: str = "global"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; choose from {KINDS}")
        for name in ("p_fc", "p_model"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 100:
                raise ValueError(f"{name} must lie in [0, 100]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.eps is not None and self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.gc_scope not in ("global", "layer"):
            raise ValueError("gc_scope is 'global' or 'layer'")
        if self.kind == "soteria" and self.eps is None and self.p_fc is None:
            raise ValueError("soteria needs eps or p_fc")

    def prune_count(self, width: int) -> int:
        eps = self.eps if self.eps is not None else int(round(self.p_fc * width / 100))
        if eps > width:
            raise ValueError(f"eps={eps} exceeds defended width {width}")
        return eps

    @property
    def label(self) -> str:
        if self.kind == "soteria":
            return f"soteria(p_fc={self.p_fc})" if self.p_fc is not None else f"soteria(eps={self.eps})"
        if self.kind == "gc":
            return f"gc(p_model={self.p_model})"
        if self.kind.startswith("dp"):
            return f"{self.kind}(sigma={self.sigma:g})"
        return "none"

    @property
    def param(self) -> float:
        return {
            "soteria": self.p_fc if self.p_fc is not None else self.eps,
            "gc": self.p_model,
            "dp_gauss": self.sigma,
            "dp_laplace": self.sigma,
        }.get(self.kind, 0.0)


# ---------------------------------------------------------------------------
# sensitivity and perturbation
# ---------------------------------------------------------------------------


@dataclass
class SensitivityScores:
    scores: torch.Tensor  # (N, L)
    jacobian_row_norms: torch.Tensor  # (N, L)
    pruned: torch.Tensor | None = None  # (N, eps) indices


def jacobian_row_norms(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                       chunk: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """``||grad_X f_i(X)||_2`` for every output entry ``i`` of every sample.

    ``f`` maps a batch (N, ...) to (N, L) and must treat samples
    independently, so one backward pass per ``i`` over the summed batch
    yields every sample's Jacobian row at once. With ``chunk`` set, that
    many passes are batched into one vectorised backward (fast for cheap
    feature maps, slower for conv stacks).
    """
    xr = x.detach().clone().requires_grad_(True)
    r = f(xr)
    if r.dim() != 2 or r.shape[0] != x.shape[0]:
        raise ValueError("feature map must return (N, L)")
    n, width = r.shape
    norms = torch.zeros_like(r, dtype=r.dtype).detach()
    if chunk:
        for s in range(0, width, chunk):
            idx = torch.arange(s, min(width, s + chunk))
            cot = torch.zeros(len(idx), n, width, dtype=r.dtype)
            cot[torch.arange(len(idx)), :, idx] = 1.0
            (g,) = torch.autograd.grad(r, xr, cot, retain_graph=True, is_grads_batched=True, allow_unused=True)
            if g is not None:
                norms[:, idx] = g.reshape(len(idx), n, -1).norm(dim=2).T
        return r.detach(), norms
    for i in range(width):
        (g,) = torch.autograd.grad(r[:, i].sum(), xr, retain_graph=True, allow_unused=True)
        if g is not None:
            norms[:, i] = g.reshape(g.shape[0], -1).norm(dim=1)
    return r.detach(), norms


def _scores(r: torch.Tensor, norms: torch.Tensor) -> torch.Tensor:
    mag = r.abs()
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    return torch.where(norms > 0, mag / safe,
                       torch.where(mag > 0, torch.full_like(mag, math.inf), torch.zeros_like(mag)))


def rep_sensitivity_scores(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, r: torch.Tensor | None = None, atol: float = 1e-8,
    chunk: int | None = None,
) -> SensitivityScores:
    """Scores ``|r_i| / ||J_i||_2`` with ``J_i`` the Jacobian row of ``r_i``.

    The norm of the Moore-Penrose inverse of a single row ``J_i`` is
    ``1 / ||J_i||``. A zero row scores +inf when ``r_i != 0`` and 0
    otherwise.
    """
    r_f, norms = jacobian_row_norms(f, x, chunk)
    if r is None:
        r = r_f
    elif not torch.allclose(r.reshape(r_f.shape).to(r_f.dtype), r_f, atol=atol, rtol=1e-6):
        raise ValueError("r does not equal f(X)")
    return SensitivityScores(_scores(r.reshape(r_f.shape), norms), norms)


def top_indices(scores: torch.Tensor, eps: int) -> torch.Tensor:
    """Indices of the ``eps`` largest scores per row, lower index first on ties."""
    order = torch.argsort(-scores, dim=-1, stable=True)
    return order[..., :eps]


def perturb_rep(x: torch.Tensor, f, r: torch.Tensor | None, eps: int,
                chunk: int | None = None) -> tuple[torch.Tensor, SensitivityScores]:
    """Zero the ``eps`` highest-scoring entries of ``r`` (per sample).

    Returns ``(r_prime, scores)``; ``scores.pruned`` holds the index sets.
    """
    sens = rep_sensitivity_scores(f, x, r, chunk=chunk)
    base = (r if r is not None else f(x)).detach().reshape(sens.scores.shape)
    width = base.shape[1]
    if not 0 <= eps <= width:
        raise ValueError(f"eps={eps} outside [0, {width}]")
    idx = top_indices(sens.scores, eps)
    r_prime = base.clone()
    r_prime.scatter_(1, idx, 0.0)
    sens.pruned = idx
    return r_prime, sens


def _closed_form_row_norms(spec: ModelSpec, params: Params, x: torch.Tensor, layer: int):
    """Exact ``(r, ||J_i||)`` for the prefixes whose Jacobian rows are known, else None.

    Reshapes only: rows are unit basis vectors. One unpadded conv and a
    pointwise activation: row ``i`` is the activation slope at ``z_i``
    times channel ``c(i)``'s filter placed on its patch, so its norm is
    ``|act'(z_i)| * ||W_c||``.
    """
    prefix = spec.layers[:layer]
    if all(isinstance(l, nn.Flatten) for l in prefix):
        r = x.reshape(x.shape[0], -1)
        return r, torch.ones_like(r)
    kinds = [type(l) for l in prefix]
    if kinds != [nn.Conv, nn.Activation, nn.Flatten] or prefix[0].padding != 0:
        return None
    w = params["0.weight"]
    z = nn.apply_layer(prefix[0], params, 0, x)
    r = nn.apply_layer(prefix[1], params, 1, z)
    slope = (z > 0).to(z.dtype) if prefix[1].kind == "relu" else r * (1 - r)
    norms = slope * w.reshape(w.shape[0], -1).norm(dim=1).reshape(1, -1, 1, 1)
    return r.reshape(x.shape[0], -1), norms.reshape(x.shape[0], -1)


def defended_rep(spec: ModelSpec, params: Params, x: torch.Tensor, eps: int, layer: int | None = None):
    """``(r, r_prime, scores)`` at the defended layer for a batch.

    When the layers before the defended one have closed-form Jacobian rows
    (reshapes only, or one unpadded conv plus activation) the norms are
    computed directly and the backward passes are skipped.
    """
    layer = spec.defended_index if layer is None else layer
    p = {k: v.detach() for k, v in params.items()}
    known = _closed_form_row_norms(spec, p, x.detach(), layer)
    if known is not None:
        r, norms = (t.detach() for t in known)
        if not 0 <= eps <= r.shape[1]:
            raise ValueError(f"eps={eps} outside [0, {r.shape[1]}]")
        sens = SensitivityScores(_scores(r, norms), norms)
        idx = top_indices(sens.scores, eps)
        r_prime = r.clone()
        r_prime.scatter_(1, idx, 0.0)
        sens.pruned = idx
        return r, r_prime, sens
    f = nn.feature_map(spec, p, layer)
    chunk = None if spec.conv_indices else 128
    r = f(x).detach()
    r_prime, sens = perturb_rep(x, f, r, eps, chunk)
    return r, r_prime, sens


def defended_gradient(
    spec: ModelSpec,
    params: Params,
    x: torch.Tensor,
    y,
    eps: int,
    grads: dict[str, torch.Tensor] | None = None,
    layer: int | None = None,
) -> dict[str, torch.Tensor]:
    """Batch gradient whose defended-layer weight gradient uses ``r'``.

    The defended layer's gradient becomes ``(1/B) sum_i (dl^i/db^i) r'^i^T``;
    every other tensor is the ordinary batch gradient (passed through
    untouched when ``grads`` is supplied).
    """
    layer = spec.defended_index if layer is None else layer
    if grads is None:
        grads = nn.batch_gradient(spec, params, x, y)
    if eps == 0:
        return grads
    delta, _ = nn.output_gradients(spec, params, x, y, layer)
    _, r_prime, _ = defended_rep(spec, params, x, eps, layer)
    out = dict(grads)
    out[f"{layer}.weight"] = delta.T @ r_prime / x.shape[0]
    return out


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def gc_transform(grads: dict[str, torch.Tensor], p_model: float, scope: str = "global") -> dict[str, torch.Tensor]:
    """Zero the ``p_model`` percent smallest-magnitude entries.

    ``scope='global'`` ranks all parameters jointly; ``'layer'`` ranks each
    tensor on its own.
    """
    if not 0 <= p_model <= 100:
        raise ValueError("p_model must lie in [0, 100]")
    if p_model == 0:
        return dict(grads)
    if scope == "layer":
        return {k: gc_transform({k: g}, p_model)[k] for k, g in grads.items()}
    names = list(grads)
    flat = torch.cat([grads[n].reshape(-1) for n in names])
    k = int(round(p_model * flat.numel() / 100))
    keep = torch.ones_like(flat, dtype=torch.bool)
    keep[torch.argsort(flat.abs(), stable=True)[:k]] = False
    flat = torch.where(keep, flat, torch.zeros_like(flat))
    out, pos = {}, 0
    for n in names:
        m = grads[n].numel()
        out[n] = flat[pos : pos + m].reshape(grads[n].shape)
        pos += m
    return out


def dp_transform(grads: dict[str, torch.Tensor], kind: str, sigma: float, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """Add iid zero-mean noise: Gaussian with std ``sigma`` or Laplace with scale ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return dict(grads)
    out = {}
    for n, g in grads.items():
        if kind == "dp_gauss":
            noise = rng.normal(0.0, sigma, size=tuple(g.shape))
        elif kind == "dp_laplace":
            noise = rng.laplace(0.0, sigma, size=tuple(g.shape))
        else:
            raise ValueError(f"unknown noise kind {kind!r}")
        out[n] = g + torch.from_numpy(noise).to(g.dtype)
    return out


class DefenseTransform:
    """Adapter turning a :class:`DefenseConfig` into a fedsim update transform."""

    def __init__(self, config: DefenseConfig):
        self.config = config
        self.is_identity = config.kind == "none"

    def __call__(self, spec, params, x, y, grads, rng):
        c = self.config
        if c.kind == "none":
            return grads
        if c.kind == "soteria":
            layer = spec.defended_index if c.layer is None else c.layer
            eps = c.prune_count(spec.layers[layer].in_features)
            return defended_gradient(spec, params, x, y, eps, grads, layer)
        if c.kind == "gc":
            return gc_transform(grads, c.p_model, c.gc_scope)
        return dp_transform(grads, c.kind, c.sigma, rng)

    def __repr__(self):
        return f"DefenseTransform({self.config.label})"


def make_transform(config: DefenseConfig) -> DefenseTransform:
    return DefenseTransform(config)


def protect_gradient(spec: ModelSpec, params: Params, x, y, config: DefenseConfig,
                     rng: np.random.Generator | None = None) -> dict[str, torch.Tensor]:
    """The gradient a device would upload for batch ``(x, y)`` under ``config``."""
    grads = nn.batch_gradient(spec, params, x, y)
    return make_transform(config)(spec, params, x, y, grads, rng or np.random.default_rng(0))


# parameter ranges per attack, sampled on a few grid points each
SWEEP_PRESETS = {
    "dlg": {
        "gc": [1, 20, 40, 60, 80],
        "dp_gauss": [1e-4, 1e-3, 1e-2, 1e-1],
        "dp_laplace": [1e-4, 1e-3, 1e-2, 1e-1],
        "soteria": [1, 10, 20, 30, 40],
    },
    "gs": {
        "gc": [1, 20, 40, 60, 80, 90],
        "dp_gauss": [1e-4, 1e-3, 1e-2, 1e-1],
        "dp_laplace": [1e-4, 1e-3, 1e-2, 1e-1],
        "soteria": [1, 20, 40, 60, 80],
    },
}


def preset_configs(attack: str) -> list[DefenseConfig]:
    grid = SWEEP_PRESETS[attack]
    out = [DefenseConfig("none")]
    out += [DefenseConfig("gc", p_model=v) for v in grid["gc"]]
    out += [DefenseConfig("dp_gauss", sigma=v) for v in grid["dp_gauss"]]
    out += [DefenseConfig("dp_laplace", sigma=v) for v in grid["dp_laplace"]]
    out += [DefenseConfig("soteria", p_fc=v) for v in grid["soteria"]]
    return out


# ---------------------------------------------------------------------------
# certified bound
# ---------------------------------------------------------------------------


@dataclass
class SpectralEstimate:
    value: float
    residual: float
    iterations: int
    converged: bool


def jacobian_spectral_norm(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, tol: float = 1e-6, max_iters: int = 1000, seed: int = 0
) -> SpectralEstimate:
    """Largest singular value of ``grad_X f`` at ``x`` by power iteration on ``J^T J``.

    ``J v`` comes from forward-mode and ``J^T u`` from reverse-mode
    differentiation. Stops when ``||J^T J v - lambda v|| <= tol * lambda``.
    """
    x = x.detach()
    _, pullback = vjp(f, x)
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    v = v / v.norm()
    lam, residual = 0.0, math.inf
    for it in range(1, max_iters + 1):
        _, jv = jvp(f, (x,), (v,))
        (w,) = pullback(jv)
        lam = float(torch.dot(v.reshape(-1), w.reshape(-1)))
        wn = float(w.norm())
        if wn == 0.0:
            return SpectralEstimate(0.0, 0.0, it, True)
        residual = float((w - lam * v).norm()) / max(abs(lam), 1e-300)
        if residual <= tol:
            return SpectralEstimate(math.sqrt(max(lam, 0.0)), residual, it, True)
        v = w / wn
    return SpectralEstimate(math.sqrt(max(lam, 0.0)), residual, max_iters, False)


def jacobian_frobenius_norm(f, x) -> float:
    _, norms = jacobian_row_norms(f, x)
    return float(norms.norm())


@dataclass
class CertifiedBound:
    value: float
    p: int
    jacobian_norm: float
    residual: float
    norm_kind: str
    invertible: bool | None
    heuristic: bool
    perturbation_norm: float = field(default=0.0)


def _local_invertibility(f, x, max_entries: int = 2_000_000) -> bool | None:
    x = x.detach()
    r = f(x)
    n_in, n_out = x.numel(), r.numel()
    if n_out < n_in:
        return False
    if n_in * n_out > max_entries:
        return None
    jac = torch.autograd.functional.jacobian(lambda z: f(z.reshape(x.shape)).reshape(-1), x.reshape(-1))
    s = torch.linalg.svdvals(jac)
    return bool(s.min() > 1e-10 * s.max()) if s.numel() else False


def certified_bound(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    r: torch.Tensor,
    r_prime: torch.Tensor,
    p: int = 2,
    norm_kind: str = "spectral",
    tol: float = 1e-6,
    max_iters: int = 1000,
) -> CertifiedBound:
    """Lower bound ``||r - r'||_p / ||grad_X f||_p`` on any reconstruction error.

    The guarantee needs ``f`` to be invertible around ``r`` and ``r'``; when
    that cannot be confirmed the bound is still computed but marked
    ``heuristic``. ``norm_kind='frobenius'`` uses the (larger) Frobenius
    norm, giving a weaker but still valid bound.
    """
    if p != 2:
        raise ValueError("only p = 2 is supported")
    if norm_kind == "spectral":
        est = jacobian_spectral_norm(f, x, tol, max_iters)
        jn, res = est.value, est.residual
    elif norm_kind == "frobenius":
        jn, res = jacobian_frobenius_norm(f, x), 0.0
    else:
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    if jn == 0.0:
        raise ZeroDivisionError("Jacobian norm is zero; bound undefined")
    pert = float((r - r_prime).reshape(-1).norm(p))
    inv = _local_invertibility(f, x)
    return CertifiedBound(pert / jn, p, jn, res, norm_kind, inv, inv is not True, pert)
