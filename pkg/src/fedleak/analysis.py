"""Convergence bound for defended FedAvg, constant estimation, sweeps and reports."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np
import torch
from scipy.optimize import minimize

from . import nn
from .attacks import AttackConfig, capture_target, gradient_attack
from .data import Dataset, PartitionPlan, partition_noniid
from .defense import DefenseConfig, make_transform, preset_configs
from .fedsim import FedConfig, derive_seed, evaluate, run_fedavg


# ---------------------------------------------------------------------------
# the bound
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceParams:
    """Constants of the defended-FedAvg convergence bound.

    ``sigma`` holds one value per device, ``p`` the device weights.
    ``gamma_het`` is the heterogeneity gap ``F* - sum_k p_k F_k*``.
    ``eps`` is the representation perturbation budget and ``I`` the number
    of local updates per round.
    """

    L: float
    mu: float
    sigma: Sequence[float]
    G: float
    lambda_s: float
    gamma_het: float
    eps: float
    I: int
    K: int
    p: Sequence[float]
    w0_dist_sq: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.L < self.mu:
            raise ValueError("need L >= mu")
        if len(self.sigma) != len(self.p):
            raise ValueError("one sigma per device")
        for name in ("G", "lambda_s", "gamma_het", "eps", "w0_dist_sq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if min(self.sigma) < 0 or min(self.p) < 0 or not math.isclose(sum(self.p), 1.0, abs_tol=1e-9):
            raise ValueError("sigma must be non-negative and p a probability vector")
        if self.I < 1 or self.K < 1:
            raise ValueError("I and K must be >= 1")

    @property
    def N(self) -> int:
        return len(self.p)

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def gamma(self) -> float:
        return max(8 * self.kappa, self.I)

    def eta(self, t: int) -> float:
        return 2.0 / (self.mu * (self.gamma + t))


@dataclass
class BoundCurve:
    steps: list[int]
    values: list[float]
    Q: float
    C: float


def q_term(c: ConvergenceParams) -> float:
    shift = c.lambda_s * c.eps
    var = math.fsum(pk * pk * (shift + s * s) for pk, s in zip(c.p, c.sigma))
    return var + 6 * c.L * c.gamma_het + 8 * (c.I - 1) ** 2 * (shift + c.G**2)


def c_term(c: ConvergenceParams) -> float:
    return 4.0 / c.K * c.I**2 * (c.lambda_s * c.eps + c.G**2)


def convergence_bound(c: ConvergenceParams, steps: int | Sequence[int]) -> BoundCurve:
    """Bound on ``E[F(W_T)] - F*`` after ``T`` local SGD iterations.

    ``steps`` is either a horizon (evaluated at 0..T) or explicit values.
    """
    if c.mu <= 0:
        raise ValueError("mu must be positive")
    steps = list(range(steps + 1)) if isinstance(steps, int) else [int(t) for t in steps]
    Q, C = q_term(c), c_term(c)
    inner = (Q + C) / c.mu + c.mu * c.gamma / 2 * c.w0_dist_sq
    return BoundCurve(steps, [2 * c.kappa / (c.gamma + t) * inner for t in steps], Q, C)


# ---------------------------------------------------------------------------
# regularised multinomial logistic regression
# ---------------------------------------------------------------------------


class L2Transform:
    """Adds the gradient of ``lam/2 ||W||^2`` after an inner transform."""

    def __init__(self, lam: float, inner=None):
        self.lam = lam
        self.inner = inner

    def __call__(self, spec, params, x, y, grads, rng):
        if self.inner is not None:
            grads = self.inner(spec, params, x, y, grads, rng)
        return {k: g + self.lam * params[k].detach() for k, g in grads.items()}


@dataclass
class LogRegProblem:
    """``F(W) = sum_k p_k F_k(W)`` with ``F_k`` the mean device cross-entropy plus ``lam/2 ||W||^2``."""

    features: list[torch.Tensor]  # per device (n_k, d)
    labels: list[torch.Tensor]
    num_classes: int
    lam: float
    p: np.ndarray

    @classmethod
    def from_partition(cls, ds: Dataset, plan: PartitionPlan, lam: float, p=None) -> "LogRegProblem":
        if lam <= 0:
            raise ValueError("need lam > 0 for strong convexity")
        feats, labs = [], []
        for k in range(plan.num_devices):
            d = plan.device_data(ds, k)
            feats.append(d.images.reshape(len(d), -1).double())
            labs.append(d.labels)
        p = np.full(plan.num_devices, 1.0 / plan.num_devices) if p is None else np.asarray(p, dtype=np.float64)
        return cls(feats, labs, ds.num_classes, lam, p)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_classes, self.dim)

    def local_loss(self, k: int, w: torch.Tensor, idx=None) -> torch.Tensor:
        x, y = self.features[k], self.labels[k]
        if idx is not None:
            x, y = x[idx], y[idx]
        return torch.nn.functional.cross_entropy(x @ w.T, y) + 0.5 * self.lam * (w * w).sum()

    def loss(self, w: torch.Tensor) -> torch.Tensor:
        return sum(float(pk) * self.local_loss(k, w) for k, pk in enumerate(self.p))

    def local_grad(self, k: int, w: torch.Tensor, idx=None) -> torch.Tensor:
        w = w.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(self.local_loss(k, w, idx), [w])
        return g

    def grad(self, w: torch.Tensor) -> torch.Tensor:
        w = w.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(self.loss(w), [w])
        return g

    def smoothness_bound(self) -> float:
        """Largest per-device ``0.5 * lambda_max(X^T X) / n + lam``.

        The softmax cross-entropy Hessian is ``(diag(p) - p p^T) kron x x^T``
        and the first factor has spectral norm at most 1/2.
        """
        worst = 0.0
        for x in self.features:
            top = float(torch.linalg.eigvalsh(x.T @ x / x.shape[0])[-1])
            worst = max(worst, top)
        return 0.5 * worst + self.lam


def minimise(loss: Callable[[torch.Tensor], torch.Tensor], shape, w0=None, max_iter: int = 5000, gtol: float = 1e-10):
    """Reference minimiser (scipy L-BFGS-B on a float64 torch objective)."""
    size = math.prod(shape)

    def fun(v):
        w = torch.from_numpy(v).reshape(shape).requires_grad_(True)
        f = loss(w)
        (g,) = torch.autograd.grad(f, [w])
        return float(f.detach()), g.reshape(-1).numpy().copy()

    start = np.zeros(size) if w0 is None else w0.detach().reshape(-1).numpy().astype(np.float64)
    res = minimize(fun, start, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 30})
    return torch.from_numpy(res.x).reshape(shape), float(res.fun)


def estimate_curvature(objective: Callable[[torch.Tensor], torch.Tensor], w: torch.Tensor, iters: int = 300,
                       tol: float = 1e-10, seed: int = 0) -> tuple[float, float]:
    """Largest and smallest Hessian eigenvalue at ``w`` by power iteration.

    The smallest comes from power iteration on ``L I - H``.
    """
    w = w.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(objective(w), [w], create_graph=True)

    def hvp(v):
        (h,) = torch.autograd.grad(g, [w], grad_outputs=v, retain_graph=True)
        return h.detach()

    def power(op):
        gen = torch.Generator().manual_seed(seed)
        v = torch.randn(w.shape, generator=gen, dtype=w.dtype)
        v = v / v.norm()
        lam = 0.0
        for _ in range(iters):
            u = op(v)
            new = float((v * u).sum())
            n = u.norm()
            if n == 0:
                return 0.0
            v = u / n
            if abs(new - lam) <= tol * max(1.0, abs(new)):
                lam = new
                break
            lam = new
        return lam

    top = power(hvp)
    shifted = power(lambda v: top * v - hvp(v))
    return top, top - shifted


@dataclass
class EstimatedConstants:
    params: ConvergenceParams
    L_probe: float
    L_analytic: float
    raw: dict = field(default_factory=dict)


def estimate_constants(
    problem: LogRegProblem,
    w_star: torch.Tensor,
    f_star: float,
    w0: torch.Tensor,
    eps: float,
    local_iters: int,
    clients_per_round: int,
    batch_size: int = 32,
    probes: int = 4,
    batches_per_probe: int = 8,
    inflate: float = 1.5,
    seed: int = 0,
    local_minima: Sequence[float] | None = None,
) -> EstimatedConstants:
    """Empirical constants for the convergence bound on a logistic-regression problem.

    ``mu`` is the regulariser. ``L`` is the larger of the analytic Hessian
    bound and the largest gradient-difference ratio over probe pairs.
    ``sigma_k``, ``G`` and ``Lambda_s`` are maxima over probe points and
    sampled minibatches, multiplied by ``inflate``. ``Gamma`` needs each
    device's minimum; pass ``local_minima`` to skip recomputing them.
    """
    if problem.lam <= 0:
        raise ValueError("lam must be positive")
    rng = np.random.default_rng(derive_seed(seed, "constants"))
    pts = [w0.detach().double(), w_star.detach().double(), 0.5 * (w0 + w_star).detach().double()]
    scale = float((w_star - w0).norm()) / math.sqrt(w_star.numel()) + 1e-3
    for _ in range(probes):
        pts.append(w_star + torch.from_numpy(rng.normal(0, scale, size=w_star.shape)))

    l_probe = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = float((pts[i] - pts[j]).norm())
            if d > 0:
                for k in range(len(problem.p)):
                    gi, gj = problem.local_grad(k, pts[i]), problem.local_grad(k, pts[j])
                    l_probe = max(l_probe, float((gi - gj).norm()) / d)
    l_analytic = problem.smoothness_bound()
    L = max(l_probe, l_analytic)

    sigma_sq = np.zeros(len(problem.p))
    g_sq, lam_s = 0.0, 0.0
    for w in pts:
        for k in range(len(problem.p)):
            n = problem.features[k].shape[0]
            full = problem.local_grad(k, w)
            dev, norms = [], []
            for _ in range(batches_per_probe):
                idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
                gb = problem.local_grad(k, w, idx)
                dev.append(float(((gb - full) ** 2).sum()))
                norms.append(float((gb**2).sum()))
                probs = torch.softmax(problem.features[k][idx] @ w.T, dim=1)
                onehot = torch.nn.functional.one_hot(problem.labels[k][idx], problem.num_classes).double()
                lam_s = max(lam_s, float((probs - onehot).norm(dim=1).max()))
            sigma_sq[k] = max(sigma_sq[k], float(np.mean(dev)))
            g_sq = max(g_sq, float(np.mean(norms)))

    if local_minima is None:
        local_minima = [minimise(lambda w, k=k: problem.local_loss(k, w), problem.shape, w_star, max_iter=2000)[1]
                        for k in range(len(problem.p))]
    gamma_het = max(0.0, f_star - float(np.dot(problem.p, local_minima)))

    params = ConvergenceParams(
        L=L, mu=problem.lam, sigma=list(inflate * np.sqrt(sigma_sq)), G=inflate * math.sqrt(g_sq),
        lambda_s=inflate * lam_s, gamma_het=gamma_het, eps=eps, I=local_iters, K=clients_per_round,
        p=list(problem.p), w0_dist_sq=float(((w0 - w_star) ** 2).sum()),
    )
    raw = {"sigma_sq_max": float(sigma_sq.max()), "G_sq": g_sq, "lambda_s": lam_s,
           "local_minima": [float(v) for v in local_minima]}
    return EstimatedConstants(params, l_probe, l_analytic, raw)


def gradient_distance_check(spec, params, x, y, eps: int) -> dict:
    """Measured ``||grad' - grad||`` on the defended layer against ``Lambda * ||r - r'||``.

    ``Lambda`` is the largest per-sample output-gradient norm and the
    perturbation is the largest realised per-sample ``||r - r'||_2``.
    """
    from .defense import defended_gradient, defended_rep

    layer = spec.defended_index
    raw = nn.batch_gradient(spec, params, x, y)
    dfd = defended_gradient(spec, params, x, y, eps, grads=raw)
    delta, _ = nn.output_gradients(spec, params, x, y, layer)
    r, r_prime, _ = defended_rep(spec, params, x, eps, layer)
    gap = float((raw[f"{layer}.weight"] - dfd[f"{layer}.weight"]).norm())
    lam = float(delta.norm(dim=1).max())
    pert = float((r - r_prime).norm(dim=1).max())
    return {"gradient_gap": gap, "lambda_s": lam, "perturbation_l2": pert, "bound": lam * pert,
            "pruned_count": eps, "holds": gap <= lam * pert * (1 + 1e-12)}


# ---------------------------------------------------------------------------
# convergence experiment
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRecipe:
    num_devices: int = 100
    classes_per_device: int = 2
    samples_per_class: int = 20
    eps: int = 50
    local_epochs: Sequence[int] = (5, 10)
    clients_per_round: Sequence[int] = (5, 10)
    batch_size: int = 32
    rounds: int = 200
    lam: float = 1e-4
    seed: int = 0
    threads: int = 1


@dataclass
class ConvergenceRun:
    local_epochs: int
    clients_per_round: int
    steps: list[int]
    gaps: list[float]
    bound: BoundCurve
    realized_eps: float
    constants: ConvergenceParams

    def dominated(self) -> bool:
        return all(g <= b for g, b in zip(self.gaps, self.bound.values))


def plateau_check(gaps: Sequence[float], window: float = 0.2, tol: float = 0.05) -> dict:
    """Loss curve shape check: decreasing on average and flat at the end.

    The run is split into windows of ``window`` of its length; the window
    means must not increase, successive drops must shrink, and the last
    two means must differ by at most ``tol`` times the initial gap.
    """
    g = np.asarray(gaps, dtype=np.float64)
    n = max(1, int(round(len(g) * window)))
    means = [float(g[i : i + n].mean()) for i in range(0, len(g) - n + 1, n)]
    decreasing = all(b <= a * (1 + 1e-9) for a, b in zip(means, means[1:]))
    drops = [a - b for a, b in zip(means, means[1:])]
    slowing = all(b <= a * (1 + 1e-9) for a, b in zip(drops, drops[1:]))
    flat = bool(len(means) < 2 or abs(means[-1] - means[-2]) <= tol * g[0])
    return {"window_means": means, "decreasing": decreasing, "slowing": slowing, "plateau": flat,
            "ok": decreasing and slowing and flat}


class _EpsRecorder:
    """Wraps the defense transform to log the realised ``max ||r - r'||_2``."""

    def __init__(self, eps: int):
        self.eps = eps
        self.max_pert = 0.0

    def __call__(self, spec, params, x, y, grads, rng):
        from .defense import defended_rep

        if self.eps == 0:
            return grads
        layer = spec.defended_index
        r, r_prime, _ = defended_rep(spec, params, x, self.eps, layer)
        self.max_pert = max(self.max_pert, float((r - r_prime).norm(dim=1).max()))
        delta, _ = nn.output_gradients(spec, params, x, y, layer)
        out = dict(grads)
        out[f"{layer}.weight"] = delta.T @ r_prime / x.shape[0]
        return out


def run_convergence_experiment(recipe: ConvergenceRecipe, train: Dataset) -> dict:
    """Defended FedAvg on L2-regularised logistic regression for every (E, K) pair.

    Learning rate ``2 / (mu (gamma + t))``; sampling with replacement by
    ``p_k`` and ``N/K``-scaled aggregation. Each run logs the optimality
    gap ``F(W_t) - F*`` per round next to the bound evaluated with
    constants estimated on the same problem and the realised perturbation.
    """
    spec = nn.build_model("logreg", train.images.shape[1:], train.num_classes)
    plan = partition_noniid(train, recipe.num_devices, recipe.classes_per_device, recipe.samples_per_class, recipe.seed)
    problem = LogRegProblem.from_partition(train, plan, recipe.lam)
    w_star, f_star = minimise(problem.loss, problem.shape)
    local_minima = [minimise(lambda w, k=k: problem.local_loss(k, w), problem.shape, w_star, max_iter=2000)[1]
                    for k in range(recipe.num_devices)]
    w0 = nn.init_params(spec, derive_seed(recipe.seed, "init") % 2**63)["1.weight"]
    n_local = recipe.classes_per_device * recipe.samples_per_class
    base = estimate_constants(problem, w_star, f_star, w0, recipe.eps, 1, 1, recipe.batch_size,
                              seed=recipe.seed, local_minima=local_minima).params
    runs = []
    for E in recipe.local_epochs:
        for K in recipe.clients_per_round:
            I = E * math.ceil(n_local / recipe.batch_size)
            c = ConvergenceParams(**{**asdict(base), "I": I, "K": K})
            config = FedConfig(recipe.num_devices, K, recipe.rounds, E, recipe.batch_size, lr=c.eta,
                               mode="theory", seed=recipe.seed, threads=recipe.threads)
            recorder = _EpsRecorder(recipe.eps)
            gaps = [float(problem.loss(w0)) - f_star]
            steps = [0]

            def on_round(r, params, log, gaps=gaps, steps=steps, I=I):
                gaps.append(float(problem.loss(params["1.weight"])) - f_star)
                steps.append((r + 1) * I)

            run_fedavg(config, spec, train, plan, L2Transform(recipe.lam, recorder), params={"1.weight": w0.clone()},
                       eval_every=0, round_callback=on_round)
            realized = replace_eps(c, recorder.max_pert)
            runs.append(ConvergenceRun(E, K, steps, gaps, convergence_bound(realized, steps), recorder.max_pert, realized))
    return {"f_star": f_star, "runs": runs}


def replace_eps(c: ConvergenceParams, eps: float) -> ConvergenceParams:
    d = asdict(c)
    d["eps"] = eps
    return ConvergenceParams(**d)


# ---------------------------------------------------------------------------
# privacy / utility trade-off
# ---------------------------------------------------------------------------


@dataclass
class SweepRecipe:
    model: str = "tiny-convfc"
    attack: str = "dlg"
    num_devices: int = 20
    clients_per_round: int = 10
    rounds: int = 20
    samples_per_class: int = 20
    classes_per_device: int = 2
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    panel: int = 8
    attack_iterations: int | None = None
    seed: int = 0
    threads: int = 1


def _sweep_cell(recipe: SweepRecipe, cfg: DefenseConfig, train: Dataset, test: Dataset, plan: PartitionPlan) -> dict:
    spec = nn.build_model(recipe.model, train.images.shape[1:], train.num_classes)
    fed = FedConfig(recipe.num_devices, recipe.clients_per_round, recipe.rounds, recipe.local_epochs,
                    recipe.batch_size, recipe.lr, seed=recipe.seed)
    final, _ = run_fedavg(fed, spec, train, plan, make_transform(cfg), eval_every=0)
    acc = evaluate(spec, final, test)
    init = nn.init_params(spec, derive_seed(recipe.seed, "init") % 2**63)
    mses = []
    for i in range(recipe.panel):
        x, y = test.images[i : i + 1], int(test.labels[i])
        rng = np.random.default_rng(derive_seed(recipe.seed, "sweep-noise", i))
        target = capture_target(spec, init, x, y, cfg, rng)
        res = gradient_attack(target, AttackConfig(recipe.attack, iterations=recipe.attack_iterations, seed=recipe.seed + i))
        mses.append(res.mse)
    return {"defense": cfg.kind, "param": cfg.param, "label": cfg.label, "accuracy": acc,
            "mse": float(np.median(mses)), "mse_samples": mses}


def tradeoff_sweep(recipe: SweepRecipe, train: Dataset, test: Dataset,
                   configs: Sequence[DefenseConfig] | None = None) -> list[dict]:
    """FedAvg accuracy and median attack MSE for every defense setting.

    Cells run on ``recipe.threads`` workers; rows come back in config order.
    """
    configs = list(configs) if configs is not None else preset_configs(recipe.attack)
    if len(test) < recipe.panel:
        raise ValueError("test set smaller than the attack panel")
    plan = partition_noniid(train, recipe.num_devices, recipe.classes_per_device, recipe.samples_per_class, recipe.seed)
    work = lambda cfg: _sweep_cell(recipe, cfg, train, test, plan)  # noqa: E731
    if recipe.threads > 1:
        with ThreadPoolExecutor(recipe.threads) as pool:
            return list(pool.map(work, configs))
    return [work(c) for c in configs]


def dominance(rows: Sequence[dict], defended: str = "soteria", baselines=("gc", "dp_gauss", "dp_laplace")) -> dict:
    """Share of baseline points beaten by some defended point.

    A baseline point is matched when at least one defended point reaches
    an MSE at least as high; it is dominated when one of those also has
    accuracy at least as high.
    """
    ours = [r for r in rows if r["defense"] == defended]
    matched = dominated = 0
    detail = []
    for b in rows:
        if b["defense"] not in baselines:
            continue
        cands = [s for s in ours if s["mse"] >= b["mse"]]
        win = any(s["accuracy"] >= b["accuracy"] for s in cands)
        if cands:
            matched += 1
            dominated += int(win)
        detail.append({"label": b["label"], "matched": bool(cands), "dominated": win})
    return {"matched": matched, "dominated": dominated,
            "fraction": dominated / matched if matched else math.nan, "points": detail}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _json_default(o):
    if isinstance(o, torch.Tensor):
        return o.tolist()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, default=_json_default, indent=1, sort_keys=True)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def svg_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "", xlabel: str = "",
             ylabel: str = "", logy: bool = False, scatter: bool = False, size=(640, 420)) -> str:
    """Self-contained SVG line (or scatter) plot."""
    w, h = size
    left, right, top, bottom = 70, 150, 40, 50
    pts = {}
    for name, (xs, ys) in series.items():
        keep = [(float(x), float(y)) for x, y in zip(xs, ys)
                if math.isfinite(float(x)) and math.isfinite(float(y)) and (not logy or float(y) > 0)]
        pts[name] = [(x, math.log10(y) if logy else y) for x, y in keep]
    allp = [p for v in pts.values() for p in v] or [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pw, ph = w - left - right, h - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{h - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel + (" (log10)" if logy else ""))}</text>']
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if scatter:
            out += [f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>' for x, y in p]
        elif p:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 15 * (i + 1)
        out.append(f'<rect x="{w - right + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{w - right + 25}" y="{ly + 1}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(name: str, rows: Sequence[dict], config: dict, out_root="reports", plots: dict[str, str] | None = None,
                timestamp: str | None = None, extra: dict | None = None, columns: Sequence[str] | None = None) -> Path:
    """Write ``<out_root>/<name>/<timestamp>/{results.csv, results.json, config.json, *.svg}``.

    Files carry no wall-clock data, so equal inputs give equal bytes.
    """
    stamp = timestamp or time.strftime("%Y%m%dT%H%M%S")
    out = Path(out_root) / name / stamp
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    write_csv(rows, out / "results.csv", columns)
    payload = {"rows": list(rows)}
    if extra:
        payload.update(extra)
    (out / "results.json").write_text(dumps(payload))
    (out / "config.json").write_text(dumps(config))
    for fname, svg in (plots or {}).items():
        (out / fname).write_text(svg)
    return out


def convergence_rows(result: dict) -> list[dict]:
    rows = []
    for run in result["runs"]:
        for t, g, b in zip(run.steps, run.gaps, run.bound.values):
            rows.append({"E": run.local_epochs, "K": run.clients_per_round, "step": t, "gap": g, "bound": b})
    return rows


def convergence_plots(result: dict) -> dict[str, str]:
    series = {}
    for run in result["runs"]:
        series[f"gap E={run.local_epochs} K={run.clients_per_round}"] = (run.steps, run.gaps)
    loss = svg_plot(series, "defended LR + FedAvg", "local iteration", "F(W_t) - F*")
    bounds = dict(series)
    for run in result["runs"]:
        bounds[f"bound E={run.local_epochs} K={run.clients_per_round}"] = (run.steps, run.bound.values)
    return {"convergence.svg": loss, "bound.svg": svg_plot(bounds, "gap vs bound", "local iteration", "value", logy=True)}


def tradeoff_plot(rows: Sequence[dict]) -> str:
    series: dict[str, tuple[list, list]] = {}
    for r in rows:
        xs, ys = series.setdefault(r["defense"], ([], []))
        xs.append(r["mse"])
        ys.append(r["accuracy"])
    return svg_plot(series, "privacy / utility", "median attack MSE", "test accuracy", scatter=True)


def correlation_plot(rows: Sequence[dict]) -> str:
    series: dict[str, tuple[list, list]] = {}
    by = {}
    for r in rows:
        by.setdefault((r["layer"], r["round"]), []).append(abs(r["cor"]))
    for (layer, rnd), vals in sorted(by.items()):
        xs, ys = series.setdefault(f"FC layer {layer}", ([], []))
        xs.append(rnd)
        ys.append(float(np.nanmean(vals)))
    return svg_plot(series, "inferred vs true representation", "round", "mean |cor|")


def ensure_writable(path) -> None:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise OSError(f"{p} is not writable")
