"""Gradient-inversion attacks: DLG, GS (cosine) and representation matching."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nn
from .autodiff import AdamState, LBFGSState, LineSearchError, adam_step, gradient, lbfgs_step
from .leakage import InferredReps
from .nn import ModelSpec, Params


class LabelAmbiguityError(ValueError):
    """The last-layer gradient is not a single-sample outer product."""


@dataclass
class AttackTarget:
    spec: ModelSpec
    params: Params
    gradient: dict[str, torch.Tensor]
    true_x: torch.Tensor | None = None  # (1, ...) kept only for scoring
    true_label: int | None = None


@dataclass
class AttackConfig:
    variant: str = "dlg"  # dlg | gs | rep
    optimizer: str | None = None  # default: lbfgs for dlg/rep, adam for gs
    iterations: int | None = None  # default: 300 for dlg/rep, 120 for gs
    lr: float = 0.1
    restarts: int = 1
    tv_weight: float = 0.0
    portion: str = "wg"  # wg | clg
    lr_decay: bool = False  # x0.1 at 3/8, 5/8, 7/8 of the Adam iterations
    signed_grad: bool = False  # feed sign(grad) to Adam
    seed: int = 0
    dtype: str = "float64"
    lbfgs_memory: int = 20

    def __post_init__(self):
        if self.variant not in ("dlg", "gs", "rep"):
            raise ValueError(f"unknown attack {self.variant!r}")
        if self.portion not in ("wg", "clg"):
            raise ValueError(f"unknown gradient portion {self.portion!r}")
        if self.optimizer is None:
            self.optimizer = "adam" if self.variant == "gs" else "lbfgs"
        if self.iterations is None:
            self.iterations = 120 if self.variant == "gs" else 300
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


@dataclass
class AttackResult:
    x: torch.Tensor
    loss_trace: list[float]
    mse: float
    label: int
    wall_clock: float
    stalled: bool = False
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        d = {"mse": self.mse, "label": self.label, "stalled": self.stalled, "iterations": self.iterations,
             "final_loss": self.loss_trace[-1] if self.loss_trace else None, "loss_trace": self.loss_trace,
             "shape": list(self.x.shape), **self.extra}
        if timing:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing))


def mse(x: torch.Tensor, x_rec: torch.Tensor) -> float:
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return float(((x.double() - x_rec.double()) ** 2).mean())


# ---------------------------------------------------------------------------
# label recovery
# ---------------------------------------------------------------------------


def infer_label(last_layer: torch.Tensor, is_delta: bool = False, rank_tol: float = 1e-6) -> int:
    """Recover a single sample's label from the last FC layer's gradient.

    The gradient is ``(y - e_c) r^T``: exactly one coefficient (class ``c``)
    is negative. Row sums are proportional to the coefficients, so the row
    whose sign differs from every other row is the label. With two classes
    the pattern is symmetric; the representation is then assumed to have a
    positive sum (true after ReLU/sigmoid), i.e. the label row sums
    negative. Weight deltas carry the opposite sign.

    Raises:
        LabelAmbiguityError: the matrix is not rank one, or no unique row.
    """
    g = -last_layer if is_delta else last_layer
    g = g.detach().double()
    s = torch.linalg.svdvals(g)
    if s[0] == 0:
        raise LabelAmbiguityError("zero gradient")
    if s.numel() > 1 and float(s[1] / s[0]) > rank_tol:
        raise LabelAmbiguityError(f"gradient has rank > 1 (s2/s1 = {float(s[1] / s[0]):.2e}); batch of several samples?")
    sums = g.sum(1)
    neg = torch.nonzero(sums < 0).reshape(-1).tolist()
    pos = torch.nonzero(sums > 0).reshape(-1).tolist()
    if g.shape[0] == 2:
        if len(neg) == 1:
            return int(neg[0])
        raise LabelAmbiguityError("two-class gradient without a negative row")
    if len(neg) == 1:
        return int(neg[0])
    if len(pos) == 1:
        return int(pos[0])
    raise LabelAmbiguityError("no unique odd-signed row")


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _selected(spec: ModelSpec, names, portion: str) -> list[str]:
    if portion == "wg":
        return list(names)
    conv = {f"{i}.weight" for i in spec.conv_indices}
    return [n for n in names if n in conv]


def _dummy_gradients(spec, params, names, x, label):
    logits = nn.forward(spec, params, x)
    if isinstance(label, torch.Tensor) and label.is_floating_point():
        loss = nn.softmax_cross_entropy(logits, torch.softmax(label, -1).unsqueeze(0))
    else:
        loss = nn.softmax_cross_entropy(logits, torch.tensor([label]))
    return gradient(loss, [params[n] for n in names], create_graph=True, allow_unused=True)


def total_variation(x: torch.Tensor) -> torch.Tensor:
    return (x[..., 1:, :] - x[..., :-1, :]).abs().mean() + (x[..., :, 1:] - x[..., :, :-1]).abs().mean()


def dlg_objective(spec, params, names, target, x, label):
    dummy = _dummy_gradients(spec, params, names, x, label)
    return sum(((d - t) ** 2).sum() for d, t in zip(dummy, target))


def gs_objective(spec, params, names, target, x, label):
    dummy = _dummy_gradients(spec, params, names, x, label)
    dot = sum((d * t).sum() for d, t in zip(dummy, target))
    dn = torch.sqrt(sum((d * d).sum() for d in dummy))
    tn = torch.sqrt(sum((t * t).sum() for t in target))
    return 1 - dot / (dn * tn)


def _pearson_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    return torch.dot(a, b) / (a.norm() * b.norm() + 1e-30)


def rep_objective(spec, params, reps: dict[int, torch.Tensor], x):
    """Negative summed correlation between the dummy's FC inputs and the inferred ones."""
    _, trace = nn.forward_with_activations(spec, params, x)
    return -sum(_pearson_t(trace.inputs[layer][0], r) for layer, r in reps.items())


# ---------------------------------------------------------------------------
# optimisation loops
# ---------------------------------------------------------------------------


def _init_dummy(shape, seed: int, restart: int, dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed * 7919 + restart)
    return torch.rand(shape, generator=gen, dtype=torch.float64).to(dtype)


def _run_lbfgs(objective, x0: torch.Tensor, iterations: int, memory: int):
    def value_and_grad(z):
        z = z.detach().requires_grad_(True)
        f = objective(z)
        (g,) = torch.autograd.grad(f, [z])
        return float(f.detach()), g.detach()

    state = LBFGSState(memory=memory)
    x = x0.detach()
    f0, _ = value_and_grad(x)
    trace = [f0]
    best_x, best_f = x, f0
    stalled, restarted = False, False
    done = 0
    for _ in range(iterations):
        if best_f == 0.0:
            break
        try:
            state, x = lbfgs_step(state, x, value_and_grad)
            restarted = False
        except LineSearchError:
            if restarted:
                stalled = True
                break
            state.reset()
            restarted = True
            continue
        done += 1
        trace.append(state.loss)
        if state.loss < best_f:
            best_x, best_f = x, state.loss
    return best_x.detach(), trace, stalled, done


def _step_lr(lr: float, it: int, iterations: int, decay: bool) -> float:
    if not decay:
        return lr
    drops = sum(it >= math.ceil(iterations * f / 8) for f in (3, 5, 7))
    return lr * 0.1**drops


def _run_adam(objective, x0: torch.Tensor, iterations: int, lr: float, clamp: bool = True, decay: bool = False, signed: bool = False):
    x = x0.detach()
    state = AdamState()
    trace = []
    best_x, best_f = x, math.inf
    for it in range(iterations):
        z = x.detach().requires_grad_(True)
        f = objective(z)
        (g,) = torch.autograd.grad(f, [z])
        fv = float(f.detach())
        trace.append(fv)
        if fv < best_f:
            best_x, best_f = x, fv
        if fv == 0.0:
            break
        g = g.detach().sign() if signed else g.detach()
        state, (x,) = adam_step(state, [x], [g], _step_lr(lr, it, iterations, decay))
        if clamp:
            x = x.clamp(0, 1)
    z = x.detach().requires_grad_(True)
    fv = float(objective(z).detach())
    trace.append(fv)
    if fv < best_f:
        best_x = x
    return best_x.detach(), trace, False, iterations


def _cast(params: Params, dtype) -> Params:
    return {k: v.detach().to(dtype) for k, v in params.items()}


def _finish(x: torch.Tensor, trace, stalled, iterations, target: AttackTarget, label, started, extra=None) -> AttackResult:
    x = x.detach().double().clamp(0, 1)
    score = mse(target.true_x.double(), x) if target.true_x is not None else math.nan
    return AttackResult(x, [float(v) for v in trace], score, int(label), time.perf_counter() - started,
                        stalled, iterations, extra or {})


def gradient_attack(target: AttackTarget, config: AttackConfig, init: torch.Tensor | None = None) -> AttackResult:
    """DLG (squared distance) or GS (cosine) reconstruction of a single sample.

    The label comes from :func:`infer_label`; when that is ambiguous the
    label logits are optimised jointly with the input (DLG-style).
    """
    started = time.perf_counter()
    spec = target.spec
    dtype = config.torch_dtype
    params = _cast(target.params, dtype)
    for p in params.values():
        p.requires_grad_(True)
    names = _selected(spec, list(target.gradient), config.portion)
    if not names:
        raise ValueError("selected gradient portion is empty")
    tgt = [target.gradient[n].detach().to(dtype) for n in names]
    if config.variant == "gs" and math.sqrt(sum(float((t * t).sum()) for t in tgt)) == 0.0:
        raise ValueError("zero-norm target gradient")
    last = f"{spec.fc_indices[-1]}.weight"
    joint = False
    try:
        label = infer_label(target.gradient[last])
    except (LabelAmbiguityError, KeyError):
        label, joint = None, True

    obj = dlg_objective if config.variant == "dlg" else gs_objective
    shape = (1, *spec.input_shape)
    n_x = math.prod(shape)

    def objective(z):
        if joint:
            x, lab = z[:n_x].reshape(shape), z[n_x:]
        else:
            x, lab = z, label
        f = obj(spec, params, names, tgt, x, lab)
        if config.tv_weight:
            f = f + config.tv_weight * total_variation(x)
        return f

    best = None
    for restart in range(config.restarts):
        x0 = init.to(dtype) if init is not None and restart == 0 else _init_dummy(shape, config.seed, restart, dtype)
        if joint:
            lab0 = torch.zeros(spec.num_classes, dtype=dtype)
            x0 = torch.cat([x0.reshape(-1), lab0])
        if config.optimizer == "lbfgs":
            res = _run_lbfgs(objective, x0, config.iterations, config.lbfgs_memory)
        else:
            res = _run_adam(objective, x0, config.iterations, config.lr, clamp=not joint, decay=config.lr_decay, signed=config.signed_grad)
        if best is None or min(res[1]) < min(best[1]):
            best = res
    x, trace, stalled, iters = best
    if joint:
        label = int(torch.argmax(x[n_x:]))
        x = x[:n_x].reshape(shape)
    return _finish(x, trace, stalled, iters, target, label, started, {"joint_label": joint})


def dlg_attack(target: AttackTarget, config: AttackConfig | None = None, init=None) -> AttackResult:
    config = config or AttackConfig("dlg")
    if config.variant != "dlg":
        raise ValueError("dlg_attack needs variant='dlg'")
    return gradient_attack(target, config, init)


def gs_attack(target: AttackTarget, config: AttackConfig | None = None, init=None) -> AttackResult:
    config = config or AttackConfig("gs")
    if config.variant != "gs":
        raise ValueError("gs_attack needs variant='gs'")
    return gradient_attack(target, config, init)


def rep_attack(
    inferred: InferredReps,
    spec: ModelSpec,
    params: Params,
    config: AttackConfig | None = None,
    cls: int | None = None,
    true_x: torch.Tensor | None = None,
    layers: list[int] | None = None,
    init: torch.Tensor | None = None,
    update_scale: float | None = None,
) -> AttackResult:
    """Find ``x'`` whose FC-layer inputs correlate best with the inferred ones.

    Correlation is blind to scale, and for bias-free ReLU extractors so is
    the representation itself: ``f(a x) = a f(x)`` for ``a > 0``. When the
    multiplier between gradient and update is known (``update_scale``,
    i.e. learning rate times steps; 1 for a raw gradient), the last-layer
    row of a single-sample update is ``update_scale * (1 - softmax_c) * r``,
    which pins the input scale; :func:`calibrate_scale` then rescales
    ``x'`` to match it.
    """
    config = config or AttackConfig("rep")
    started = time.perf_counter()
    cls = inferred.classes[0] if cls is None else cls
    layers = layers or sorted(l for (c, l) in inferred.reps if c == cls)
    if not layers:
        raise ValueError(f"no inferred representation for class {cls}")
    dtype = config.torch_dtype
    reps = {l: inferred.reps[(cls, l)].detach().to(dtype) for l in layers}
    for l, r in reps.items():
        if float(r.std()) == 0.0:
            raise ValueError(f"inferred representation at layer {l} is constant")
    params = _cast(params, dtype)
    shape = (1, *spec.input_shape)

    def objective(z):
        return rep_objective(spec, params, reps, z)

    best = None
    for restart in range(config.restarts):
        x0 = init.to(dtype) if init is not None and restart == 0 else _init_dummy(shape, config.seed, restart, dtype)
        if config.optimizer == "lbfgs":
            res = _run_lbfgs(objective, x0, config.iterations, config.lbfgs_memory)
        else:
            res = _run_adam(objective, x0, config.iterations, config.lr, decay=config.lr_decay, signed=config.signed_grad)
        if best is None or min(res[1]) < min(best[1]):
            best = res
    x, trace, stalled, iters = best
    extra = {}
    top = spec.fc_indices[-1]
    if update_scale is not None and (cls, top) in inferred.reps:
        a = calibrate_scale(spec, params, x, cls, inferred.reps[(cls, top)].to(dtype), update_scale)
        extra = {"scale": a, "uncalibrated_mse": mse(true_x.double(), x.double().clamp(0, 1)) if true_x is not None else math.nan}
        x = a * x
    target = AttackTarget(spec, params, {}, true_x)
    return _finish(x, trace, stalled, iters, target, cls, started, extra)


def calibrate_scale(spec: ModelSpec, params: Params, x: torch.Tensor, cls: int, row: torch.Tensor,
                    update_scale: float, bounds=(1e-3, 1e3)) -> float:
    """Positive ``a`` minimising ``||update_scale * (1 - p_c(a x)) r(a x) - row||``.

    Log-spaced grid search followed by a bounded scalar refinement.
    """
    from scipy.optimize import minimize_scalar

    top = spec.fc_indices[-1]
    label = torch.tensor([cls])

    def misfit(log_a: float) -> float:
        delta, r = nn.output_gradients(spec, params, math.exp(log_a) * x, label, top)
        pred = -update_scale * delta[0, cls] * r[0]
        return float(((pred - row) ** 2).sum())

    grid = np.linspace(math.log(bounds[0]), math.log(bounds[1]), 121)
    vals = [misfit(g) for g in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(misfit, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    best = res.x if res.fun <= vals[i] else grid[i]
    return float(math.exp(best))


def capture_target(spec: ModelSpec, params: Params, x: torch.Tensor, label: int, defense=None, rng=None,
                   dtype: torch.dtype | None = None) -> AttackTarget:
    """Gradient a device with one sample would upload, optionally defended.

    ``dtype`` casts parameters and input before the capture (float32 makes
    the Soteria Jacobian on wide models about three times cheaper).
    """
    from .defense import DefenseConfig, protect_gradient

    if dtype is not None:
        params = _cast(params, dtype)
        x = x.to(dtype)
    y = torch.tensor([label])
    grads = protect_gradient(spec, params, x, y, defense or DefenseConfig("none"), rng)
    return AttackTarget(spec, params, grads, x.detach().clone(), label)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_pnm(path, image: torch.Tensor) -> None:
    """Binary PGM (1 channel) or PPM (3 channels), maxval 255, from a CHW image in [0, 1]."""
    img = image.detach().double().clamp(0, 1)
    if img.dim() == 4:
        img = img[0]
    if img.dim() == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("need 1 or 3 channels")
    pix = np.rint(img.numpy() * 255).astype(np.uint8).transpose(1, 2, 0)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())


def read_pnm(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    c = {"P5": 1, "P6": 3}[magic]
    pix = np.frombuffer(raw[pos : pos + w * h * c], dtype=np.uint8).reshape(h, w, c)
    return torch.from_numpy(pix.transpose(2, 0, 1).astype(np.float64) / maxval)
