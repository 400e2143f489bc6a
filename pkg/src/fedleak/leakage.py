"""Class-wise gradient decomposition and representation inference from weight deltas.

For an FC layer ``b = W r`` the per-sample gradient is the outer product
``(dl/db) r^T``. When a device trains on few classes, the rows of its
last-layer weight delta belonging to those classes stand out and are
positively proportional to the class-mean representation; earlier FC
layers are then read off by following the largest entries of the
representation inferred one layer later.

All inference functions consume *weight deltas* ``W_after - W_before``.
A raw gradient has the opposite sign (``delta = -lr * steps * grad`` for
plain SGD), so negate it first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import nn
from .data import Dataset, partition_iid, partition_noniid
from .fedsim import FedConfig, run_fedavg
from .nn import ModelSpec, Params


def classwise_gradient(spec: ModelSpec, params: Params, x: torch.Tensor, y: torch.Tensor) -> dict[int, dict[str, torch.Tensor]]:
    """Split the batch-mean gradient into per-class contributions.

    Entry ``c`` is ``(1/|B|) sum_{j in B_c} grad l^j``, so the entries sum
    to the batch gradient. The class-mean gradient is that entry times
    ``|B| / |B_c|``.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = torch.as_tensor(y).reshape(-1)
    n = x.shape[0]
    out = {}
    for c in sorted(set(y.tolist())):
        mask = y == c
        g = nn.batch_gradient(spec, params, x[mask], y[mask])
        w = float(mask.sum()) / n
        out[int(c)] = {k: v * w for k, v in g.items()}
    return out


def rank1_class_gradient(spec: ModelSpec, params: Params, x: torch.Tensor, y: torch.Tensor, layer: int) -> torch.Tensor:
    """``mean(dl/db) mean(r)^T`` for a single-class batch at FC ``layer``."""
    delta, r = nn.output_gradients(spec, params, x, y, layer)
    return torch.outer(delta.mean(0), r.mean(0))


def pearson(a, b) -> float:
    """Pearson correlation; ``nan`` when either input has zero variance."""
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    if a.numel() != b.numel() or a.numel() < 2:
        raise ValueError("pearson needs two equal-length inputs of length >= 2")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return math.nan
    return float(torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0))


def infer_last_layer(delta_w: torch.Tensor, tau: float = 0.5) -> tuple[list[int], dict[int, torch.Tensor]]:
    """Classes present on a device and their last-layer representations.

    A class is kept when its row norm exceeds ``tau`` times the largest row
    norm; its inferred representation is that row of the delta.
    """
    norms = delta_w.norm(dim=1)
    top = float(norms.max())
    if top == 0.0:
        raise ValueError("all-zero weight delta")
    if tau >= 1.0:
        chosen = [int(torch.argmax(norms))]
    else:
        chosen = [int(i) for i in torch.nonzero(norms > tau * top).reshape(-1)]
    return chosen, {c: delta_w[c].clone() for c in chosen}


def infer_prev_layer(delta_w: torch.Tensor, b_next: torch.Tensor, m: int = 1) -> torch.Tensor:
    """Sum the delta rows picked by the ``m`` largest-magnitude entries of ``b_next``."""
    b_next = b_next.reshape(-1)
    if b_next.numel() != delta_w.shape[0]:
        raise ValueError(f"next-layer representation has {b_next.numel()} entries, delta has {delta_w.shape[0]} rows")
    if not 1 <= m <= delta_w.shape[0]:
        raise ValueError(f"M={m} outside [1, {delta_w.shape[0]}]")
    idx = torch.argsort(-b_next.abs(), stable=True)[:m]
    return delta_w[idx].sum(0)


@dataclass
class InferredReps:
    classes: list[int]
    reps: dict[tuple[int, int], torch.Tensor]  # (class, FC layer index) -> r_hat
    m: dict[int, int] = field(default_factory=dict)


def infer_all_layers(delta: dict[str, torch.Tensor], spec: ModelSpec, tau: float = 0.5, m: int | dict[int, int] = 1) -> InferredReps:
    """Chain last-layer inference backwards through every FC layer."""
    fcs = spec.fc_indices
    if not fcs:
        raise ValueError("model has no FC layer")
    m_per = {i: (m[i] if isinstance(m, dict) else m) for i in fcs[:-1]}
    classes, last = infer_last_layer(delta[f"{fcs[-1]}.weight"], tau)
    reps = {(c, fcs[-1]): v for c, v in last.items()}
    for c in classes:
        for lo, hi in zip(reversed(fcs[:-1]), reversed(fcs[1:])):
            reps[(c, lo)] = infer_prev_layer(delta[f"{lo}.weight"], reps[(c, hi)], m_per[lo])
    return InferredReps(classes, reps, m_per)


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


@dataclass
class CorrelationReport:
    rows: list[dict] = field(default_factory=list)  # round, device, class, layer, cor
    class_hits: int = 0
    class_total: int = 0

    def mean_abs(self, layer: int | None = None) -> float:
        vals = [abs(r["cor"]) for r in self.rows if (layer is None or r["layer"] == layer) and not math.isnan(r["cor"])]
        return float(np.mean(vals)) if vals else math.nan

    def mean_signed(self, layer: int | None = None) -> float:
        vals = [r["cor"] for r in self.rows if (layer is None or r["layer"] == layer) and not math.isnan(r["cor"])]
        return float(np.mean(vals)) if vals else math.nan

    def layers(self) -> list[int]:
        return sorted({r["layer"] for r in self.rows})

    def summary(self) -> dict:
        return {
            "mean_abs_cor": {str(l): self.mean_abs(l) for l in self.layers()},
            "mean_cor": {str(l): self.mean_signed(l) for l in self.layers()},
            "class_identification": self.class_hits / self.class_total if self.class_total else math.nan,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "device", "class", "layer", "cor"])
            for r in self.rows:
                w.writerow([r["round"], r["device"], r["class"], r["layer"], repr(r["cor"])])


@dataclass
class RepLeakageRecipe:
    model: str = "rep-cnn"
    input_shape: tuple[int, ...] = (1, 28, 28)
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    rounds: int = 20
    num_devices: int = 20
    clients_per_round: int = 10
    samples_per_class: int = 20
    classes_per_device: int = 2
    iid: bool = False
    tau: float = 0.5
    m: int = 1
    seed: int = 0
    threads: int = 1


class _ClassMeanRecorder:
    """Running per-class mean of each FC layer's input over a client's steps."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.sums: dict[tuple[int, int], torch.Tensor] = {}
        self.counts: dict[tuple[int, int], int] = {}

    def __call__(self, step, params, x, y):
        with torch.no_grad():
            _, trace = nn.forward_with_activations(self.spec, params, x)
        for layer in self.spec.fc_indices:
            r = trace.inputs[layer]
            for c in torch.unique(y).tolist():
                key = (int(c), layer)
                mean = r[y == c].mean(0)
                self.sums[key] = self.sums.get(key, 0) + mean
                self.counts[key] = self.counts.get(key, 0) + 1

    def means(self) -> dict[tuple[int, int], torch.Tensor]:
        return {k: v / self.counts[k] for k, v in self.sums.items()}


def run_rep_leakage_experiment(recipe: RepLeakageRecipe, train: Dataset) -> CorrelationReport:
    """FedAvg with instrumented clients; correlate inferred and true class representations.

    For every sampled device and round, the weight delta is pushed through
    :func:`infer_all_layers`; each inferred class the device really holds is
    compared against that class's mean FC-layer inputs recorded during the
    device's local steps.
    """
    spec = nn.build_model(recipe.model, recipe.input_shape, train.num_classes)
    if recipe.iid:
        plan = partition_iid(train, recipe.num_devices, recipe.samples_per_class * recipe.classes_per_device, recipe.seed)
    else:
        plan = partition_noniid(train, recipe.num_devices, recipe.classes_per_device, recipe.samples_per_class, recipe.seed)
    config = FedConfig(recipe.num_devices, recipe.clients_per_round, recipe.rounds, recipe.local_epochs,
                       recipe.batch_size, recipe.lr, seed=recipe.seed, threads=recipe.threads)
    recorders: dict[tuple[int, int], _ClassMeanRecorder] = {}

    def observer_factory(r, k):
        rec = _ClassMeanRecorder(spec)
        recorders[(r, k)] = rec
        return rec

    report = CorrelationReport()

    def client_hook(r, k, before, after):
        delta = {n: after[n] - before[n] for n in before}
        inferred = infer_all_layers(delta, spec, recipe.tau, recipe.m)
        truth = recorders.pop((r, k)).means()
        held = set(plan.device_classes[k])
        report.class_total += 1
        report.class_hits += int(set(inferred.classes) == held)
        for (c, layer), r_hat in sorted(inferred.reps.items()):
            if (c, layer) in truth:
                report.rows.append({"round": r, "device": k, "class": c, "layer": layer,
                                    "cor": pearson(r_hat, truth[(c, layer)])})

    run_fedavg(config, spec, train, plan, client_hook=client_hook, observer_factory=observer_factory, eval_every=0)
    return report
