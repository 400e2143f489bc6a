"""FedAvg simulation with pluggable gradient transforms.

Two sampling/aggregation modes are supported:

``theory``
    K devices drawn *with replacement* according to the weights ``p_k``;
    the server sets ``W <- (N/K) * sum_{k in S} p_k W^k``.
``experiment``
    K distinct devices drawn uniformly; the server takes the plain mean.

Every random draw comes from a stream keyed by ``(seed, tag, round, device)``
so results do not depend on the order in which clients finish.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from . import nn
from .autodiff import sgd_step
from .data import Dataset, PartitionPlan
from .nn import ModelSpec, Params


def derive_seed(seed: int, tag: str, *keys: int) -> int:
    """64-bit seed mixed from a master seed, a component tag and integer keys."""
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=(zlib.crc32(tag.encode()), *map(int, keys)))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def numpy_rng(seed: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, *keys))


class UpdateTransform(Protocol):
    """Rewrites a local minibatch gradient before the SGD step."""

    def __call__(self, spec: ModelSpec, params: Params, x: torch.Tensor, y: torch.Tensor,
                 grads: dict[str, torch.Tensor], rng: np.random.Generator) -> dict[str, torch.Tensor]: ...


class IdentityTransform:
    is_identity = True

    def __call__(self, spec, params, x, y, grads, rng):
        return grads

    def __repr__(self):
        return "IdentityTransform()"


@dataclass
class FedConfig:
    num_devices: int
    clients_per_round: int
    rounds: int
    local_epochs: int = 1
    batch_size: int = 32
    lr: float | Callable[[int], float] = 0.01
    local_iters: int | None = None
    weights: Sequence[float] | None = None
    mode: str = "experiment"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("experiment", "theory"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.num_devices < 1 or self.clients_per_round < 1:
            raise ValueError("need at least one device and one client per round")
        if self.mode == "experiment" and self.clients_per_round > self.num_devices:
            raise ValueError("clients_per_round exceeds num_devices without replacement")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.num_devices,) or (w < 0).any() or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("weights must be a probability vector over devices")

    @property
    def p(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.num_devices, 1.0 / self.num_devices)
        return np.asarray(self.weights, dtype=np.float64)

    def local_iterations(self, n: int) -> int:
        if self.local_iters is not None:
            return self.local_iters
        return self.local_epochs * math.ceil(n / self.batch_size)

    def learning_rate(self, t: int) -> float:
        return float(self.lr(t)) if callable(self.lr) else float(self.lr)


@dataclass
class RoundLog:
    round: int
    sampled: list[int]
    pre_loss: float
    post_loss: float
    accuracy: float
    update_norms: dict[int, float]
    batch_seeds: dict[int, int] = field(default_factory=dict)


def sample_clients(config: FedConfig, round_idx: int, rng: np.random.Generator | None = None) -> list[int]:
    if rng is None:
        rng = numpy_rng(config.seed, "sample", round_idx)
    if config.mode == "theory":
        draws = rng.choice(config.num_devices, size=config.clients_per_round, replace=True, p=config.p)
    else:
        draws = rng.choice(config.num_devices, size=config.clients_per_round, replace=False)
    return [int(d) for d in draws]


def local_batches(n: int, config: FedConfig, gen: torch.Generator) -> list[torch.Tensor]:
    if config.local_iters is not None:
        size = min(config.batch_size, n)
        return [torch.randperm(n, generator=gen)[:size] for _ in range(config.local_iters)]
    batches = []
    for _ in range(config.local_epochs):
        perm = torch.randperm(n, generator=gen)
        batches.extend(perm.split(config.batch_size))
    return batches


def client_update(
    spec: ModelSpec,
    global_params: Params,
    data: Dataset,
    config: FedConfig,
    transform: UpdateTransform | None = None,
    round_idx: int = 0,
    device: int = 0,
    observer: Callable | None = None,
    t0: int = 0,
) -> Params:
    """Local SGD from the global model.

    ``observer(step, params, x, y)``, if given, is called before every step
    with the parameters the step's gradient is taken at. ``t0`` is the
    global iteration index of the first local step (for decaying schedules).
    """
    if len(data) == 0:
        raise ValueError(f"device {device} holds no data")
    transform = transform or IdentityTransform()
    seed = derive_seed(config.seed, "client", round_idx, device)
    gen = torch.Generator().manual_seed(seed % 2**63)
    rng = np.random.default_rng(seed)
    params = {k: v.detach().clone() for k, v in global_params.items()}
    names = list(params)
    for step, idx in enumerate(local_batches(len(data), config, gen)):
        xb, yb = data.images[idx], data.labels[idx]
        if observer is not None:
            observer(step, params, xb, yb)
        grads = nn.batch_gradient(spec, params, xb, yb)
        grads = transform(spec, params, xb, yb, grads, rng)
        new = sgd_step([params[n] for n in names], [grads[n] for n in names], config.learning_rate(t0 + step))
        params = dict(zip(names, new))
    return params


def aggregate(local: Sequence[tuple[int, Params]], config: FedConfig) -> Params:
    """Combine local models, reducing in ascending device-id order."""
    if not local:
        raise ValueError("nothing to aggregate")
    ordered = sorted(local, key=lambda kv: kv[0])
    names = list(ordered[0][1])
    for _, p in ordered:
        if list(p) != names or any(p[n].shape != ordered[0][1][n].shape for n in names):
            raise ValueError("local models disagree in structure")
    if config.mode == "theory":
        weights = [config.num_devices / config.clients_per_round * config.p[k] for k, _ in ordered]
    else:
        weights = [1.0 / len(ordered)] * len(ordered)
    out = {}
    for n in names:
        acc = torch.zeros_like(ordered[0][1][n])
        for w, (_, p) in zip(weights, ordered):
            acc = acc + w * p[n]
        out[n] = acc
    return out


def evaluate(spec: ModelSpec, params: Params, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("empty test set")
    pred = nn.predict(spec, params, ds.images)
    return float((pred == ds.labels).double().mean())


def dataset_loss(spec: ModelSpec, params: Params, ds: Dataset, chunk: int = 1024) -> float:
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(ds), chunk):
            total += float(nn.loss_fn(spec, params, ds.images[s : s + chunk], ds.labels[s : s + chunk], "sum"))
    return total / len(ds)


def run_fedavg(
    config: FedConfig,
    spec: ModelSpec,
    train: Dataset,
    partition: PartitionPlan,
    transform: UpdateTransform | None = None,
    test: Dataset | None = None,
    params: Params | None = None,
    eval_every: int = 1,
    client_hook: Callable | None = None,
    observer_factory: Callable | None = None,
    round_callback: Callable | None = None,
) -> tuple[Params, list[RoundLog]]:
    """T rounds of sample -> local training -> aggregation.

    Hooks (all optional, all called from the coordinating thread in
    ascending device order):

    - ``observer_factory(round, device)`` returns a per-step observer for
      :func:`client_update`; it runs on the worker executing that client.
    - ``client_hook(round, device, global_params, local_params)``.
    - ``round_callback(round, params, log)`` after aggregation.
    """
    if partition.num_devices != config.num_devices:
        raise ValueError("partition and config disagree on the device count")
    if params is None:
        params = nn.init_params(spec, derive_seed(config.seed, "init") % 2**63)
    devices = [partition.device_data(train, k) for k in range(config.num_devices)]
    logs: list[RoundLog] = []
    prev_loss = dataset_loss(spec, params, test) if test is not None and eval_every else float("nan")
    t = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for r in range(config.rounds):
            sampled = sample_clients(config, r)
            unique = sorted(set(sampled))
            iters = {k: config.local_iterations(len(devices[k])) for k in unique}
            t_round = t

            def work(k, r=r, params=params, t_round=t_round):
                obs = observer_factory(r, k) if observer_factory else None
                return client_update(spec, params, devices[k], config, transform, r, k, obs, t_round)

            if pool is not None:
                results = dict(zip(unique, pool.map(work, unique)))
            else:
                results = {k: work(k) for k in unique}
            norms = {}
            for k in unique:
                norms[k] = float(torch.sqrt(sum(((results[k][n] - params[n]) ** 2).sum() for n in params)))
                if client_hook is not None:
                    client_hook(r, k, params, results[k])
            params = aggregate([(k, results[k]) for k in sampled], config)
            t += max(iters.values())
            do_eval = test is not None and eval_every and ((r + 1) % eval_every == 0 or r == config.rounds - 1)
            post = dataset_loss(spec, params, test) if do_eval else float("nan")
            acc = evaluate(spec, params, test) if do_eval else float("nan")
            log = RoundLog(r, sampled, prev_loss, post, acc, norms,
                           {k: derive_seed(config.seed, "client", r, k) for k in unique})
            prev_loss = post
            logs.append(log)
            if round_callback is not None:
                round_callback(r, params, log)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, logs


def logs_to_csv(logs: Sequence[RoundLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy", "pre_loss", "post_loss", "sampled", "mean_update_norm"])
        for log in logs:
            norms = list(log.update_norms.values())
            w.writerow([log.round, repr(log.accuracy), repr(log.pre_loss), repr(log.post_loss),
                        " ".join(map(str, log.sampled)), repr(float(np.mean(norms)) if norms else float("nan"))])


def logs_to_json(logs: Sequence[RoundLog]) -> str:
    rows = []
    for log in logs:
        d = asdict(log)
        d["update_norms"] = {str(k): v for k, v in log.update_norms.items()}
        d["batch_seeds"] = {str(k): v for k, v in log.batch_seeds.items()}
        rows.append(d)
    return json.dumps(rows)
