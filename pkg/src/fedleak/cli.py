"""Command-line entry point.

Every command reads an optional JSON config (``--config``), applies flag
overrides, validates the result and writes its outputs under
``<out>/<command>/<timestamp>/``. Exit status: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import traceback
from pathlib import Path
from typing import Annotated, Literal, Optional

import numpy as np
import torch
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import analysis, attacks, data, defense, fedsim, leakage, nn

COMMANDS = ("partition", "train", "infer-reps", "attack", "certify", "sweep", "convergence", "report")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


def _check_model(v: str) -> str:
    if v not in nn.REGISTRY:
        raise ValueError(f"unknown model {v!r}; choose from {sorted(nn.REGISTRY)}")
    return v


ModelName = Annotated[str, AfterValidator(_check_model)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    source: Literal["bundled-mnist", "mnist", "cifar10", "synthetic"] = "bundled-mnist"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_batches: list[str] = Field(default_factory=list)
    test_batches: list[str] = Field(default_factory=list)
    test_per_class: int = Field(100, ge=1)
    classes: int = Field(10, ge=2)
    dim: int = Field(20, ge=1)
    per_class: int = Field(100, ge=1)
    separation: float = Field(4.0, ge=0)

    @model_validator(mode="after")
    def _files(self):
        need = []
        if self.source == "mnist":
            need = [self.train_images, self.train_labels, self.test_images, self.test_labels]
            if any(p is None for p in need):
                raise ValueError("mnist source needs train_images, train_labels, test_images, test_labels")
        elif self.source == "cifar10":
            if not self.train_batches or not self.test_batches:
                raise ValueError("cifar10 source needs train_batches and test_batches")
            need = self.train_batches + self.test_batches
        missing = [p for p in need if not Path(p).is_file()]
        if missing:
            raise ValueError(f"missing data files: {missing}")
        return self


class PartitionConfig(_Strict):
    scheme: Literal["noniid", "iid"] = "noniid"
    num_devices: int = Field(100, ge=1)
    classes_per_device: int = Field(2, ge=1)
    samples_per_class: int = Field(100, ge=1)
    samples_per_device: int = Field(200, ge=1)


class FedSection(_Strict):
    clients_per_round: int = Field(10, ge=1)
    rounds: int = Field(50, ge=1)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, gt=0)
    mode: Literal["experiment", "theory"] = "experiment"
    eval_every: int = Field(1, ge=0)


class DefenseSection(_Strict):
    kind: Literal["none", "soteria", "gc", "dp_gauss", "dp_laplace"] = "none"
    eps: Optional[int] = Field(None, ge=0)
    p_fc: Optional[float] = Field(None, ge=0, le=100)
    p_model: float = Field(0.0, ge=0, le=100)
    gc_scope: Literal["global", "layer"] = "global"
    sigma: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _soteria(self):
        if self.kind == "soteria" and self.eps is None and self.p_fc is None:
            raise ValueError("soteria needs eps or p_fc")
        return self

    def build(self) -> defense.DefenseConfig:
        return defense.DefenseConfig(self.kind, self.eps, self.p_fc, None, self.p_model, self.gc_scope, self.sigma)


class AttackSection(_Strict):
    variant: Literal["dlg", "gs", "rep"] = "dlg"
    optimizer: Optional[Literal["lbfgs", "adam"]] = None
    iterations: Optional[int] = Field(None, ge=1)
    lr: float = Field(0.1, gt=0)
    restarts: int = Field(1, ge=1)
    tv_weight: float = Field(0.0, ge=0)
    portion: Literal["wg", "clg"] = "wg"
    dtype: Literal["float64", "float32"] = "float64"
    lr_decay: bool = False
    signed_grad: bool = False

    def build(self, seed: int) -> attacks.AttackConfig:
        return attacks.AttackConfig(seed=seed, **self.model_dump())


class PanelSection(_Strict):
    source: Literal["natural", "test"] = "natural"
    size: int = Field(10, ge=1)
    grayscale: bool = False


class Common(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    out: str = "reports"
    threads: int = Field(1, ge=1)
    timestamp: Optional[str] = None


class PartitionCmd(Common):
    data: DataConfig = Field(default_factory=DataConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)


class TrainCmd(Common):
    data: DataConfig = Field(default_factory=DataConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    model: ModelName = "rep-cnn"
    fed: FedSection = Field(default_factory=FedSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)


class InferCmd(Common):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelName = "rep-cnn"
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    rounds: int = Field(20, ge=1)
    num_devices: int = Field(20, ge=1)
    clients_per_round: int = Field(10, ge=1)
    samples_per_class: int = Field(20, ge=1)
    classes_per_device: int = Field(2, ge=1)
    iid: bool = False
    tau: float = Field(0.5, gt=0)
    m: int = Field(1, ge=1)


class AttackCmd(Common):
    model: ModelName = "dlg-lenet"
    attack: AttackSection = Field(default_factory=AttackSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    panel: PanelSection = Field(default_factory=PanelSection)
    data: DataConfig = Field(default_factory=DataConfig)
    capture_dtype: Optional[Literal["float64", "float32"]] = None


class CertifyCmd(Common):
    model: ModelName = "rep-cnn"
    defense: DefenseSection = Field(default_factory=lambda: DefenseSection(kind="soteria", p_fc=40))
    panel: PanelSection = Field(default_factory=lambda: PanelSection(source="test"))
    data: DataConfig = Field(default_factory=DataConfig)
    norm: Literal["spectral", "frobenius"] = "spectral"


class SweepCmd(Common):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelName = "tiny-convfc"
    attack: Literal["dlg", "gs"] = "dlg"
    num_devices: int = Field(20, ge=1)
    clients_per_round: int = Field(10, ge=1)
    rounds: int = Field(20, ge=1)
    samples_per_class: int = Field(20, ge=1)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.1, gt=0)
    panel: int = Field(8, ge=1)
    attack_iterations: Optional[int] = Field(None, ge=1)


class ConvergenceCmd(Common):
    data: DataConfig = Field(default_factory=DataConfig)
    num_devices: int = Field(100, ge=1)
    samples_per_class: int = Field(20, ge=1)
    eps: int = Field(50, ge=0)
    local_epochs: list[int] = Field(default_factory=lambda: [5, 10])
    clients_per_round: list[int] = Field(default_factory=lambda: [5, 10])
    batch_size: int = Field(32, ge=1)
    rounds: int = Field(200, ge=1)
    lam: float = Field(1e-4, gt=0)


class ReportCmd(Common):
    input: str

    @field_validator("input")
    @classmethod
    def _exists(cls, v):
        if not (Path(v) / "results.csv").is_file():
            raise ValueError(f"{v} has no results.csv")
        return v


SCHEMAS = {"partition": PartitionCmd, "train": TrainCmd, "infer-reps": InferCmd, "attack": AttackCmd,
           "certify": CertifyCmd, "sweep": SweepCmd, "convergence": ConvergenceCmd, "report": ReportCmd}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


# flag -> dotted config path
OVERRIDES = {
    "model": "model", "rounds": "rounds", "lr": "lr", "local_epochs": "local_epochs",
    "defense": "defense.kind", "p_fc": "defense.p_fc", "eps": "defense.eps", "p_model": "defense.p_model",
    "sigma": "defense.sigma", "attack": "attack.variant", "iterations": "attack.iterations",
    "devices": "num_devices", "clients": "clients_per_round", "iid": "iid", "input": "input",
    "data_source": "data.source", "panel_size": "panel.size",
}
# commands whose FedAvg knobs live in a nested section
NESTED = {"train": {"rounds": "fed.rounds", "lr": "fed.lr", "local_epochs": "fed.local_epochs",
                    "devices": "partition.num_devices", "clients": "fed.clients_per_round"},
          "partition": {"devices": "partition.num_devices"},
          "sweep": {"attack": "attack"}}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--out", help="report root directory")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--timestamp", help="fixed report subdirectory name")
    common.add_argument("--set", action="append", default=[], metavar="PATH=JSON",
                        help="override any config field, e.g. --set fed.batch_size=16")
    common.add_argument("--model")
    common.add_argument("--rounds", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--local-epochs", type=int)
    common.add_argument("--devices", type=int)
    common.add_argument("--clients", type=int)
    common.add_argument("--defense")
    common.add_argument("--p-fc", type=float)
    common.add_argument("--eps", type=int)
    common.add_argument("--p-model", type=float)
    common.add_argument("--sigma", type=float)
    common.add_argument("--attack")
    common.add_argument("--iterations", type=int)
    common.add_argument("--iid", action="store_true", default=None)
    common.add_argument("--data-source")
    common.add_argument("--panel-size", type=int)
    parser = _Parser(prog="fedleak", description="Representation leakage and defenses in federated learning.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "partition": "split a dataset across devices", "train": "run FedAvg with an optional defense",
        "infer-reps": "infer class representations from weight deltas", "attack": "reconstruct inputs from gradients",
        "certify": "certified reconstruction lower bounds", "sweep": "privacy/utility trade-off sweep",
        "convergence": "defended LR+FedAvg convergence vs bound", "report": "re-render plots of a results directory",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "report":
            p.add_argument("input", nargs="?", help="results directory")
    return parser


def _set_path(cfg: dict, path: str, value) -> None:
    node = cfg
    parts = path.split(".")
    for key in parts[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {path}: {key} is not a section")
    node[parts[-1]] = value


def resolve_config(args: argparse.Namespace):
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
    for key in ("seed", "out", "threads", "timestamp"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    paths = {**OVERRIDES, **NESTED.get(args.command, {})}
    for flag, path in paths.items():
        v = getattr(args, flag, None)
        if v is not None:
            _set_path(cfg, path, v)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects PATH=VALUE, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, path, value)
    try:
        return SCHEMAS[args.command].model_validate(cfg)
    except ValidationError as e:
        lines = [f"  {'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError("invalid config:\n" + "\n".join(lines)) from e


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def load_data(cfg: DataConfig, seed: int) -> tuple[data.Dataset, data.Dataset]:
    if cfg.source == "bundled-mnist":
        return data.bundled_mnist(cfg.test_per_class)
    if cfg.source == "mnist":
        return (data.load_mnist(cfg.train_images, cfg.train_labels), data.load_mnist(cfg.test_images, cfg.test_labels))
    if cfg.source == "cifar10":
        return data.load_cifar10(cfg.train_batches), data.load_cifar10(cfg.test_batches)
    train = data.gen_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.separation, fedsim.derive_seed(seed, "synthetic"))
    test = data.gen_synthetic(cfg.classes, cfg.dim, cfg.test_per_class, cfg.separation,
                              fedsim.derive_seed(seed, "synthetic-test"))
    return train, test


def _input_shape(ds: data.Dataset) -> tuple[int, ...]:
    return tuple(ds.images.shape[1:])


def _make_partition(ds, pc: PartitionConfig, seed: int):
    if pc.scheme == "iid":
        return data.partition_iid(ds, pc.num_devices, pc.samples_per_device, seed)
    return data.partition_noniid(ds, pc.num_devices, pc.classes_per_device, pc.samples_per_class, seed)


def _config_dict(cfg) -> dict:
    d = cfg.model_dump(mode="json")
    d.pop("timestamp", None)
    return d


def _emit(cmd: str, cfg, rows, plots=None, extra=None, columns=None) -> Path:
    return analysis.emit_report(cmd, rows, {"command": cmd, **_config_dict(cfg)}, cfg.out, plots,
                                cfg.timestamp, extra, columns)


def cmd_partition(cfg: PartitionCmd) -> Path:
    train, _ = load_data(cfg.data, cfg.seed)
    plan = _make_partition(train, cfg.partition, cfg.seed)
    rows = [{"device": k, "samples": len(idx), "classes": " ".join(map(str, plan.device_classes[k]))}
            for k, idx in enumerate(plan.device_indices)]
    out = _emit("partition", cfg, rows)
    (out / "partition.json").write_text(plan.to_json())
    return out


def cmd_train(cfg: TrainCmd) -> Path:
    train, test = load_data(cfg.data, cfg.seed)
    spec = nn.build_model(cfg.model, _input_shape(train), train.num_classes)
    plan = _make_partition(train, cfg.partition, cfg.seed)
    f = cfg.fed
    fed = fedsim.FedConfig(cfg.partition.num_devices, f.clients_per_round, f.rounds, f.local_epochs, f.batch_size,
                           f.lr, mode=f.mode, seed=cfg.seed, threads=cfg.threads)
    _, logs = fedsim.run_fedavg(fed, spec, train, plan, defense.make_transform(cfg.defense.build()), test,
                                eval_every=f.eval_every)
    rows = [{"round": l.round, "accuracy": l.accuracy, "pre_loss": l.pre_loss, "post_loss": l.post_loss,
             "mean_update_norm": float(np.mean(list(l.update_norms.values())))} for l in logs]
    acc = [(l.round, l.accuracy) for l in logs if not math.isnan(l.accuracy)]
    plots = {"accuracy.svg": analysis.svg_plot({"accuracy": tuple(zip(*acc))} if acc else {}, "test accuracy", "round", "accuracy")}
    return _emit("train", cfg, rows, plots, {"final_accuracy": acc[-1][1] if acc else None,
                                             "rounds": json.loads(fedsim.logs_to_json(logs))})


def cmd_infer(cfg: InferCmd) -> Path:
    train, _ = load_data(cfg.data, cfg.seed)
    recipe = leakage.RepLeakageRecipe(cfg.model, _input_shape(train), cfg.local_epochs, cfg.batch_size, cfg.lr,
                                      cfg.rounds, cfg.num_devices, cfg.clients_per_round, cfg.samples_per_class,
                                      cfg.classes_per_device, cfg.iid, cfg.tau, cfg.m, cfg.seed, cfg.threads)
    report = leakage.run_rep_leakage_experiment(recipe, train)
    return _emit("infer-reps", cfg, report.rows, {"correlation.svg": analysis.correlation_plot(report.rows)},
                 {"summary": report.summary()}, ["round", "device", "class", "layer", "cor"])


def _panel(cfg, shape) -> data.Dataset:
    if cfg.panel.source == "natural":
        gray = cfg.panel.grayscale or shape[0] == 1
        panel = data.natural_image_panel(cfg.panel.size, shape[-1], grayscale=gray)
    else:
        _, test = load_data(cfg.data, cfg.seed)
        panel = test.subset(np.arange(min(cfg.panel.size, len(test))))
    return panel


def _default_shape(cfg) -> tuple[int, ...]:
    if cfg.panel.source == "natural":
        return (1, 32, 32) if cfg.panel.grayscale else (3, 32, 32)
    _, test = load_data(cfg.data, cfg.seed)
    return _input_shape(test)


def cmd_attack(cfg: AttackCmd) -> Path:
    shape = _default_shape(cfg)
    spec = nn.build_model(cfg.model, shape)
    panel = _panel(cfg, shape)
    params = nn.init_params(spec, fedsim.derive_seed(cfg.seed, "init") % 2**63)
    dcfg = cfg.defense.build()
    cap_dtype = {"float64": torch.float64, "float32": torch.float32}.get(cfg.capture_dtype or "")
    rows, timing = [], {}
    out_imgs = []
    for i in range(len(panel)):
        x, y = panel.images[i : i + 1], int(panel.labels[i])
        rng = fedsim.numpy_rng(cfg.seed, "attack-noise", i)
        target = attacks.capture_target(spec, params, x, y, dcfg, rng, cap_dtype)
        acfg = cfg.attack.build(cfg.seed + i)
        if acfg.variant == "rep":
            delta = {k: -v.double() for k, v in target.gradient.items()}
            inferred = leakage.infer_all_layers(delta, spec, tau=1.0)
            res = attacks.rep_attack(inferred, spec, params, acfg, true_x=x, update_scale=1.0)
        else:
            res = attacks.gradient_attack(target, acfg)
        rows.append({"sample": i, "label": y, "inferred_label": res.label, "mse": res.mse, "stalled": res.stalled,
                     "iterations": res.iterations, "final_loss": res.loss_trace[-1]})
        timing[str(i)] = res.wall_clock
        out_imgs.append((i, x, res.x))
    mses = [r["mse"] for r in rows]
    out = _emit("attack", cfg, rows, None, {"median_mse": float(np.median(mses))})
    ext = "pgm" if shape[0] == 1 else "ppm"
    for i, x, xr in out_imgs:
        attacks.write_pnm(out / f"sample{i}_true.{ext}", x)
        attacks.write_pnm(out / f"sample{i}_recon.{ext}", xr)
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True))
    return out


def cmd_certify(cfg: CertifyCmd) -> Path:
    shape = _default_shape(cfg)
    spec = nn.build_model(cfg.model, shape)
    panel = _panel(cfg, shape)
    params = nn.init_params(spec, fedsim.derive_seed(cfg.seed, "init") % 2**63)
    f = nn.feature_map(spec, params)
    dcfg = cfg.defense.build()
    eps = dcfg.prune_count(spec.defended_width) if dcfg.kind == "soteria" else 0
    rows = []
    for i in range(len(panel)):
        x = panel.images[i : i + 1]
        r, r_prime, _ = defense.defended_rep(spec, params, x, eps)
        b = defense.certified_bound(f, x, r, r_prime, 2, cfg.norm)
        rows.append({"sample": i, "eps": eps, "bound": b.value, "perturbation_l2": b.perturbation_norm,
                     "jacobian_norm": b.jacobian_norm, "invertible": b.invertible, "heuristic": b.heuristic})
    return _emit("certify", cfg, rows)


def cmd_sweep(cfg: SweepCmd) -> Path:
    train, test = load_data(cfg.data, cfg.seed)
    recipe = analysis.SweepRecipe(cfg.model, cfg.attack, cfg.num_devices, cfg.clients_per_round, cfg.rounds,
                                  cfg.samples_per_class, 2, cfg.local_epochs, cfg.batch_size, cfg.lr, cfg.panel,
                                  cfg.attack_iterations, cfg.seed, cfg.threads)
    rows = analysis.tradeoff_sweep(recipe, train, test)
    dom = analysis.dominance(rows)
    return _emit("sweep", cfg, rows, {"tradeoff.svg": analysis.tradeoff_plot(rows)}, {"dominance": dom},
                 ["defense", "param", "label", "accuracy", "mse", "mse_samples"])


def cmd_convergence(cfg: ConvergenceCmd) -> Path:
    train, _ = load_data(cfg.data, cfg.seed)
    recipe = analysis.ConvergenceRecipe(cfg.num_devices, 2, cfg.samples_per_class, cfg.eps, tuple(cfg.local_epochs),
                                        tuple(cfg.clients_per_round), cfg.batch_size, cfg.rounds, cfg.lam, cfg.seed,
                                        cfg.threads)
    res = analysis.run_convergence_experiment(recipe, train)
    summary = [{"E": r.local_epochs, "K": r.clients_per_round, "dominated": r.dominated(),
                "plateau": analysis.plateau_check(r.gaps), "realized_eps": r.realized_eps, "Q": r.bound.Q,
                "C": r.bound.C, "constants": r.constants} for r in res["runs"]]
    return _emit("convergence", cfg, analysis.convergence_rows(res), analysis.convergence_plots(res),
                 {"f_star": res["f_star"], "runs": summary})


def cmd_report(cfg: ReportCmd) -> Path:
    src = Path(cfg.input)
    rows = analysis.read_csv(src / "results.csv")
    meta = json.loads((src / "config.json").read_text()) if (src / "config.json").is_file() else {}
    kind = meta.get("command", "")
    if kind == "sweep":
        plots = {"tradeoff.svg": analysis.tradeoff_plot(rows)}
    elif kind == "infer-reps":
        plots = {"correlation.svg": analysis.correlation_plot(rows)}
    elif kind == "convergence":
        series = {}
        for r in rows:
            for what in ("gap", "bound"):
                xs, ys = series.setdefault(f"{what} E={r['E']} K={r['K']}", ([], []))
                xs.append(r["step"])
                ys.append(r[what])
        plots = {"convergence.svg": analysis.svg_plot(series, "gap vs bound", "local iteration", "value", logy=True)}
    else:
        numeric = [k for k in (rows[0] if rows else {}) if all(isinstance(r[k], (int, float)) for r in rows)]
        x = numeric[0] if numeric else None
        plots = {"results.svg": analysis.svg_plot({k: ([r[x] for r in rows], [r[k] for r in rows]) for k in numeric[1:]},
                                                  kind or "results", x or "", "value")} if x else {}
    return _emit("report", cfg, rows, plots, {"source": str(src)})


HANDLERS = {"partition": cmd_partition, "train": cmd_train, "infer-reps": cmd_infer, "attack": cmd_attack,
            "certify": cmd_certify, "sweep": cmd_sweep, "convergence": cmd_convergence, "report": cmd_report}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help()
        return 1
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"fedleak {args.command}: {e}", file=sys.stderr)
        return 1
    torch.set_num_threads(1)  # fixed intra-op threading keeps float reductions reproducible
    try:
        started = time.perf_counter()
        out = HANDLERS[args.command](cfg)
    except Exception as e:  # noqa: BLE001
        traceback.print_exc()
        print(f"fedleak {args.command}: failed: {e}", file=sys.stderr)
        return 2
    print(f"{args.command}: wrote {out} ({time.perf_counter() - started:.1f}s)")
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
