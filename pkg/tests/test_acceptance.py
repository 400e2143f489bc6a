"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Long experiments live here; run ``pytest tests/test_acceptance.py -v`` to
see the verdict table at the end of the session. Result files are kept
under ``reports/acceptance`` (override with ``FEDLEAK_ACCEPTANCE_OUT``).
"""

import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record
from fedleak import analysis, attacks, autodiff as ad, cli, defense, fedsim, leakage, nn
from fedleak.attacks import AttackConfig, capture_target
from fedleak.data import partition_noniid
from fedleak.defense import DefenseConfig

D64 = torch.float64
OUT = Path(os.environ.get("FEDLEAK_ACCEPTANCE_OUT", Path(__file__).resolve().parents[1] / "reports" / "acceptance"))
MODELS = ["dlg-lenet", "gs-convnet", "rep-cnn", "tiny-convfc", "logreg"]


def unit(t: torch.Tensor) -> torch.Tensor:
    # keep the finite-difference step at h in parameter space, whatever the dimension
    return t / t.norm()


def kink_pattern(spec, params, x) -> list[torch.Tensor]:
    """ReLU signs and max-pool winners: the linear piece ``x`` sits on."""
    _, trace = nn.forward_with_activations(spec, params, x)
    out = []
    for layer, r in zip(spec.layers, trace.inputs):
        if isinstance(layer, nn.Activation) and layer.kind == "relu":
            out.append(r > 0)
        elif isinstance(layer, nn.MaxPool):
            out.append(torch.nn.functional.max_pool2d(r, layer.k, return_indices=True)[1])
    return out


def same_piece(a, b) -> bool:
    return all(torch.equal(u, v) for u, v in zip(a, b))


def directional_error(fn, x: torch.Tensor, grad: torch.Tensor, gen, k: int = 3, pattern=None) -> tuple[float, int]:
    """Relative error of ``grad . d`` against central differences over several directions.

    The first direction leans on ``grad`` itself (falling back to a random
    one), which keeps the comparison well conditioned when random
    directions see only a tiny slope; the others are random unit vectors. With ``pattern`` (point -> kink
    pattern), directions whose difference stencil crosses a ReLU or
    max-pool kink are redrawn, since differences across a kink do not
    approximate the derivative. Returns the error and the redraw count.
    """
    grad = grad.detach()
    base = pattern(x) if pattern else None
    dirs, redrawn = [], 0
    for j in range(k + 1):
        for attempt in range(50):
            noise = unit(torch.randn(x.shape, generator=gen, dtype=D64))
            d = unit(unit(grad) + 0.2 * attempt * noise) if j == 0 and attempt < 10 else noise
            if pattern is None or all(same_piece(base, pattern(x + s * 1e-5 * d)) for s in (1, -1)):
                break
            redrawn += 1
        else:
            raise RuntimeError("no kink-free direction found")
        dirs.append(d)
    exact = torch.tensor([float((grad * d).sum()) for d in dirs], dtype=D64)
    approx = torch.tensor([ad.finite_difference_directional(fn, x, d) for d in dirs], dtype=D64)
    return rel_err(exact, approx), redrawn


def rel_err(a, b) -> float:
    a, b = torch.as_tensor(a, dtype=D64).detach(), torch.as_tensor(b, dtype=D64).detach()
    scale = max(float(a.norm()), float(b.norm()), 1e-300)
    return float((a - b).norm()) / scale


# ---------------------------------------------------------------------------
# 1. autodiff against finite differences
# ---------------------------------------------------------------------------


def _op_cases(gen):
    w = torch.randn(4, 6, generator=gen, dtype=D64)
    k = torch.randn(3, 2, 3, 3, generator=gen, dtype=D64)
    labels = torch.tensor([1, 0, 3])
    return {
        "linear": ((2, 6), lambda x: ad.linear(x, w)),
        "conv2d": ((1, 2, 5, 5), lambda x: ad.conv2d(x, k)),
        "conv2d_pad": ((1, 2, 4, 4), lambda x: ad.conv2d(x, k, padding=2)),
        "maxpool2d": ((1, 2, 6, 6), lambda x: ad.maxpool2d(x, 2)),
        "relu": ((3, 5), ad.relu),
        "sigmoid": ((3, 5), ad.sigmoid),
        "cross_entropy": ((3, 4), lambda x: nn.softmax_cross_entropy(x, labels, reduction="none")),
    }


def test_criterion_01_autodiff_matches_finite_differences():
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    worst1, worst2, redrawn = 0.0, 0.0, 0
    for name, (shape, op) in _op_cases(gen).items():
        x = torch.randn(shape, generator=gen, dtype=D64)
        c = torch.randn(op(x).shape, generator=gen, dtype=D64)
        f = lambda z: (c * op(z)).sum()  # noqa: E731
        s = lambda z: 0.5 * (c * op(z) ** 2).sum()  # noqa: E731
        xr = x.clone().requires_grad_(True)
        (g,) = ad.gradient(f(xr), [xr])
        worst1 = max(worst1, rel_err(g, ad.finite_difference_gradient(f, x)))
        # second order: Hessian-vector product against differences of gradients
        v = unit(torch.randn(shape, generator=gen, dtype=D64))
        (gs,) = ad.gradient(s(xr), [xr])
        (hv,) = ad.gradient((gs * v).sum(), [xr], allow_unused=True)

        def grad_at(z):
            z = z.clone().requires_grad_(True)
            return ad.gradient(s(z), [z], create_graph=False)[0]

        h = 1e-5
        fd_hv = (grad_at(x + h * v) - grad_at(x - h * v)) / (2 * h)
        if float(fd_hv.norm()) > 0 or float(hv.norm()) > 0:
            worst2 = max(worst2, rel_err(hv, fd_hv))

    for model in MODELS:
        spec = nn.build_model(model)
        params = nn.init_params(spec, 0)
        x = torch.rand((1, *spec.input_shape), generator=gen, dtype=D64)
        y = torch.tensor([3])
        names = list(params)
        flat = nn.flatten_params(params)

        def loss_of(theta):
            return nn.loss_fn(spec, nn.unflatten_like(theta, params), x, y)

        theta = flat.clone().requires_grad_(True)
        (g,) = ad.gradient(loss_of(theta), [theta])
        on_theta = lambda t: kink_pattern(spec, nn.unflatten_like(t, params), x)  # noqa: E731
        on_x = lambda z: kink_pattern(spec, params, z)  # noqa: E731
        err, n = directional_error(loss_of, flat, g, gen, pattern=on_theta)
        worst1, redrawn = max(worst1, err), redrawn + n
        xr = x.clone().requires_grad_(True)
        (gx,) = ad.gradient(nn.loss_fn(spec, params, xr, y), [xr], create_graph=False)
        err, n = directional_error(lambda z: nn.loss_fn(spec, params, z, y), x, gx, gen, pattern=on_x)
        worst1, redrawn = max(worst1, err), redrawn + n
        # second order: parameter HVP and the gradient-matching objective's input gradient
        v = unit(torch.randn(flat.shape, generator=gen, dtype=D64))
        while not all(same_piece(on_theta(flat), on_theta(flat + s * 1e-5 * v)) for s in (1, -1)):
            v, redrawn = unit(torch.randn(flat.shape, generator=gen, dtype=D64)), redrawn + 1
        (hv,) = ad.gradient((g * v).sum(), [theta])

        def grad_theta(t):
            t = t.clone().requires_grad_(True)
            return ad.gradient(loss_of(t), [t], create_graph=False)[0]

        fd_hv = (grad_theta(flat + 1e-5 * v) - grad_theta(flat - 1e-5 * v)) / 2e-5
        worst2 = max(worst2, rel_err(hv, fd_hv))
        # a random offset keeps the objective's input gradient away from zero
        target = [t + 0.01 * torch.randn(t.shape, generator=gen, dtype=D64)
                  for t in nn.batch_gradient(spec, params, x, y).values()]
        p_req = {k: w.clone().requires_grad_(True) for k, w in params.items()}

        def matching(z):
            with torch.enable_grad():
                return attacks.dlg_objective(spec, p_req, names, target, z, 3)

        xr = x.clone().requires_grad_(True)
        (gm,) = ad.gradient(matching(xr), [xr], create_graph=False)
        err, n = directional_error(lambda z: matching(z).detach(), x, gm, gen, pattern=on_x)
        worst2, redrawn = max(worst2, err), redrawn + n
    elapsed = time.perf_counter() - started
    ok = worst1 < 1e-5 and worst2 < 1e-4 and elapsed < 60
    record(1, ok, f"first-order max rel err {worst1:.2e} (<1e-5), second-order {worst2:.2e} (<1e-4), "
              f"{redrawn} kink-crossing directions redrawn, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. outer-product and class-split identities
# ---------------------------------------------------------------------------


def test_criterion_02_gradient_identities(mnist):
    train = mnist[0]
    spec = nn.build_model("rep-cnn", input_shape=(1, 28, 28))
    rng = np.random.default_rng(0)
    worst_outer, worst_split = 0.0, 0.0
    for b in range(100):
        params = nn.init_params(spec, b)
        idx = rng.choice(len(train), size=int(rng.integers(1, 17)), replace=False)
        x, y = train.images[idx], train.labels[idx]
        grads = nn.batch_gradient(spec, params, x, y)
        for i in spec.fc_indices:
            delta, r = nn.output_gradients(spec, params, x, y, i)
            outer = sum(torch.outer(delta[j], r[j]) for j in range(len(idx))) / len(idx)
            worst_outer = max(worst_outer, float((grads[f"{i}.weight"] - outer).abs().max()))
        parts = leakage.classwise_gradient(spec, params, x, y)
        for k in grads:
            total = sum(p[k] for p in parts.values())
            worst_split = max(worst_split, float((grads[k] - total).abs().max()))
    ok = worst_outer <= 1e-10 and worst_split <= 1e-10
    record(2, ok, f"outer-product max abs diff {worst_outer:.1e}, class-split {worst_split:.1e} (<=1e-10, 100 batches)")
    assert ok


# ---------------------------------------------------------------------------
# 3. representation inference during FedAvg
# ---------------------------------------------------------------------------


def test_criterion_03_representation_inference(mnist):
    started = time.perf_counter()
    train = mnist[0]
    last = nn.build_model("rep-cnn", input_shape=(1, 28, 28)).fc_indices[-1]
    reports = {}
    for name, kw in {"E1": {}, "E10": {"local_epochs": 10}, "IID": {"iid": True}}.items():
        recipe = leakage.RepLeakageRecipe(**kw)
        rep = leakage.run_rep_leakage_experiment(recipe, train)
        reports[name] = rep
        analysis.emit_report("criterion03-" + name, rep.rows, {"recipe": recipe}, OUT,
                             {"correlation.svg": analysis.correlation_plot(rep.rows)}, "run",
                             {"summary": rep.summary()}, ["round", "device", "class", "layer", "cor"])
    e1, e10, iid = (reports[k].mean_abs(last) for k in ("E1", "E10", "IID"))
    iid_signed = reports["IID"].mean_signed(last)
    elapsed = time.perf_counter() - started
    checks = {"E1>=0.9": e1 >= 0.9, "E10<E1": e10 < e1, "IID<=0.6": iid <= 0.6, "time<15min": elapsed < 900}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(3, ok, f"last-FC mean |cor| E1={e1:.3f} E10={e10:.3f} IID={iid:.3f} (signed IID {iid_signed:.3f}), "
                  f"{elapsed / 60:.1f} min" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 4. single-step exactness
# ---------------------------------------------------------------------------


def test_criterion_04_single_step_exactness(mnist):
    train = mnist[0]
    spec = nn.build_model("rep-cnn", input_shape=(1, 28, 28))
    last = spec.fc_indices[-1]
    worst = 0.0
    all_found = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        i = int(rng.integers(len(train)))
        x, y = train.images[i : i + 1], train.labels[i : i + 1]
        params = nn.init_params(spec, seed)
        cfg = fedsim.FedConfig(1, 1, 1, local_iters=1, batch_size=1, lr=0.01, seed=seed)
        after = fedsim.client_update(spec, params, train.subset([i]), cfg)
        delta = after[f"{last}.weight"] - params[f"{last}.weight"]
        classes, reps = leakage.infer_last_layer(delta)
        all_found &= classes == [int(y)]
        _, trace = nn.forward_with_activations(spec, params, x)
        worst = max(worst, abs(1 - leakage.pearson(reps[int(y)], trace.inputs[last][0])))
    ok = all_found and worst <= 1e-9
    record(4, ok, f"max |1 - Pearson| {worst:.1e} over 50 seeds (<=1e-9), label row found every time: {all_found}")
    assert ok


# ---------------------------------------------------------------------------
# 5. gradient-portion ablation
# ---------------------------------------------------------------------------


def test_criterion_05_ablation(panel):
    started = time.perf_counter()
    spec = nn.build_model("tiny-convfc")
    params = nn.init_params(spec, 1)
    rows = []
    for i in range(10):
        x, y = panel.images[i : i + 1], int(panel.labels[i])
        target = capture_target(spec, params, x, y)
        wg = attacks.dlg_attack(target, AttackConfig("dlg", seed=i))
        clg = attacks.dlg_attack(target, AttackConfig("dlg", portion="clg", seed=i))
        inferred = leakage.infer_all_layers({k: -v for k, v in target.gradient.items()}, spec, tau=1.0)
        rep = attacks.rep_attack(inferred, spec, params, AttackConfig("rep", seed=i), true_x=x, update_scale=1.0)
        rows.append({"sample": i, "wg": wg.mse, "clg": clg.mse, "rep": rep.mse,
                     "rep_uncalibrated": rep.extra["uncalibrated_mse"]})
    med = {k: float(np.median([r[k] for r in rows])) for k in ("wg", "clg", "rep", "rep_uncalibrated")}
    analysis.emit_report("criterion05", rows, {"model": "tiny-convfc", "params_seed": 1}, OUT, None, "run",
                         {"median": med})
    elapsed = time.perf_counter() - started
    ok = med["rep"] <= 2 * med["wg"] and med["clg"] >= 5 * med["rep"] and elapsed < 1200
    record(5, ok, f"median MSE WG={med['wg']:.2e} Rep={med['rep']:.2e} CLG={med['clg']:.2e} "
                  f"(Rep<=2xWG, CLG>=5xRep; uncalibrated Rep {med['rep_uncalibrated']:.2e}), {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 6. defense efficacy against DLG and GS
# ---------------------------------------------------------------------------


def _efficacy(panel, model, variant, p_fc, dtype):
    spec = nn.build_model(model)
    params = nn.init_params(spec, 1)
    rows = []
    for i in range(len(panel)):
        x, y = panel.images[i : i + 1], int(panel.labels[i])
        row = {"sample": i}
        for kind, cfg in (("none", DefenseConfig()), ("soteria", DefenseConfig("soteria", p_fc=p_fc))):
            target = capture_target(spec, params, x, y, cfg, dtype=dtype)
            res = attacks.gradient_attack(target, AttackConfig(variant, seed=i, dtype=str(dtype).split(".")[-1]))
            row[kind] = res.mse
        rows.append(row)
    return rows


def test_criterion_06_defense_efficacy(panel):
    started = time.perf_counter()
    results = {}
    for variant, model, p_fc, dtype in (("dlg", "dlg-lenet", 40, D64), ("gs", "gs-convnet", 80, torch.float32)):
        rows = _efficacy(panel, model, variant, p_fc, dtype)
        und = float(np.median([r["none"] for r in rows]))
        dfd = float(np.median([r["soteria"] for r in rows]))
        results[variant] = (und, dfd, dfd / und)
        analysis.emit_report(f"criterion06-{variant}", rows, {"model": model, "p_fc": p_fc}, OUT, None, "run",
                             {"median_undefended": und, "median_defended": dfd})
    elapsed = time.perf_counter() - started
    ok = all(r[2] >= 10 for r in results.values()) and elapsed < 1800
    detail = ", ".join(f"{v.upper()} {u:.3g} -> {d:.3g} ({ratio:.1f}x)" for v, (u, d, ratio) in results.items())
    record(6, ok, f"median MSE undefended -> Soteria: {detail} (need >=10x), {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 7. utility under the defense
# ---------------------------------------------------------------------------


def test_criterion_07_utility(mnist):
    started = time.perf_counter()
    train, test = mnist
    spec = nn.build_model("rep-cnn", input_shape=(1, 28, 28))
    plan = partition_noniid(train, 100, 2, 50, seed=0)
    acc = {}
    for kind, cfg in (("none", DefenseConfig()), ("soteria", DefenseConfig("soteria", p_fc=40))):
        fed = fedsim.FedConfig(100, 10, 50, local_epochs=1, batch_size=32, lr=0.1, seed=0)
        _, logs = fedsim.run_fedavg(fed, spec, train, plan, defense.make_transform(cfg), test, eval_every=10)
        acc[kind] = logs[-1].accuracy
        analysis.emit_report(f"criterion07-{kind}", [{"round": l.round, "accuracy": l.accuracy} for l in logs
                                                     if not math.isnan(l.accuracy)], {"defense": cfg}, OUT, None, "run")
    gap = acc["soteria"] - acc["none"]
    elapsed = time.perf_counter() - started
    ok = abs(gap) <= 0.01 and elapsed < 1800
    record(7, ok, f"test accuracy none={acc['none']:.4f} soteria(p_fc=40)={acc['soteria']:.4f} "
                  f"(gap {100 * gap:+.2f} pp, need within 1 pp), {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 8. certified bound and prune-set optimality
# ---------------------------------------------------------------------------


def _linear(a):
    return lambda x: x.reshape(x.shape[0], -1) @ a.T


def test_criterion_08_certified_bound():
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    held = 0
    min_slack = math.inf
    for trial in range(100):
        n = 2 + trial % 11
        a = torch.randn(n, n, generator=gen, dtype=D64)
        x = torch.randn(1, n, generator=gen, dtype=D64)
        eps = 1 + int(torch.randint(n, (1,), generator=gen))
        f = _linear(a)
        r = f(x)
        rp, _ = defense.perturb_rep(x, f, r, eps)
        bound = defense.certified_bound(f, x, r, rp, tol=1e-12)
        dist = float((x[0] - torch.linalg.solve(a, rp[0])).norm())
        held += dist >= bound.value
        min_slack = min(min_slack, dist / bound.value if bound.value else math.inf)

    # exhaustive prune-set check on maps with orthogonal rows, where the first-order objective is exact
    optimal = cases = general_optimal = 0
    for trial in range(40):
        n = 2 + trial % 11
        q, _ = torch.linalg.qr(torch.randn(n, n, generator=gen, dtype=D64))
        a = torch.diag(torch.rand(n, generator=gen, dtype=D64) * 3 + 0.1) @ q
        g = torch.randn(n, n, generator=gen, dtype=D64)
        x = torch.randn(1, n, generator=gen, dtype=D64)
        for mat, is_orth in ((a, True), (g, False)):
            f = _linear(mat)
            r = f(x)[0]
            for eps in range(1, n):
                rp, _ = defense.perturb_rep(x, f, None, eps)
                chosen = float((x[0] - torch.linalg.solve(mat, rp[0])).norm())
                best = 0.0
                for subset in itertools.combinations(range(n), eps):
                    cand = r.clone()
                    cand[list(subset)] = 0
                    best = max(best, float((x[0] - torch.linalg.solve(mat, cand)).norm()))
                hit = chosen >= best * (1 - 1e-12)
                if is_orth:
                    cases += 1
                    optimal += hit
                else:
                    general_optimal += hit
    elapsed = time.perf_counter() - started
    ok = held == 100 and optimal == cases and elapsed < 60
    record(8, ok, f"bound held {held}/100 (min distance/bound {min_slack:.3f}); prune set optimal {optimal}/{cases} "
                  f"(orthogonal-row maps, L<=12; general Gaussian maps {general_optimal}/{cases}), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 9. convergence bound
# ---------------------------------------------------------------------------


def _hand_q_c(c):
    q = sum(c.p[k] ** 2 * c.lambda_s * c.eps + c.p[k] ** 2 * c.sigma[k] ** 2 for k in range(len(c.p)))
    q += 6.0 * c.L * c.gamma_het
    q += 8.0 * (c.I - 1) * (c.I - 1) * c.lambda_s * c.eps + 8.0 * (c.I - 1) * (c.I - 1) * c.G * c.G
    return q, 4.0 * c.I * c.I * c.lambda_s * c.eps / c.K + 4.0 * c.I * c.I * c.G * c.G / c.K


def test_criterion_09_convergence(mnist):
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        c = analysis.ConvergenceParams(
            L=float(rng.uniform(1, 50)), mu=float(rng.uniform(1e-4, 1)), sigma=rng.uniform(0, 5, n).tolist(),
            G=float(rng.uniform(0, 10)), lambda_s=float(rng.uniform(0, 3)), gamma_het=float(rng.uniform(0, 2)),
            eps=float(rng.uniform(0, 100)), I=int(rng.integers(1, 60)), K=int(rng.integers(1, 20)),
            p=rng.dirichlet(np.ones(n)).tolist(), w0_dist_sq=float(rng.uniform(0, 10)))
        q, cc = _hand_q_c(c)
        worst = max(worst, abs(analysis.q_term(c) - q) / max(q, 1.0), abs(analysis.c_term(c) - cc) / max(cc, 1.0))
    dual_ok = worst <= 1e-12

    monotone = True
    base = dict(L=2.0, mu=0.1, sigma=[1.0, 0.5], G=2.0, lambda_s=1.0, gamma_het=0.1, I=5, K=2, p=[0.5, 0.5],
                w0_dist_sq=3.0)
    for L in (0.5, 2.0, 20.0):
        for I in (1, 5, 20):
            curves = [analysis.convergence_bound(analysis.ConvergenceParams(**{**base, "L": L, "I": I, "eps": e}), 400)
                      for e in (0.0, 1.0, 10.0, 50.0)]
            monotone &= all(all(b <= a for a, b in zip(cv.values, cv.values[1:])) for cv in curves)
            monotone &= all(all(h >= l for l, h in zip(lo.values, hi.values)) for lo, hi in zip(curves, curves[1:]))

    spec = nn.build_model("logreg")
    train = mnist[0]
    gd = analysis.gradient_distance_check(spec, nn.init_params(spec, 0), train.images[:32], train.labels[:32], 50)

    res = analysis.run_convergence_experiment(analysis.ConvergenceRecipe(), train)
    analysis.emit_report("criterion09", analysis.convergence_rows(res), {"recipe": analysis.ConvergenceRecipe()}, OUT,
                         analysis.convergence_plots(res), "run", {"f_star": res["f_star"]})
    dominated = all(r.dominated() for r in res["runs"])
    shapes = {(r.local_epochs, r.clients_per_round): analysis.plateau_check(r.gaps) for r in res["runs"]}
    plateau = all(s["ok"] for s in shapes.values())
    elapsed = time.perf_counter() - started
    ok = dual_ok and monotone and gd["holds"] and dominated and plateau and elapsed < 1200
    final = ", ".join(f"E{e}K{k} {r.gaps[-1]:.3f}<={r.bound.values[-1]:.2e}"
                      for (e, k), r in zip(shapes, res["runs"]))
    record(9, ok, f"dual Q/C rel diff {worst:.1e}; monotone grids {monotone}; gradient-distance bound {gd['holds']}; "
                  f"dominated {dominated}; plateau {plateau}; final gap<=bound {final}; {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 10. privacy/utility frontier
# ---------------------------------------------------------------------------


def test_criterion_10_tradeoff(mnist):
    started = time.perf_counter()
    train, test = mnist
    recipe = analysis.SweepRecipe()
    rows = analysis.tradeoff_sweep(recipe, train, test)
    dom = analysis.dominance(rows)
    out = analysis.emit_report("criterion10", rows, {"recipe": recipe}, OUT,
                               {"tradeoff.svg": analysis.tradeoff_plot(rows)}, "run", {"dominance": dom},
                               ["defense", "param", "label", "accuracy", "mse", "mse_samples"])
    written = analysis.read_csv(out / "results.csv")
    full = len(written) == len(defense.preset_configs(recipe.attack))
    elapsed = time.perf_counter() - started
    ok = full and dom["matched"] > 0 and dom["fraction"] >= 0.8 and elapsed < 7200
    record(10, ok, f"{len(written)} sweep rows; Soteria dominates {dom['dominated']}/{dom['matched']} matched "
                   f"baseline points ({dom['fraction']:.2f}, need >=0.80), {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 11. determinism
# ---------------------------------------------------------------------------

SMALL = {
    "partition": ["--devices", "5", "--set", "partition.samples_per_class=10"],
    "train": ["--model", "rep-cnn", "--devices", "6", "--clients", "3", "--rounds", "2", "--set",
              "partition.samples_per_class=10", "--defense", "soteria", "--p-fc", "40"],
    "infer-reps": ["--rounds", "2", "--devices", "6", "--clients", "3"],
    "attack": ["--model", "tiny-convfc", "--panel-size", "2", "--iterations", "20"],
    "certify": ["--panel-size", "2"],
    "sweep": ["--model", "logreg", "--devices", "4", "--clients", "2", "--rounds", "2", "--set", "panel=2",
              "--set", "attack_iterations=5"],
    "convergence": ["--devices", "10", "--rounds", "3", "--set", "local_epochs=[1, 2]", "--set",
                    "clients_per_round=[2, 3]"],
}
THREADED = ("train", "infer-reps", "sweep", "convergence")


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_11_determinism(tmp_path):
    mismatched = []
    for cmd, extra in SMALL.items():
        runs = {}
        # the replay reuses the first run's directory, since config.json records the output path
        for tag, threads, where in (("a", "1", "a"), ("b", "1", "a"), ("p", "2", "p")):
            if tag == "p" and cmd not in THREADED:
                continue
            out = tmp_path / where
            code = cli.run_command([cmd, *extra, "--seed", "7", "--threads", threads, "--out", str(out),
                                    "--timestamp", "t"])
            assert code == 0, cmd
            runs[tag] = _files(out / cmd / "t")
        if runs["a"] != runs["b"]:
            mismatched.append(f"{cmd} replay")
        if "p" in runs:
            # config.json differs in the thread count and path; every result file must match
            strip = lambda d: {k: v for k, v in d.items() if k != "config.json"}  # noqa: E731
            if strip(runs["a"]) != strip(runs["p"]):
                mismatched.append(f"{cmd} threads")
    ok = not mismatched
    record(11, ok, f"{len(SMALL)} commands replayed bit-exactly, {len(THREADED)} also with 2 threads"
               if ok else f"mismatch: {', '.join(mismatched)}")
    assert ok
