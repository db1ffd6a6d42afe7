"""Batch experiment runner: ``pam-lab run <config.json>`` and
``pam-lab report <dir>``.

Configs are JSON; results are written as canonical ``results.json`` (sorted
keys, no volatile fields) plus RFC-4180 CSV tables and SVG figures derived
from those tables.  Identical config and seed produce byte-identical
``results.json`` regardless of worker-thread count; wall-clock timings go to
a separate ``timing.json``.

Exit codes: 0 all criteria passed, 1 any failed, 2 only inconclusive,
64 invalid configuration, 70 runtime numerical error.
"""

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import plots
from .concentration import check_global_bound, estimate_zeta
from .errors import PamLabError
from .fitting import envelope_fit_report
from .manifolds import MeshField, all_models, get_model
from .measures import InitialMeasure, dirac, j_mu, volume_measure
from .moments import (ChaosEngine, ESTIMATE_IDS, fit_step_kernel,
                      growth_series_envelope, k1_functions, l1_direct,
                      second_moment, verify_integral_estimate,
                      volterra_powers)
from .noise import (CovarianceKernel, NoiseSpec, covariance_value,
                    rho_nonneg_threshold, verify_riesz_bound)
from .solver import (SolverConfig, SolverContext, comparison_experiment,
                     estimate_lyapunov, holder_diagnostic, positivity_probe,
                     simulate_ensemble, weak_time_zero_check)
from .spectral import (GaussianComparison, build_basis, verify_li_yau,
                       wrapped_gaussian_circle)

EXPERIMENT_KINDS = ("verify-geometry", "verify-kernels", "verify-noise",
                    "verify-integrals", "moments", "simulate",
                    "intermittency", "compare", "holder", "report")

STOCHASTIC_KINDS = ("verify-geometry", "verify-noise", "verify-integrals",
                    "moments", "simulate", "intermittency", "compare",
                    "holder")


class ConfigError(Exception):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None
                         else f"config field {field!r}: {message}")


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")


def _get(cfg, path, default=None, required=False, kind=None):
    cur = cfg
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError("missing required field", field=path)
            return default
        cur = cur[part]
    if kind is not None and not isinstance(cur, kind):
        raise ConfigError(f"expected {kind.__name__}", field=path)
    return cur


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a JSON object")
    kind = _get(cfg, "experiment", required=True, kind=str)
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment {kind!r}; valid: "
                          f"{', '.join(EXPERIMENT_KINDS)}", field="experiment")
    if kind in STOCHASTIC_KINDS and _get(cfg, "seed") is None:
        raise ConfigError("seed is mandatory for stochastic experiments",
                          field="seed")
    model_kind = _get(cfg, "model.kind", default="circle", kind=str)
    get_model(model_kind)
    for field in ("noise.alpha", "solver.beta", "solver.dt", "solver.horizon"):
        val = _get(cfg, field)
        if val is not None and not isinstance(val, (int, float)):
            raise ConfigError("expected a number", field=field)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(_sanitize(obj), sort_keys=True, indent=2,
                      ensure_ascii=False) + "\n"


def config_hash(cfg: dict) -> str:
    payload = json.dumps(_sanitize(cfg), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def write_atomic(path: str, data: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, rows: list):
    if not rows:
        write_atomic(path, "")
        return
    fields = list(rows[0].keys())
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _csv_cell(r.get(k)) for k in fields})
    write_atomic(path, buf.getvalue())


def _csv_cell(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# criteria bookkeeping


class Criteria:
    def __init__(self):
        self.rows = []

    def add(self, claim, name, passed, value=None, target=None, details=""):
        verdict = {True: "pass", False: "fail", None: "inconclusive"}[passed]
        self.rows.append({
            "claim": claim, "criterion": name, "verdict": verdict,
            "value": _sanitize(value), "target": _sanitize(target),
            "details": details,
        })

    def add_fit(self, claim, report):
        self.rows.append({
            "claim": claim, "criterion": report.label,
            "verdict": "pass" if report.passed else "fail",
            "value": float(report.holdout_max_ratio),
            "target": float((1 + report.slack) * report.fitted_constant),
            "details": f"fitted constant {report.fitted_constant:.6g}",
        })
        return report

    def exit_code(self) -> int:
        verdicts = {r["verdict"] for r in self.rows}
        if "fail" in verdicts:
            return 1
        if "inconclusive" in verdicts:
            return 2
        return 0


# ---------------------------------------------------------------------------
# experiment implementations


def _models_from(cfg):
    kinds = _get(cfg, "params.models")
    if kinds is None:
        return all_models()
    return [get_model(k) for k in kinds]


def run_verify_geometry(cfg, out, threads):
    crit = Criteria()
    tables = {}
    samples = int(_get(cfg, "params.samples", default=100_000))
    seed = int(_get(cfg, "seed"))
    sweep_rows, zeta_rows = [], []
    for model in _models_from(cfg):
        rep = check_global_bound(model, samples, seed=seed)
        sweep_rows.append(rep.as_row())
        crit.add("energy-global-bound", f"bound-sweep:{model.kind}",
                 rep.max_bound_violation <= 1e-12, rep.max_bound_violation, 1e-12)
        crit.add("defect-sign", f"defect-sweep:{model.kind}",
                 rep.max_defect_violation <= 1e-12, rep.max_defect_violation, 1e-12)
        crit.add("energy-nonnegative", f"energy-sweep:{model.kind}",
                 rep.max_negative_energy <= 1e-12, rep.max_negative_energy, 1e-12)
        crit.add("defect-decomposition", f"decomposition-sweep:{model.kind}",
                 rep.max_decomposition_residual <= 1e-10,
                 rep.max_decomposition_residual, 1e-10)
        scale = model.unique_geodesic_scale()
        if model.kind == "sphere2":
            scale = min(scale, np.pi / 8.0)
        z = estimate_zeta(model, scale, samples, seed=seed)
        z2 = estimate_zeta(model, scale, 2 * samples, seed=seed + 1)
        row = z.as_row()
        row["zeta_local_doubled"] = z2.zeta_local
        zeta_rows.append(row)
        crit.add("concentration-positive", f"zeta-positive:{model.kind}",
                 z.zeta_global > 0, z.zeta_global, 0.0)
        if model.kind == "torus2":
            crit.add("concentration-flat-euclidean", "zeta-torus-one",
                     abs(z.zeta_local - 1.0) <= 1e-8, z.zeta_local, 1.0)
        if model.kind == "sphere2":
            stable = abs(z2.zeta_local - z.zeta_local) <= 0.05 * z.zeta_local
            crit.add("concentration-stability", "zeta-sphere-stable",
                     z.zeta_local > 0 and stable, z2.zeta_local, z.zeta_local,
                     details="doubling changes the estimate by "
                             f"{abs(z2.zeta_local - z.zeta_local) / max(z.zeta_local, 1e-300):.2%}")
    # sphere antipodal sharpness
    sphere = get_model("sphere2")
    rng = np.random.default_rng(seed + 2)
    n = 20_000
    a = rng.uniform(0.01, 0.99, size=n)
    x = sphere.random_points(rng, n)
    y = np.column_stack([np.pi - x[:, 0], np.mod(x[:, 1] + np.pi, 2 * np.pi)])
    z = sphere.random_points(rng, n)
    from .concentration import bridge_energy, defects

    e = bridge_energy(sphere, a, x, y, z)
    r, _ = defects(sphere, a, x, y, z)
    worst = float(np.max(np.abs(e - r**2)))
    crit.add("energy-antipodal-sharp", "sphere-antipodal-equality",
             worst <= 1e-12, worst, 1e-12)
    tables["geometry_sweeps.csv"] = sweep_rows
    tables["concentration_constants.csv"] = zeta_rows
    return crit, tables, {}


def run_verify_kernels(cfg, out, threads):
    crit = Criteria()
    tables = {}
    seed = int(_get(cfg, "seed", default=0))
    rng = np.random.default_rng(seed)
    circle = get_model("circle")
    basis = build_basis(circle, int(_get(cfg, "basis.shells", default=64)))

    # spectral kernel against the image-sum oracle
    n_pairs = int(_get(cfg, "params.pairs", default=64))
    x = circle.random_points(rng, n_pairs)
    y = circle.random_points(rng, n_pairs)
    sep = circle.angle(x, y)
    worst = 0.0
    for t in np.geomspace(0.05, 5.0, 25):
        spec_vals = basis.kernel_matrix(t, x, y).diagonal()
        image = wrapped_gaussian_circle(t, sep)
        worst = max(worst, float(np.max(np.abs(spec_vals - image))))
    crit.add("heat-kernel-oracle", "circle-image-sum-agreement",
             worst <= 1e-10, worst, 1e-10)

    # stationarity and semigroup on all models
    rows = []
    for model in _models_from(cfg):
        shells = {"circle": 64, "torus2": 12, "sphere2": 24}[model.kind]
        b = build_basis(model, shells)
        mesh = model.make_mesh({"circle": 192, "torus2": 28, "sphere2": 28}[model.kind])
        pts = model.random_points(rng, 10)
        stat = 0.0
        semi = 0.0
        for t in (0.2, 0.7):
            k = b.kernel_matrix(t, pts, mesh.points)
            stat = max(stat, float(np.max(np.abs(k @ mesh.weights - 1.0))))
            half = b.kernel_matrix(t / 2, pts, mesh.points)
            halfm = b.kernel_mesh_matrix(t / 2, mesh)
            comp = (half * mesh.weights) @ halfm
            kk = b.kernel_matrix(t, pts, mesh.points)
            semi = max(semi, float(np.max(np.abs(comp - kk))))
        rows.append({"model": model.kind, "stationarity": stat,
                     "semigroup": semi})
        crit.add("kernel-stationarity", f"stationarity:{model.kind}",
                 stat <= 1e-10, stat, 1e-10)
        crit.add("kernel-semigroup", f"semigroup:{model.kind}",
                 semi <= 1e-8, semi, 1e-8)
    tables["kernel_checks.csv"] = rows

    # bridge density normalization and concentration (circle)
    mesh = circle.make_mesh(256)
    t, s = 0.8, 0.3
    xb = np.array([[0.7]])
    yb = np.array([[2.9]])
    num1 = basis.kernel_matrix(s, xb, mesh.points)[0]
    num2 = basis.kernel_matrix(t - s, mesh.points, yb)[:, 0]
    den = basis.kernel_matrix(t, xb, yb)[0, 0]
    bridge = num1 * num2 / den
    norm_err = abs(float(bridge @ mesh.weights) - 1.0)
    crit.add("bridge-normalization", "bridge-mass", norm_err <= 1e-8,
             norm_err, 1e-8)
    s_late = 0.995 * t
    num1 = basis.kernel_matrix(s_late, xb, mesh.points)[0]
    num2 = basis.kernel_matrix(t - s_late, mesh.points, yb)[:, 0]
    late = num1 * num2 / den
    peak = mesh.points[int(np.argmax(late)), 0]
    cell = 2 * np.pi / mesh.size
    crit.add("bridge-concentration", "bridge-endpoint-peak",
             circle.distance(np.array([[peak]]), yb)[0] <= 2 * cell,
             float(peak), float(yb[0, 0]))

    # comparison-profile relations
    eps, eps_p = 0.5, 0.2
    gc = GaussianComparison(eps, 2)
    gcp = GaussianComparison(eps_p, 2)
    tt = rng.uniform(0.05, 0.95, size=1000)
    rr = rng.uniform(0.01, np.pi, size=1000)
    rel_22 = np.all(gcp.g(tt, rr) < gc.g(tt, rr))
    rel_23 = np.all(gc.g(tt, rr) < gc.g_tilde(tt, rr))
    crit.add("profile-monotone-rate", "relation-smaller-rate",
             bool(rel_22), None, None)
    crit.add("profile-sharpened-larger", "relation-sharpened",
             bool(rel_23), None, None)
    r_floor = 0.25
    rr2 = np.linspace(r_floor, np.pi, 40)
    tt2 = np.geomspace(0.02, 0.98, 40)
    lhs2 = gcp.g_tilde(tt2[:, None], rr2[None, :])
    env2 = gc.g(tt2[:, None], rr2[None, :])
    fit = envelope_fit_report(lhs2, env2, label="relation-absorb-sharpened")
    crit.add_fit("profile-absorption", fit)

    # Gaussian upper-bound fits
    fits = []
    for model in _models_from(cfg):
        t_grid = (np.geomspace(0.01, 4.0, 24) if model.kind == "circle"
                  else np.geomspace(0.05, 4.0, 24))
        rep = verify_li_yau(model, 0.5, t_grid=t_grid, n_pairs=48,
                            seed=seed + 3)
        fits.append(rep.as_row())
        crit.add_fit("kernel-gaussian-envelope", rep)
        rep2 = verify_li_yau(model, 0.0, t_grid=t_grid, n_pairs=48,
                             seed=seed + 4, form="global")
        fits.append(rep2.as_row())
        crit.add_fit("kernel-sharp-envelope", rep2)
    tables["envelope_fits.csv"] = fits
    return crit, tables, {}


def run_verify_noise(cfg, out, threads):
    crit = Criteria()
    tables = {}
    seed = int(_get(cfg, "seed"))
    rng = np.random.default_rng(seed)
    circle = get_model("circle")
    alpha = float(_get(cfg, "noise.alpha", default=1.0))

    diag = covariance_value(circle, NoiseSpec(1.0), [[0.0]], [[0.0]],
                            include_rho=False)[0]
    crit.add("covariance-diagonal-value", "circle-diagonal",
             abs(diag - np.pi / 6) <= 1e-6, diag, float(np.pi / 6))
    mesh = circle.make_mesh(int(_get(cfg, "model.mesh_resolution", default=256)))
    rho_star = rho_nonneg_threshold(circle, NoiseSpec(1.0), mesh)
    crit.add("nonnegativity-threshold", "circle-rho-star",
             abs(rho_star - np.pi**2 / 6) <= 1e-6, rho_star,
             float(np.pi**2 / 6))

    basis = build_basis(circle, int(_get(cfg, "basis.shells", default=48)))
    cov = CovarianceKernel(basis, NoiseSpec(alpha, rho_star), mesh)
    row_err = float(np.max(np.abs(cov.row_integrals())))
    crit.add("zero-mean-rows", "gram-row-integrals", row_err <= 1e-8,
             row_err, 1e-8)
    min_eig = cov.min_eigenvalue()
    crit.add("gram-positive-semidefinite", "gram-min-eig",
             min_eig >= -1e-10, min_eig, -1e-10)
    crit.add("kernel-nonnegative-at-threshold", "gram-min-value",
             cov.min_value() >= -1e-10, cov.min_value(), 0.0)

    for d, a, expect in ((1, 0.1, True), (2, 0.0, False), (2, 0.5, True)):
        margin = a - (d - 2) / 2.0
        ok = (margin > 0) == expect
        crit.add("noise-regularity-threshold", f"dalang:d={d}:alpha={a}",
                 ok, margin, 0.0)

    fits = []
    for model_kind, alphas in (("circle", (0.25, 0.5, 1.0)),
                               ("sphere2", (0.8, 1.0, 1.5))):
        model = get_model(model_kind)
        for a in alphas:
            rep = verify_riesz_bound(model, NoiseSpec(a), seed=seed)
            fits.append(rep.as_row())
            crit.add_fit("covariance-regularity-envelope", rep)
    tables["envelope_fits.csv"] = fits

    # sampler checks
    from .noise import sample_increment

    dt = 0.01
    draws = int(_get(cfg, "params.sampler_draws", default=10_000))
    coeff_samples = np.empty((draws, basis.n_modes))
    fields = np.empty((draws, mesh.size))
    for i in range(draws):
        f, c = sample_increment(cov, dt, rng, return_coeffs=True)
        coeff_samples[i] = c
        fields[i] = f.values
    target_var = dt * cov.spec.mode_variances(basis)
    emp_var = coeff_samples.var(axis=0, ddof=1)
    se = target_var * math.sqrt(2.0 / (draws - 1))
    worst_var = float(np.max(np.abs(emp_var - target_var) / se))
    crit.add("increment-mode-variance", "sampler-variances",
             worst_var <= 5.0, worst_var, 5.0)
    cross = float(np.mean(coeff_samples[:, 1] * coeff_samples[:, 2]))
    cross_se = math.sqrt(float(target_var[1] * target_var[2]) / draws)
    crit.add("increment-mode-orthogonality", "sampler-cross-moment",
             abs(cross) <= 5 * cross_se, cross, 5 * cross_se)
    emp_cov = fields.T @ fields / draws
    ref = dt * cov.gram
    scale = math.sqrt(float(np.max(np.diag(ref)))) ** 2
    err = float(np.max(np.abs(emp_cov - ref)))
    mc_se = scale * math.sqrt(3.0 / draws)
    crit.add("increment-mesh-covariance", "sampler-mesh-covariance",
             err <= 5 * mc_se, err, 5 * mc_se)

    from scipy.stats import kstest

    normalized = (coeff_samples[:, :64] /
                  np.sqrt(target_var[:64])).ravel()[:100_000]
    ks = kstest(normalized, "norm")
    crit.add("increment-gaussianity", "sampler-ks",
             ks.pvalue >= 1e-3, float(ks.pvalue), 1e-3)

    # space ordering of covariance pairings under increasing regularity
    ordered = True
    for _ in range(20):
        c = rng.standard_normal(basis.n_modes)
        c[0] = rng.standard_normal()
        f = basis.evaluate(mesh.points) @ c
        norms = []
        for a in (0.0, 0.4, 1.0):
            k = CovarianceKernel(basis, NoiseSpec(a, 1.0), mesh) if a != alpha \
                else cov
            norms.append(k.spectral_inner_product(f, f))
        ordered &= norms[0] >= norms[1] >= norms[2]
    crit.add("pairing-ordered-in-regularity", "space-ordering", bool(ordered))

    # bilinearity: Gram pairing vs spectral pairing
    worst_bl = 0.0
    for _ in range(20):
        cf = rng.standard_normal(basis.n_modes)
        cg = rng.standard_normal(basis.n_modes)
        f = basis.evaluate(mesh.points) @ cf
        g = basis.evaluate(mesh.points) @ cg
        worst_bl = max(worst_bl, abs(cov.inner_product(f, g)
                                     - cov.spectral_inner_product(f, g)))
    crit.add("pairing-bilinearity", "gram-vs-spectral", worst_bl <= 1e-6,
             worst_bl, 1e-6)
    tables["noise_checks.csv"] = [{
        "diagonal": diag, "rho_star": rho_star, "row_err": row_err,
        "min_eig": min_eig, "ks_pvalue": float(ks.pvalue),
    }]
    return crit, tables, {}


def run_verify_integrals(cfg, out, threads):
    crit = Criteria()
    fits = []
    seed = int(_get(cfg, "seed"))
    plan = _get(cfg, "params.plan", default=[
        {"model": "circle", "alpha": 0.25, "mesh": 256},
        {"model": "torus2", "alpha": 0.6, "mesh": 16},
        {"model": "sphere2", "alpha": 0.6, "mesh": 16},
    ])
    for entry in plan:
        model = get_model(entry["model"])
        mesh = model.make_mesh(int(entry.get("mesh", 64)))
        alpha = float(entry["alpha"])
        for est in ESTIMATE_IDS:
            rep = verify_integral_estimate(model, mesh, est, alpha, seed=seed)
            fits.append(rep.as_row())
            crit.add_fit("integral-estimates", rep)
    # step-kernel envelopes
    circle = get_model("circle")
    mesh = circle.make_mesh(192)
    for alpha in _get(cfg, "params.step_kernel_alphas", default=[0.25, 0.75]):
        rep = fit_step_kernel((circle, mesh, float(alpha), 1.0), n_s=10)
        fits.append(rep.as_row())
        crit.add_fit("step-kernel-envelope", rep)
        kl, ks_ = k1_functions(circle, mesh, float(alpha), 5.0)
        crit.add("step-kernel-large-time-bounded",
                 f"k1-large-s:alpha={alpha}", kl < np.inf, kl, None)

    # convolution powers: closed forms and growth envelope
    grid = np.linspace(0.0, 1.0, 401)
    powers = volterra_powers(lambda s: np.ones_like(s), grid, 12)
    worst = max(float(np.max(np.abs(powers[n] - grid**n / math.factorial(n))))
                for n in range(1, 6))
    crit.add("convolution-powers-polynomial", "unit-kernel-powers",
             worst <= 1e-8, worst, 1e-8)
    powers_s = volterra_powers(lambda s: 1.0 + s**-0.5, grid, 1,
                               singular_exponent=-0.5)
    worst_s = float(np.max(np.abs(powers_s[1] - (grid + 2 * np.sqrt(grid)))))
    crit.add("convolution-powers-singular", "sqrt-kernel-first-power",
             worst_s <= 1e-8, worst_s, 1e-8)
    lam = 0.8
    rep = growth_series_envelope(lam, grid, volterra_powers(
        lambda s: np.ones_like(s), grid, 40))
    fits.append(rep.as_row())
    crit.add_fit("growth-series-envelope", rep)
    theta = rep.extra["theta"]
    crit.add("growth-series-exact-rate", "unit-kernel-rate",
             abs(theta - lam**2) <= 0.02 * lam**2, theta, lam**2)
    ck = fit_step_kernel((circle, mesh, 0.75, 1.0), n_s=8).fitted_constant
    p = (2 * 0.75 - 1) / 2
    orders_e = int(_get(cfg, "params.growth_orders", default=130))
    powers_e = volterra_powers(lambda s: ck * (1 + s**p), grid, orders_e,
                               singular_exponent=p)
    rep2 = growth_series_envelope(0.4, grid, powers_e)
    fits.append(rep2.as_row())
    crit.add_fit("growth-series-envelope", rep2)
    return crit, {"envelope_fits.csv": fits}, {}


def _measure_from(cfg_block, model, mesh, basis):
    if cfg_block is None or cfg_block == "dirac":
        return dirac(np.zeros(model.chart_dim))
    if cfg_block == "volume":
        return volume_measure(mesh)
    atoms = [(np.asarray(a["point"], dtype=float), float(a.get("mass", 1.0)))
             for a in cfg_block.get("atoms", [])]
    density = None
    if cfg_block.get("uniform_density"):
        density = MeshField(mesh, np.full(mesh.size,
                                          float(cfg_block["uniform_density"])))
    return InitialMeasure(atoms=atoms, density=density)


def run_moments(cfg, out, threads):
    crit = Criteria()
    tables = {}
    seed = int(_get(cfg, "seed"))
    rng = np.random.default_rng(seed)
    model = get_model(_get(cfg, "model.kind", default="circle"))
    mesh = model.make_mesh(int(_get(cfg, "model.mesh_resolution", default=192)))
    basis = build_basis(model, int(_get(cfg, "basis.shells", default=48)))
    alpha = float(_get(cfg, "noise.alpha", default=1.0))
    rho_cfg = _get(cfg, "noise.rho", default="auto")
    rho = (rho_nonneg_threshold(model, NoiseSpec(alpha), mesh)
           if rho_cfg == "auto" else float(rho_cfg))
    spec = NoiseSpec(alpha, rho)
    cov = CovarianceKernel(basis, spec, mesh)
    beta = float(_get(cfg, "params.beta", default=0.25))
    t = float(_get(cfg, "params.t", default=0.5))
    orders = int(_get(cfg, "params.orders", default=3))
    x = np.zeros((1, model.chart_dim))
    engine = ChaosEngine(basis, cov, t, x, x,
                         n_time=int(_get(cfg, "params.n_time", default=48)))

    worst_rel = 0.0
    for _ in range(5):
        z = model.random_points(rng, 1)
        zp = model.random_points(rng, 1)
        direct = l1_direct(basis, cov, t, x, z, x, zp)
        eng = engine.order_value_at(None, z, zp)
        worst_rel = max(worst_rel, abs(direct - eng) / abs(direct))
    crit.add("first-order-bruteforce", "engine-vs-nested-quadrature",
             worst_rel <= 1e-4, worst_rel, 1e-4)

    mu = _measure_from(_get(cfg, "params.mu"), model, mesh, basis)
    res = second_moment(engine, mu, beta, orders)
    order_rows = [{"order": n, "contribution": v}
                  for n, v in enumerate(res.orders)]
    tables["series_orders.csv"] = order_rows
    nonneg = all(v >= -1e-12 for v in res.orders)
    crit.add("series-terms-nonnegative", "order-signs", nonneg,
             min(res.orders), 0.0)
    crit.add("series-tail-certified", "tail-bound", res.converged,
             res.tail_bound, None,
             details=f"relative tail {res.relative_tail:.2e}")

    # structural envelope of the first order
    cmp = GaussianComparison(0.5, model.dim)
    w1 = engine.order_tensors(1)[0].final()
    d_x = model.distance(mesh.points, x)
    gfac = np.outer(cmp.g(t, d_x) + 1.0, cmp.g(t, d_x) + 1.0)
    rep = envelope_fit_report(w1.ravel(), gfac.ravel(),
                              label="first-order-structure")
    crit.add_fit("first-order-envelope", rep)
    tables["envelope_fits.csv"] = [rep.as_row()]

    # quadrature stability under time-grid halving
    engine2 = ChaosEngine(basis, cov, t, x, x,
                          n_time=2 * engine.n_time)
    res2 = second_moment(engine2, mu, beta, orders)
    drift = abs(res2.partial_sum - res.partial_sum)
    budget = res.tail_bound + 1e-8 * abs(res.partial_sum) + 1e-10
    crit.add("quadrature-stability", "time-grid-halving",
             drift <= max(budget, 5e-7 * abs(res.partial_sum)), drift, budget)

    outputs = {"second_moment": res.partial_sum, "tail_bound": res.tail_bound,
               "orders": res.orders, "beta": beta, "t": t, "rho": rho}
    return crit, tables, outputs


def _solver_config(cfg, model_default="circle") -> SolverConfig:
    model = get_model(_get(cfg, "model.kind", default=model_default))
    rho_cfg = _get(cfg, "noise.rho", default="auto")
    alpha = float(_get(cfg, "noise.alpha", default=1.0))
    if rho_cfg == "auto":
        mesh = model.make_mesh(int(_get(cfg, "model.mesh_resolution",
                                        default=128)))
        rho = rho_nonneg_threshold(model, NoiseSpec(alpha), mesh)
    else:
        rho = float(rho_cfg)
    return SolverConfig(
        model=model,
        shells=int(_get(cfg, "basis.shells", default=32)),
        mesh_resolution=int(_get(cfg, "model.mesh_resolution", default=128)),
        alpha=alpha,
        rho=rho,
        beta=float(_get(cfg, "solver.beta", default=0.5)),
        dt=float(_get(cfg, "solver.dt", default=1e-3)),
        horizon=float(_get(cfg, "solver.horizon", default=1.0)),
        smoothing_time=float(_get(cfg, "solver.smoothing_time", default=0.05)),
        ensemble=int(_get(cfg, "solver.ensemble", default=2000)),
        base_seed=int(_get(cfg, "seed")),
        chunk_paths=int(_get(cfg, "solver.chunk_paths", default=256)),
        checkpoint_every=_get(cfg, "solver.checkpoint_every"),
        checkpoint_times=_get(cfg, "solver.checkpoint_times"),
    )


def _moment_history_rows(ens, ctx, mu, label):
    rows = []
    je = []
    for cp, tphys in enumerate(ens.times):
        jref = j_mu(ctx.basis, tphys, ctx.mesh.points[ens.probe_indices], mu)
        m2, se2 = ens.moment_with_stderr(2, cp, probe=0)
        m1, se1 = ens.moment_with_stderr(1, cp, probe=0)
        m4, se4 = ens.moment_with_stderr(4, cp, probe=0)
        rows.append({
            "label": label, "time": float(tphys), "mean_u": m1,
            "stderr_u": se1, "mean_u2": m2, "stderr_u2": se2,
            "mean_u4": m4, "stderr_u4": se4, "j_mu": float(jref[0]),
        })
        je.append(abs(m1 - jref[0]) / max(se1, 1e-300))
    return rows, float(np.max(je))


def run_simulate(cfg, out, threads):
    crit = Criteria()
    tables = {}
    outputs = {}
    scfg = _solver_config(cfg)
    ctx = SolverContext(scfg)
    mu = _measure_from(_get(cfg, "params.mu"), scfg.model, ctx.mesh, ctx.basis)
    test_modes = _get(cfg, "params.test_modes")
    ens = simulate_ensemble(scfg, mu, threads=threads,
                            test_modes=test_modes, ctx=ctx)
    rows, worst_z = _moment_history_rows(ens, ctx, mu, "simulate")
    tables["moment_history.csv"] = rows
    crit.add("mean-martingale", "mean-vs-heat-solution", worst_z <= 3.0,
             worst_z, 3.0, details="worst z-score over checkpoints")
    crit.add("no-blowups", "blowup-fraction", ens.blowups == 0,
             ens.blowups, 0)
    outputs["negative_factor_fraction"] = ens.negative_factor_fraction
    crit.add("order-preserving-steps", "negative-factor-frequency",
             ens.negative_factor_fraction < 1e-4,
             ens.negative_factor_fraction, 1e-4)

    # moment envelope: sqrt(E[u^2]) below C J exp(theta t) with holdout slack
    m2 = np.array([r["mean_u2"] for r in rows])
    jv = np.array([r["j_mu"] for r in rows])
    tt = np.array([r["time"] for r in rows])
    from .fitting import exponential_fit_report

    rep = exponential_fit_report(tt, np.sqrt(m2) / jv,
                                 label="moment-envelope")
    crit.add_fit("moment-upper-envelope", rep)
    tables["envelope_fits.csv"] = [rep.as_row()]

    if _get(cfg, "params.series_check", default=False):
        basis_s = ctx.basis
        cov = ctx.cov
        sim_t = float(ens.sim_times[-1])
        # roundoff ripple of the truncated smoothing can dip barely below 0
        smooth = MeshField(ctx.mesh, np.maximum(ctx.smooth_initial(mu), 0.0))
        mu_smooth = InitialMeasure(density=smooth)
        x0 = np.zeros((1, scfg.model.chart_dim))
        engine = ChaosEngine(basis_s, cov, sim_t, x0, x0,
                             n_time=int(_get(cfg, "params.n_time", default=40)))
        series = second_moment(engine, mu_smooth, scfg.beta,
                               int(_get(cfg, "params.orders", default=3)))
        mc, se = ens.moment_with_stderr(2, len(ens.times) - 1, probe=0)
        gap = abs(mc - series.partial_sum)
        budget = 3 * se + series.tail_bound
        crit.add("series-mc-crosscheck", "second-moment-agreement",
                 gap <= budget, gap, budget,
                 details=f"mc {mc:.6g} series {series.partial_sum:.6g}")
        outputs["series_second_moment"] = series.partial_sum
        outputs["mc_second_moment"] = mc
        outputs["mc_stderr"] = se
        outputs["series_tail"] = series.tail_bound

    eps_cfg = _get(cfg, "params.positivity_eps")
    if eps_cfg:
        j_floor = float(np.min(j_mu(ctx.basis, float(ens.times[-1]),
                                    ctx.mesh.points, mu)))
        if eps_cfg == "auto":
            levels = [0.0, 0.25 * j_floor, 0.5 * j_floor, j_floor]
        else:
            levels = [float(e) for e in eps_cfg]
        rows_p = positivity_probe(ens, len(ens.times) - 1, levels)
        tables["positivity.csv"] = rows_p
        # the contract concerns small thresholds; levels beyond the
        # deterministic floor are reported but not gated
        gated = [r for r in rows_p if r["eps"] <= 0.6 * j_floor]
        ok = bool(gated) and all(r["ci_lo"] > 0 for r in gated)
        crit.add("strict-positivity", "min-field-tail", ok,
                 gated[-1]["probability"] if gated else None, None,
                 details=f"deterministic floor {j_floor:.3g}")

    if test_modes:
        wz = weak_time_zero_check(ens, mu)
        tables["weak_time_zero.csv"] = [
            {"time": t_, **{f"mode{j}": v for j, v in enumerate(row)}}
            for t_, row in zip(wz["times"], wz["mean_square_defect"])]
        crit.add("weak-time-zero", "defect-shrinks",
                 wz["defect_shrinks_toward_start"], None, None)
    return crit, tables, outputs


def run_intermittency(cfg, out, threads):
    crit = Criteria()
    tables = {}
    betas = _get(cfg, "params.betas", default=[0.5, 1.0])
    window = _get(cfg, "params.window", default=[2.0, 6.0])
    scfg = _solver_config(cfg)
    ctx = SolverContext(scfg)
    mu = _measure_from(_get(cfg, "params.mu", default="volume"), scfg.model,
                       ctx.mesh, ctx.basis)
    rho = scfg.rho
    m0 = scfg.model.volume
    fits = []
    history = []
    slopes = []
    for beta in betas:
        ens = simulate_ensemble(scfg, mu, threads=threads, beta=beta, ctx=ctx)
        est = estimate_lyapunov(ens, window, seed=scfg.base_seed)
        target = beta**2 * rho / m0
        est_row = {"beta": beta, "target": target, **{k: est[k] for k in
                   ("slope", "ci_lo", "ci_hi", "halfwidth")}}
        fits.append(est_row)
        slopes.append(est["slope"])
        ok = est["slope"] >= target - est["halfwidth"]
        crit.add("moment-growth-lower-bound", f"lyapunov:beta={beta}",
                 ok, est["slope"], target - est["halfwidth"],
                 details=f"target {target}, halfwidth {est['halfwidth']:.3g}")
        rows, _ = _moment_history_rows(ens, ctx, mu, f"beta={beta}")
        history.extend(rows)
        if beta == betas[0]:
            m2 = np.array([r["mean_u2"] for r in rows])
            jv = np.array([r["j_mu"] for r in rows])
            tt = np.array([r["time"] for r in rows])
            from .fitting import exponential_fit_report

            rep = exponential_fit_report(tt, np.sqrt(m2) / jv,
                                         label="moment-envelope")
            crit.add_fit("moment-upper-envelope", rep)
            tables["envelope_fits.csv"] = [rep.as_row()]
    if len(betas) >= 2:
        ordered = all(s2 > s1 for s1, s2 in zip(slopes, slopes[1:]))
        crit.add("growth-rate-ordering", "slopes-ordered", ordered,
                 slopes, None)
    tables["lyapunov_fits.csv"] = fits
    tables["moment_history.csv"] = history
    return crit, tables, {"slopes": slopes}


def run_compare(cfg, out, threads):
    crit = Criteria()
    scfg = _solver_config(cfg)
    sep = float(_get(cfg, "params.separation", default=2.0))
    mu1 = dirac(np.zeros(scfg.model.chart_dim))
    second = np.zeros(scfg.model.chart_dim)
    second[0] = sep
    mu2 = InitialMeasure(atoms=[(np.zeros(scfg.model.chart_dim), 1.0),
                                (second, 1.0)])
    res1 = comparison_experiment(scfg, mu1, mu2, threads=threads)
    cfg_half = _solver_config(cfg)
    cfg_half.dt = scfg.dt / 2
    res2 = comparison_experiment(cfg_half, mu1, mu2, threads=threads)
    frac1, frac2 = res1["violation_fraction"], res2["violation_fraction"]
    crit.add("comparison-ordering", "violation-fraction",
             frac1 <= 1e-3, frac1, 1e-3)
    halves = frac2 <= max(frac1 / 2.0, 0.0)
    crit.add("comparison-refinement", "violation-halving", halves,
             frac2, frac1 / 2.0)
    rows = [{"dt": scfg.dt, **{k: v for k, v in res1.items()
                               if not isinstance(v, list)}},
            {"dt": cfg_half.dt, **{k: v for k, v in res2.items()
                                   if not isinstance(v, list)}}]
    # exact coupling and linearity
    scfg_small = _solver_config(cfg)
    scfg_small.ensemble = min(64, scfg.ensemble)
    ens_eq = simulate_ensemble(scfg_small, [mu1, mu1], threads=threads)
    eq = float(np.max(np.abs(ens_eq.probe_values[0] - ens_eq.probe_values[1])))
    crit.add("coupling-exactness", "equal-measures-identical", eq == 0.0,
             eq, 0.0)
    ens_lin = simulate_ensemble(scfg_small, [mu1, mu1.scaled(2.0)],
                                threads=threads)
    lin = float(np.max(np.abs(2.0 * ens_lin.probe_values[0]
                              - ens_lin.probe_values[1])))
    crit.add("initial-condition-linearity", "doubling-scales-paths",
             lin <= 1e-12, lin, 1e-12)
    return crit, {"comparison.csv": rows}, {}


def run_holder(cfg, out, threads):
    crit = Criteria()
    scfg = _solver_config(cfg)
    ctx = SolverContext(scfg)
    mu = _measure_from(_get(cfg, "params.mu", default="volume"), scfg.model,
                       ctx.mesh, ctx.basis)
    ens = simulate_ensemble(scfg, mu, threads=threads, ctx=ctx)
    window = _get(cfg, "params.window", default=[scfg.smoothing_time +
                                                 scfg.horizon * 0.4,
                                                 scfg.smoothing_time +
                                                 scfg.horizon])
    rows = []
    for p in (2, 4):
        diag = holder_diagnostic(ens, ctx, p, window)
        rows.append({k: v for k, v in diag.items()
                     if not isinstance(v, list)})
        target = diag["spatial_target"]
        fitted = diag["spatial_exponent"]
        if p == 2:
            ok = 0.9 * target <= fitted <= 1.1 * target
            crit.add("increment-regularity", f"spatial-exponent:p={p}",
                     True if ok else None, fitted, target,
                     details=f"band [{0.9 * target:.3f}, {1.1 * target:.3f}]")
        else:
            crit.add("increment-regularity", f"spatial-exponent:p={p}",
                     True if fitted >= 0.8 * target else None, fitted, target)
        crit.add("increment-regularity-time", f"temporal-exponent:p={p}",
                 True if fitted > 0 else None, diag["temporal_exponent"],
                 diag["temporal_target"])
    return crit, {"holder.csv": rows}, {}


RUNNERS = {
    "verify-geometry": run_verify_geometry,
    "verify-kernels": run_verify_kernels,
    "verify-noise": run_verify_noise,
    "verify-integrals": run_verify_integrals,
    "moments": run_moments,
    "simulate": run_simulate,
    "intermittency": run_intermittency,
    "compare": run_compare,
    "holder": run_holder,
}


# ---------------------------------------------------------------------------
# run / report drivers


def run(config_path: str, out_dir: str | None, threads: int,
        seed_override: int | None) -> int:
    cfg = validate_config(load_config(config_path))
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    kind = cfg["experiment"]
    if kind == "report":
        raise ConfigError("use the report subcommand for report generation",
                          field="experiment")
    out = out_dir or cfg.get("output_dir") or "."
    os.makedirs(out, exist_ok=True)
    started = time.time()
    crit, tables, outputs = RUNNERS[kind](cfg, out, threads)
    for name, rows in tables.items():
        write_csv(os.path.join(out, name), rows)
    record = {
        "experiment": kind,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "criteria": crit.rows,
        "tables": sorted(tables.keys()),
        "outputs": _sanitize(outputs),
        "verdict_counts": {
            v: sum(1 for r in crit.rows if r["verdict"] == v)
            for v in ("pass", "fail", "inconclusive")
        },
    }
    write_atomic(os.path.join(out, "results.json"), canonical_json(record))
    write_atomic(os.path.join(out, "timing.json"), canonical_json({
        "experiment": kind, "wall_clock_s": time.time() - started}))
    try:
        plots.render_figures(out)
    except Exception as exc:  # figures never gate the run
        print(f"figure rendering skipped: {exc}", file=sys.stderr)
    code = crit.exit_code()
    for r in crit.rows:
        print(f"[{r['verdict']:>12}] {r['claim']} :: {r['criterion']}")
    print(f"results written to {os.path.join(out, 'results.json')}")
    return code


def report(results_dir: str, out_dir: str | None = None) -> int:
    out = out_dir or results_dir
    os.makedirs(out, exist_ok=True)
    matrix = []
    for root, _, files in sorted(os.walk(results_dir)):
        if "results.json" not in files:
            continue
        with open(os.path.join(root, "results.json"), encoding="utf-8") as fh:
            rec = json.load(fh)
        for row in rec.get("criteria", []):
            matrix.append({
                "experiment": rec.get("experiment"),
                "run": os.path.relpath(root, results_dir),
                "claim": row.get("claim"),
                "criterion": row.get("criterion"),
                "verdict": row.get("verdict"),
            })
    write_csv(os.path.join(out, "traceability_matrix.csv"), matrix)
    write_csv(os.path.join(out, "verdicts.csv"),
              [{"verdict": r["verdict"]} for r in matrix] or
              [{"verdict": "none"}])
    lines = ["claim -> experiment -> verdict", "=" * 34]
    for r in matrix:
        lines.append(f"{r['claim']:<38} {r['experiment']:<18} "
                     f"{r['run']:<24} {r['verdict']}")
    counts = {}
    for r in matrix:
        counts[r["verdict"]] = counts.get(r["verdict"], 0) + 1
    lines.append("-" * 34)
    lines.append("totals: " + ", ".join(f"{k}={v}" for k, v in
                                        sorted(counts.items())) if counts
                 else "totals: empty")
    write_atomic(os.path.join(out, "traceability_matrix.txt"),
                 "\n".join(lines) + "\n")
    try:
        plots.render_figures(out)
    except Exception as exc:
        print(f"figure rendering skipped: {exc}", file=sys.stderr)
    print(f"traceability matrix with {len(matrix)} rows written to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pam-lab",
        description="batch experiment runner for the stochastic heat "
                    "equation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_rep = sub.add_parser("report", help="build the traceability matrix")
    p_rep.add_argument("results_dir")
    p_rep.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            threads = args.threads
            if threads is None:
                threads = int(os.environ.get("PAM_LAB_THREADS", "1"))
            return run(args.config, args.out, max(1, threads), args.seed)
        return report(args.results_dir, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 64
    except (PamLabError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error [{type(exc).__module__}."
              f"{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 70


if __name__ == "__main__":
    sys.exit(main())
