"""Monte Carlo solver for the mild multiplicative stochastic heat equation.

Scheme: exponential Euler on the truncated eigenbasis,

    u_{k+1} = S_dt[ u_k (1 + beta dW_k) ],

with the exact truncated semigroup ``S_dt`` applied through basis projection
and left-endpoint (Ito) evaluation of the multiplicative factor.  Measure
initial data enters through its heat smoothing at a positive start time, and
reported times are shifted by that smoothing offset.

Reproducibility: every path owns a counter-based Philox stream keyed by
``(base_seed, path_index)`` and consumes it in a fixed order; paths are
processed in fixed-size chunks whose partial sums are combined in chunk
order, so results are byte-identical for any worker-thread count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .manifolds import ManifoldModel, MeshField, get_model
from .measures import InitialMeasure, j_mu, j_mu_field
from .noise import CovarianceKernel, NoiseSpec
from .spectral import SpectralBasis, build_basis


@dataclass
class SolverConfig:
    """Discretization and ensemble parameters for one simulation campaign."""

    model: ManifoldModel
    shells: int
    mesh_resolution: int
    alpha: float
    rho: float
    beta: float
    dt: float
    horizon: float
    smoothing_time: float
    ensemble: int
    base_seed: int
    chunk_paths: int = 256
    checkpoint_every: float | None = None
    checkpoint_times: list | None = None
    time_block: int = 64

    def __post_init__(self):
        if isinstance(self.model, str):
            self.model = get_model(self.model)
        margin = NoiseSpec(self.alpha, self.rho).dalang_margin(self.model)
        if margin <= 0:
            raise InvalidInputError(
                f"noise regularity below the well-posedness threshold "
                f"(margin {margin:.3f})")
        if self.dt <= 0 or self.horizon <= 0:
            raise InvalidInputError("dt and horizon must be positive")
        if self.smoothing_time < self.dt:
            raise InvalidInputError("smoothing time must be at least dt")
        if self.ensemble < 1:
            raise InvalidInputError("ensemble size must be positive")

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.alpha, self.rho)

    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def checkpoint_steps(self) -> np.ndarray:
        n = self.n_steps()
        if self.checkpoint_times is not None:
            steps = sorted({int(round(t / self.dt)) for t in self.checkpoint_times})
            steps = [s for s in steps if 1 <= s <= n]
        else:
            every = self.checkpoint_every or self.horizon / 8.0
            stride = max(1, int(round(every / self.dt)))
            steps = list(range(stride, n + 1, stride))
        if not steps or steps[-1] != n:
            steps = list(steps) + [n]
        return np.asarray(steps, dtype=int)


class SolverContext:
    """Shared discrete objects: basis, mesh, projection matrices, noise."""

    def __init__(self, config: SolverConfig):
        self.config = config
        self.model = config.model
        self.basis = build_basis(self.model, config.shells)
        self.mesh = self.model.make_mesh(config.mesh_resolution)
        self.cov = CovarianceKernel(self.basis, config.noise_spec, self.mesh)
        self.phi = self.cov.phi                        # (m, K)
        self.phi_weighted = self.phi * self.mesh.weights[:, None]
        self.semigroup = np.exp(-self.basis.eigenvalues * config.dt / 2.0)
        self.noise_scale = self.cov.mode_std * math.sqrt(config.dt)

    def smooth_initial(self, mu: InitialMeasure) -> np.ndarray:
        return j_mu(self.basis, self.config.smoothing_time, self.mesh.points, mu)

    def heat_apply(self, values: np.ndarray, t: float) -> np.ndarray:
        """Exact truncated heat flow over time ``t`` for mesh fields
        (rows are independent fields)."""
        coeff = values @ self.phi_weighted
        coeff = coeff * np.exp(-self.basis.eigenvalues * t / 2.0)
        return coeff @ self.phi.T


def init_state(ctx: SolverContext, mu: InitialMeasure) -> MeshField:
    """Heat-smoothed initial state ``J_mu(t0, .)`` on the mesh."""
    if mu.total_mass <= 0:
        raise InvalidInputError("positivity experiments need positive mass")
    return MeshField(ctx.mesh, ctx.smooth_initial(mu))


def step(ctx: SolverContext, state: MeshField, increment: MeshField,
         beta: float | None = None) -> MeshField:
    """One exponential-Euler step ``S_dt[u (1 + beta dW)]`` for a single
    field; the batched ensemble loop repeats exactly this arithmetic."""
    beta = ctx.config.beta if beta is None else beta
    factor = 1.0 + beta * increment.values
    out = ctx.heat_apply((state.values * factor)[None, :], ctx.config.dt)[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("solution blew up in one step")
    return MeshField(ctx.mesh, out)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class PathEnsemble:
    """Streaming moment accumulators and per-path checkpoint extracts."""

    config: SolverConfig
    checkpoint_steps: np.ndarray
    probe_indices: np.ndarray
    pair_indices: np.ndarray            # (npairs, 2) mesh index pairs
    n_fields: int
    sum_u: np.ndarray                   # (n_fields, ncp, m)
    sum_u2: np.ndarray
    sum_u4: np.ndarray
    probe_values: np.ndarray            # (n_fields, paths, ncp, nprobes)
    min_values: np.ndarray              # (n_fields, paths, ncp)
    pair_moments: np.ndarray            # (n_fields, ncp, npairs, 2) for p=2,4
    test_defect_sq: np.ndarray | None   # (ncp, nmodes) running sum over paths
    valid_paths: np.ndarray             # (ncp,)
    blowups: int
    negative_factor_fraction: float
    violation_counts: np.ndarray | None  # (ncp,) count of u1 > u2 + tol
    violation_cells: int
    min_gap: float

    @property
    def sim_times(self) -> np.ndarray:
        return self.checkpoint_steps * self.config.dt

    @property
    def times(self) -> np.ndarray:
        """Physical times: simulation clock shifted by the smoothing time."""
        return self.config.smoothing_time + self.sim_times

    def mean_field(self, cp: int, which: int = 0) -> np.ndarray:
        return self.sum_u[which, cp] / max(self.valid_paths[cp], 1)

    def moment_field(self, p: int, cp: int, which: int = 0) -> np.ndarray:
        src = {2: self.sum_u2, 4: self.sum_u4}[p]
        return src[which, cp] / max(self.valid_paths[cp], 1)

    def moment_with_stderr(self, p: int, cp: int, probe: int = 0,
                           which: int = 0):
        """Ensemble moment of u at a probe point with its standard error."""
        vals = self.probe_values[which, :, cp, probe] ** p
        n = vals.size
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(n))
        return mean, se


def _philox_stream(base_seed: int, path_index: int) -> np.random.Generator:
    key = np.array([np.uint64(base_seed), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _run_chunk(ctx: SolverContext, initials: list, beta: float,
               start: int, count: int, cp_steps: np.ndarray,
               probe_idx: np.ndarray, pair_idx: np.ndarray,
               test_modes: np.ndarray | None, test_targets: np.ndarray | None,
               comparison_tol: float):
    cfg = ctx.config
    n_steps = cfg.n_steps()
    n_fields = len(initials)
    m = ctx.mesh.size
    k = ctx.basis.n_modes
    states = [np.tile(init, (count, 1)) for init in initials]
    gens = [_philox_stream(cfg.base_seed, start + i) for i in range(count)]
    ncp = cp_steps.size
    out = {
        "sum_u": np.zeros((n_fields, ncp, m)),
        "sum_u2": np.zeros((n_fields, ncp, m)),
        "sum_u4": np.zeros((n_fields, ncp, m)),
        "probe": np.zeros((n_fields, count, ncp, probe_idx.size)),
        "minv": np.zeros((n_fields, count, ncp)),
        "pairs": np.zeros((n_fields, ncp, pair_idx.shape[0], 2)),
        "test": None if test_modes is None else np.zeros((ncp, test_modes.size)),
        "valid": np.zeros(ncp, dtype=np.int64),
        "blow": 0,
        "neg": 0,
        "neg_total": 0,
        "viol": np.zeros(ncp, dtype=np.int64) if n_fields == 2 else None,
        "viol_cells": 0,
        "min_gap": np.inf,
    }
    alive = np.ones(count, dtype=bool)
    cp_pos = {int(s): i for i, s in enumerate(cp_steps)}
    block = np.empty((count, cfg.time_block, k))
    steps_done = 0
    while steps_done < n_steps:
        nb = min(cfg.time_block, n_steps - steps_done)
        for i, g in enumerate(gens):
            block[i, :nb] = g.standard_normal((nb, k))
        for b in range(nb):
            coeffs = block[:, b, :] * ctx.noise_scale
            dw = coeffs @ ctx.phi.T
            factor = 1.0 + beta * dw
            out["neg"] += int(np.sum(factor < 0.0))
            out["neg_total"] += factor.size
            for f in range(n_fields):
                v = states[f] * factor
                coeff = (v * ctx.mesh.weights) @ ctx.phi
                states[f] = (coeff * ctx.semigroup) @ ctx.phi.T
            step_now = steps_done + b + 1
            if step_now in cp_pos:
                ci = cp_pos[step_now]
                fresh = alive.copy()
                for f in range(n_fields):
                    bad = ~np.all(np.isfinite(states[f]), axis=1)
                    fresh &= ~bad
                newly_dead = alive & ~fresh
                if np.any(newly_dead):
                    out["blow"] += int(np.sum(newly_dead))
                    for f in range(n_fields):
                        states[f][newly_dead] = 0.0
                alive = fresh
                out["valid"][ci] += int(np.sum(alive))
                for f in range(n_fields):
                    u = np.where(alive[:, None], states[f], 0.0)
                    out["sum_u"][f, ci] = u.sum(axis=0)
                    out["sum_u2"][f, ci] = (u * u).sum(axis=0)
                    out["sum_u4"][f, ci] = (u**4).sum(axis=0)
                    out["probe"][f, :, ci, :] = states[f][:, probe_idx]
                    out["minv"][f, :, ci] = states[f].min(axis=1)
                    du = states[f][:, pair_idx[:, 0]] - states[f][:, pair_idx[:, 1]]
                    du = np.where(alive[:, None], du, 0.0)
                    out["pairs"][f, ci, :, 0] = (du**2).sum(axis=0)
                    out["pairs"][f, ci, :, 1] = (du**4).sum(axis=0)
                if out["test"] is not None:
                    pairing = (states[0] * ctx.mesh.weights) @ ctx.phi[:, test_modes]
                    defect = pairing - test_targets[None, :]
                    defect = np.where(alive[:, None], defect, 0.0)
                    out["test"][ci] = (defect**2).sum(axis=0)
                if n_fields == 2:
                    gap = states[1] - states[0]
                    gap = gap[alive]
                    out["viol"][ci] += int(np.sum(gap < -comparison_tol))
                    out["viol_cells"] += gap.size
                    if gap.size:
                        out["min_gap"] = min(out["min_gap"], float(gap.min()))
        steps_done += nb
    return out


def _default_pairs(mesh_size: int) -> np.ndarray:
    offsets = []
    o = 1
    while o < mesh_size // 2:
        offsets.append(o)
        o *= 2
    return np.array([[0, o] for o in offsets], dtype=int)


def simulate_ensemble(config: SolverConfig, mus, *, threads: int = 1,
                      beta: float | None = None,
                      probe_indices=None, pair_indices=None,
                      test_modes=None, comparison_tol: float = 1e-9,
                      ctx: SolverContext | None = None) -> PathEnsemble:
    """Run the ensemble for one or more coupled initial measures.

    All measures share the same noise paths (coupling for comparison
    experiments).  Accumulation is streaming; per-path values are retained
    only at probe points, mesh minima, and increment pairs.
    """
    if isinstance(mus, InitialMeasure):
        mus = [mus]
    ctx = ctx or SolverContext(config)
    beta = config.beta if beta is None else beta
    initials = [ctx.smooth_initial(mu) for mu in mus]
    cp_steps = config.checkpoint_steps()
    probe_idx = np.asarray(probe_indices if probe_indices is not None
                           else [0, ctx.mesh.size // 3], dtype=int)
    pair_idx = np.asarray(pair_indices if pair_indices is not None
                          else _default_pairs(ctx.mesh.size), dtype=int)
    tmodes = None if test_modes is None else np.asarray(test_modes, dtype=int)
    ttargets = None
    if tmodes is not None:
        ttargets = np.array([_measure_pairing(ctx, mus[0], mode)
                             for mode in tmodes])
    chunks = []
    startd = 0
    while startd < config.ensemble:
        c = min(config.chunk_paths, config.ensemble - startd)
        chunks.append((startd, c))
        startd += c

    def work(spec):
        s, c = spec
        return _run_chunk(ctx, initials, beta, s, c, cp_steps, probe_idx,
                          pair_idx, tmodes, ttargets, comparison_tol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(spec) for spec in chunks]

    ncp = cp_steps.size
    nf = len(mus)
    m = ctx.mesh.size
    ens = PathEnsemble(
        config=config,
        checkpoint_steps=cp_steps,
        probe_indices=probe_idx,
        pair_indices=pair_idx,
        n_fields=nf,
        sum_u=np.zeros((nf, ncp, m)),
        sum_u2=np.zeros((nf, ncp, m)),
        sum_u4=np.zeros((nf, ncp, m)),
        probe_values=np.zeros((nf, config.ensemble, ncp, probe_idx.size)),
        min_values=np.zeros((nf, config.ensemble, ncp)),
        pair_moments=np.zeros((nf, ncp, pair_idx.shape[0], 2)),
        test_defect_sq=None if tmodes is None else np.zeros((ncp, tmodes.size)),
        valid_paths=np.zeros(ncp, dtype=np.int64),
        blowups=0,
        negative_factor_fraction=0.0,
        violation_counts=np.zeros(ncp, dtype=np.int64) if nf == 2 else None,
        violation_cells=0,
        min_gap=np.inf,
    )
    neg = neg_total = 0
    for (s, c), res in zip(chunks, results):
        ens.sum_u += res["sum_u"]
        ens.sum_u2 += res["sum_u2"]
        ens.sum_u4 += res["sum_u4"]
        ens.probe_values[:, s:s + c] = res["probe"]
        ens.min_values[:, s:s + c] = res["minv"]
        ens.pair_moments += res["pairs"]
        if ens.test_defect_sq is not None:
            ens.test_defect_sq += res["test"]
        ens.valid_paths += res["valid"]
        ens.blowups += res["blow"]
        neg += res["neg"]
        neg_total += res["neg_total"]
        if nf == 2:
            ens.violation_counts += res["viol"]
            ens.violation_cells += res["viol_cells"]
            ens.min_gap = min(ens.min_gap, res["min_gap"])
    ens.negative_factor_fraction = neg / max(neg_total, 1)
    return ens


def _measure_pairing(ctx: SolverContext, mu: InitialMeasure, mode: int) -> float:
    """``integral of phi_mode d(mu)`` for the weak time-zero check."""
    val = 0.0
    for p, mass in mu.atoms:
        val += mass * float(ctx.basis.evaluate(np.atleast_2d(p))[0, mode])
    if mu.density is not None:
        val += float((mu.density.values * ctx.mesh.weights)
                     @ ctx.phi[:, mode])
    return val


# ---------------------------------------------------------------------------
# experiment drivers


def estimate_lyapunov(ens: PathEnsemble, window, *, probe: int = 0,
                      which: int = 0, n_boot: int = 400, level: float = 0.95,
                      seed: int = 0) -> dict:
    """Least-squares growth rate of ``log E[u^2]`` at a probe point over a
    physical-time window, with a path-bootstrap confidence interval."""
    from .fitting import bootstrap_slope_ci

    t = ens.times
    keep = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if np.sum(keep) < 3:
        raise InvalidInputError("window covers fewer than 3 checkpoints")
    vals = ens.probe_values[which, :, keep, probe].T ** 2  # (paths, ncp_window)
    slope, lo, hi, half = bootstrap_slope_ci(t[keep], vals, n_boot=n_boot,
                                             level=level, seed=seed)
    return {"slope": slope, "ci_lo": lo, "ci_hi": hi, "halfwidth": half,
            "window": [float(window[0]), float(window[1])],
            "n_checkpoints": int(np.sum(keep)), "n_paths": vals.shape[0]}


def comparison_experiment(config: SolverConfig, mu1: InitialMeasure,
                          mu2: InitialMeasure, *, threads: int = 1,
                          tol: float = 1e-9) -> dict:
    """Coupled-noise ordering check for ``mu1 <= mu2``.

    Returns the fraction of (checkpoint, mesh point, path) cells where the
    smaller initial condition overtakes by more than ``tol``, and the worst
    signed gap.
    """
    if not mu1.leq(mu2):
        raise InvalidInputError("mu1 must be dominated by mu2")
    ens = simulate_ensemble(config, [mu1, mu2], threads=threads,
                            comparison_tol=tol)
    frac = float(ens.violation_counts.sum() / max(ens.violation_cells, 1))
    return {
        "violation_fraction": frac,
        "violation_counts": ens.violation_counts.tolist(),
        "cells": int(ens.violation_cells),
        "min_gap": float(ens.min_gap),
        "negative_factor_fraction": float(ens.negative_factor_fraction),
        "blowups": int(ens.blowups),
    }


def positivity_probe(ens: PathEnsemble, t_index: int, eps_levels,
                     which: int = 0) -> list:
    """Empirical probability that the mesh minimum at a checkpoint exceeds
    each threshold, with a 95% Wilson interval."""
    mins = ens.min_values[which, :, t_index]
    n = mins.size
    rows = []
    for eps in eps_levels:
        k = int(np.sum(mins >= eps))
        p = k / n
        z = 1.959963984540054
        den = 1 + z**2 / n
        center = (p + z**2 / (2 * n)) / den
        half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / den
        rows.append({"eps": float(eps), "probability": p,
                     "ci_lo": max(0.0, center - half),
                     "ci_hi": min(1.0, center + half), "successes": k, "n": n})
    return rows


def holder_diagnostic(ens: PathEnsemble, ctx: SolverContext, p: int,
                      window, which: int = 0) -> dict:
    """Regression estimates of the spatial and temporal increment exponents.

    Spatial: slope of ``log E|u(t,x)-u(t,y)|^p`` against ``log d(x,y)`` using
    the accumulated pair moments, averaged over checkpoints in the window.
    Temporal: same against ``log |t-s|`` from probe values.
    """
    if p not in (2, 4):
        raise InvalidInputError("p must be 2 or 4")
    from .fitting import least_squares_slope

    t = ens.times
    keep = np.where((t >= window[0]) & (t <= window[1]))[0]
    if keep.size < 2:
        raise InvalidInputError("window too small")
    col = 0 if p == 2 else 1
    pairs = ens.pair_indices
    pts = ctx.mesh.points
    dists = ctx.model.distance(pts[pairs[:, 0]], pts[pairs[:, 1]])
    mom = ens.pair_moments[which][keep][:, :, col].mean(axis=0) / max(
        int(ens.valid_paths[keep[-1]]), 1)
    good = mom > 0
    sp_slope, _ = least_squares_slope(np.log(dists[good]), np.log(mom[good]))

    probe = ens.probe_values[which, :, keep, 0].T  # (paths, nt)
    base = probe[:, 0]
    lags = t[keep][1:] - t[keep][0]
    inc = np.abs(probe[:, 1:] - base[:, None]) ** p
    mom_t = inc.mean(axis=0)
    good_t = mom_t > 0
    tm_slope, _ = least_squares_slope(np.log(lags[good_t]), np.log(mom_t[good_t]))

    nu = 2 * ctx.config.alpha + 2 - ctx.model.dim
    return {
        "p": p,
        "spatial_exponent": sp_slope,
        "temporal_exponent": tm_slope,
        "spatial_target": p * min(nu / 2.0, 1.0),
        "temporal_target": p * min(nu / 4.0, 0.5),
        "nu": nu,
        "distances": dists.tolist(),
        "pair_moments": mom.tolist(),
    }


def weak_time_zero_check(ens: PathEnsemble, mu: InitialMeasure) -> dict:
    """Mean squared defect of the tested pairings against their initial
    values along the checkpoint times; the contract is decrease toward zero
    as the physical time approaches the smoothing time."""
    if ens.test_defect_sq is None:
        raise InvalidInputError("ensemble was run without test modes")
    n = np.maximum(ens.valid_paths, 1)[:, None]
    msd = ens.test_defect_sq / n
    times = ens.times
    per_mode = msd.T
    # the defect shrinks as physical time approaches the smoothing time,
    # i.e. grows along the (increasing) checkpoint sequence
    shrinking = bool(np.all(per_mode[:, 0] <= per_mode[:, -1] + 1e-12))
    return {
        "times": times.tolist(),
        "mean_square_defect": msd.tolist(),
        "defect_shrinks_toward_start": shrinking,
        "first_to_last_ratio": (per_mode[:, 0] /
                                np.maximum(per_mode[:, -1], 1e-300)).tolist(),
    }
