"""Offline training and online evaluation built from a validated configuration."""

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .ecm import build_integrand, ecm_select, weighted_stress_field
from .exceptions import PodecmError
from .material import PlasticityParams
from .meshgen import composite_rve, porous_rve
from .meshkit import load_mesh
from .microfem import MacroLoad, RveModel, stretch_matrix
from .morph import InclusionScaling, PorousEllipses
from .podkit import (SnapshotSet, displacement_snapshots, h1_gram, l2_gram, pod,
                     stress_snapshots)
from .rom import build_rom, fluctuation_error, rom_solve, stress_error


def build_mesh(cfg):
    m = cfg["mesh"]
    if m["kind"] == "composite":
        return composite_rve(h=float(m["h"]), count=int(m["count"]),
                             volume_fraction=float(m["volume_fraction"]), seed=int(m["seed"]))
    if m["kind"] == "porous":
        return porous_rve(h=float(m["h"]))
    return load_mesh(m["path"])


def build_parameterization(cfg):
    p = cfg["parameterization"]
    if p["kind"] == "inclusion_scaling":
        return InclusionScaling(bounds=p["bounds"][0])
    return PorousEllipses(bounds=p["bounds"])


def build_materials(cfg):
    return {int(k): PlasticityParams(**v) for k, v in cfg["materials"].items()}


def build_model(cfg, mesh=None):
    return RveModel(mesh if mesh is not None else build_mesh(cfg), build_parameterization(cfg),
                    build_materials(cfg))


def macro_load(cfg, U):
    load = cfg["loading"]
    K = int(load["steps"])
    if load["wave"] == "triangle":
        return MacroLoad.triangle_wave(U, K)
    return MacroLoad.load_unload(U, K // 2, K // 2)


def draw_samples(cfg, which, seed=None):
    """Samples ``(n, 3 + n_geo)``: ``Uxx, Uyy, Uxy`` then geometry parameters."""
    from .config import parameter_bounds

    spec = cfg["sampling"][which]
    n = int(spec["count"])
    seed = int(spec.get("seed", 0) if seed is None else seed)
    _, lo, hi = parameter_bounds(cfg)
    if spec.get("scheme", "sobol") == "sobol":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)   # balance warning for non powers of two
            unit = qmc.Sobol(len(lo), scramble=True, seed=seed).random(n)
    else:
        unit = np.random.default_rng(seed).uniform(size=(n, len(lo)))
    return qmc.scale(unit, lo, hi)


def sample_case(cfg, row):
    """``(mu, MacroLoad)`` for one sample row."""
    row = np.asarray(row, dtype=float)
    return row[3:], macro_load(cfg, stretch_matrix(row[0], row[1], row[2]))


def _solver_kw(cfg):
    s = cfg["solver"]
    return dict(rtol=float(s["rtol"]), atol=float(s["atol"]), max_iter=int(s["max_iter"]))


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class SampleRun:
    index: int
    mu: np.ndarray
    load: MacroLoad
    solution: object
    wall_time: float


def run_full_samples(model, cfg, samples, keep_point_stress=False, threads=1):
    """Full solves for every sample row; failures name the sample."""
    kw = _solver_kw(cfg)

    def one(item):
        i, row = item
        mu, load = sample_case(cfg, row)
        t0 = time.perf_counter()
        try:
            sol = model.solve(mu, load, keep_point_stress=keep_point_stress, **kw)
        except PodecmError as exc:
            raise type(exc)(f"sample {i} (mu={np.round(mu, 6).tolist()}): {exc}") from exc
        return SampleRun(i, mu, load, sol, time.perf_counter() - t0)

    return _map(one, list(enumerate(samples)), threads)


def collect_snapshots(model, runs):
    """Displacement and weighted-stress snapshots at every converged load step ``k >= 1``."""
    disp, stress = [], []
    for r in runs:
        steps = np.arange(1, r.load.n_steps + 1)
        morph = model.morpher.solve(r.mu)
        W = weighted_stress_field(r.solution.point_stress, morph)
        disp.append(displacement_snapshots(r.solution.w, r.index, steps))
        stress.append(stress_snapshots(W, r.index, steps))
    return SnapshotSet.concatenate(disp), SnapshotSet.concatenate(stress)


@dataclass
class TrainedRom:
    rom: object
    disp_basis: object
    stress_basis: object
    integrand: object
    snapshots: tuple
    timings: dict = field(default_factory=dict)


def train_from_snapshots(model, disp, stress, N, L, eps, volume_row=True, metadata=None,
                         stress_rows=False):
    """POD of both snapshot sets, cubature selection and model assembly."""
    t0 = time.perf_counter()
    mesh = model.mesh
    bd = pod(disp, h1_gram(mesh), n_modes=N)
    bs = pod(stress, l2_gram(mesh), n_modes=L)
    t1 = time.perf_counter()
    J = build_integrand(bd, bs, mesh, volume_row=volume_row, stress_rows=stress_rows)
    rule = ecm_select(J, eps)
    t2 = time.perf_counter()
    meta = dict(metadata or {})
    meta.update(N=int(N), L=int(L), eps=float(eps), volume_row=bool(volume_row),
                stress_rows=bool(stress_rows),
                Q=int(rule.size), Q_hat=int(mesh.n_points),
                n_train=int(len(np.unique(disp.sample))))
    rom = build_rom(bd, rule, mesh, model.parameterization, model.materials, meta)
    return TrainedRom(rom, bd, bs, J, (disp, stress), {"pod": t1 - t0, "ecm": t2 - t1})


def train(cfg, model=None, samples=None, threads=1):
    model = model or build_model(cfg)
    samples = draw_samples(cfg, "train") if samples is None else samples
    t0 = time.perf_counter()
    runs = run_full_samples(model, cfg, samples, keep_point_stress=True, threads=threads)
    t1 = time.perf_counter()
    disp, stress = collect_snapshots(model, runs)
    r = cfg["rom"]
    meta = {"bounds": model.parameterization.to_dict()["bounds"], "loading": cfg["loading"]}
    out = train_from_snapshots(model, disp, stress, int(r["N"]), int(r["L"]), float(r["eps"]),
                               bool(r["volume_row"]), meta, bool(r["stress_rows"]))
    out.timings["full_solves"] = t1 - t0
    return out, runs


@dataclass
class ValidationCase:
    index: int
    mu: np.ndarray
    eps_P: float
    eps_w: float
    full_time: float
    rom_time: float


def validate_rom(rom, model, cfg, samples=None, full_runs=None, threads=1):
    """Per-sample effective-stress and fluctuation errors of ``rom`` against full solves."""
    samples = draw_samples(cfg, "test") if samples is None else samples
    runs = full_runs if full_runs is not None else run_full_samples(model, cfg, samples, threads=threads)
    kw = _solver_kw(cfg)
    kw["rtol"] = float(cfg["solver"]["rom_rtol"])

    def one(run):
        t0 = time.perf_counter()
        sol = rom_solve(rom, run.mu, run.load, **kw)
        t_rom = time.perf_counter() - t0
        if sol.P_bar.shape != run.solution.P_bar.shape:
            raise PodecmError(f"sample {run.index}: step-count mismatch")
        morph = model.morpher.solve(run.mu)
        e_w = fluctuation_error(model.mesh, morph, rom.reconstruct(sol.a), run.solution.w)
        return ValidationCase(run.index, run.mu, stress_error(sol.P_bar, run.solution.P_bar), e_w,
                              run.wall_time, t_rom)

    return _map(one, runs, threads), runs
