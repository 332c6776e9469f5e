"""Command-line entry point: ``podecm <command> [options]``.

Exit codes: 0 on success, 2 on configuration errors, 3 on solver failures.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import load_config, parameter_bounds
from .exceptions import ConfigError, ContainerError, PodecmError
from .meshkit import save_mesh
from .microfem import MacroLoad, stretch_matrix
from .pipeline import build_model, draw_samples, train, validate_rom
from .rom import load_rom, rom_sensitivity, rom_solve, save_rom
from .store import file_sha256, write_container
from .twoscale import (MacroProblem, compliance_errors, full_engine, load_unload_schedule,
                       micro_property_map, rom_engine, solve_twoscale)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _manifest(out, command, cfg, outputs, results=None, seeds=None):
    data = {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg,
        "seeds": seeds or {},
        "outputs": {name: file_sha256(os.path.join(out, name)) for name in sorted(outputs)},
        "results": results or {},
    }
    _write_json(os.path.join(out, "manifest.json"), data)
    return data


def _out_dir(args, cfg=None):
    out = args.out or (cfg["output"] if cfg else None) or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _config(args, seed_key=None):
    overrides = {}
    if seed_key and args.seed is not None:
        overrides[seed_key] = int(args.seed)
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, overrides)


def _engine(spec):
    if spec == "full":
        return "full", None
    if spec.startswith("rom:"):
        path = spec[4:]
        if not os.path.isfile(path):
            raise ConfigError(f"model file not found: {path}")
        return "rom", path
    raise ConfigError(f"--engine must be 'full' or 'rom:<path>', got {spec!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_mesh(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model = build_model(cfg)
    save_mesh(model.mesh, os.path.join(out, "parent.mesh"))
    print(f"parent mesh: {model.mesh.n_elements} elements, {model.mesh.n_nodes} nodes, "
          f"{model.mesh.n_points} quadrature points, {model.pairing.n_free} free DOFs")
    return EXIT_OK


def cmd_offline(args):
    cfg = _config(args, "sampling.train.seed")
    out = _out_dir(args, cfg)
    model = build_model(cfg)
    samples = draw_samples(cfg, "train")
    t0 = time.perf_counter()
    trained, runs = train(cfg, model, samples, threads=args.threads)
    rom = trained.rom
    disp, stress = trained.snapshots
    write_container(os.path.join(out, "snapshots.podecm"), {
        "displacement": disp.matrix, "weighted_stress": stress.matrix,
        "sample": disp.sample, "step": disp.step, "samples": samples,
    }, {"kind": "snapshots", "fingerprint": model.mesh.fingerprint})
    save_rom(rom, os.path.join(out, "rom.podecm"))
    names, _, _ = parameter_bounds(cfg)
    _write_csv(os.path.join(out, "samples.csv"), ["sample"] + names,
               [[i, *row] for i, row in enumerate(samples)])
    results = {"N": rom.n_modes, "L": trained.stress_basis.n_modes, "Q": rom.n_points,
               "Q_hat": model.mesh.n_points, "ecm_residual": rom.rule.achieved_residual,
               "weight_sum": float(rom.rule.weights.sum()), "n_train": len(samples),
               "fingerprint": model.mesh.fingerprint}
    _manifest(out, "offline", cfg, ["snapshots.podecm", "rom.podecm", "samples.csv"], results,
              {"train": int(cfg["sampling"]["train"]["seed"])})
    timings = dict(trained.timings, total=time.perf_counter() - t0,
                   per_sample=[r.wall_time for r in runs])
    _write_json(os.path.join(out, "timings.json"), timings)
    print(f"offline: {len(samples)} samples, N={rom.n_modes}, L={results['L']}, "
          f"Q={rom.n_points}/{model.mesh.n_points}, ECM residual {rom.rule.achieved_residual:.2e}")
    return EXIT_OK


def _online_load(args, default_wave, default_steps):
    U = stretch_matrix(*args.U)
    wave = args.wave or default_wave
    K = args.steps or default_steps
    if wave == "triangle":
        return MacroLoad.triangle_wave(U, K)
    if wave == "load_unload":
        return MacroLoad.load_unload(U, K // 2, K - K // 2)
    if wave == "monotonic":
        return MacroLoad.monotonic(U, K)
    raise ConfigError(f"unknown wave {wave!r}")


def cmd_online(args):
    kind, path = _engine(args.engine)
    if kind == "rom":
        rom = load_rom(path)
        loading = rom.metadata.get("loading", {})
        load = _online_load(args, loading.get("wave", "triangle"), loading.get("steps", 40))
        cfg = None
    else:
        cfg = _config(args)
        load = _online_load(args, cfg["loading"]["wave"], cfg["loading"]["steps"])
        model = build_model(cfg)
    out = _out_dir(args, cfg)
    steps = range(load.n_steps + 1) if args.effective_stiffness else ()
    t0 = time.perf_counter()
    if kind == "rom":
        sol = rom_solve(rom, args.mu, load, stiffness_steps=steps)
        sens = rom_sensitivity(rom, args.mu, load, args.sensitivity) if args.sensitivity else None
    else:
        sol = model.solve(args.mu, load, stiffness_steps=steps)
        sens = model.sensitivity(args.mu, load, args.sensitivity) if args.sensitivity else None
    wall = time.perf_counter() - t0
    rows = [[k, *load.F[k].ravel(), *sol.P_bar[k].ravel(), int(sol.iterations[k])]
            for k in range(load.n_steps + 1)]
    _write_csv(os.path.join(out, "online.csv"),
               ["step", "Fxx", "Fxy", "Fyx", "Fyy", "Pxx", "Pxy", "Pyx", "Pyy", "iterations"], rows)
    files = ["online.csv"]
    if args.effective_stiffness:
        comps = [f"A{i}{j}{k}{l}" for i in "xy" for j in "xy" for k in "xy" for l in "xy"]
        _write_csv(os.path.join(out, "stiffness.csv"), ["step"] + comps,
                   [[k, *sol.A_bar[k].ravel()] for k in sorted(sol.A_bar)])
        files.append("stiffness.csv")
    if sens is not None:
        _write_csv(os.path.join(out, "sensitivity.csv"), ["step", "param", "dPxx", "dPxy", "dPyx", "dPyy"],
                   [[k, p, *sens[k, p].ravel()] for k in range(sens.shape[0]) for p in range(sens.shape[1])])
        files.append("sensitivity.csv")
    _write_json(os.path.join(out, "timings.json"), {"solve": wall})
    _manifest(out, "online", cfg or {}, files,
              {"engine": kind, "model": file_sha256(path) if path else None, "mu": list(args.mu),
               "U": list(args.U), "steps": load.n_steps})
    print(f"online ({kind}): {load.n_steps} steps in {wall:.3f} s")
    return EXIT_OK


def cmd_validate(args):
    cfg = _config(args, "sampling.test.seed")
    kind, path = _engine(args.engine)
    if kind != "rom":
        raise ConfigError("validate needs --engine rom:<path>")
    out = _out_dir(args, cfg)
    model = build_model(cfg)
    rom = load_rom(path, model.mesh)
    samples = draw_samples(cfg, "test")
    cases, _ = validate_rom(rom, model, cfg, samples, threads=args.threads)
    names, _, _ = parameter_bounds(cfg)
    _write_csv(os.path.join(out, "validate.csv"), ["sample"] + names + ["eps_P", "eps_w"],
               [[c.index, *samples[c.index], c.eps_P, c.eps_w] for c in cases])
    eP = float(np.mean([c.eps_P for c in cases]))
    ew = float(np.mean([c.eps_w for c in cases]))
    _manifest(out, "validate", cfg, ["validate.csv"],
              {"mean_eps_P": eP, "mean_eps_w": ew, "n_test": len(cases), "model": file_sha256(path)},
              {"test": int(cfg["sampling"]["test"]["seed"])})
    _write_json(os.path.join(out, "timings.json"),
                {"full": [c.full_time for c in cases], "rom": [c.rom_time for c in cases]})
    print(f"validate: {len(cases)} samples, mean eps_P = {eP:.4%}, mean eps_w = {ew:.4%}")
    return EXIT_OK


def _read_reference(ref_dir):
    path = os.path.join(ref_dir, "compliance.csv")
    if not os.path.isfile(path):
        raise ConfigError(f"reference compliance not found: {path}")
    with open(path) as fh:
        C = np.array([float(r["C"]) for r in csv.DictReader(fh)])
    wall = None
    tpath = os.path.join(ref_dir, "timings.json")
    if os.path.isfile(tpath):
        with open(tpath) as fh:
            wall = json.load(fh).get("wall_time")
    return C, wall


def cmd_twoscale(args):
    cfg = _config(args)
    if cfg["parameterization"]["kind"] != "porous_ellipses":
        raise ConfigError("twoscale drives the porous cell: parameterization.kind must be porous_ellipses")
    kind, path = _engine(args.engine)
    out = _out_dir(args, cfg)
    ts = cfg["twoscale"]
    if kind == "full":
        engine = full_engine(build_model(cfg))
        rom = None
    else:
        rom = load_rom(path)
        engine = rom_engine(rom)
    bounds = tuple(tuple(b) for b in cfg["parameterization"]["bounds"])
    problem = MacroProblem(engine, int(ts["nx"]), int(ts["ny"]), float(ts["width"]), float(ts["height"]),
                           bounds=bounds)
    if len(problem.extrapolated):
        print(f"warning: {len(problem.extrapolated)} macro points lie outside the parameter bounds",
              file=sys.stderr)
    schedule = load_unload_schedule(float(ts["T_max"]), int(ts["n_up"]), int(ts["n_down"]))
    res = solve_twoscale(problem, schedule, rtol=float(ts["rtol"]), max_iter=int(ts["max_iter"]),
                         threads=args.threads, checkpoint=args.checkpoint)
    eps = np.full(len(schedule), np.nan)
    summary = {"engine": kind, "steps": len(schedule) - 1, "micro_solves": res.micro_solves,
               "final_probe_displacement": float(res.probe_displacement[-1])}
    ref_wall = None
    if args.reference:
        C_ref, ref_wall = _read_reference(args.reference)
        errs = compliance_errors(res.compliance, C_ref)
        eps = errs.per_step
        summary.update(mean_eps_C=errs.mean, excluded_steps=errs.excluded.tolist())
    _write_csv(os.path.join(out, "compliance.csv"), ["step", "T", "C", "eps_C"],
               [[k, schedule[k], res.compliance[k], eps[k]] for k in range(len(schedule))])
    _write_csv(os.path.join(out, "force_disp.csv"), ["step", "T", "u"],
               [[k, schedule[k], res.probe_displacement[k]] for k in range(len(schedule))])
    table = {"N_train": rom.metadata.get("n_train") if rom else None,
             "N": rom.n_modes if rom else None, "Q": rom.n_points if rom else None,
             "eps_C": summary.get("mean_eps_C"), "runtime": res.wall_time,
             "speed_up": (ref_wall / res.wall_time) if ref_wall else None}
    _write_json(os.path.join(out, "timings.json"), {"wall_time": res.wall_time, "table": table})
    _manifest(out, "twoscale", cfg, ["compliance.csv", "force_disp.csv"], summary)
    msg = f"twoscale ({kind}): {summary['steps']} steps, {res.micro_solves} micro solves, {res.wall_time:.1f} s"
    if "mean_eps_C" in summary:
        msg += f", mean eps_C = {summary['mean_eps_C']:.4%}"
    if table["speed_up"]:
        msg += f", speed-up {table['speed_up']:.1f}x"
    print(msg)
    return EXIT_OK


def cmd_propmap(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    pm = cfg["propmap"]
    model = build_model(cfg)
    grid = np.array([(v, k) for v in pm["v_void"] for k in pm["kappa"]], dtype=float)
    table = micro_property_map(model, grid, float(pm["delta_uy"]))
    _write_csv(os.path.join(out, "property_map.csv"), ["v_void", "kappa", "nu_eff", "E_eff"], table)
    _manifest(out, "propmap", cfg, ["property_map.csv"])
    print(f"propmap: {len(grid)} parameter points")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="podecm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"podecm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, engine=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help="output directory (defaults to the config's 'output')")
        sp.add_argument("--seed", type=int, help="override the sampling seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
        if engine:
            sp.add_argument("--engine", default="full", help="full | rom:<model path>")

    common(sub.add_parser("mesh", help="write the parent mesh"))
    common(sub.add_parser("offline", help="train a reduced model"))
    on = sub.add_parser("online", help="evaluate one parameter/load case")
    common(on, engine=True)
    on.add_argument("--mu", type=float, nargs="+", required=True, help="geometry parameters")
    on.add_argument("--U", type=float, nargs=3, default=(1.0, 1.0, 0.0), metavar=("UXX", "UYY", "UXY"))
    on.add_argument("--wave", choices=("triangle", "load_unload", "monotonic"))
    on.add_argument("--steps", type=int)
    on.add_argument("--effective-stiffness", action="store_true")
    on.add_argument("--sensitivity", type=float, metavar="H")
    common(sub.add_parser("validate", help="error report of a reduced model on test samples"), engine=True)
    ts = sub.add_parser("twoscale", help="run the two-scale compression problem")
    common(ts, engine=True)
    ts.add_argument("--reference", help="directory of a reference run for errors and speed-up")
    ts.add_argument("--checkpoint", help="checkpoint file written every macro step; resumed if present")
    common(sub.add_parser("propmap", help="effective Poisson ratio and modulus over a parameter grid"))
    return p


COMMANDS = {"mesh": cmd_mesh, "offline": cmd_offline, "online": cmd_online,
            "validate": cmd_validate, "twoscale": cmd_twoscale, "propmap": cmd_propmap}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContainerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PodecmError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
