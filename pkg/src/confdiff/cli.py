"""Batch front door: validate experiment configs, dispatch to the
engines, write CSV tables plus a JSON run manifest.

Configs are YAML documents with three fixed blocks (geometry / physics /
run) plus experiment-specific blocks; unknown keys anywhere are
rejected.  Seeds are mandatory so any output can be reproduced from its
manifest alone.  Exit codes: 0 success, 2 validation, 3 capacity,
4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .errors import CapacityError, ConvergenceError, ValidationError
from .geometry import build_boundary, export_csv, fractal_dimension
from .measures import (
    extrapolate_dimension,
    scale_dimension,
    spread_scale,
    write_dimension_table,
    write_run_summary,
    write_scale_dimension_table,
)
from .passivation import run_passivation
from .spectral import (
    SpectralDomain,
    SpectralModel,
    TemporalProfile,
    build_B_indicator,
    build_B_surface,
    build_basis,
    evaluate_signal,
    gpa_prediction,
    residence_time_cumulants,
    time_dependent_diffusion,
)
from .walks import SourceSpec, WalkConfig, run_hit_histogram, run_passage_ensemble
from . import acinus as AC

EXPERIMENTS = ("harmonic", "spread", "first_passage", "passivation",
               "spectral_signal", "spectral_adc", "spectral_moments",
               "residence", "acinus_signal")

ENV_OUTPUT_DIR = "CONFDIFF_OUTPUT_DIR"


def _req(block: dict, key: str, path: str):
    if key not in block:
        raise ValidationError(f"missing required field {path}.{key}")
    return block[key]


def _check_keys(block: dict, allowed, path: str):
    for k in block:
        if k not in allowed:
            raise ValidationError(f"unknown key {path}.{k}")


def _geometry(cfg: dict):
    _check_keys(cfg, {"family", "generation", "alpha_degrees", "orientation",
                      "base_length"}, "geometry")
    fam = _req(cfg, "family", "geometry")
    gen = int(_req(cfg, "generation", "geometry"))
    alpha = cfg.get("alpha_degrees")
    return build_boundary(
        fam, gen,
        angle=None if alpha is None else math.radians(float(alpha)),
        base_length=float(cfg.get("base_length", 1.0)),
        orientation=cfg.get("orientation", "bottom_seen"),
    )


def _run_block(cfg: dict):
    _check_keys(cfg, {"walkers", "seed", "workers", "output_dir"}, "run")
    seed = _req(cfg, "seed", "run")
    walkers = int(cfg.get("walkers", 10 ** 5))
    workers = int(cfg.get("workers", 1))
    outdir = os.environ.get(ENV_OUTPUT_DIR) or cfg.get("output_dir", "out")
    return walkers, int(seed), workers, outdir


def _walk_config(boundary, phys: dict, seed: int, workers: int) -> WalkConfig:
    _check_keys(phys, {"diffusion", "sticking", "exploration_length",
                       "absorption_threshold", "reflection_offset",
                       "max_steps"}, "physics")
    ell = boundary.smallest_feature
    eps = float(phys.get("absorption_threshold", 1e-3 * ell))
    return WalkConfig(
        diffusion=float(phys.get("diffusion", 1.0)),
        absorption_threshold=eps,
        reflection_offset=float(phys.get("reflection_offset", 10 * eps)),
        sticking=float(phys.get("sticking", 1.0)),
        exploration_length=phys.get("exploration_length"),
        max_steps=int(phys.get("max_steps", 10 ** 8)),
        rng_seed=seed,
        workers=workers,
    )


def _profile(cfg: dict) -> TemporalProfile:
    _check_keys(cfg, {"kind", "echoes"}, "profile")
    kind = cfg.get("kind", "bipolar")
    if kind == "fid":
        return TemporalProfile.fid(1.0)
    if kind == "bipolar":
        return TemporalProfile.bipolar(1.0)
    if kind == "cpmg":
        return TemporalProfile.cpmg(int(cfg.get("echoes", 4)), 1.0)
    raise ValidationError(f"unknown profile kind {kind!r}")


def _domain(cfg: dict) -> SpectralDomain:
    _check_keys(cfg, {"kind", "h", "inner_radius"}, "domain")
    return SpectralDomain(_req(cfg, "kind", "domain"),
                          h=float(cfg.get("h", 0.0)),
                          inner_radius=float(cfg.get("inner_radius", 0.0)))


def validate_config(cfg: dict) -> dict:
    """Full schema validation; returns the resolved config."""
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a mapping")
    top = {"experiment", "geometry", "physics", "run", "analysis", "profile",
           "domain", "passivation", "spread", "first_passage", "spectral",
           "acinus", "export_boundary"}
    _check_keys(cfg, top, "<root>")
    exp = _req(cfg, "experiment", "<root>")
    if exp not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment kind {exp!r}")
    run = _req(cfg, "run", "<root>")
    _run_block(run)
    if exp in ("harmonic", "spread", "first_passage", "passivation"):
        boundary = _geometry(_req(cfg, "geometry", "<root>"))
        walkers, seed, workers, _ = _run_block(run)
        _walk_config(boundary, cfg.get("physics", {}), seed, workers)
    if exp in ("spectral_signal", "spectral_adc", "spectral_moments",
               "residence"):
        _domain(_req(cfg, "domain", "<root>"))
        _profile(cfg.get("profile", {}))
    if exp == "acinus_signal":
        ac = _req(cfg, "acinus", "<root>")
        _check_keys(ac, {"structure", "n_cells", "destruction", "duration",
                         "steps", "gradients", "direction"}, "acinus")
        if ac.get("structure", "dichotomic_tree") not in AC.STRUCTURE_KINDS:
            raise ValidationError("unknown acinus structure")
    if exp == "spread":
        sp = cfg.get("spread", {})
        _check_keys(sp, {"exploration_lengths"}, "spread")
    if exp == "passivation":
        pv = cfg.get("passivation", {})
        _check_keys(pv, {"p_active", "max_iterations"}, "passivation")
    if exp == "first_passage":
        fp = cfg.get("first_passage", {})
        _check_keys(fp, {"offset"}, "first_passage")
    an = cfg.get("analysis", {})
    _check_keys(an, {"q_values", "depths", "p_values", "q_intensities",
                     "orders", "region", "window"}, "analysis")
    return cfg


def _csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(
                f"{v:.17g}" if isinstance(v, float) else str(v)
                for v in row) + "\n")


def run_experiment(cfg: dict, outdir: str) -> dict:
    """Dispatch one validated config; returns manifest metadata."""
    exp = cfg["experiment"]
    walkers, seed, workers, _ = _run_block(cfg["run"])
    outputs = []
    warnings_list = []

    if exp == "harmonic" or exp == "spread":
        boundary = _geometry(cfg["geometry"])
        wc = _walk_config(boundary, cfg.get("physics", {}), seed, workers)
        an = cfg.get("analysis", {})
        qs = [float(q) for q in an.get("q_values", [0, 1, 2, 3, 4])]
        hist, stats = run_hit_histogram(
            boundary, wc, SourceSpec("distant_flat"), walkers)
        rows = []
        for q in qs:
            for depth in an.get("depths", range(1, boundary.generation + 1)):
                h = hist.coarsen(int(depth))
                rows.append((q, boundary.generation, h.delta,
                             scale_dimension(h, q)))
        path = os.path.join(outdir, "scale_dimensions.csv")
        write_scale_dimension_table(path, rows)
        outputs.append(path)
        if not stats["valid"]:
            warnings_list.append("step budget exhausted above tolerance")
        meta = {"stats": {k: (v if not isinstance(v, np.generic) else v.item())
                          for k, v in stats.items()}}
        if exp == "spread":
            lens = cfg.get("spread", {}).get("exploration_lengths", [])
            d0 = fractal_dimension(boundary)
            rows = [(float(el), boundary.smallest_feature,
                     spread_scale(float(el), boundary.smallest_feature, d0))
                    for el in lens]
            path = os.path.join(outdir, "spread_scales.csv")
            _csv(path, "exploration_length,feature,diameter", rows)
            outputs.append(path)
        return {"outputs": outputs, "extra": meta, "warnings": warnings_list}

    if exp == "first_passage":
        boundary = _geometry(cfg["geometry"])
        wc = _walk_config(boundary, cfg.get("physics", {}), seed, workers)
        off = float(cfg.get("first_passage", {}).get(
            "offset", wc.reflection_offset))
        res = run_passage_ensemble(
            boundary, wc, SourceSpec("near_boundary_uniform", offset=off),
            walkers)
        path = os.path.join(outdir, "passage_samples.csv")
        step = max(1, walkers // 200000)  # keep dumps bounded
        _csv(path, "t,r,reflections",
             [(float(t), float(r), int(k)) for t, r, k in
              zip(res["t"][::step], res["r"][::step],
                  res["reflections"][::step])])
        outputs.append(path)
        return {"outputs": outputs,
                "extra": {"absorbed": int(res["absorbed"].sum()),
                          "sample_stride": step},
                "warnings": warnings_list}

    if exp == "passivation":
        boundary = _geometry(cfg["geometry"])
        wc = _walk_config(boundary, cfg.get("physics", {}), seed, workers)
        pv = cfg.get("passivation", {})
        path = os.path.join(outdir, "passivation_log.csv")
        states = run_passivation(
            boundary, float(pv.get("p_active", 0.8)), wc, walkers,
            int(pv.get("max_iterations", 50)), log_path=path)
        outputs.append(path)
        return {"outputs": outputs,
                "extra": {"iterations": states[-1].iteration,
                          "alive_fraction": states[-1].alive_fraction},
                "warnings": warnings_list}

    if exp == "spectral_signal":
        dom = _domain(cfg["domain"])
        prof = _profile(cfg.get("profile", {}))
        model = SpectralModel(dom)
        an = cfg.get("analysis", {})
        ps = [float(p) for p in an.get("p_values", [0.1, 1.0])]
        qs = [float(q) for q in an.get("q_intensities", [1.0, 5.0])]
        rows = []
        for p in ps:
            for q in qs:
                r = evaluate_signal(model, prof, p=p, q=q)
                gpa = gpa_prediction(model, prof, p, q)
                err = (abs(math.log(max(r.attenuation, 1e-300)) - math.log(gpa))
                       / max(abs(math.log(max(r.attenuation, 1e-300))), 1e-12))
                rows.append((p, q, r.attenuation, r.phase, gpa, err,
                             r.truncation))
        path = os.path.join(outdir, "signal_grid.csv")
        _csv(path, "p,q,attenuation,phase,gpa,gpa_rel_err,truncation", rows)
        outputs.append(path)
        return {"outputs": outputs, "extra": {}, "warnings": warnings_list}

    if exp == "spectral_adc":
        dom = _domain(cfg["domain"])
        prof = _profile(cfg.get("profile", {}))
        model = SpectralModel(dom)
        ps = [float(p) for p in
              cfg.get("analysis", {}).get("p_values",
                                          np.geomspace(1e-3, 1.0, 13))]
        rows = [(p, time_dependent_diffusion(model, prof, p)) for p in ps]
        path = os.path.join(outdir, "adc.csv")
        _csv(path, "p,adc_ratio", rows)
        outputs.append(path)
        return {"outputs": outputs, "extra": {}, "warnings": warnings_list}

    if exp == "spectral_moments":
        from .spectral import moment
        dom = _domain(cfg["domain"])
        prof = _profile(cfg.get("profile", {}))
        model = SpectralModel(dom)
        an = cfg.get("analysis", {})
        orders = [int(v) for v in an.get("orders", [1, 2, 4])]
        ps = [float(p) for p in an.get("p_values", [0.1, 1.0])]
        rows = [(p, n, moment(model, prof, p, n))
                for p in ps for n in orders]
        path = os.path.join(outdir, "moments.csv")
        _csv(path, "p,order,moment", rows)
        outputs.append(path)
        return {"outputs": outputs, "extra": {}, "warnings": warnings_list}

    if exp == "residence":
        dom = _domain(cfg["domain"])
        an = cfg.get("analysis", {})
        region = an.get("region")
        basis = build_basis(dom, 2048 if dom.kind == "interval" else 256)
        if region is None:
            B = build_B_surface(basis)
            region_desc = "boundary"
        else:
            B = build_B_indicator(basis, tuple(region))
            region_desc = str(tuple(region))
        b11, b21 = residence_time_cumulants(basis, B)
        path = os.path.join(outdir, "residence_cumulants.csv")
        _csv(path, "region,mean_coefficient,variance_coefficient",
             [(region_desc, b11, b21)])
        outputs.append(path)
        return {"outputs": outputs, "extra": {}, "warnings": warnings_list}

    if exp == "acinus_signal":
        ac = cfg["acinus"]
        prof = _profile(cfg.get("profile", {}))
        dom = AC.generate_labyrinth(ac.get("structure", "dichotomic_tree"),
                                    int(ac.get("n_cells", 6)), seed)
        nu = float(ac.get("destruction", 0.0))
        if nu > 0:
            dom = AC.destroy_walls(dom, nu, seed + 1)
        diffusion = float(cfg.get("physics", {}).get("diffusion", 1.0))
        duration = float(ac.get("duration", 0.06))
        steps = int(ac.get("steps", 0)) or AC.default_step_count(
            dom, diffusion, duration)
        gs = [float(g) for g in ac.get("gradients", [10, 20, 40, 80])]
        rows = AC.simulate_signal(dom, prof, diffusion, duration, steps, gs,
                                  walkers, seed,
                                  direction=ac.get("direction"),
                                  workers=workers)
        path = os.path.join(outdir, "acinus_signal.csv")
        _csv(path, "gradient,signal,stderr", rows)
        outputs.append(path)
        return {"outputs": outputs,
                "extra": {"steps": steps,
                          "surface_to_volume": dom.surface_to_volume()},
                "warnings": warnings_list}

    raise ValidationError(f"unhandled experiment {exp!r}")


# ----------------------------------------------------------------------
# Presets: desk-scale runs reproducing the headline behaviors
# ----------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "fig8_dq_triangular": {
        "experiment": "harmonic",
        "geometry": {"family": "triangular2d", "generation": 4,
                     "alpha_degrees": 60.0},
        "analysis": {"q_values": [2, 3, 4, 5]},
        "run": {"walkers": 200000, "seed": 11, "workers": 1},
    },
    "fig9_spread_collapse": {
        "experiment": "spread",
        "geometry": {"family": "quadratic2d", "generation": 4},
        "physics": {"exploration_length": 0.05},
        "spread": {"exploration_lengths": [0.005, 0.05, 0.5]},
        "analysis": {"q_values": [2]},
        "run": {"walkers": 100000, "seed": 12, "workers": 1},
    },
    "fig10_11_passivation": {
        "experiment": "passivation",
        "geometry": {"family": "quadratic2d", "generation": 3},
        "passivation": {"p_active": 0.8, "max_iterations": 40},
        "run": {"walkers": 100000, "seed": 13, "workers": 1},
    },
    "fig12_layer_adc": {
        "experiment": "spectral_adc",
        "domain": {"kind": "circular_layer", "inner_radius": 0.9},
        "profile": {"kind": "bipolar"},
        "analysis": {"p_values": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0]},
        "run": {"seed": 14},
    },
    "fig14_acinus_nu": {
        "experiment": "acinus_signal",
        "acinus": {"structure": "dichotomic_tree", "n_cells": 6,
                   "destruction": 0.1667, "duration": 0.06,
                   "gradients": [10, 20, 40, 80, 160]},
        "profile": {"kind": "bipolar"},
        "run": {"walkers": 100000, "seed": 15, "workers": 1},
    },
    "fig15_localtime_gaussian": {
        "experiment": "residence",
        "domain": {"kind": "interval"},
        "run": {"seed": 16},
    },
    "diagram_pq": {
        "experiment": "spectral_signal",
        "domain": {"kind": "interval"},
        "profile": {"kind": "fid"},
        "analysis": {"p_values": [0.001, 0.01, 0.1, 1.0, 10.0],
                     "q_intensities": [0.1, 0.5, 1.0, 5.0, 20.0, 100.0]},
        "run": {"seed": 17},
    },
}


def load_config(path_or_preset: str) -> dict:
    if path_or_preset.startswith("preset:"):
        name = path_or_preset.split(":", 1)[1]
        if name not in PRESETS:
            raise ValidationError(f"unknown preset {name!r}")
        return json.loads(json.dumps(PRESETS[name]))
    with open(path_or_preset) as fh:
        return yaml.safe_load(fh)


def cmd_run(args) -> int:
    cfg = validate_config(load_config(args.config))
    _, seed, workers, outdir = _run_block(cfg["run"])
    os.makedirs(outdir, exist_ok=True)
    t0 = time.time()
    try:
        import numba
        numba.set_num_threads(max(workers, 1))
    except Exception:
        pass
    result = run_experiment(cfg, outdir)
    manifest = {
        "config": cfg,
        "seed": seed,
        "version": __version__,
        "wall_clock_seconds": time.time() - t0,
        "outputs": [os.path.basename(p) for p in result["outputs"]],
        "warnings": result["warnings"],
        **result["extra"],
    }
    write_run_summary(os.path.join(outdir, "manifest.json"), manifest)
    print(f"wrote {len(result['outputs'])} table(s) + manifest to {outdir}")
    return 0


def cmd_validate(args) -> int:
    validate_config(load_config(args.config))
    print("config OK")
    return 0


def cmd_presets(_args) -> int:
    for name, cfg in PRESETS.items():
        print(f"{name}: {cfg['experiment']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="confdiff",
        description="restricted-diffusion experiments: random walks on "
                    "fractal boundaries and the spectral engine")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="YAML path or preset:<name>")
    p_run.set_defaults(func=cmd_run)
    p_val = sub.add_parser("validate", help="validate a config and exit")
    p_val.add_argument("config", help="YAML path or preset:<name>")
    p_val.set_defaults(func=cmd_validate)
    p_pre = sub.add_parser("presets", help="list built-in presets")
    p_pre.set_defaults(func=cmd_presets)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
