"""Command-line interface: ``gpkoopman <verb> [options]``.

Verbs: simulate, fit, forecast, benchmark, eigenfunctions.  Every verb reads
a JSON experiment config (``--config``) whose sections and keys are listed
in ``SCHEMA``; unknown keys are rejected.  Outputs go to ``--out``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error,
1 anything else.  Failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

_ANY = object()

# section -> key -> (allowed python types, default)
SCHEMA = {
    "system": {
        "name": ((str,), "vdp"),
        "alpha": ((int, float), 2.0),
        "dt": ((int, float, type(None)), None),
        "substeps": ((int, type(None)), None),
        "sigma_T": ((int, float), 0.7),
        "literal_potential": ((bool,), False),
    },
    "dataset": {
        "n_trajectories": ((int,), 50),
        "trajectory_length": ((int,), 20),
        "bounds": ((list, type(None)), None),
        "sigma_Y": ((int, float), 0.0),
        "seed": ((int,), 0),
        "lhs_candidates": ((int,), 100),
        "standardize": ((bool,), True),
    },
    "selection": {
        "objective": ((str,), "vfe"),
        "ald_threshold": ((int, float), 1e-3),
        "batch_size": ((int,), 10),
        "max_dictionary": ((int,), 100),
        "max_iter": ((int,), 200),
        "max_outer": ((int,), 50),
        "gtol": ((int, float), 1e-5),
        "init_lengthscale": ((int, float), 2.0),
        "init_signal_variance": ((int, float), 1.0),
        "init_noise_variance": ((int, float), 0.1),
        "optimize_inducing": ((bool,), False),
    },
    "model": {
        "method": ((str,), "tcca"),
        "regularization": ((str,), "coupled"),
        "lifted_noise_variance": ((int, float, type(None)), None),
        "lifted_noise_selection": ((str,), "elbo"),
        "truncation_tol": ((int, float), 1e-10),
    },
    "forecast": {
        "x0": ((list,), []),
        "horizon": ((int,), 50),
        "reproject": ((bool,), True),
        "tol": ((int, float, type(None)), None),
        "z": ((int, float, type(None)), 2),
        "curvature": ((bool,), True),
        "eigenfunctions": ((bool,), False),
        "n_modes": ((int,), 4),
        "json_sidecar": ((bool,), False),
    },
    "eval": {
        "horizons": ((list,), [1, 10, 50]),
        "n_test": ((int,), 500),
        "test_seed": ((int,), 1),
        "objectives": ((list,), ["vfe", "vamp2"]),
        "decoupling": ((bool,), False),
    },
    "grid": {
        "x_range": ((list,), [-2.0, 2.0]),
        "y_range": ((list,), [-2.0, 2.0]),
        "nx": ((int,), 50),
        "ny": ((int,), 50),
        "n_modes": ((int,), 4),
        "max_points": ((int,), 250000),
    },
}

CHOICES = {
    ("system", "name"): ("vdp", "double_well", "quadruple_well"),
    ("selection", "objective"): ("vfe", "vamp2"),
    ("model", "method"): ("tcca", "edmd"),
    ("model", "regularization"): ("coupled", "decoupled", "unregularized"),
    ("model", "lifted_noise_selection"): ("elbo", "validation"),
}

DEFAULT_BOUNDS = {
    "vdp": [[-3.0, 3.0], [-4.0, 4.0]],
    "double_well": [[-2.0, 2.0], [-1.5, 1.5]],
    "quadruple_well": [[-2.0, 2.0], [-2.0, 2.0]],
}


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _line_of(text: str, key: str) -> int | None:
    needle = json.dumps(key) + ":"
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line.replace('" :', '":'):
            return i
    return None


def _where(text, key):
    line = _line_of(text, key) if text else None
    return f" (line {line})" if line else ""


def load_config(path: str | None) -> dict:
    """Parse and validate a config file; returns a fully defaulted dict."""
    raw, text = {}, ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return validate_config(raw, text)


def validate_config(raw: dict, text: str = "") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, body in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section '{sec}'{_where(text, sec)}; expected one of {sorted(SCHEMA)}")
        if not isinstance(body, dict):
            raise ConfigError(f"section '{sec}'{_where(text, sec)} must be an object")
        for key, val in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(
                    f"unknown key '{sec}.{key}'{_where(text, key)}; expected one of {sorted(SCHEMA[sec])}"
                )
            types = SCHEMA[sec][key][0]
            ok = isinstance(val, types) and not (isinstance(val, bool) and bool not in types)
            if not ok:
                names = "/".join("null" if t is type(None) else t.__name__ for t in types)
                raise ConfigError(f"'{sec}.{key}'{_where(text, key)} must be {names}, got {json.dumps(val)}")
            choices = CHOICES.get((sec, key))
            if choices and val not in choices:
                raise ConfigError(f"'{sec}.{key}'{_where(text, key)} must be one of {choices}, got {val!r}")
            cfg[sec][key] = val
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def params_hash(params) -> str:
    return hashlib.sha256(json.dumps(params.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# building blocks


def _system(cfg):
    from .dynamics import OdeSystem, SdeSystem

    s = cfg["system"]
    try:
        if s["name"] == "vdp":
            kw = {"alpha": float(s["alpha"])}
            if s["dt"] is not None:
                kw["dt_sample"] = float(s["dt"])
            if s["substeps"] is not None:
                kw["substeps"] = int(s["substeps"])
            return OdeSystem(**kw)
        potential = s["name"]
        if potential == "quadruple_well" and s["literal_potential"]:
            potential = "quadruple_well_literal"
        kw = {"potential": potential, "sigma_T": float(s["sigma_T"])}
        if s["dt"] is not None:
            kw["dt_sample"] = float(s["dt"])
        if s["substeps"] is not None:
            kw["substeps"] = int(s["substeps"])
        return SdeSystem(**kw)
    except ValueError as exc:
        raise ConfigError(f"system: {exc}") from exc


def _bounds(cfg):
    b = cfg["dataset"]["bounds"] or DEFAULT_BOUNDS[cfg["system"]["name"]]
    if len(b) != 2 or any(not isinstance(r, list) or len(r) != 2 or r[0] >= r[1] for r in b):
        raise ConfigError("dataset.bounds must be [[lo, hi], [lo, hi]] with lo < hi")
    return b


def _trajectories(cfg, n, seed):
    from .dynamics import latin_hypercube, simulate_trajectories

    d = cfg["dataset"]
    if d["trajectory_length"] < 2 or n < 1:
        raise ConfigError("dataset needs n_trajectories >= 1 and trajectory_length >= 2")
    X0 = latin_hypercube(n, _bounds(cfg), seed=seed, candidates=d["lhs_candidates"])
    return simulate_trajectories(_system(cfg), X0, d["trajectory_length"], seed=seed)


def _noise_free_rollouts(cfg, n, seed, horizon):
    """Initial states and noise-free rollouts (steps 1..horizon)."""
    from .dynamics import OdeSystem, latin_hypercube, simulate_trajectories

    system = _system(cfg)
    if not isinstance(system, OdeSystem):
        raise ConfigError("benchmark and validation rollouts need a deterministic system (vdp)")
    X0 = latin_hypercube(n, _bounds(cfg), seed=seed, candidates=cfg["dataset"]["lhs_candidates"])
    T = simulate_trajectories(system, X0, horizon + 1)
    return X0, T[:, 1:]


def _snapshots(cfg, seed):
    from .dynamics import build_snapshots

    d = cfg["dataset"]
    trajs = _trajectories(cfg, d["n_trajectories"], seed)
    return trajs, build_snapshots(trajs, float(d["sigma_Y"]), seed=seed, standardize=d["standardize"])


def _selection_config(cfg, objective=None):
    from .model_selection import SelectionConfig

    s = cfg["selection"]
    try:
        return SelectionConfig(
            ald_threshold=float(s["ald_threshold"]), batch_size=s["batch_size"],
            max_dictionary=s["max_dictionary"], max_iter=s["max_iter"], gtol=float(s["gtol"]),
            objective=objective or s["objective"], max_outer=s["max_outer"],
            optimize_inducing=s["optimize_inducing"], truncation_tol=float(cfg["model"]["truncation_tol"]),
        )
    except ValueError as exc:
        raise ConfigError(f"selection: {exc}") from exc


def _init_params(cfg, dim):
    import numpy as np

    from .kernels import KernelParams

    s = cfg["selection"]
    try:
        return KernelParams(np.full(dim, float(s["init_lengthscale"])), float(s["init_signal_variance"]),
                            float(s["init_noise_variance"]))
    except ValueError as exc:
        raise ConfigError(f"selection: {exc}") from exc


def _lifted_noise(cfg, data, Z, params, seed):
    """Lifted noise variance for the configured regularization."""
    from .koopman import select_lifted_noise
    from .model_selection import select_lifted_noise_by_validation

    m = cfg["model"]
    if m["regularization"] == "coupled":
        return params.noise_variance
    if m["regularization"] == "unregularized":
        return 0.0
    if m["lifted_noise_variance"] is not None:
        return float(m["lifted_noise_variance"])
    if m["lifted_noise_selection"] == "elbo":
        return select_lifted_noise(data, Z, params)
    horizon = max(cfg["eval"]["horizons"])
    X0, truth = _noise_free_rollouts(cfg, max(50, cfg["eval"]["n_test"] // 5), seed + 7919, horizon)
    return select_lifted_noise_by_validation(data, Z, params, X0, truth, horizon,
                                             truncation_tol=float(m["truncation_tol"]))


def _fit_model(cfg, data, Z, params, seed, method=None):
    from .koopman import fit_exact_edmd, fit_tcca

    tol = float(cfg["model"]["truncation_tol"])
    if (method or cfg["model"]["method"]) == "edmd":
        return fit_exact_edmd(data, Z, params, tol)
    s2 = _lifted_noise(cfg, data, Z, params, seed)
    if s2 > 0:
        return fit_tcca(data, Z, params.replace(lifted_noise_variance=s2), tol)
    return fit_tcca(data, Z, params, tol, lifted_noise_variance=0.0)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_snapshots(data_dir):
    import numpy as np

    from .koopman import SnapshotSet, Standardizer

    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    arr = np.loadtxt(os.path.join(data_dir, "snapshots.csv"), delimiter=",", skiprows=1, ndmin=2)
    D = arr.shape[1] // 2
    std = Standardizer.from_dict(manifest["standardizer"])
    return SnapshotSet(arr[:, :D], arr[:, D:], std), manifest


def _load_model(path):
    from .koopman import KoopmanModel

    try:
        return KoopmanModel.load(path)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a valid model file ({exc})") from exc


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(cfg, out):
    d = cfg["dataset"]
    trajs, data = _snapshots(cfg, d["seed"])
    system = _system(cfg)
    rows = []
    for i, T in enumerate(trajs):
        for k, x in enumerate(T):
            rows.append([str(i), _fmt(k * system.dt_sample)] + [_fmt(v) for v in x])
    D = data.dim
    _write_csv(os.path.join(out, "trajectories.csv"), ["trajectory", "t"] + [f"x_{j + 1}" for j in range(D)], rows)
    _write_csv(
        os.path.join(out, "snapshots.csv"),
        [f"x_{j + 1}" for j in range(D)] + [f"y_{j + 1}" for j in range(D)],
        [[_fmt(v) for v in x] + [_fmt(v) for v in y] for x, y in zip(data.X, data.Y)],
    )
    sysdoc = {"name": cfg["system"]["name"], "dt_sample": system.dt_sample, "substeps": system.substeps}
    if cfg["system"]["name"] == "vdp":
        sysdoc["alpha"] = system.alpha
    else:
        sysdoc.update(sigma_T=system.sigma_T, potential=system.potential)
    _write_json(os.path.join(out, "manifest.json"), {
        "system": sysdoc,
        "dataset": {**d, "bounds": _bounds(cfg)},
        "seed": d["seed"],
        "n_pairs": data.n,
        "standardizer": data.standardizer.to_dict(),
        "snapshot_units": "standardized" if d["standardize"] else "raw",
        "config_hash": config_hash(cfg),
    })


def cmd_fit(cfg, out, data_dir):
    from .model_selection import pipeline

    if data_dir is None:
        raise ConfigError("fit needs --data DIR (output of 'simulate')")
    data, manifest = _read_snapshots(data_dir)
    res = pipeline(data, _selection_config(cfg), _init_params(cfg, data.dim))
    model = _fit_model(cfg, data, res.inducing, res.params, cfg["dataset"]["seed"])
    model.save(os.path.join(out, "model.json"))
    lam = model.eigenvalues
    _write_csv(os.path.join(out, "eigenvalues.csv"), ["index", "re", "im", "modulus"],
               [[str(i), _fmt(v.real), _fmt(v.imag), _fmt(abs(v))] for i, v in enumerate(lam)])
    _write_json(os.path.join(out, "fit_log.json"), {
        "objective": cfg["selection"]["objective"],
        "objective_trace": res.objective_trace,
        "elbo_trace": res.elbo_trace,
        "dictionary_sizes": res.dictionary_sizes,
        "n_inducing": int(len(res.inducing)),
        "params": model.params.to_dict(),
        "lifted_noise_used": model.sigma_lifted,
        "eigenvalues": [[float(v.real), float(v.imag)] for v in lam],
        "diagnostics": list(model.diagnostics),
        "dataset_config_hash": manifest.get("config_hash"),
    })


def _initial_states(cfg, args):
    import numpy as np

    if args.x0:
        try:
            return [np.array([float(v) for v in s.split(",")]) for s in args.x0]
        except ValueError as exc:
            raise ConfigError(f"--x0 expects comma-separated numbers ({exc})") from exc
    x0 = cfg["forecast"]["x0"]
    if not x0:
        raise ConfigError("no initial state: set forecast.x0 or pass --x0")
    if not isinstance(x0[0], list):
        x0 = [x0]
    return [np.asarray(v, dtype=float) for v in x0]


def cmd_forecast(cfg, out, args):
    import numpy as np

    from .forecast import eigenfunction_forecast, forecast_with_reprojection

    if not args.model:
        raise ConfigError("forecast needs --model PATH")
    model = _load_model(args.model)
    f = cfg["forecast"]
    horizon = args.horizon if args.horizon is not None else f["horizon"]
    tol = args.tol if args.tol is not None else f["tol"]
    reproject = f["reproject"] and not args.no_reproject
    if not reproject:
        tol = np.inf
    z = args.z if args.z is not None else f["z"]
    for i, x0 in enumerate(_initial_states(cfg, args)):
        if x0.size != model.dim:
            raise ConfigError(f"initial state {i} has dimension {x0.size}, model expects {model.dim}")
        res = forecast_with_reprojection(model, x0, horizon, tol=tol, curvature=f["curvature"])
        res.to_csv(os.path.join(out, f"forecast_{i:03d}.csv"), z=z)
        if f["json_sidecar"]:
            res.to_json(os.path.join(out, f"forecast_{i:03d}.json"))
        if f["eigenfunctions"] or args.eigenfunctions:
            n = min(f["n_modes"], model.n_features)
            means, covs = eigenfunction_forecast(model, x0, horizon, curvature=f["curvature"])
            header = ["step"]
            for j in range(n):
                header += [f"re_{j + 1}", f"im_{j + 1}", f"var_{j + 1}"]
            rows = []
            for k in range(horizon + 1):
                row = [str(k)]
                for j in range(n):
                    row += [_fmt(means[k, j].real), _fmt(means[k, j].imag), _fmt(covs[k, j, j].real)]
                rows.append(row)
            _write_csv(os.path.join(out, f"eigenfunctions_{i:03d}.csv"), header, rows)


def cmd_benchmark(cfg, out):
    from .gp import fit_vfe
    from .metrics import gp_rollout_forecaster, multi_horizon_eval, spectral_forecaster
    from .model_selection import pipeline

    e = cfg["eval"]
    horizons = sorted(int(h) for h in e["horizons"])
    if not horizons or horizons[0] < 1:
        raise ConfigError("eval.horizons must be positive integers")
    for obj in e["objectives"]:
        if obj not in ("vfe", "vamp2"):
            raise ConfigError(f"eval.objectives entries must be 'vfe' or 'vamp2', got {obj!r}")
    seed = cfg["dataset"]["seed"]
    _, data = _snapshots(cfg, seed)
    X0, truth = _noise_free_rollouts(cfg, e["n_test"], e["test_seed"], horizons[-1])
    chash = config_hash(cfg)
    rows, dec_rows, manifest = [], [], {"config_hash": chash, "n_test": e["n_test"], "objectives": {}}
    for obj in e["objectives"]:
        res = pipeline(data, _selection_config(cfg, obj), _init_params(cfg, data.dim))
        p, Z = res.params, res.inducing
        models = {
            "gp_tcca": spectral_forecaster(_fit_model(cfg, data, Z, p, seed, method="tcca")),
            "exact_edmd": spectral_forecaster(_fit_model(cfg, data, Z, p, seed, method="edmd")),
            "sparse_gp": gp_rollout_forecaster(fit_vfe(data.X, data.Y, Z, p), data.standardizer),
        }
        manifest["objectives"][obj] = {
            "n_inducing": int(len(Z)),
            "params": p.to_dict(),
            "models": {name: {"params_hash": params_hash(p)} for name in models},
        }
        for name, fc in models.items():
            rep = multi_horizon_eval(fc, X0, truth, horizons, model_id=name, config_hash=chash)
            rows += [[obj, name, str(h), _fmt(v)] for _, h, v in rep.rows()]
        if e["decoupling"]:
            from .koopman import fit_tcca, select_lifted_noise

            tol = float(cfg["model"]["truncation_tol"])
            s2 = select_lifted_noise(data, Z, p)
            variants = {
                "coupled": fit_tcca(data, Z, p, tol),
                "decoupled": fit_tcca(data, Z, p.replace(lifted_noise_variance=s2), tol),
                "zero_lifted_noise": fit_tcca(data, Z, p, tol, lifted_noise_variance=0.0),
            }
            for name, m in variants.items():
                rep = multi_horizon_eval(spectral_forecaster(m), X0, truth, horizons, model_id=name)
                dec_rows += [[obj, name, str(h), _fmt(v)] for _, h, v in rep.rows()]
    _write_csv(os.path.join(out, "benchmark.csv"), ["objective", "model", "horizon", "smape"], rows)
    if e["decoupling"]:
        _write_csv(os.path.join(out, "decoupling.csv"), ["objective", "model", "horizon", "smape"], dec_rows)
    _write_json(os.path.join(out, "benchmark_manifest.json"), manifest)


def cmd_eigenfunctions(cfg, out, args):
    import numpy as np

    if not args.model:
        raise ConfigError("eigenfunctions needs --model PATH")
    model = _load_model(args.model)
    g = cfg["grid"]
    if model.dim != 2:
        raise ConfigError("eigenfunction grids need a 2-D model")
    nx, ny = g["nx"], g["ny"]
    if nx < 1 or ny < 1:
        raise ConfigError("grid.nx and grid.ny must be positive")
    if nx * ny > g["max_points"]:
        raise ConfigError(f"grid of {nx * ny} points exceeds grid.max_points={g['max_points']}")
    xs = np.linspace(float(g["x_range"][0]), float(g["x_range"][1]), nx)
    ys = np.linspace(float(g["y_range"][0]), float(g["y_range"][1]), ny)
    P = np.array([[x, y] for y in ys for x in xs])
    S = model.standardizer.transform(P)
    n = min(g["n_modes"], model.n_features)
    phi = model.eigenfunctions(S)[:, :n]
    W = model.right_eigvecs[:, :n]
    base = np.real(np.einsum("ai,ab,bi->i", W.conj(), model.K_bc, W))
    kappa = np.maximum(model.posterior_variance(S, lifted=True), 0.0)
    sd = np.sqrt(np.maximum(np.outer(kappa, base), 0.0))
    header = ["x_1", "x_2"]
    for j in range(n):
        header += [f"re_{j + 1}", f"im_{j + 1}", f"std_{j + 1}"]
    rows = []
    for i, p in enumerate(P):
        row = [_fmt(p[0]), _fmt(p[1])]
        for j in range(n):
            row += [_fmt(phi[i, j].real), _fmt(phi[i, j].imag), _fmt(sd[i, j])]
        rows.append(row)
    _write_csv(os.path.join(out, "eigenfunctions.csv"), header, rows)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpkoopman", description="Sparse Bayesian Koopman models (GP-DMD).")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override dataset.seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, help="cap on worker threads")
        return p

    common(sub.add_parser("simulate", help="simulate trajectories and snapshot pairs"))
    p = common(sub.add_parser("fit", help="select hyperparameters and fit a Koopman model"))
    p.add_argument("--data", help="dataset directory written by 'simulate'")
    p = common(sub.add_parser("forecast", help="multi-step forecast with uncertainty"))
    p.add_argument("--model", help="model.json written by 'fit'")
    p.add_argument("--x0", action="append", help="initial state as comma-separated values (repeatable)")
    p.add_argument("--horizon", type=int)
    p.add_argument("--tol", type=float, help="reprojection tolerance on ||diag K|| (standardized)")
    p.add_argument("--no-reproject", action="store_true")
    p.add_argument("--z", type=float, choices=(1.0, 2.0), help="interval half-width in standard deviations")
    p.add_argument("--eigenfunctions", action="store_true", help="also emit eigenfunction forecasts")
    common(sub.add_parser("benchmark", help="compare GP-TCCA, exact EDMD and sparse-GP rollouts"))
    p = common(sub.add_parser("eigenfunctions", help="evaluate eigenfunctions on a grid"))
    p.add_argument("--model", help="model.json written by 'fit'")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            return _fail("ConfigError", "--threads must be >= 1", 2)
        # effective when the numerical libraries have not been loaded yet
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    import numpy as np

    from .forecast import CovarianceBlowUpError
    from .koopman import RankCollapseError

    numerical = (np.linalg.LinAlgError, FloatingPointError, RankCollapseError, CovarianceBlowUpError,
                 NumericalError)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["dataset"]["seed"] = args.seed
        os.makedirs(args.out, exist_ok=True)
        if args.verb == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.verb == "fit":
            cmd_fit(cfg, args.out, args.data)
        elif args.verb == "forecast":
            cmd_forecast(cfg, args.out, args)
        elif args.verb == "benchmark":
            cmd_benchmark(cfg, args.out)
        elif args.verb == "eigenfunctions":
            cmd_eigenfunctions(cfg, args.out, args)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2)
    except numerical as exc:
        return _fail(type(exc).__name__, str(exc), 3)
    except OSError as exc:
        return _fail(type(exc).__name__, str(exc), 4)
    except Exception as exc:  # noqa: BLE001 - reported as JSON rather than a traceback
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
