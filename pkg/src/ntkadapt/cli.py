"""Experiment runner: strict key=value configs, seeded runs, CSV artifacts.

Three experiments are exposed: an adaptive-weight convergence study on the
1D Poisson problem, a Monte Carlo study of the randomized kernel estimators
on the quadratic regression, and a sketch-weighted wave-equation training
run with per-step collocation resampling.  Every artifact embeds the config
hash and seed; re-running with the same config and seed reproduces each CSV
byte for byte (timing columns are therefore left out of emitted files).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import ntk_sketch as sk
from . import trainer as tr
from .model import init_xavier
from .ntk_exact import dump_csv, ntk, ntk_weights
from .problems import (CollocationSet, GroupLayout, ResidualOp,
                       exact_solution_error, poisson1d, predict,
                       quadratic_regression, sample_collocation, wave1d)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

EXPERIMENTS = ("poisson-convergence", "quadratic-mc", "wave-pinn")

# RNG stream ids for run-level randomness, disjoint from the trainer's.
STREAM_INIT = 10
STREAM_MC = 11
STREAM_EST = 12


class ConfigError(Exception):
    pass


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _int(text):
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _float(text):
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}") from exc


def _int_list(text):
    return tuple(_int(part) for part in text.split(",") if part.strip())


def _float_list(text):
    return tuple(_float(part) for part in text.split(",") if part.strip())


def _str(text):
    return text


# Allowed sections/keys per experiment with (converter, default) pairs.
_TRAIN_COMMON = {
    "eta": (_float, None),
    "steps": (_int, None),
    "weight_mode": (_str, None),
    "update_every": (_int, 1),
    "resample": (_bool, False),
    "alpha": (_float, None),
    "init_samples": (_int, 1),
    "record_eigenvalues": (_bool, False),
    "exact_trace_every": (_int, 0),
    "spaced_c": (_float, None),
    "spaced_q": (_float, None),
    "spaced": (_bool, False),
}

_SKETCH = {"dt": (_float, 1e-4), "eps0": (_float, 1e-12)}

_SCHEMAS = {
    "poisson-convergence": {
        "experiment": {"name": (_str, "poisson-convergence"),
                       "seed": (_int, 0)},
        "model": {"hidden": (_int_list, (100,))},
        "points": {"D": (_int, 2), "B1": (_int, 1), "B2": (_int, 1),
                   "equispaced_interior": (_bool, True)},
        "train": dict(_TRAIN_COMMON,
                      eta=(_float, 1e-5), steps=(_int, 2000),
                      weight_mode=(_str, "exact-ntk"),
                      record_eigenvalues=(_bool, True)),
        "sketch": dict(_SKETCH),
    },
    "quadratic-mc": {
        "experiment": {"name": (_str, "quadratic-mc"), "seed": (_int, 0)},
        "data": {"n_points": (_int, 50), "noise_std": (_float, 2.0 ** -0.5)},
        "mc": {"mean_samples": (_int_list, (1, 2000, 20000)),
               "rate_samples": (_int_list, (1, 10, 100, 1000)),
               "replicates": (_int, 100),
               "estimate_samples": (_int, 2000)},
        "train": dict(_TRAIN_COMMON,
                      eta=(_float, 5e-3), steps=(_int, 100000),
                      weight_mode=(_str, "sketch"),
                      alpha=(_float, 1e-4)),
        "sketch": dict(_SKETCH),
        "init": {"theta0": (_float_list, (1.0, 1.0, 1.0))},
    },
    "wave-pinn": {
        "experiment": {"name": (_str, "wave-pinn"), "seed": (_int, 0)},
        "model": {"hidden": (_int_list, (64, 64))},
        "points": {"D": (_int, 300), "D_i": (_int, 300), "B_i": (_int, 100),
                   "B1": (_int, 100), "B2": (_int, 100)},
        "train": dict(_TRAIN_COMMON,
                      eta=(_float, 2e-6), steps=(_int, 5000),
                      weight_mode=(_str, "sketch"),
                      alpha=(_float, 1e-3), resample=(_bool, True),
                      init_samples=(_int, 100),
                      exact_trace_every=(_int, 50)),
        "sketch": dict(_SKETCH),
        "grid": {"resolution": (_int, 101)},
    },
}


def parse_config_text(text):
    """Sections of key=value lines; duplicate or stray entries are errors."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"line {lineno}: empty section name")
            if current in sections:
                raise ConfigError(
                    f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
        elif "=" in line:
            if current is None:
                raise ConfigError(
                    f"line {lineno}: key outside any section")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in sections[current]:
                raise ConfigError(
                    f"line {lineno}: duplicate key {key!r} in "
                    f"[{current}]")
            sections[current][key] = value.strip()
        else:
            raise ConfigError(f"line {lineno}: cannot parse {line!r}")
    return sections


def resolve_config(sections, experiment):
    """Validate against the experiment schema and fill defaults."""
    if experiment not in _SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    schema = _SCHEMAS[experiment]
    for sec in sections:
        if sec not in schema:
            raise ConfigError(f"unknown section [{sec}]")
        for key in sections[sec]:
            if key not in schema[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
    out = {}
    for sec, keys in schema.items():
        out[sec] = {}
        for key, (conv, default) in keys.items():
            if sec in sections and key in sections[sec]:
                out[sec][key] = conv(sections[sec][key])
            else:
                out[sec][key] = default
    name = out["experiment"]["name"]
    if name != experiment:
        raise ConfigError(
            f"config names experiment {name!r}, expected {experiment!r}")
    return out


def load_config(path, experiment):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    sha = hashlib.sha256(text.encode()).hexdigest()
    return resolve_config(parse_config_text(text), experiment), sha


def _train_config(cfg, layout, pts):
    t = cfg["train"]
    spaced = None
    if t["spaced"] or t["spaced_q"] is not None or t["spaced_c"] is not None:
        q = 0.5 if t["spaced_q"] is None else t["spaced_q"]
        spaced = (t["spaced_c"], q)
    kwargs = dict(
        eta=t["eta"], steps=t["steps"], weight_mode=t["weight_mode"],
        layout=layout, collocation=pts, update_every=t["update_every"],
        resample=t["resample"], seed=cfg["experiment"]["seed"],
        sketch=sk.SketchConfig(dt=cfg["sketch"]["dt"],
                               eps0=cfg["sketch"]["eps0"]),
        sketch_init_samples=t["init_samples"],
        record_eigenvalues=t["record_eigenvalues"],
        exact_trace_every=t["exact_trace_every"],
        spaced=spaced,
    )
    if t["alpha"] is not None:
        kwargs["sketch_alpha"] = t["alpha"]
    return tr.TrainConfig(**kwargs)


class _Artifacts:
    """Output directory writer stamping every file with hash and seed."""

    def __init__(self, out_dir, config_sha, seed):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.sha = config_sha
        self.seed = seed
        self.names = []

    def open_csv(self, name):
        fh = open(self.dir / name, "w")
        fh.write(f"# config_sha256={self.sha}\n# seed={self.seed}\n")
        self.names.append(name)
        return fh

    def write_json(self, name, payload):
        payload = dict(payload)
        payload["config_sha256"] = self.sha
        payload["seed"] = self.seed
        with open(self.dir / name, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.names.append(name)

    def manifest(self, experiment, summary):
        payload = {
            "experiment": experiment,
            "config_sha256": self.sha,
            "seed": self.seed,
            "artifacts": sorted(self.names),
            "summary": summary,
        }
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _poisson_points(cfg, seed):
    p = cfg["points"]
    layout = GroupLayout((("D", p["D"]), ("B1", p["B1"]), ("B2", p["B2"])))
    spec = poisson1d(hidden=cfg["model"]["hidden"])
    if p["equispaced_interior"]:
        n_d = p["D"]
        interior = (np.arange(1, n_d + 1) / (n_d + 1.0)).reshape(-1, 1)
        pts = CollocationSet(
            points={"D": interior, "B1": np.zeros((p["B1"], 1)),
                    "B2": np.ones((p["B2"], 1))},
            layout=layout)
    else:
        pts = sample_collocation(spec, layout,
                                 sk.stream(seed, tr.STREAM_POINTS))
    return spec, layout, pts


def run_poisson_convergence(cfg, sha, seed, out_dir):
    spec, layout, pts = _poisson_points(cfg, seed)
    theta0 = init_xavier(spec.model, seed=seed).values
    tcfg = tr.TrainConfig(**{
        **_train_config(cfg, layout, pts).__dict__,
        "store_params": True, "store_grads": True})
    trace = tr.train(spec, theta0, tcfg)

    art = _Artifacts(out_dir, sha, seed)
    with art.open_csv("trace.csv") as fh:
        trace.to_csv(fh, include_wall=False)

    cert = tr.theorem32_certificate(trace)
    with art.open_csv("time_averaged.csv") as fh:
        fh.write("T,avg_res_norm_sq,avg_gradG_norm_sq,"
                 "cert_lhs,cert_rhs,cert_holds\n")
        for i, horizon in enumerate(cert.horizons):
            fh.write(",".join([
                str(horizon),
                repr(float(tr.time_averaged_residuals(trace, horizon))),
                repr(float(tr.time_averaged_gradients(trace, horizon))),
                repr(float(cert.lhs[i])), repr(float(cert.rhs[i])),
                str(int(cert.holds[i])),
            ]) + "\n")

    diag = tr.assumption_diagnostics(trace)
    art.write_json("diagnostics.json", {
        "k_min": diag.k_min, "k_max": diag.k_max,
        "l_min": diag.l_min, "l_max": diag.l_max,
        "lipschitz": diag.lipschitz,
        "admissible_eta": diag.admissible_eta,
        "eta": tcfg.eta,
    })
    art.manifest("poisson-convergence", {
        "final_loss": float(trace.loss[-1]),
        "certificate_all_hold": bool(cert.all_hold),
        "admissible_eta": diag.admissible_eta,
    })
    print(f"final loss {trace.loss[-1]:.3e}; "
          f"admissible eta {diag.admissible_eta:.3e} "
          f"(run used {tcfg.eta:.3e})")
    return EXIT_OK


def run_quadratic_mc(cfg, sha, seed, out_dir):
    spec = quadratic_regression(noise_seed=seed,
                                n_points=cfg["data"]["n_points"],
                                noise_std=cfg["data"]["noise_std"])
    layout = GroupLayout((("D", cfg["data"]["n_points"]),))
    pts = sample_collocation(spec, layout, 0)
    rop = ResidualOp(spec, pts)
    theta0 = np.asarray(cfg["init"]["theta0"], dtype=np.float64)
    scfg = sk.SketchConfig(dt=cfg["sketch"]["dt"], eps0=cfg["sketch"]["eps0"])
    art = _Artifacts(out_dir, sha, seed)

    k_exact = ntk(rop.jacobian(theta0), layout)
    with art.open_csv("exact_ntk_theta0.csv") as fh:
        dump_csv(k_exact, fh)

    for idx, n_samples in enumerate(cfg["mc"]["mean_samples"]):
        kernel, _ = sk.monte_carlo_average(
            rop, theta0, scfg, n_samples,
            sk.stream(seed, 100 + idx))
        with art.open_csv(f"mc_mean_N{n_samples}.csv") as fh:
            dump_csv(kernel, fh)

    tr_exact = float(np.trace(k_exact.values))
    fro_exact_sq = float(np.sum(k_exact.values ** 2))
    replicates = cfg["mc"]["replicates"]
    with art.open_csv("mc_error_rates.csv") as fh:
        fh.write("N,matrix_mse,trace_mse\n")
        for n_samples in cfg["mc"]["rate_samples"]:
            mat_err = np.empty(replicates)
            tr_err = np.empty(replicates)
            for rep in range(replicates):
                rng = sk.stream((seed << 20) + rep * 4096 + n_samples,
                                STREAM_MC)
                kernel, trace_est = sk.monte_carlo_average(
                    rop, theta0, scfg, n_samples, rng)
                mat_err[rep] = np.sum((kernel.values - k_exact.values) ** 2)
                tr_err[rep] = (trace_est - tr_exact) ** 2
            fh.write(f"{n_samples},{float(np.mean(mat_err))!r},"
                     f"{float(np.mean(tr_err))!r}\n")

    tcfg = _train_config(cfg, layout, pts)
    trace = tr.train(spec, theta0, tcfg)
    with art.open_csv("trace.csv") as fh:
        trace.to_csv(fh, include_wall=False)
    theta_end = trace.theta_final

    with art.open_csv("exact_ntk_final.csv") as fh:
        dump_csv(ntk(rop.jacobian(theta_end), layout), fh)
    n_est = cfg["mc"]["estimate_samples"]
    for tag, theta in (("theta0", theta0), ("final", theta_end)):
        kernel, _ = sk.monte_carlo_average(
            rop, theta, scfg, n_est, sk.stream(seed, STREAM_EST))
        with art.open_csv(f"est_ntk_{tag}.csv") as fh:
            dump_csv(kernel, fh)

    grid = np.stack([np.linspace(-1.0, 1.0, 201),
                     np.zeros(201)], axis=1)
    rel_err = exact_solution_error(spec, theta_end, grid)
    art.manifest("quadratic-mc", {
        "final_loss": float(trace.loss[-1]),
        "predictor_rel_l2_error": rel_err,
        "exact_trace_theta0": tr_exact,
        "exact_frobenius_sq_theta0": fro_exact_sq,
    })
    print(f"predictor relative L2 error {rel_err:.3e}")
    return EXIT_OK


def run_wave_pinn(cfg, sha, seed, out_dir):
    spec = wave1d(hidden=cfg["model"]["hidden"])
    p = cfg["points"]
    layout = GroupLayout(tuple((name, p[name])
                               for name in ("D", "D_i", "B_i", "B1", "B2")))
    pts = sample_collocation(spec, layout, sk.stream(seed, tr.STREAM_POINTS))
    theta0 = init_xavier(spec.model, seed=seed).values
    tcfg = _train_config(cfg, layout, pts)
    trace = tr.train(spec, theta0, tcfg)

    art = _Artifacts(out_dir, sha, seed)
    with art.open_csv("trace.csv") as fh:
        trace.to_csv(fh, include_wall=False)

    # Estimated weights each step; exact trace-ratio weights at the logged
    # comparison steps.
    exact_at = {}
    for step, traces in zip(trace.exact_trace_steps,
                            trace.exact_group_traces):
        total = sum(traces.values())
        exact_at[step] = {name: total / traces[name]
                          for name in layout.names}
    with art.open_csv("weights_trace.csv") as fh:
        cols = ["step"] + [f"w_{n}_est" for n in layout.names]
        cols += [f"w_{n}_exact" for n in layout.names]
        fh.write(",".join(cols) + "\n")
        for t in range(trace.n_records):
            row = [str(t)]
            row += [repr(float(trace.weights[t][n]))
                    for n in layout.names]
            if t in exact_at:
                row += [repr(float(exact_at[t][n]))
                        for n in layout.names]
            else:
                row += [""] * len(layout.names)
            fh.write(",".join(row) + "\n")

    res = cfg["grid"]["resolution"]
    xs = np.linspace(0.0, 1.0, res)
    ts = np.linspace(0.0, 1.0, res)
    gx, gt = np.meshgrid(xs, ts, indexing="ij")
    grid = np.stack([gx.ravel(), gt.ravel()], axis=1)
    u_pred = predict(spec, trace.theta_final, grid)
    u_exact = spec.exact(grid)
    with art.open_csv("error_grid.csv") as fh:
        fh.write("x,t,u_pred,u_exact\n")
        for i in range(len(grid)):
            fh.write(f"{float(grid[i, 0])!r},{float(grid[i, 1])!r},"
                     f"{float(u_pred[i])!r},{float(u_exact[i])!r}\n")
    rel_err = exact_solution_error(spec, trace.theta_final, grid)

    match = ordering_match_fraction(trace)
    art.manifest("wave-pinn", {
        "final_loss": float(trace.loss[-1]),
        "relative_l2_error": rel_err,
        "ordering_match_fraction": match,
    })
    print(f"relative L2 error {rel_err:.3e}; "
          f"weight-ordering match {match:.3f}")
    return EXIT_OK


def ordering_match_fraction(trace):
    """Share of exact-trace log steps whose group ordering by weight agrees
    with the estimated weights' ordering."""
    if not trace.exact_trace_steps:
        return float("nan")
    names = trace.layout.names
    hits = 0
    for step, traces in zip(trace.exact_trace_steps,
                            trace.exact_group_traces):
        total = sum(traces.values())
        exact_w = [total / traces[n] for n in names]
        est_w = [trace.weights[step][n] for n in names]
        if np.argsort(exact_w).tolist() == np.argsort(est_w).tolist():
            hits += 1
    return hits / len(trace.exact_trace_steps)


_RUNNERS = {
    "poisson-convergence": run_poisson_convergence,
    "quadratic-mc": run_quadratic_mc,
    "wave-pinn": run_wave_pinn,
}


def cmd_run(args):
    cfg, sha = load_config(args.config, args.experiment)
    cfg["experiment"]["seed"] = args.seed
    return _RUNNERS[args.experiment](cfg, sha, args.seed, args.out)


def cmd_dump_ntk(args):
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}")
    sections = parse_config_text(text)
    name = sections.get("experiment", {}).get("name")
    if name is None:
        raise ConfigError(
            "dump-ntk needs an [experiment] section with a name key")
    cfg = resolve_config(sections, name)
    sha = hashlib.sha256(text.encode()).hexdigest()
    seed = cfg["experiment"]["seed"]
    if args.step < 0:
        raise ConfigError("step must be >= 0")

    if name == "poisson-convergence":
        spec, layout, pts = _poisson_points(cfg, seed)
        theta0 = init_xavier(spec.model, seed=seed).values
    elif name == "wave-pinn":
        spec = wave1d(hidden=cfg["model"]["hidden"])
        p = cfg["points"]
        layout = GroupLayout(tuple((n, p[n])
                                   for n in ("D", "D_i", "B_i", "B1", "B2")))
        pts = sample_collocation(spec, layout,
                                 sk.stream(seed, tr.STREAM_POINTS))
        theta0 = init_xavier(spec.model, seed=seed).values
    else:
        spec = quadratic_regression(noise_seed=seed,
                                    n_points=cfg["data"]["n_points"],
                                    noise_std=cfg["data"]["noise_std"])
        layout = GroupLayout((("D", cfg["data"]["n_points"]),))
        pts = sample_collocation(spec, layout, 0)
        theta0 = np.asarray(cfg["init"]["theta0"], dtype=np.float64)

    if args.step == 0:
        theta = theta0
    else:
        tcfg = tr.TrainConfig(**{
            **_train_config(cfg, layout, pts).__dict__,
            "steps": args.step, "record_eigenvalues": False,
            "exact_trace_every": 0})
        theta = tr.train(spec, theta0, tcfg).theta_final
    rop = ResidualOp(spec, pts)
    kernel = ntk(rop.jacobian(theta), layout)
    sys.stdout.write(f"# config_sha256={sha}\n# seed={seed}\n"
                     f"# step={args.step}\n")
    dump_csv(kernel, sys.stdout)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ntkadapt",
        description="Adaptive-weight residual training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    dump = sub.add_parser("dump-ntk",
                          help="print the exact kernel at a training step")
    dump.add_argument("--config", required=True)
    dump.add_argument("--step", type=int, required=True)
    dump.set_defaults(func=cmd_dump_ntk)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
