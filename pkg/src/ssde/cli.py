"""Command-line front end: ``ssde simulate | infer | diagnose``.

One JSON configuration document supplies the model, hyperparameters, grid
and sampler settings; command-line flags override file values.  Exit
codes: 0 ok, 2 usage or validation failure, 3 numerical failure, 4 I/O
failure.  Every failure prints a single ``error: ...`` line to stderr.
``SSDE_LOG`` (error|info|debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as ssde_io
from .diffusion import run_information_filter
from .model import ObservationSet, TimeGrid
from .sampler import (SamplerConfig, compute_diagnostics, empirical_marginals,
                      ess_batch_means, run_sampler)
from .simulate import generate_observations, simulate_mjp, simulate_ssde
from .switching import run_ks_filter

log = logging.getLogger("ssde.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _configure_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SSDE_LOG", "error"),
                                         logging.ERROR)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssde",
                     description="Gibbs sampling for switching SDE models")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration document")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=int, default=None, help="64-bit RNG seed")

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="draw ground-truth paths and observations")
    p_sim.set_defaults(func=cmd_simulate)

    p_inf = sub.add_parser("infer", parents=[common],
                           help="run the Gibbs sampler on observations")
    p_inf.add_argument("--data", type=Path, help="observation CSV (t,x1..xn)")
    p_inf.add_argument("--samples", type=int, default=None)
    p_inf.add_argument("--burnin", type=int, default=None)
    p_inf.add_argument("--thin", type=int, default=None)
    p_inf.add_argument("--chains", type=int, default=1)
    p_inf.add_argument("--stride", type=int, default=None)
    p_inf.add_argument("--dump-filter", action="store_true")
    p_inf.add_argument("--store-raw", action="store_true")
    p_inf.set_defaults(func=cmd_infer)

    p_diag = sub.add_parser("diagnose", help="recompute diagnostics from a store")
    p_diag.add_argument("store", type=Path, help="directory containing params.jsonl")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def _load_config(args) -> dict:
    if args.config is None:
        raise ValueError("a --config document is required")
    if not args.config.exists():
        raise OSError(f"config file not found: {args.config}")
    return ssde_io.read_model_file(args.config)


def _grid_from_config(cfg: dict) -> TimeGrid:
    section = cfg.get("grid") or {}
    if "h" not in section or "T" not in section:
        raise ValueError("config must provide grid.T and grid.h")
    return TimeGrid(float(section["T"]), float(section["h"]))


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    params = cfg["params"]
    if params is None:
        raise ValueError("simulate requires a full model in the config")
    grid = _grid_from_config(cfg)
    obs_spec = cfg.get("observations") or {}
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    z = simulate_mjp(params.rates, params.init.pi, grid.horizon, rng)
    y0 = params.init.mu0 + params.init.chol_Sigma0 @ rng.standard_normal(params.n_dim)
    y = simulate_ssde(z, params.modes, y0, grid, rng)
    if "times" in obs_spec:
        times = np.asarray(obs_spec["times"], dtype=float)
    else:
        count = int(obs_spec.get("count", 20))
        times = grid.horizon * np.arange(1, count + 1) / count
    obs = generate_observations(y, times, params.obs.Sigma_x, rng)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ssde_io.write_mode_path_csv(out / "truth_z.csv", z, grid)
    ssde_io.write_path_csv(out / "truth_y.csv", y.values, grid.times, prefix="y")
    ssde_io.write_observations_csv(out / "obs.csv", obs)
    for name in ("truth_z.csv", "truth_y.csv", "obs.csv"):
        print(out / name)
    return EXIT_OK


def _sampler_settings(cfg: dict, args) -> dict:
    section = cfg.get("sampler") or {}
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return section.get(key, default)
    return {
        "samples": int(pick(args.samples, "samples", 1000)),
        "burnin": pick(args.burnin, "burnin", None),
        "thin": int(pick(args.thin, "thin", 1)),
        "stride": int(pick(args.stride, "stride", 1)),
        "seed": int(pick(args.seed, "seed", 0)),
        "modes": section.get("modes"),
    }


def _run_one_chain(config_path, data_path, out_dir, seed_seq, settings,
                   dump_filter, store_raw) -> None:
    cfg = ssde_io.read_model_file(config_path)
    obs = ssde_io.read_observations_csv(data_path)
    grid = _grid_from_config(cfg)
    n_modes = settings["modes"] or (cfg["params"].n_modes if cfg["params"] else None)
    if n_modes is None:
        raise ValueError("number of modes unspecified (sampler.modes or a model)")
    burnin = settings["burnin"]
    sconf = SamplerConfig(grid=grid, n_modes=int(n_modes),
                          num_samples=settings["samples"],
                          burn_in=None if burnin is None else int(burnin),
                          thin=settings["thin"], stride=settings["stride"])
    rng = np.random.default_rng(seed_seq)
    store, diags = run_sampler(sconf, obs, rng, hyper=cfg["hyper"],
                               params0=cfg["params"], seed=settings["seed"])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marg = empirical_marginals(store, grid)
    ssde_io.write_z_marginal_csv(out_dir / "z_marginal.csv", grid.times, marg.z_probs)
    ssde_io.write_y_marginal_csv(out_dir / "y_marginal.csv",
                                 marg.y_indices * grid.step, marg.y_mean,
                                 marg.y_q05, marg.y_q95)
    ssde_io.write_params_jsonl(out_dir / "params.jsonl", store)
    _write_diagnostics(out_dir / "diagnostics.json", diags)
    if dump_filter:
        state = store.final_state
        bi = run_information_filter(state.z, state.params.modes, obs,
                                    state.params.obs.Sigma_x, grid)
        ft = run_ks_filter(state.y, state.params.modes, state.params.rates,
                           state.params.init.pi, grid)
        ssde_io.write_filter_dump(out_dir, bi, ft)
    if store_raw:
        raw = out_dir / "samples"
        raw.mkdir(exist_ok=True)
        with open(raw / "z_paths.jsonl", "w") as fh:
            for sweep, zp in zip(store.sweeps, store.z_paths):
                fh.write(json.dumps({
                    "sweep": sweep,
                    "jump_times": zp.jump_times.tolist(),
                    "states": [int(s) + 1 for s in zp.states],
                }) + "\n")
        np.savez_compressed(raw / "y_draws.npz",
                            y=np.stack(store.y_draws),
                            grid_indices=store.y_indices,
                            times=store.y_indices * grid.step)


def _write_diagnostics(path, diags) -> None:
    doc = {
        "ess": {k: float(v) for k, v in sorted(diags.ess.items())},
        "mala_acceptance": [float(a) for a in diags.mala_acceptance],
        "n_retained": diags.n_retained,
        "sweep_time_mean_s": None if np.isnan(diags.sweep_time_mean)
        else diags.sweep_time_mean,
        "sweep_time_total_s": None if np.isnan(diags.sweep_time_total)
        else diags.sweep_time_total,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    if args.data is None:
        raise ValueError("--data observation CSV is required")
    if not args.data.exists():
        raise OSError(f"data file not found: {args.data}")
    settings = _sampler_settings(cfg, args)
    chains = max(1, int(args.chains))
    root = np.random.SeedSequence(settings["seed"])
    if chains == 1:
        _run_one_chain(args.config, args.data, args.out, root, settings,
                       args.dump_filter, args.store_raw)
        print(args.out / "params.jsonl")
        return EXIT_OK
    seqs = root.spawn(chains)
    dirs = [args.out / f"chain_{c + 1:02d}" for c in range(chains)]
    with concurrent.futures.ProcessPoolExecutor(max_workers=chains) as pool:
        futs = [pool.submit(_run_one_chain, args.config, args.data, d, s,
                            settings, args.dump_filter, args.store_raw)
                for d, s in zip(dirs, seqs)]
        for fut in futs:
            fut.result()
    for d in dirs:
        print(d / "params.jsonl")
    return EXIT_OK


def _traces_from_records(records: list) -> tuple[dict, int, int]:
    k = len(records[0]["rates"])
    n = len(records[0]["mu0"])
    traces = {}

    def grab(name, fn):
        traces[name] = np.array([fn(r) for r in records])

    for i in range(k):
        for j in range(k):
            if i != j:
                grab(f"rate[{i + 1},{j + 1}]", lambda r, i=i, j=j: r["rates"][i][j])
        grab(f"pi[{i + 1}]", lambda r, i=i: r["pi"][i])
    for i in range(n):
        grab(f"mu0[{i + 1}]", lambda r, i=i: r["mu0"][i])
        for j in range(i, n):
            grab(f"Sigma0[{i + 1},{j + 1}]", lambda r, i=i, j=j: r["Sigma0"][i][j])
            grab(f"Sigma_x[{i + 1},{j + 1}]", lambda r, i=i, j=j: r["Sigma_x"][i][j])
    for z in range(k):
        for i in range(n):
            grab(f"b[{z + 1}][{i + 1}]", lambda r, z=z, i=i: r["modes"][z]["b"][i])
            for j in range(n):
                grab(f"A[{z + 1}][{i + 1},{j + 1}]",
                     lambda r, z=z, i=i, j=j: r["modes"][z]["A"][i][j])
            for j in range(i, n):
                grab(f"D[{z + 1}][{i + 1},{j + 1}]",
                     lambda r, z=z, i=i, j=j: r["modes"][z]["D"][i][j])
    return traces, k, n


def cmd_diagnose(args) -> int:
    store_dir = args.store
    params_path = store_dir / "params.jsonl"
    if not params_path.exists():
        raise OSError(f"no params.jsonl under {store_dir}")
    records = ssde_io.read_params_jsonl(params_path)
    if not records:
        raise ValueError(f"empty store: {params_path}")
    traces, k, _ = _traces_from_records(records)
    ess = {}
    for name, tr in traces.items():
        val = ess_batch_means(tr)
        if np.isfinite(val):
            ess[name] = val
    if "mala_accepted" in records[0]:
        acc = np.mean([[float(a) for a in r["mala_accepted"]] for r in records],
                      axis=0)
    else:
        acc = np.zeros(k)
    doc = {
        "ess": {key: float(v) for key, v in sorted(ess.items())},
        "mala_acceptance": [float(a) for a in acc],
        "n_retained": len(records),
        "sweep_time_mean_s": None,
        "sweep_time_total_s": None,
    }
    (store_dir / "diagnostics.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(store_dir / "diagnostics.json")
    return EXIT_OK


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
