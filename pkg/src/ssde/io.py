"""File formats: JSON model/hyperparameter documents and CSV tables.

The model document is a single JSON object with keys ``rates`` (K x K),
``modes`` (list of ``{A, b, Q}``), ``init`` (``{pi, mu0, Sigma0}``),
``obs`` (``{Sigma_x}``) and optionally ``hyper`` mirroring the
:class:`~ssde.model.PriorHyperparams` field names, plus optional ``grid``,
``sampler`` and ``observations`` sections consumed by the CLI.

CSV output is RFC-4180 (CRLF records) with ``.`` decimal separators and 17
significant digits, so write/read round-trips are value-identical to
float precision.  Mode labels in files are 1-based.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import (InitialLaw, MjpPath, ModeDynamics, ModelParams,
                    ObservationModel, ObservationSet, PriorHyperparams,
                    RateMatrix, TimeGrid)

FLOAT_FMT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


# ---------------------------------------------------------------------------
# JSON model document
# ---------------------------------------------------------------------------

def params_to_dict(p: ModelParams) -> dict:
    return {
        "rates": p.rates.matrix.tolist(),
        "modes": [{"A": m.A.tolist(), "b": m.b.tolist(), "Q": m.Q.tolist()}
                  for m in p.modes],
        "init": {"pi": p.init.pi.tolist(), "mu0": p.init.mu0.tolist(),
                 "Sigma0": p.init.Sigma0.tolist()},
        "obs": {"Sigma_x": p.obs.Sigma_x.tolist()},
    }


def params_from_dict(doc: dict) -> ModelParams:
    try:
        rates = RateMatrix(np.array(doc["rates"], dtype=float))
        modes = tuple(ModeDynamics(np.array(m["A"], dtype=float),
                                   np.array(m["b"], dtype=float),
                                   np.array(m["Q"], dtype=float))
                      for m in doc["modes"])
        init = InitialLaw(np.array(doc["init"]["pi"], dtype=float),
                          np.array(doc["init"]["mu0"], dtype=float),
                          np.array(doc["init"]["Sigma0"], dtype=float))
        obs = ObservationModel(np.array(doc["obs"]["Sigma_x"], dtype=float))
    except KeyError as exc:
        raise ValueError(f"model document is missing key {exc}") from None
    return ModelParams(rates, modes, init, obs)


def hyper_to_dict(h: PriorHyperparams) -> dict:
    return {
        "alpha": h.alpha.tolist(), "eta": h.eta.tolist(), "lambda": h.lam,
        "Psi": h.Psi.tolist(), "kappa": h.kappa, "s": h.s, "r": h.r,
        "M": h.M.tolist(), "K": h.K_mat.tolist(),
        "Psi_D": h.Psi_D.tolist(), "lambda_D": h.lam_D.tolist(),
        "Psi_x": h.Psi_x.tolist(), "lambda_x": h.lam_x, "xi": h.xi,
    }


def hyper_from_dict(doc: dict) -> PriorHyperparams:
    try:
        return PriorHyperparams(
            alpha=np.array(doc["alpha"], dtype=float),
            eta=np.array(doc["eta"], dtype=float),
            lam=float(doc["lambda"]),
            Psi=np.array(doc["Psi"], dtype=float),
            kappa=float(doc["kappa"]),
            s=float(doc["s"]), r=float(doc["r"]),
            M=np.array(doc["M"], dtype=float),
            K_mat=np.array(doc["K"], dtype=float),
            Psi_D=np.array(doc["Psi_D"], dtype=float),
            lam_D=np.array(doc["lambda_D"], dtype=float),
            Psi_x=np.array(doc["Psi_x"], dtype=float),
            lam_x=float(doc["lambda_x"]),
            xi=float(doc["xi"]),
        )
    except KeyError as exc:
        raise ValueError(f"hyper document is missing key {exc}") from None


def write_model_file(path, params: ModelParams,
                     hyper: Optional[PriorHyperparams] = None,
                     extra: Optional[dict] = None) -> None:
    doc = params_to_dict(params)
    if hyper is not None:
        doc["hyper"] = hyper_to_dict(hyper)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_model_file(path) -> dict:
    """Parse a model document.

    Returns a dict with ``params`` (None when no model section is present,
    e.g. an inference config relying on empirical initialization), optional
    ``hyper``, and the raw ``grid``/``sampler``/``observations`` sections.
    """
    doc = json.loads(Path(path).read_text())
    out = {"params": params_from_dict(doc) if "rates" in doc else None}
    out["hyper"] = hyper_from_dict(doc["hyper"]) if "hyper" in doc else None
    for key in ("grid", "sampler", "observations"):
        out[key] = doc.get(key)
    return out


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def _write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def write_observations_csv(path, obs: ObservationSet) -> None:
    n = obs.n_dim
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    rows = ([_fmt(t)] + [_fmt(v) for v in x]
            for t, x in zip(obs.times, obs.values))
    _write_csv(path, header, rows)


def read_observations_csv(path) -> ObservationSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "t":
            raise ValueError("observation CSV must start with header 't,x1,...'")
        n = len(header) - 1
        expected = [f"x{i + 1}" for i in range(n)]
        got = [c.strip() for c in header[1:]]
        if got != expected or n < 1:
            missing = next((c for c in expected if c not in got), "x1")
            raise ValueError(f"observation CSV is missing column '{missing}'")
        times, values = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != n + 1:
                raise ValueError(f"observation CSV row has {len(row)} fields, expected {n + 1}")
            times.append(float(row[0]))
            values.append([float(v) for v in row[1:]])
    return ObservationSet(np.array(times), np.array(values, dtype=float).reshape(len(times), n))


def write_mode_path_csv(path, z: MjpPath, grid: TimeGrid) -> None:
    """Mode at every grid point, 1-based labels; header ``t,z``."""
    modes = z.modes_on_grid(grid)
    rows = ([_fmt(t), str(int(m) + 1)] for t, m in zip(grid.times, modes))
    _write_csv(path, ["t", "z"], rows)


def write_path_csv(path, values: np.ndarray, times: np.ndarray,
                   prefix: str = "y") -> None:
    n = values.shape[1]
    header = ["t"] + [f"{prefix}{i + 1}" for i in range(n)]
    rows = ([_fmt(t)] + [_fmt(v) for v in row]
            for t, row in zip(times, values))
    _write_csv(path, header, rows)


def write_z_marginal_csv(path, times: np.ndarray, probs: np.ndarray) -> None:
    k = probs.shape[1]
    header = ["t"] + [f"p{z + 1}" for z in range(k)]
    rows = ([_fmt(t)] + [_fmt(v) for v in row]
            for t, row in zip(times, probs))
    _write_csv(path, header, rows)


def write_y_marginal_csv(path, times: np.ndarray, mean: np.ndarray,
                         q05: np.ndarray, q95: np.ndarray) -> None:
    n = mean.shape[1]
    header = (["t"] + [f"mean{i + 1}" for i in range(n)]
              + [f"q05_{i + 1}" for i in range(n)]
              + [f"q95_{i + 1}" for i in range(n)])
    rows = ([_fmt(t)] + [_fmt(v) for v in m] + [_fmt(v) for v in lo]
            + [_fmt(v) for v in hi]
            for t, m, lo, hi in zip(times, mean, q05, q95))
    _write_csv(path, header, rows)


def write_filter_dump(out_dir, bi, ft) -> None:
    """Debug dump of the two filter trajectories from one sweep."""
    out_dir = Path(out_dir)
    times = bi.grid.times
    n = bi.linear.shape[1]
    header = (["t"] + [f"I{i + 1}{j + 1}" for i in range(n) for j in range(n)]
              + [f"a{i + 1}" for i in range(n)])
    rows = ([_fmt(t)] + [_fmt(v) for v in I.ravel()] + [_fmt(v) for v in a]
            for t, I, a in zip(times, bi.precision, bi.linear))
    _write_csv(out_dir / "filter_information.csv", header, rows)
    write_z_marginal_csv(out_dir / "filter_modes.csv", ft.grid.times, ft.probs)


# ---------------------------------------------------------------------------
# Sample store persistence
# ---------------------------------------------------------------------------

def params_record(sweep: int, p: ModelParams, mala_accepted) -> dict:
    rec = {
        "sweep": sweep,
        "rates": p.rates.matrix.tolist(),
        "modes": [{"A": m.A.tolist(), "b": m.b.tolist(), "D": m.D.tolist()}
                  for m in p.modes],
        "pi": p.init.pi.tolist(),
        "mu0": p.init.mu0.tolist(),
        "Sigma0": p.init.Sigma0.tolist(),
        "Sigma_x": p.obs.Sigma_x.tolist(),
    }
    if mala_accepted is not None:
        rec["mala_accepted"] = [bool(a) for a in mala_accepted]
    return rec


def write_params_jsonl(path, store) -> None:
    with open(path, "w") as fh:
        for sweep, p, acc in zip(store.sweeps, store.params, store.mala_accepted):
            fh.write(json.dumps(params_record(sweep, p, acc)) + "\n")


def read_params_jsonl(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
