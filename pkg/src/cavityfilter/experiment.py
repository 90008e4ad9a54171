"""Experiment runner: config parsing, ensemble execution, CSV persistence.

The configuration format is flat ``key = value`` text with ``#`` comments.
An experiment simulates an ensemble of classical disturbance paths (one per
trajectory seed), an ensemble of quantum truth records, runs the selected
filters on the records, and persists per-grid-point ensemble means to CSV
with a metadata sidecar that echoes the configuration.

Seeding: trajectory i draws its classical path from stream [base_seed, 0, i],
its truth record from [base_seed, 1, i], and, in independent-record mode, the
second record consumed by the Kalman filter from [base_seed, 2, i].
Aggregation is by trajectory index, so results do not depend on worker count.
"""

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import qekf as qekf_mod
from . import sme as sme_mod
from ._backend import backend_name
from ._version import __version__
from .classical import OuParams, simulate_ou_ensemble, time_grid
from .errors import ConfigError, InstabilityError, RunFailure
from .model import build_combined_model, map_classical_to_cavity, quadrature_ops
from .operators import SpaceLayout, expectation

_VALID_FILTERS = ("sme", "qekf")
_VALID_RECORD_MODES = ("shared", "independent")

CSV_HEADER = "t,q_true_mean,q_hat_sme_mean,q_hat_qekf_mean,q1_hat_sme,q1_hat_qekf,n_traj,seed"


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment parameters; defaults reproduce the reference scenario."""

    u: float = 0.25
    v: float = 0.125
    q0: float = 1.0 / (4.0 * np.sqrt(2.0))
    k1: float = 0.55
    fock_dims: tuple = (2, 2)
    dt: float = 1e-3
    t_final: float = 20.0
    n_traj: int = 500
    base_seed: int = 0
    p0_scale: float = 0.25
    xi: float = 0.0
    x0_override: tuple = None
    filters: frozenset = frozenset(("sme", "qekf"))
    record_mode: str = "shared"
    out_path: str = "run.csv"


def _parse_float(text):
    return float(text)


def _parse_int(text):
    value = int(text, 10)
    return value


def _parse_dims(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty dimension list")
    return tuple(int(p, 10) for p in parts)


def _parse_x0(text):
    if text.lower() == "none":
        return None
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"need 4 components, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_filters(text):
    if text.lower() == "none" or text == "":
        return frozenset()
    parts = [p.strip() for p in text.split(",") if p.strip()]
    for p in parts:
        if p not in _VALID_FILTERS:
            raise ValueError(f"unknown filter {p!r}, valid: {', '.join(_VALID_FILTERS)}")
    return frozenset(parts)


def _parse_record_mode(text):
    if text not in _VALID_RECORD_MODES:
        raise ValueError(
            f"unknown record mode {text!r}, valid: {', '.join(_VALID_RECORD_MODES)}"
        )
    return text


def _parse_path(text):
    if not text:
        raise ValueError("empty path")
    return text


_PARSERS = {
    "u": _parse_float,
    "v": _parse_float,
    "q0": _parse_float,
    "k1": _parse_float,
    "fock_dims": _parse_dims,
    "dt": _parse_float,
    "t_final": _parse_float,
    "n_traj": _parse_int,
    "base_seed": _parse_int,
    "p0_scale": _parse_float,
    "xi": _parse_float,
    "x0_override": _parse_x0,
    "filters": _parse_filters,
    "record_mode": _parse_record_mode,
    "out_path": _parse_path,
}


def _validate(cfg, lines):
    def where(key):
        return f"line {lines[key]}" if key in lines else "default"

    def fail(key, reason):
        raise ConfigError(f"{key} ({where(key)}): {reason}")

    if not cfg.u > 0:
        fail("u", f"must be positive, got {cfg.u}")
    if cfg.v == 0:
        fail("v", "must be nonzero")
    if not cfg.k1 > 0:
        fail("k1", f"must be positive, got {cfg.k1}")
    if len(cfg.fock_dims) != 2:
        fail("fock_dims", f"need exactly 2 subsystems, got {len(cfg.fock_dims)}")
    for d in cfg.fock_dims:
        if d < 2:
            fail("fock_dims", f"each dimension must be at least 2, got {d}")
    if not cfg.dt > 0:
        fail("dt", f"must be positive, got {cfg.dt}")
    if not cfg.t_final >= cfg.dt:
        fail("t_final", f"must be at least dt = {cfg.dt}, got {cfg.t_final}")
    if cfg.n_traj < 1:
        fail("n_traj", f"must be at least 1, got {cfg.n_traj}")
    if cfg.base_seed < 0:
        fail("base_seed", f"must be nonnegative, got {cfg.base_seed}")
    if not cfg.p0_scale > 0:
        fail("p0_scale", f"must be positive, got {cfg.p0_scale}")
    return cfg


def parse_config(source):
    """Parse ``key = value`` text into a validated ExperimentConfig.

    Unknown keys, duplicate keys, unparsable values, and invariant violations
    raise ConfigError naming the key and line. ``#`` starts a comment; blank
    lines are ignored; an empty source yields the defaults.
    """
    values = {}
    lines = {}
    for ln, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"unknown key {key!r} at line {ln}")
        if key in values:
            raise ConfigError(f"duplicate key {key!r} at line {ln} (first at line {lines[key]})")
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key} (line {ln}): cannot parse {value!r}: {exc}") from exc
        lines[key] = ln
    cfg = ExperimentConfig(**values)
    return _validate(cfg, lines)


def config_echo(cfg):
    """Canonical text form of a config; parse_config(config_echo(cfg)) == cfg."""
    out = [
        f"u = {cfg.u!r}",
        f"v = {cfg.v!r}",
        f"q0 = {cfg.q0!r}",
        f"k1 = {cfg.k1!r}",
        "fock_dims = " + ",".join(str(d) for d in cfg.fock_dims),
        f"dt = {cfg.dt!r}",
        f"t_final = {cfg.t_final!r}",
        f"n_traj = {cfg.n_traj}",
        f"base_seed = {cfg.base_seed}",
        f"p0_scale = {cfg.p0_scale!r}",
        f"xi = {cfg.xi!r}",
        "x0_override = "
        + ("none" if cfg.x0_override is None else ",".join(repr(float(x)) for x in cfg.x0_override)),
        "filters = "
        + ("none" if not cfg.filters else ",".join(f for f in _VALID_FILTERS if f in cfg.filters)),
        f"record_mode = {cfg.record_mode}",
        f"out_path = {cfg.out_path}",
    ]
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class RunResult:
    """Ensemble output on the config's grid.

    Per-trajectory series are (n_traj, n_points) arrays, or None for a filter
    that was not run; means are per-grid-point vectors, nan for disabled
    filters. health holds per-trajectory state-invariant extrema from the
    conditional-state runs and covariance health counts from the Kalman runs;
    record_digests holds the sha256 of the increment series each filter
    consumed; aborts lists (index, seed, message) for failed trajectories.
    """

    t: np.ndarray
    q_true: np.ndarray
    q_hat_sme: np.ndarray
    q1_hat_sme: np.ndarray
    q_hat_qekf: np.ndarray
    q1_hat_qekf: np.ndarray
    q_true_mean: np.ndarray
    q_hat_sme_mean: np.ndarray
    q_hat_qekf_mean: np.ndarray
    q1_hat_sme_mean: np.ndarray
    q1_hat_qekf_mean: np.ndarray
    n_traj: int
    base_seed: int
    config: ExperimentConfig
    version: str
    health: dict
    record_digests: list
    aborts: list


@lru_cache(maxsize=8)
def _build_scene(cfg):
    params = OuParams(u=cfg.u, v=cfg.v, q0=cfg.q0)
    mapping = map_classical_to_cavity(params)
    layout = SpaceLayout(cfg.fock_dims)
    model = build_combined_model(cfg.k1, mapping, layout)
    rho0 = sme_mod.default_rho0(layout)
    if cfg.x0_override is not None:
        x0 = np.array(cfg.x0_override, dtype=np.float64)
    else:
        quads = quadrature_ops(layout)
        x0 = np.array([expectation(rho0, q).real for q in quads])
    x0 = x0 + cfg.xi * np.array([0.5, 0.5, 0.5, 0.5])
    p0 = cfg.p0_scale * np.eye(4)
    fns = qekf_mod.two_cavity_fns(model)
    return params, model, rho0, x0, p0, fns


def _digest(values):
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def _run_single_trajectory(cfg, index):
    """One trajectory of the ensemble: truth record plus selected filters.

    Returns a dict of row vectors and diagnostics; raises InstabilityError
    if a filter aborts.
    """
    _, model, rho0, x0, p0, fns = _build_scene(cfg)
    out = {}
    truth = sme_mod.simulate_truth(
        model,
        rho0,
        cfg.dt,
        cfg.t_final,
        [cfg.base_seed, 1, index],
        keep_states=False,
    )
    if "sme" in cfg.filters:
        out["q1_sme"] = truth.quad_hat[:, 0]
        out["q_sme"] = truth.q_hat
        out["sme_digest"] = _digest(truth.record.dy)
        diag = truth.diagnostics
        out["sme_health"] = (
            diag["min_eig"].min(),
            diag["purity"].min(),
            diag["purity"].max(),
            diag["trace_err"].max(),
            diag["herm_err"].max(),
        )
    if "qekf" in cfg.filters:
        if cfg.record_mode == "shared":
            record = truth.record
        else:
            second = sme_mod.simulate_truth(
                model,
                rho0,
                cfg.dt,
                cfg.t_final,
                [cfg.base_seed, 2, index],
                keep_states=False,
            )
            record = second.record
        ekf = qekf_mod.run_filter(fns, x0, p0, record)
        out["q1_qekf"] = ekf.x_hat[:, 0]
        out["q_qekf"] = ekf.x_hat[:, 2] / model.mapping.alpha
        out["qekf_digest"] = _digest(record.dy)
        out["qekf_health"] = ekf.health_violations
    return out


def _worker(task):
    cfg, index = task
    try:
        return index, _run_single_trajectory(cfg, index), None
    except InstabilityError as exc:
        return index, None, str(exc)


def run_experiment(cfg, n_workers=1):
    """Execute the configured ensemble; deterministic given the config.

    Trajectories run serially or across n_workers processes; results are
    aggregated in trajectory-index order either way. Raises RunFailure when
    more than 1% of trajectories abort; fewer aborts are excluded from the
    means and reported in the result.
    """
    t = time_grid(cfg.dt, cfg.t_final)
    npts = len(t)
    n = cfg.n_traj

    q_true = simulate_ou_ensemble(
        OuParams(u=cfg.u, v=cfg.v, q0=cfg.q0),
        cfg.dt,
        cfg.t_final,
        [[cfg.base_seed, 0, i] for i in range(n)],
    )

    run_sme = "sme" in cfg.filters
    run_qekf = "qekf" in cfg.filters
    q_sme = np.full((n, npts), np.nan) if run_sme else None
    q1_sme = np.full((n, npts), np.nan) if run_sme else None
    q_qekf = np.full((n, npts), np.nan) if run_qekf else None
    q1_qekf = np.full((n, npts), np.nan) if run_qekf else None
    sme_health = np.full((n, 5), np.nan) if run_sme else None
    qekf_health = np.full(n, -1, dtype=np.int64) if run_qekf else None
    digests = [None] * n
    aborts = []

    if run_sme or run_qekf:
        tasks = [(cfg, i) for i in range(n)]
        if n_workers > 1:
            chunk = max(1, n // (4 * n_workers))
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(_worker, tasks, chunksize=chunk))
        else:
            results = [_worker(task) for task in tasks]

        for index, payload, error in results:
            if error is not None:
                aborts.append((index, [cfg.base_seed, 1, index], error))
                continue
            entry = {}
            if run_sme:
                q1_sme[index] = payload["q1_sme"]
                q_sme[index] = payload["q_sme"]
                sme_health[index] = payload["sme_health"]
                entry["sme"] = payload["sme_digest"]
            if run_qekf:
                q1_qekf[index] = payload["q1_qekf"]
                q_qekf[index] = payload["q_qekf"]
                qekf_health[index] = payload["qekf_health"]
                entry["qekf"] = payload["qekf_digest"]
            digests[index] = entry

        if len(aborts) > 0.01 * n:
            detail = "; ".join(f"trajectory {i} ({msg})" for i, _, msg in aborts[:5])
            raise RunFailure(
                f"{len(aborts)} of {n} trajectories aborted (limit 1%): {detail}"
            )

    def _mean(rows):
        if rows is None:
            return np.full(npts, np.nan)
        good = ~np.isnan(rows[:, 0])
        if not good.any():
            return np.full(npts, np.nan)
        return rows[good].mean(axis=0)

    health = {
        "sme_min_eig": sme_health[:, 0] if run_sme else None,
        "sme_purity_min": sme_health[:, 1] if run_sme else None,
        "sme_purity_max": sme_health[:, 2] if run_sme else None,
        "sme_max_trace_err": sme_health[:, 3] if run_sme else None,
        "sme_max_herm_err": sme_health[:, 4] if run_sme else None,
        "qekf_health_violations": qekf_health,
    }

    return RunResult(
        t=t,
        q_true=q_true,
        q_hat_sme=q_sme,
        q1_hat_sme=q1_sme,
        q_hat_qekf=q_qekf,
        q1_hat_qekf=q1_qekf,
        q_true_mean=q_true.mean(axis=0),
        q_hat_sme_mean=_mean(q_sme),
        q_hat_qekf_mean=_mean(q_qekf),
        q1_hat_sme_mean=_mean(q1_sme),
        q1_hat_qekf_mean=_mean(q1_qekf),
        n_traj=n,
        base_seed=cfg.base_seed,
        config=cfg,
        version=__version__,
        health=health,
        record_digests=digests,
        aborts=aborts,
    )


def write_csv(result, path):
    """Write ensemble means to CSV plus a config-echo sidecar at path + '.meta'.

    Floats are serialized with 17 significant digits, which round-trips
    float64 exactly. The sidecar is parseable by parse_config (metadata rides
    in comment lines) and records the package version, active backend,
    per-trajectory record digests, and the abort log.
    """
    lines = [CSV_HEADER]
    for k in range(len(result.t)):
        lines.append(
            f"{result.t[k]:.17g},{result.q_true_mean[k]:.17g},"
            f"{result.q_hat_sme_mean[k]:.17g},{result.q_hat_qekf_mean[k]:.17g},"
            f"{result.q1_hat_sme_mean[k]:.17g},{result.q1_hat_qekf_mean[k]:.17g},"
            f"{result.n_traj},{result.base_seed}"
        )
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise RunFailure(f"cannot write {path}: {exc}") from exc

    meta = [
        f"# cavityfilter {result.version}",
        f"# backend {backend_name()}",
    ]
    if result.aborts:
        for index, seed, msg in result.aborts:
            meta.append(f"# abort trajectory={index} seed={seed} reason={msg}")
    else:
        meta.append("# aborts none")
    for i, entry in enumerate(result.record_digests):
        if entry:
            parts = " ".join(f"{name}={digest}" for name, digest in sorted(entry.items()))
            meta.append(f"# record {i} {parts}")
    meta.append(config_echo(result.config).rstrip("\n"))
    meta_path = str(path) + ".meta"
    try:
        with open(meta_path, "w", newline="\n") as fh:
            fh.write("\n".join(meta) + "\n")
    except OSError as exc:
        raise RunFailure(f"cannot write {meta_path}: {exc}") from exc
