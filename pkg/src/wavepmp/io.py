"""Config files, metrics streams and checkpoints."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import yaml

from .grid import GridConfig, WaveField
from .trainer import METRIC_FIELDS, MetricsRow, TrainConfig

METRICS_SCHEMA = "wavepmp.metrics"
METRICS_VERSION = 1
CHECKPOINT_VERSION = 1
METRICS = ("identity", "matched")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {"kind": "mlp", "widths": [2, 2, 1], "activation": "tanh",
              "output_activation": "identity", "loss": "squared", "seed": 0, "metric": "identity"},
    "data": {"name": "xor", "n": 64, "dim": 3, "noise": 0.0, "seed": 0, "batch_size": None},
    "problem": {"name": None, "T": None, "N": None, "x0": None, "oracle_tol": 1e-3},
    "grid": {"dt": 1.0, "dtau": None, "nu": None, "c": 1.0, "alpha": None, "gamma": 0.0},
    "optimizer": {"kind": None, "eta": 0.1, "R": 1.0, "L": 1.0},
    "trainer": {"transport": "balanced", "budget": 1000, "tol": None, "scheduler": "lockstep",
                "seed": 0, "update_every": 1, "batch_every": 1, "log_every": 10,
                "identity_junctions": True},
    "output": {"metrics": "metrics.jsonl", "checkpoint": "checkpoint.npz", "solution": None},
}


def normalize_config(raw: Optional[dict]) -> dict:
    """Fill defaults, reject unknown keys and validate the grid."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown key(s) in {section!r}: {sorted(bad)}")
        cfg[section].update(values)
    g = cfg["grid"]
    if g["dtau"] is not None and g["nu"] is not None:
        raise ConfigError("give either grid.dtau or grid.nu, not both")
    if g["dtau"] is None and g["nu"] is None:
        g["nu"] = 0.5
    try:
        grid = make_grid(cfg, num_nodes=2)
        grid.validate_cfl()
    except ValueError as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc
    try:
        make_train_config(cfg, grid)
    except ValueError as exc:
        raise ConfigError(f"invalid trainer/optimizer settings: {exc}") from exc
    if cfg["model"]["metric"] not in METRICS:
        raise ConfigError(f"model.metric must be one of {METRICS}, got {cfg['model']['metric']!r}")
    return cfg


def make_grid(cfg: dict, num_nodes: int) -> GridConfig:
    g = cfg["grid"]
    if g["nu"] is not None:
        return GridConfig.from_courant(num_nodes, float(g["nu"]), dt=float(g["dt"]), c=float(g["c"]),
                                       alpha=g["alpha"], gamma=float(g["gamma"]))
    return GridConfig(num_nodes, dt=float(g["dt"]), dtau=float(g["dtau"]), c=float(g["c"]),
                      alpha=g["alpha"], gamma=float(g["gamma"]))


def make_train_config(cfg: dict, grid: GridConfig, hessians=None, diag_scales=None,
                      default_kind="resistive") -> TrainConfig:
    """``optimizer.kind: null`` falls back to ``default_kind``."""
    o, t = cfg["optimizer"], cfg["trainer"]
    return TrainConfig(
        grid=grid, optimizer=o["kind"] or default_kind, eta=float(o["eta"]), R=float(o["R"]), L=float(o["L"]),
        hessians=hessians, diag_scales=diag_scales, transport=t["transport"],
        identity_junctions=bool(t["identity_junctions"]), budget=int(t["budget"]),
        tol=None if t["tol"] is None else float(t["tol"]), seed=int(t["seed"]),
        scheduler=t["scheduler"], log_every=int(t["log_every"]),
        update_every=int(t["update_every"]), batch_every=int(t["batch_every"]))


def parse_config(text: str) -> dict:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return normalize_config(raw)


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


# --- metrics ---------------------------------------------------------------


class MetricsWriter:
    """Line-delimited JSON with a schema header as the first record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        header = {"schema": METRICS_SCHEMA, "version": METRICS_VERSION, "fields": list(METRIC_FIELDS)}
        self._fh.write(json.dumps(header) + "\n")
        self._last_step = -1

    def write(self, row: MetricsRow):
        if row.step <= self._last_step:
            raise ValueError(f"metrics steps must increase ({row.step} after {self._last_step})")
        self._last_step = row.step
        self._fh.write(json.dumps(row.as_dict()) + "\n")

    def write_all(self, rows: Iterable[MetricsRow]):
        for row in rows:
            self.write(row)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    """Return ``(header, rows)``; rejects other schemas or versions."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty metrics file")
    header = json.loads(lines[0])
    if header.get("schema") != METRICS_SCHEMA or header.get("version") != METRICS_VERSION:
        raise ValueError(f"{path}: unsupported metrics schema {header}")
    return header, [json.loads(line) for line in lines[1:]]


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, state, extra: Optional[dict] = None):
    """Write parameters, waves and the step counter to an ``.npz`` file."""
    arrays = {"version": np.array(CHECKPOINT_VERSION), "step": np.array(state.n),
              "num_nodes": np.array(state.field.num_nodes), "num_layers": np.array(len(state.params))}
    for k, (p, m) in enumerate(zip(state.field.w_plus, state.field.w_minus)):
        arrays[f"w_plus_{k}"] = p
        arrays[f"w_minus_{k}"] = m
    for k, th in enumerate(state.params):
        arrays[f"theta_{k}"] = th
    if extra:
        arrays["extra"] = np.array(json.dumps(extra))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(field, params, step, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        if "version" not in z or int(z["version"]) != CHECKPOINT_VERSION:
            found = int(z["version"]) if "version" in z else None
            raise CheckpointError(f"{path}: checkpoint version {found} != {CHECKPOINT_VERSION}")
        n_nodes, n_layers = int(z["num_nodes"]), int(z["num_layers"])
        field = WaveField([z[f"w_plus_{k}"] for k in range(n_nodes)],
                          [z[f"w_minus_{k}"] for k in range(n_nodes)], int(z["step"]))
        params = [z[f"theta_{k}"] for k in range(n_layers)]
        extra = json.loads(str(z["extra"])) if "extra" in z else {}
    return field, params, int(field.n), extra
