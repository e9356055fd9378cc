"""Config files, binary grids and checkpoints, and report files.

All binary formats are little-endian with fixed-width integers.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import AdamState
from .oracle import IterationMetrics

GRID_MAGIC = b"BEAC"
GRID_VERSION = 1
CKPT_MAGIC = b"BCKP"
CKPT_VERSION = 1
MAX_CELLS = 1 << 28

METRICS_HEADER = ["iteration", "method", "seed", "rmse", "mean_posterior_std", "drilled_column", "final_loss"]


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


# --- config -----------------------------------------------------------------

@dataclass
class RunConfig:
    twin: object
    out_dir: str = "runs"
    deterministic: bool = False
    label: str = ""


RUN_KEYS = {"out_dir": "str", "deterministic": "bool", "label": "str"}


def _convert(key, kind, text):
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config_text(text, source="<config>"):
    from .twin import TwinConfig, config_fields

    twin_types = {name: f.type for name, f in config_fields().items()}
    twin_values, run_values = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in twin_types:
            twin_values[key] = _convert(key, twin_types[key], value)
        elif key in RUN_KEYS:
            run_values[key] = _convert(key, RUN_KEYS[key], value)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        twin = TwinConfig(**twin_values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(twin, **run_values)


def parse_config(path):
    """Read a flat ``key = value`` file; absent keys keep their defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def format_config(cfg):
    """Inverse of ``parse_config_text`` for a ``RunConfig``."""
    lines = []
    for key, value in cfg.twin.as_dict().items():
        lines.append(f"{key} = {_format_value(value)}")
    lines.append(f"out_dir = {cfg.out_dir}")
    lines.append(f"deterministic = {_format_value(cfg.deterministic)}")
    lines.append(f"label = {cfg.label}")
    return "\n".join(lines) + "\n"


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- grids ------------------------------------------------------------------

def save_grid(field, path):
    a = np.asarray(field, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("grid must be 2D")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", GRID_VERSION, *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def load_grid(path):
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise FormatError("not a BEAC grid")
    if len(data) < 16:
        raise FormatError("truncated")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported version {version}")
    if rows * cols > MAX_CELLS:
        raise FormatError("dim overflow")
    expected = 16 + 8 * rows * cols
    if len(data) < expected:
        raise FormatError("truncated")
    if len(data) > expected:
        raise FormatError("trailing bytes after grid data")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    k: int
    flow_blob: np.ndarray
    logits: np.ndarray
    drilled: list
    adam_states: list
    prior: np.ndarray
    truth: np.ndarray
    history: list = field(default_factory=list)
    density: np.ndarray | None = None


class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, v):
        self.parts.append(struct.pack("<I", int(v)))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", int(v)))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8").ravel()
        self.u64(a.size)
        self.parts.append(a.tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def array(self):
        n = self.u64()
        if n > MAX_CELLS * 16:
            raise FormatError("corrupt checkpoint (array length)")
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64)


def save_checkpoint(ckpt, path):
    w = _Writer()
    w.parts.append(CKPT_MAGIC)
    w.u32(CKPT_VERSION)
    w.u32(ckpt.k)
    w.array(ckpt.flow_blob)
    w.array(ckpt.logits)
    w.u32(len(ckpt.drilled))
    for c in ckpt.drilled:
        w.u32(c)
    w.u32(len(ckpt.adam_states))
    for st in ckpt.adam_states:
        w.u64(st.t)
        w.array(st.m)
        w.array(st.v)
    prior = np.asarray(ckpt.prior)
    w.u32(prior.shape[0])
    w.u32(prior.shape[1])
    w.u32(prior.shape[2])
    w.array(prior)
    w.array(ckpt.truth)
    w.u32(len(ckpt.history))
    for row in ckpt.history:
        w.u32(row.k)
        w.f64(row.rmse)
        w.f64(row.mean_posterior_std)
        w.u32(row.drilled_column)
        w.f64(row.final_train_loss)
    w.array(np.zeros(0) if ckpt.density is None else ckpt.density)
    body = w.bytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<Q", len(body)))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a BCKP checkpoint")
    if len(data) < 16:
        raise FormatError("truncated checkpoint")
    r = _Reader(data)
    r.pos = 4
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}")
    (length,) = struct.unpack("<Q", data[-8:])
    if length != len(data) - 8:
        raise FormatError("corrupt checkpoint (length mismatch)")
    r.data = data[:-8]
    k = r.u32()
    flow_blob = r.array()
    logits = r.array()
    drilled = [r.u32() for _ in range(r.u32())]
    adam_states = []
    for _ in range(r.u32()):
        t = r.u64()
        m = r.array()
        v = r.array()
        adam_states.append(AdamState(m, v, t))
    n, rows, cols = r.u32(), r.u32(), r.u32()
    prior = r.array()
    if prior.size != n * rows * cols:
        raise FormatError("corrupt checkpoint (ensemble size)")
    prior = prior.reshape(n, rows, cols)
    truth = r.array()
    if truth.size != rows * cols:
        raise FormatError("corrupt checkpoint (truth size)")
    history = []
    for _ in range(r.u32()):
        history.append(IterationMetrics(r.u32(), r.f64(), r.f64(), r.u32(), r.f64()))
    density = r.array()
    if r.pos != len(r.data):
        raise FormatError("corrupt checkpoint (trailing bytes)")
    return Checkpoint(k, flow_blob, logits, drilled, adam_states, prior, truth.reshape(rows, cols),
                      history, density if density.size else None)


def checkpoint_from_state(state):
    from .flow import flatten_flow

    return Checkpoint(
        k=state.k,
        flow_blob=flatten_flow(state.flow),
        logits=state.design.logits.copy(),
        drilled=list(state.design.drilled),
        adam_states=[state.flow_adam.copy()],
        prior=state.prior.as_array(),
        truth=state.truth.copy(),
        history=list(state.history),
        density=None if state.design_density is None else np.asarray(state.design_density).copy(),
    )


def state_from_checkpoint(ckpt, cfg):
    """Rebuild a ``TwinState``; permeabilities and the flow layout come from ``cfg``."""
    from .design import WellDesignState
    from .flow import unflatten_flow
    from .sim import PlumeEnsemble
    from .twin import initial_state, TwinState

    if ckpt.prior.shape[1:] != cfg.shape or ckpt.prior.shape[0] != cfg.ensemble_size:
        raise FormatError("checkpoint does not match the configured grid/ensemble")
    fresh = initial_state(cfg)
    flow = unflatten_flow(fresh.flow, ckpt.flow_blob)
    prior = PlumeEnsemble([m.copy() for m in ckpt.prior], list(fresh.prior.perms), ckpt.k)
    return TwinState(
        k=ckpt.k,
        prior=prior,
        design=WellDesignState(ckpt.logits.copy(), cfg.budget, list(ckpt.drilled)),
        flow=flow,
        flow_adam=ckpt.adam_states[0].copy(),
        truth=ckpt.truth.copy(),
        truth_perm=fresh.truth_perm,
        history=list(ckpt.history),
        design_density=ckpt.density,
    )


# --- reports ----------------------------------------------------------------

def metrics_rows(report):
    for row in report.rows:
        yield [row.k, report.method, report.seed, repr(float(row.rmse)), repr(float(row.mean_posterior_std)),
               row.drilled_column, repr(float(row.final_train_loss))]


def emit_report(report, out_dir, run_config=None):
    """Write ``metrics.csv``, ``design.json`` and ``config.txt`` into ``out_dir``."""
    if not report.rows:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(metrics_rows(report))
    design = {
        "method": report.method,
        "seed": report.seed,
        "density": [float(w) for w in report.density],
        "drilled": [int(c) for c in report.drilled],
        "config_digest": report.config_digest,
    }
    (out / "design.json").write_text(json.dumps(design, indent=2) + "\n")
    if run_config is not None:
        (out / "config.txt").write_text(format_config(run_config))
    return out


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"unexpected metrics header {reader.fieldnames}")
        return [
            {
                "iteration": int(r["iteration"]),
                "method": r["method"],
                "seed": int(r["seed"]),
                "rmse": float(r["rmse"]),
                "mean_posterior_std": float(r["mean_posterior_std"]),
                "drilled_column": int(r["drilled_column"]),
                "final_loss": float(r["final_loss"]),
            }
            for r in reader
        ]
