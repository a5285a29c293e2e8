"""JSON run configuration: loading, overrides, validation and observable names."""
from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .fock import ModeLayout, OperatorMatrix, QuantumState, annihilation, basis_state, make_layout, number
from .model import FRAMES, Drive, ModelError, ModelParams, MultiPhotonModel, build_model

RUN_MODES = ("master", "jump", "homodyne", "verify")
TOP_LEVEL = ("layout", "model", "run", "initial_state", "tolerances")
STOCHASTIC = ("jump", "homodyne")
_OBS = re.compile(r"^(?:n_(?P<n>[ab]\d+)|quad_(?P<q>[ab]\d+)@(?P<phase>[-+0-9.eE]+))$")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None, field: str | None = None):
        self.path, self.line, self.field = path, line, field
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        what = f"field {field}: " if field else ""
        super().__init__(f"{where}{what}{message}")

    def to_dict(self) -> dict:
        return {"error": "config", "message": str(self), "path": self.path, "line": self.line, "field": self.field}


@dataclass
class RunSettings:
    mode: str
    t_final: float
    dt: float
    n_traj: int = 1
    seed: int | None = None
    observables: tuple[str, ...] = ()
    output_dir: str = "out"
    frame: str = "lab"
    grid_step: float | None = None
    batch_size: int = 128
    record_stride: int = 1
    halving_check: bool = False
    counting: tuple[int, ...] | None = None
    homodyne: tuple[int, ...] | None = None


@dataclass
class RunConfig:
    params: ModelParams
    layout: ModeLayout
    run: RunSettings
    initial: tuple[int, ...]
    leak_tol: float = 1e-6
    trace_tol: float = 1e-6
    raw: dict = field(default_factory=dict, repr=False)
    source: str | None = None

    def model(self) -> MultiPhotonModel:
        return build_model(self.params, self.layout)

    def initial_state(self) -> QuantumState:
        return basis_state(self.layout, self.initial)

    def t_grid(self) -> np.ndarray:
        step = self.run.grid_step
        if step is None:
            step = self.run.t_final / (20 if self.run.mode in STOCHASTIC else 10)
        n = int(round(self.run.t_final / step))
        return np.round(np.arange(n + 1) * step, 12)

    def observable_ops(self) -> dict[str, OperatorMatrix]:
        return {name: observable(name, self.layout) for name in self.run.observables}


def observable(name: str, layout: ModeLayout) -> OperatorMatrix:
    """``n_<mode>`` is a number operator; ``quad_<mode>@<phase>`` is ``e^{-i phase} x + e^{i phase} x^†``."""
    mt = _OBS.match(name)
    if not mt:
        raise ValueError(f"unknown observable {name!r}; expected n_<mode> or quad_<mode>@<phase>")
    if mt.group("n"):
        return number(layout, layout.mode_index(mt.group("n")))
    x = annihilation(layout, layout.mode_index(mt.group("q")))
    phase = float(mt.group("phase"))
    return x * complex(np.exp(-1j * phase)) + x.dag() * complex(np.exp(1j * phase))


def default_config_path() -> Path:
    return Path(str(resources.files("mpo_sim") / "configs" / "dpo_default.json"))


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON, falling back to strings."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        try:
            value = json.loads(val)
        except json.JSONDecodeError:
            value = val
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object", field=key)
        node[parts[-1]] = value
    return out


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error: {exc.msg} (column {exc.colno})", path, exc.lineno) from None
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw, text, path)


def parse_config(raw: dict, text: str | None = None, path: str | None = None) -> RunConfig:
    def err(msg, key, fieldname=None):
        return ConfigError(msg, path, _line_of(text, key), fieldname or key)

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise err("missing required field", key, f"{where}.{key}" if where else key)
        return obj[key]

    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", path, 1)
    for key in raw:
        if key not in TOP_LEVEL and not key.startswith("_"):
            raise err(f"unknown top-level field; expected one of {TOP_LEVEL} or a '_'-prefixed note", key)
    lay = need(raw, "layout", "")
    try:
        layout = make_layout(int(need(lay, "n", "layout")), int(need(lay, "m", "layout")), need(lay, "trunc", "layout"))
    except (TypeError, ValueError) as exc:
        raise err(str(exc), "layout") from None

    mod = need(raw, "model", "")
    drive_raw = mod.get("drive", {}) or {}
    try:
        T = drive_raw.get("T")
        drive = Drive(drive_raw.get("lam", 0.0), math.inf if T is None else float(T), tuple(drive_raw.get("theta", ())))
        params = ModelParams(
            tuple(need(mod, "ws", "model")),
            tuple(need(mod, "wp", "model")),
            need(mod, "g", "model"),
            tuple(tuple(b) for b in need(mod, "alpha", "model")),
            drive,
        )
    except ModelError as exc:
        key = "g" if "coupling" in str(exc) else ("alpha" if "alpha" in str(exc) else ("theta" if "phase" in str(exc) else "model"))
        raise err(str(exc), key, f"model.{key}") from None
    except (TypeError, ValueError) as exc:
        raise err(str(exc), "model") from None
    if (params.n, params.m) != (layout.n, layout.m):
        raise err(f"model has n={params.n}, m={params.m} but layout has n={layout.n}, m={layout.m}", "layout")
    for l, (block, want) in enumerate(zip(params.alpha, params.block_lengths()), start=1):
        if len(block) != want:
            raise err(f"alpha block {l} needs {want} amplitudes, got {len(block)}", "alpha", "model.alpha")
    if params.resonance_mismatch > 1e-9:
        raise err(
            f"resonance condition sum(ws) == sum(wp) violated: sum(ws)={math.fsum(params.ws)!r}, sum(wp)={math.fsum(params.wp)!r}",
            "wp",
            "model.wp",
        )
    if params.drive.lam != 0 and any(a == 0 for a in params.alpha[3]):
        raise err("a nonzero drive needs nonzero pump-input amplitudes (alpha block 4)", "alpha", "model.alpha")

    r = need(raw, "run", "")
    mode = need(r, "mode", "run")
    if mode not in RUN_MODES:
        raise err(f"mode must be one of {RUN_MODES}, got {mode!r}", "mode", "run.mode")
    try:
        run = RunSettings(
            mode=mode,
            t_final=float(r.get("t_final", 0.0)),
            dt=float(r.get("dt", 0.01)),
            n_traj=int(r.get("n_traj", 1)),
            seed=None if r.get("seed") is None else int(r["seed"]),
            observables=tuple(r.get("observables", ())),
            output_dir=str(r.get("output_dir", "out")),
            frame=str(r.get("frame", "lab")),
            grid_step=None if r.get("grid_step") is None else float(r["grid_step"]),
            batch_size=int(r.get("batch_size", 128)),
            record_stride=int(r.get("record_stride", 1)),
            halving_check=bool(r.get("halving_check", False)),
            counting=None if r.get("counting") is None else tuple(int(k) for k in r["counting"]),
            homodyne=None if r.get("homodyne") is None else tuple(int(k) for k in r["homodyne"]),
        )
    except (TypeError, ValueError) as exc:
        raise err(str(exc), "run") from None
    if run.frame not in FRAMES:
        raise err(f"frame must be one of {FRAMES}", "frame", "run.frame")
    if mode != "verify":
        if run.dt <= 0:
            raise err("dt must be positive", "dt", "run.dt")
        if run.t_final <= 0:
            raise err("t_final must be positive", "t_final", "run.t_final")
        if abs(round(run.t_final / run.dt) * run.dt - run.t_final) > 1e-9 * run.t_final:
            raise err(f"t_final={run.t_final} is not a multiple of dt={run.dt}", "t_final", "run.t_final")
        if run.grid_step is not None:
            k = run.grid_step / run.dt
            if run.grid_step <= 0 or abs(round(k) - k) > 1e-9 * k:
                raise err("grid_step must be a positive multiple of dt", "grid_step", "run.grid_step")
    if mode in STOCHASTIC:
        if run.seed is None:
            raise err(f"seed is required in {mode} mode", "run", "run.seed")
        if run.seed < 0:
            raise err("seed must be non-negative", "seed", "run.seed")
        if run.n_traj < 1:
            raise err("n_traj must be >= 1", "n_traj", "run.n_traj")
    n_ch = 4 * (layout.n + layout.m)
    hom_block = tuple(range(layout.n + layout.m + 1, 2 * layout.n + layout.m + 1))
    for name in ("counting", "homodyne"):
        chans = getattr(run, name)
        if chans is None:
            continue
        bad = [k for k in chans if not 1 <= k <= n_ch]
        if bad or len(set(chans)) != len(chans):
            raise err(f"{name} channels must be distinct flat indices in 1..{n_ch}, got {list(chans)}", name, f"run.{name}")
    if run.homodyne and run.homodyne != hom_block:
        raise err(f"homodyne detection is defined on the block {list(hom_block)} only", "homodyne", "run.homodyne")
    if run.counting and run.homodyne and set(run.counting) & set(run.homodyne):
        raise err("a channel cannot be both counted and homodyned", "counting", "run.counting")
    if run.batch_size < 1 or run.record_stride < 1:
        raise err("batch_size and record_stride must be >= 1", "run")
    for name in run.observables:
        try:
            observable(name, layout)
        except ValueError as exc:
            raise err(str(exc), "observables", "run.observables") from None

    init = raw.get("initial_state", {"basis": [0] * layout.n_modes})
    basis = tuple(int(x) for x in need(init, "basis", "initial_state"))
    try:
        layout.encode(basis)
    except ValueError as exc:
        raise err(str(exc), "initial_state") from None

    tol = raw.get("tolerances", {}) or {}
    return RunConfig(
        params,
        layout,
        run,
        basis,
        leak_tol=float(tol.get("leak_tol", 1e-6)),
        trace_tol=float(tol.get("trace_tol", 1e-6)),
        raw=raw,
        source=path,
    )
