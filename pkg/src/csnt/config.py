"""Run configuration: TOML parsing, strict validation, and the manifest.

Configs are TOML files with dotted sections ([momentum], [fixed_point],
[ladder]); unknown keys or sections are errors.  The emitted manifest is
itself a valid config containing every resolved value plus a content hash,
so re-running from it reproduces the run bit for bit.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import tomli

from .constitutive import (
    RegularizationParams,
    build_model,
    default_beta,
)
from .continuity import n_steps_for, prepare_initial_density
from .coupling import CoupledConfig, FixedPointOptions
from .errors import ConfigError
from .fields import Grid, ScalarField

KINDS = ("single", "fixed_point_study", "ladder")

OUTDIR_ENV = "CSNT_OUTDIR"
DEFAULT_OUTDIR = "csnt-out"

_MISSING = object()


@dataclass
class _Key:
    name: str
    type: type
    default: object = _MISSING
    required: bool = False


_TOP_KEYS = [
    _Key("kind", str, "single"),
    _Key("dim", int, 2),
    _Key("n", int, 64),
    _Key("model", str, "rational"),
    _Key("tau", float, 1.0),
    _Key("a", float, 1.0),
    _Key("hb_threshold", float, 0.1),
    _Key("gamma", float, required=True),
    _Key("delta", float, 1e-3),
    _Key("epsilon", float, 1e-4),
    _Key("m", int, 2),
    _Key("beta", int, None),  # None -> derived from gamma
    _Key("dt", float, 1e-3),
    _Key("T", float, 0.25),
    _Key("cfl", float, 0.5),
    _Key("scheme", str, "imex"),
    _Key("rho0", str, "1 + 0.3*cos(x1)"),
    _Key("snapshot_every", int, 0),
    _Key("seed", int, 0),
    _Key("threads", int, 0),
    _Key("outdir", str, ""),
]

_SECTION_KEYS = {
    "momentum": [
        _Key("tol", float, 1e-9),
        _Key("max_iter", int, 500),
    ],
    "fixed_point": [
        _Key("mode", str, "per_step"),
        _Key("tol", float, 1e-8),
        _Key("max_iter", int, 50),
        _Key("relaxation", float, 1.0),
    ],
    "ladder": [
        _Key("deltas", list, None),
        _Key("epsilons", list, None),
    ],
    # informational; hash is verified when present
    "manifest": [
        _Key("hash", str, ""),
        _Key("floor_shift", float, 0.0),
        _Key("mode_cutoff", int, 0),
    ],
}


@dataclass
class RunConfig:
    """Fully validated run configuration (flat view of the TOML tree)."""

    kind: str
    dim: int
    n: int
    model: str
    tau: float
    a: float
    hb_threshold: float
    gamma: float
    delta: float
    epsilon: float
    m: int
    beta: int
    dt: float
    T: float
    cfl: float
    scheme: str
    rho0: str
    snapshot_every: int
    seed: int
    threads: int
    outdir: str
    momentum_tol: float
    momentum_max_iter: int
    fp_mode: str
    fp_tol: float
    fp_max_iter: int
    fp_relaxation: float
    ladder_deltas: Optional[List[float]]
    ladder_epsilons: Optional[List[float]]


def _coerce(key: _Key, value, where: str):
    if key.type is float and isinstance(value, (int, bool)) and not isinstance(value, bool):
        value = float(value)
    if key.type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}{key.name} must be a list")
        return [float(v) for v in value]
    if not isinstance(value, key.type) or isinstance(value, bool):
        raise ConfigError(
            f"{where}{key.name} must be {key.type.__name__}, got {type(value).__name__}"
        )
    return value


def _take(table: dict, keys: List[_Key], where: str = "") -> dict:
    out = {}
    for key in keys:
        if key.name in table:
            out[key.name] = _coerce(key, table.pop(key.name), where)
        elif key.required:
            raise ConfigError(f"missing required key: {where}{key.name}")
        else:
            out[key.name] = key.default
    if table:
        extras = ", ".join(f"{where}{k}" for k in sorted(table))
        raise ConfigError(f"unknown config keys: {extras}")
    return out


def parse_config(text: str) -> RunConfig:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    sections = {}
    for name in list(tree):
        if isinstance(tree[name], dict):
            sections[name] = tree.pop(name)
    for name in sections:
        if name not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section: [{name}]")

    top = _take(tree, _TOP_KEYS)
    mom = _take(sections.pop("momentum", {}), _SECTION_KEYS["momentum"], "momentum.")
    fp = _take(sections.pop("fixed_point", {}), _SECTION_KEYS["fixed_point"], "fixed_point.")
    lad = _take(sections.pop("ladder", {}), _SECTION_KEYS["ladder"], "ladder.")
    man = _take(sections.pop("manifest", {}), _SECTION_KEYS["manifest"], "manifest.")

    if top["beta"] is None:
        top["beta"] = default_beta(top["gamma"])

    cfg = RunConfig(
        **top,
        momentum_tol=mom["tol"],
        momentum_max_iter=mom["max_iter"],
        fp_mode=fp["mode"],
        fp_tol=fp["tol"],
        fp_max_iter=fp["max_iter"],
        fp_relaxation=fp["relaxation"],
        ladder_deltas=lad["deltas"],
        ladder_epsilons=lad["epsilons"],
    )
    _validate(cfg)
    if man["hash"]:
        actual = content_hash(cfg)
        if actual != man["hash"]:
            raise ConfigError(
                f"manifest hash mismatch: stored {man['hash'][:12]}..., "
                f"recomputed {actual[:12]}... (config was edited?)"
            )
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def _validate(cfg: RunConfig):
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {cfg.kind!r}")
    try:
        Grid(cfg.dim, cfg.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.gamma < 1.0:
        raise ConfigError(f"gamma must be >= 1, got {cfg.gamma}")
    params = RegularizationParams(cfg.delta, cfg.epsilon, cfg.m, cfg.beta)
    params.validate_for(cfg.gamma, cfg.dim)
    if cfg.dt <= 0.0 or cfg.T <= 0.0:
        raise ConfigError("dt and T must be positive")
    n_steps_for(cfg.T, cfg.dt)
    if not 0.0 < cfg.cfl <= 0.5:
        raise ConfigError(f"cfl must lie in (0, 0.5], got {cfg.cfl}")
    if cfg.scheme not in ("imex", "explicit"):
        raise ConfigError(f"scheme must be imex|explicit, got {cfg.scheme!r}")
    if cfg.fp_mode not in ("per_step", "global"):
        raise ConfigError(f"fixed_point.mode must be per_step|global, got {cfg.fp_mode!r}")
    if cfg.fp_tol <= 0.0 or cfg.momentum_tol <= 0.0:
        raise ConfigError("tolerances must be positive")
    if not 0.0 < cfg.fp_relaxation <= 1.0:
        raise ConfigError("fixed_point.relaxation must lie in (0, 1]")
    if cfg.snapshot_every < 0:
        raise ConfigError("snapshot_every must be >= 0")
    if cfg.threads < 0:
        raise ConfigError("threads must be >= 0")
    build_model(cfg.model, cfg.gamma, cfg.tau, cfg.a, cfg.hb_threshold)
    if cfg.kind == "ladder":
        if not cfg.ladder_deltas:
            raise ConfigError("missing required key: ladder.deltas (kind = ladder)")
        if cfg.ladder_epsilons is not None and \
                len(cfg.ladder_epsilons) != len(cfg.ladder_deltas):
            raise ConfigError("ladder.epsilons must match ladder.deltas in length")


_EXPR_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "sqrt": np.sqrt, "tanh": np.tanh, "abs": np.abs, "pi": np.pi,
}


def evaluate_density_expression(expr: str, grid: Grid) -> ScalarField:
    """Evaluate the rho0 expression on the grid (names: x1..xd, sin, cos, ...)."""
    ns = dict(_EXPR_NAMES)
    for i, mesh in enumerate(grid.meshes(), start=1):
        ns[f"x{i}"] = mesh
    try:
        vals = eval(expr, {"__builtins__": {}}, ns)  # limited namespace above
    except Exception as exc:
        raise ConfigError(f"rho0 expression {expr!r} failed: {exc}") from exc
    vals = np.broadcast_to(np.asarray(vals, dtype=float), grid.shape).copy()
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"rho0 expression {expr!r} produced non-finite values")
    return ScalarField(grid, vals)


@dataclass
class PreparedRun:
    config: RunConfig
    coupled: CoupledConfig
    rho0: ScalarField
    mollification: dict = field(default_factory=dict)


def prepare_run(cfg: RunConfig) -> PreparedRun:
    """Build solver objects and the mollified initial density."""
    grid = Grid(cfg.dim, cfg.n)
    model = build_model(cfg.model, cfg.gamma, cfg.tau, cfg.a, cfg.hb_threshold)
    params = RegularizationParams(cfg.delta, cfg.epsilon, cfg.m, cfg.beta)
    coupled = CoupledConfig(
        model=model,
        params=params,
        grid=grid,
        dt=cfg.dt,
        T=cfg.T,
        fixed_point=FixedPointOptions(
            mode=cfg.fp_mode, tol=cfg.fp_tol,
            max_iter=cfg.fp_max_iter, relaxation=cfg.fp_relaxation,
        ),
        momentum_tol=cfg.momentum_tol,
        momentum_max_iter=cfg.momentum_max_iter,
        cfl=cfg.cfl,
        scheme=cfg.scheme,
    )
    raw = evaluate_density_expression(cfg.rho0, grid)
    rho0, meta = prepare_initial_density(raw, cfg.delta)
    if float(np.min(rho0.values)) <= 0.0:
        raise ConfigError(
            "initial density is not strictly positive after mollification; "
            "raise the rho0 floor or delta"
        )
    return PreparedRun(config=cfg, coupled=coupled, rho0=rho0, mollification=meta)


def resolve_outdir(cfg: RunConfig, override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    if cfg.outdir:
        return Path(cfg.outdir)
    env = os.environ.get(OUTDIR_ENV)
    return Path(env) if env else Path(DEFAULT_OUTDIR)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def _resolved_tree(cfg: RunConfig) -> dict:
    top = {k.name: getattr(cfg, k.name) for k in _TOP_KEYS}
    tree = {
        "": top,
        "momentum": {"tol": cfg.momentum_tol, "max_iter": cfg.momentum_max_iter},
        "fixed_point": {
            "mode": cfg.fp_mode, "tol": cfg.fp_tol,
            "max_iter": cfg.fp_max_iter, "relaxation": cfg.fp_relaxation,
        },
    }
    if cfg.ladder_deltas is not None:
        tree["ladder"] = {"deltas": cfg.ladder_deltas}
        if cfg.ladder_epsilons is not None:
            tree["ladder"]["epsilons"] = cfg.ladder_epsilons
    return tree


def _dump_tree(tree: dict) -> str:
    lines = []
    for key, val in tree[""].items():
        lines.append(f"{key} = {_toml_scalar(val)}")
    for section in sorted(k for k in tree if k):
        lines.append("")
        lines.append(f"[{section}]")
        for key, val in tree[section].items():
            lines.append(f"{key} = {_toml_scalar(val)}")
    return "\n".join(lines) + "\n"


def content_hash(cfg: RunConfig) -> str:
    """Hash of the physical configuration (execution keys excluded)."""
    tree = _resolved_tree(cfg)
    phys = dict(tree[""])
    for k in ("outdir", "threads"):
        phys.pop(k, None)
    canon = _dump_tree({**tree, "": phys})
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(cfg: RunConfig, path, mollification: Optional[dict] = None) -> str:
    tree = _resolved_tree(cfg)
    manifest = {"hash": content_hash(cfg)}
    if mollification:
        manifest["floor_shift"] = float(mollification.get("floor_shift", 0.0))
        manifest["mode_cutoff"] = int(mollification.get("mode_cutoff", 0))
    tree["manifest"] = manifest
    text = _dump_tree(tree)
    Path(path).write_text(text)
    return text
