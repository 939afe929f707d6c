"""Flat ``key = value`` configuration covering simulator and estimator settings.

Keys are ``section.field``; tuples are comma separated. A few fields are
keyed by name instead (``rig.antenna.200.A``, ``rig.anchor.100``,
``osl.vio.rate``, ``pipeline.osl_sigma.vio``). Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .pipeline import PipelineConfig
from .sim import OslStreamParams, OutlierSpec, Scenario, default_schedule


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<config>"):
    """``{key: (value, line)}``; duplicate or malformed lines raise :class:`ConfigError`."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first on line {out[key][1]})")
        out[key] = (value, n)
    return out


def load_kv(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    return parse_kv(text, str(path)), str(path)


# --------------------------------------------------------------------------
# value formatting


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_like(default, text, where):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (tuple, np.ndarray)):
            vals = tuple(float(x) for x in text.split(",") if x.strip())
            return np.array(vals) if isinstance(default, np.ndarray) else vals
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _vector3(text, where):
    v = _parse_like((), text, where)
    if len(v) != 3:
        raise ConfigError(f"{where}: expected three comma-separated numbers")
    return v


def _windows(text, where, parts):
    """``a:b;c:d`` lists, used for dropout windows."""
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        bits = chunk.split(":")
        if len(bits) != parts:
            raise ConfigError(f"{where}: expected {parts} ':'-separated fields in {chunk!r}")
        try:
            if parts == 2:
                out.append((float(bits[0]), float(bits[1])))
            else:
                out.append((bits[0], float(bits[1]), float(bits[2])))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return tuple(out)


# dataclass sections: prefix -> fields that are plain scalars or vectors
_SIMPLE = (int, float, bool, str, tuple)


def _simple_fields(obj, skip=()):
    return [f.name for f in fields(obj) if f.name not in skip and isinstance(getattr(obj, f.name), _SIMPLE + (np.ndarray,))]


def _apply(obj, prefix, kv, used, source, skip=()):
    names = _simple_fields(obj, skip)
    changes = {}
    for name in names:
        key = f"{prefix}.{name}"
        if key in kv:
            value, line = kv[key]
            changes[name] = _parse_like(getattr(obj, name), value, f"{source}:{line}")
            used.add(key)
    if not changes:
        return obj
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: invalid [{prefix}] settings: {exc}") from exc


def _dump(obj, prefix, skip=()):
    return [f"{prefix}.{name} = {_fmt(getattr(obj, name))}" for name in _simple_fields(obj, skip)]


_SCENARIO_PREFIXES = ("trajectory.", "rig.", "osl.", "imu.", "scenario.", "outliers.")
_PIPELINE_PREFIXES = ("step.", "solver.", "pipeline.", "imu.", "rig.antenna.")


def _check_unknown(kv, used, source, prefixes):
    for key, (_, line) in kv.items():
        if key in used:
            continue
        if key.startswith(_SCENARIO_PREFIXES + _PIPELINE_PREFIXES) and not key.startswith(prefixes):
            continue  # belongs to the other consumer
        raise ConfigError(f"{source}:{line}: unknown key {key!r}")


# --------------------------------------------------------------------------
# scenario


def scenario_from_kv(kv, source="<config>", base: Scenario | None = None) -> Scenario:
    sc = base or Scenario()
    used = set()
    traj = _apply(sc.trajectory, "trajectory", kv, used, source, skip=("waypoints",))
    if "trajectory.waypoints" in kv:
        value, line = kv["trajectory.waypoints"]
        pts = tuple(_vector3(c, f"{source}:{line}") for c in value.split(";") if c.strip())
        traj = replace(traj, waypoints=pts)
        used.add("trajectory.waypoints")
    rig = _apply(sc.rig, "rig", kv, used, source)
    # named groups replace the defaults as a whole when present
    antennas, anchors, osl = {}, {}, {}
    for key, (value, line) in kv.items():
        where = f"{source}:{line}"
        if key.startswith("rig.antenna."):
            antennas[key[len("rig.antenna."):]] = _vector3(value, where)
            used.add(key)
        elif key.startswith("rig.anchor."):
            anchors[key[len("rig.anchor."):]] = _vector3(value, where)
            used.add(key)
        elif key.startswith("osl."):
            parts = key.split(".")
            if len(parts) != 3:
                raise ConfigError(f"{where}: expected osl.<stream>.<field>, got {key!r}")
            _, name, fld = parts
            stream = osl.get(name, OslStreamParams(name=name, dropouts=()))
            if fld == "dropouts":
                stream = replace(stream, dropouts=_windows(value, where, 2))
            elif fld in ("rate", "sigma_rot", "sigma_trans"):
                stream = replace(stream, **{fld: _parse_like(0.0, value, where)})
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
            osl[name] = stream
            used.add(key)
    antennas = antennas or dict(rig.antennas)
    anchors = anchors or dict(rig.anchors)
    osl = list(osl.values()) or list(rig.osl)
    try:
        rig = replace(rig, antennas=antennas, anchors=anchors, osl=osl)
        if set(anchors) != set(sc.rig.anchors) and rig.schedule == sc.rig.schedule:
            rig = replace(rig, schedule=default_schedule(anchors))
    except ValueError as exc:
        raise ConfigError(f"{source}: invalid rig: {exc}") from exc
    noise = _apply(sc.imu_noise, "imu", kv, used, source)
    sc = _apply(sc, "scenario", kv, used, source, skip=("uwb_dropouts",))
    if "scenario.uwb_dropouts" in kv:
        value, line = kv["scenario.uwb_dropouts"]
        sc = replace(sc, uwb_dropouts=_windows(value, f"{source}:{line}", 3))
        used.add("scenario.uwb_dropouts")
    outliers = sc.outliers
    if any(k.startswith("outliers.") for k in kv):
        outliers = _apply(outliers or OutlierSpec(), "outliers", kv, used, source, skip=("anchors",))
        if "outliers.anchors" in kv:
            value, _ = kv["outliers.anchors"]
            outliers = replace(outliers, anchors=tuple(a.strip() for a in value.split(",") if a.strip()))
            used.add("outliers.anchors")
    _check_unknown(kv, used, source, _SCENARIO_PREFIXES)
    return replace(sc, trajectory=traj, rig=rig, imu_noise=noise, outliers=outliers)


def dump_scenario(sc: Scenario):
    lines = ["# scenario"]
    lines += _dump(sc.trajectory, "trajectory", skip=("waypoints",))
    if sc.trajectory.waypoints:
        lines.append("trajectory.waypoints = " + ";".join(_fmt(w) for w in sc.trajectory.waypoints))
    lines += _dump(sc.rig, "rig")
    lines += [f"rig.antenna.{k} = {_fmt(v)}" for k, v in sc.rig.antennas.items()]
    lines += [f"rig.anchor.{k} = {_fmt(v)}" for k, v in sc.rig.anchors.items()]
    for p in sc.rig.osl:
        lines += [f"osl.{p.name}.{f} = {_fmt(getattr(p, f))}" for f in ("rate", "sigma_rot", "sigma_trans")]
        lines.append(f"osl.{p.name}.dropouts = " + ";".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in p.dropouts))
    lines += _dump(sc.imu_noise, "imu")
    lines += _dump(sc, "scenario", skip=("uwb_dropouts",))
    lines.append("scenario.uwb_dropouts = " + ";".join(f"{a}:{_fmt(b)}:{_fmt(c)}" for a, b, c in sc.uwb_dropouts))
    if sc.outliers is not None:
        lines += _dump(sc.outliers, "outliers", skip=("anchors",))
        lines.append("outliers.anchors = " + ",".join(sc.outliers.anchors))
    return lines


# --------------------------------------------------------------------------
# estimator


def pipeline_from_kv(kv, source="<config>", base: PipelineConfig | None = None):
    """``(PipelineConfig, antennas)`` from parsed settings."""
    cfg = base or PipelineConfig()
    used = set()
    step = _apply(cfg.step, "step", kv, used, source)
    solver = _apply(cfg.solver, "solver", kv, used, source)
    noise = _apply(cfg.imu_noise, "imu", kv, used, source)
    osl_sigma = dict(cfg.osl_sigma)
    osl_rate = dict(cfg.osl_rate)
    antennas = {k: tuple(v) for k, v in Scenario().rig.antennas.items()}
    custom_antennas = {}
    for key, (value, line) in kv.items():
        where = f"{source}:{line}"
        if key.startswith("pipeline.osl_sigma."):
            v = _parse_like((), value, where)
            if len(v) != 6:
                raise ConfigError(f"{where}: expected six sigmas (rotation xyz, translation xyz)")
            osl_sigma[key[len("pipeline.osl_sigma."):]] = v
            used.add(key)
        elif key.startswith("pipeline.osl_rate."):
            osl_rate[key[len("pipeline.osl_rate."):]] = _parse_like(0.0, value, where)
            used.add(key)
        elif key.startswith("rig.antenna."):
            custom_antennas[key[len("rig.antenna."):]] = _vector3(value, where)
            used.add(key)
    cfg = _apply(cfg, "pipeline", kv, used, source, skip=("osl_sigma", "osl_rate"))
    _check_unknown(kv, used, source, _PIPELINE_PREFIXES)
    try:
        cfg = replace(cfg, step=step, solver=solver, imu_noise=noise, osl_sigma=osl_sigma, osl_rate=osl_rate)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg, custom_antennas or antennas


def dump_pipeline(cfg: PipelineConfig, antennas=None):
    lines = ["# estimator"]
    lines += _dump(cfg.step, "step")
    lines += _dump(cfg.solver, "solver")
    lines += _dump(cfg, "pipeline", skip=("osl_sigma", "osl_rate"))
    lines += [f"pipeline.osl_sigma.{k} = {_fmt(v)}" for k, v in cfg.osl_sigma.items()]
    lines += [f"pipeline.osl_rate.{k} = {_fmt(v)}" for k, v in cfg.osl_rate.items()]
    if antennas:
        lines += [f"rig.antenna.{k} = {_fmt(v)}" for k, v in antennas.items()]
    return lines


def pipeline_for_scenario(sc: Scenario) -> PipelineConfig:
    """Estimator defaults whose noise models match the simulated sensors."""
    cfg = PipelineConfig()
    return replace(
        cfg,
        imu_noise=sc.imu_noise,
        uwb_sigma=sc.rig.uwb_sigma,
        osl_sigma={p.name: tuple(p.sigma()) for p in sc.rig.osl},
        osl_rate={p.name: p.rate for p in sc.rig.osl},
    )


def dump_all(sc: Scenario | None = None, cfg: PipelineConfig | None = None):
    """Every setting with its value, scenario first; imu keys appear once."""
    sc = sc or Scenario()
    cfg = cfg or pipeline_for_scenario(sc)
    lines = dump_scenario(sc)
    lines += [line for line in dump_pipeline(cfg) if not line.startswith("imu.")]
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError",
    "parse_kv",
    "load_kv",
    "scenario_from_kv",
    "pipeline_from_kv",
    "pipeline_for_scenario",
    "dump_scenario",
    "dump_pipeline",
    "dump_all",
]
