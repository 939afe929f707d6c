"""CSV dataset bundles, estimate files and atomic writes.

Stamps are written with nine decimals and every other number with Python's
shortest round-trip representation, so a write/read cycle is lossless for
stamps already on the nanosecond grid.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifold import quat_canonical

IMU_HEADER = ["stamp", "gx", "gy", "gz", "ax", "ay", "az"]
OSL_HEADER = ["stamp", "qw", "qx", "qy", "qz", "px", "py", "pz"]
UWB_HEADER = ["stamp", "node_id", "antenna_id", "anchor_id", "range", "snr_ok", "edge_ok"]
ANCHOR_HEADER = ["anchor_id", "x", "y", "z"]
GT_HEADER = ["stamp", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"]
EST_HEADER = GT_HEADER
SURVEY_HEADER = ["anchor_i", "anchor_j", "distance", "stamp"]
CONFIG_NAME = "config.txt"


class DataError(ValueError):
    """Missing or ill-formed input; the message names the file and line."""


# --------------------------------------------------------------------------
# tables


@dataclass
class ImuTable:
    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class PoseTable:
    stamps: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray | None = None


@dataclass
class UwbTable:
    stamp: np.ndarray
    node_id: np.ndarray
    antenna_id: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    snr_ok: np.ndarray
    edge_ok: np.ndarray


@dataclass
class Bundle:
    """A dataset directory loaded into memory."""

    imu: ImuTable
    osl: dict
    uwb: UwbTable | None
    anchors: dict
    groundtruth: PoseTable | None = None
    config_text: str = ""
    root: Path | None = None


# --------------------------------------------------------------------------
# writing


def fmt_stamp(t):
    return f"{float(t):.9f}"


def fmt_num(x):
    return repr(float(x))


def atomic_write(path, text):
    """Write ``text`` via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def imu_csv(stamps, gyro, accel):
    return csv_text(
        IMU_HEADER,
        ([fmt_stamp(t), *map(fmt_num, g), *map(fmt_num, a)] for t, g, a in zip(stamps, gyro, accel)),
    )


def pose_csv(stamps, q, p, v=None):
    header = GT_HEADER if v is not None else OSL_HEADER
    rows = []
    for i, t in enumerate(stamps):
        row = [fmt_stamp(t), *map(fmt_num, q[i]), *map(fmt_num, p[i])]
        if v is not None:
            row += list(map(fmt_num, v[i]))
        rows.append(row)
    return csv_text(header, rows)


def uwb_csv(uwb):
    return csv_text(
        UWB_HEADER,
        (
            [fmt_stamp(uwb.stamp[i]), uwb.node_id[i], uwb.antenna_id[i], uwb.anchor_id[i], fmt_num(uwb.range[i]),
             int(bool(uwb.snr_ok[i])), int(bool(uwb.edge_ok[i]))]
            for i in range(len(uwb.stamp))
        ),
    )


def anchors_csv(anchors):
    return csv_text(ANCHOR_HEADER, ([str(k), *map(fmt_num, v)] for k, v in anchors.items()))


def write_dataset(dataset, out_dir, config_text=""):
    """Write a simulated dataset as a bundle directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imu = dataset.imu
    atomic_write(out / "imu.csv", imu_csv(imu.stamps, imu.gyro, imu.accel))
    for name, o in dataset.osl.items():
        atomic_write(out / f"osl_{name}.csv", pose_csv(o.stamps, o.q, o.p))
    atomic_write(out / "uwb.csv", uwb_csv(dataset.uwb))
    atomic_write(out / "anchors.csv", anchors_csv(dataset.anchors))
    gt = dataset.groundtruth
    atomic_write(out / "groundtruth.csv", pose_csv(gt.t, gt.q, gt.p, gt.v))
    if config_text:
        atomic_write(out / CONFIG_NAME, config_text)
    return out


def write_estimates(path, estimates):
    """``estimates`` is a sequence of ``(stamp, NavState)``."""
    rows = []
    for t, s in estimates:
        rows.append([fmt_stamp(t), *map(fmt_num, quat_canonical(s.q)), *map(fmt_num, s.p), *map(fmt_num, s.v)])
    atomic_write(path, csv_text(EST_HEADER, rows))


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, rows):
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


# --------------------------------------------------------------------------
# reading


def _rows(path, header):
    """Yield ``(line_number, row)`` after checking the header exactly."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: empty file, expected header {','.join(header)}") from None
        if [h.strip() for h in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        for row in reader:
            n = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
            yield n, [c.strip() for c in row]


def _float(text, path, n, name):
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"{path}:{n}: {name} is not a number: {text!r}") from None
    if not np.isfinite(x):
        raise DataError(f"{path}:{n}: {name} is not finite: {text!r}")
    return x


def _flag(text, path, n, name):
    if text not in ("0", "1"):
        raise DataError(f"{path}:{n}: {name} must be 0 or 1, got {text!r}")
    return text == "1"


def _numeric_table(path, header):
    stamps, data, lines = [], [], []
    last = -np.inf
    for n, row in _rows(path, header):
        lines.append(n)
        vals = [_float(c, path, n, h) for c, h in zip(row, header)]
        if vals[0] < last:
            raise DataError(f"{path}:{n}: stamps must be sorted (got {row[0]} after {fmt_stamp(last)})")
        last = vals[0]
        stamps.append(vals[0])
        data.append(vals[1:])
    data = np.array(data, dtype=float).reshape(len(stamps), len(header) - 1)
    return np.array(stamps, dtype=float), data, lines


def read_imu(path):
    t, d, lines = _numeric_table(path, IMU_HEADER)
    if len(t) < 2:
        raise DataError(f"{path}: need at least two IMU samples")
    if np.any(np.diff(t) <= 0):
        n = lines[int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1]
        raise DataError(f"{path}:{n}: IMU stamps must strictly increase")
    return ImuTable(t, d[:, 0:3], d[:, 3:6])


def _unit_quats(q, path, lines):
    norms = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        raise DataError(f"{path}:{lines[int(bad[0])]}: quaternion is not unit length (norm {norms[bad[0]]:.6g})")
    return q


def read_pose(path, with_velocity=False):
    header = GT_HEADER if with_velocity else OSL_HEADER
    t, d, lines = _numeric_table(path, header)
    q = _unit_quats(d[:, 0:4], path, lines)
    return PoseTable(t, q, d[:, 4:7], d[:, 7:10] if with_velocity else None)


def read_uwb(path):
    cols = {h: [] for h in UWB_HEADER}
    last = -np.inf
    for n, row in _rows(path, UWB_HEADER):
        t = _float(row[0], path, n, "stamp")
        if t < last:
            raise DataError(f"{path}:{n}: stamps must be sorted (got {row[0]} after {fmt_stamp(last)})")
        last = t
        rng = _float(row[4], path, n, "range")
        if rng < 0:
            raise DataError(f"{path}:{n}: negative range {row[4]}")
        for h, c in zip(UWB_HEADER[1:4], row[1:4]):
            if not c:
                raise DataError(f"{path}:{n}: empty {h}")
        cols["stamp"].append(t)
        cols["node_id"].append(row[1])
        cols["antenna_id"].append(row[2])
        cols["anchor_id"].append(row[3])
        cols["range"].append(rng)
        cols["snr_ok"].append(_flag(row[5], path, n, "snr_ok"))
        cols["edge_ok"].append(_flag(row[6], path, n, "edge_ok"))
    return UwbTable(
        np.array(cols["stamp"], dtype=float),
        np.array(cols["node_id"], dtype=str),
        np.array(cols["antenna_id"], dtype=str),
        np.array(cols["anchor_id"], dtype=str),
        np.array(cols["range"], dtype=float),
        np.array(cols["snr_ok"], dtype=bool),
        np.array(cols["edge_ok"], dtype=bool),
    )


def read_anchors(path):
    out = {}
    for n, row in _rows(path, ANCHOR_HEADER):
        if not row[0]:
            raise DataError(f"{path}:{n}: empty anchor_id")
        if row[0] in out:
            raise DataError(f"{path}:{n}: duplicate anchor_id {row[0]}")
        out[row[0]] = np.array([_float(c, path, n, h) for c, h in zip(row[1:], ANCHOR_HEADER[1:])])
    if not out:
        raise DataError(f"{path}: no anchors")
    return out


def read_survey(path):
    out = []
    for n, row in _rows(path, SURVEY_HEADER):
        try:
            a, b = int(row[0]), int(row[1])
        except ValueError:
            raise DataError(f"{path}:{n}: anchor ids must be integers") from None
        if a == b:
            raise DataError(f"{path}:{n}: a pair needs two different anchors")
        d = _float(row[2], path, n, "distance")
        if d <= 0:
            raise DataError(f"{path}:{n}: distance must be positive")
        out.append((a, b, d, _float(row[3], path, n, "stamp")))
    return out


def survey_csv(samples):
    return csv_text(SURVEY_HEADER, ([a, b, fmt_num(d), fmt_stamp(t)] for a, b, d, t in samples))


def read_estimates(path):
    est = read_pose(path, with_velocity=True)
    if np.any(np.diff(est.stamps) <= 0):
        raise DataError(f"{path}: estimate stamps must strictly increase")
    return est


def read_dataset(root, require_uwb=False):
    """Load a bundle directory; ``uwb.csv`` and ``groundtruth.csv`` are optional."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    imu = read_imu(root / "imu.csv")
    osl = {}
    for path in sorted(root.glob("osl_*.csv")):
        osl[path.stem[len("osl_"):]] = read_pose(path)
    uwb = None
    anchors = {}
    if (root / "uwb.csv").is_file():
        uwb = read_uwb(root / "uwb.csv")
        anchors = read_anchors(root / "anchors.csv")
        unknown = sorted(set(uwb.anchor_id) - set(anchors))
        if unknown:
            raise DataError(f"{root / 'uwb.csv'}: ranges to anchors missing from anchors.csv: {', '.join(unknown)}")
    elif require_uwb:
        raise DataError(f"{root / 'uwb.csv'}: file not found")
    elif (root / "anchors.csv").is_file():
        anchors = read_anchors(root / "anchors.csv")
    gt = read_pose(root / "groundtruth.csv", with_velocity=True) if (root / "groundtruth.csv").is_file() else None
    config_text = (root / CONFIG_NAME).read_text() if (root / CONFIG_NAME).is_file() else ""
    return Bundle(imu, osl, uwb, anchors, gt, config_text, root)
