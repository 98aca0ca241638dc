"""Training-data collection, preprocessing and dataset persistence."""

from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import EngagementConfig, FaultSpec
from .engagement import (
    STATE_FEATURES,
    Continue,
    ControlCommand,
    observe,
    step,
)
from .errors import CorruptFile, EmptyDataset, SingularGeometry, VersionMismatch
from .neural_model import Normalizer, fit_normalizer

log = logging.getLogger(__name__)

CONTROL_FEATURES = ("a_ym", "a_zm")
FEATURE_UNITS = ("m", "m/s", "rad", "rad", "rad/s", "rad/s", "m/s", "rad", "rad")
QDOT_COLS = (STATE_FEATURES.index("theta_L_dot"), STATE_FEATURES.index("phi_L_dot"))


@dataclass
class Dataset:
    """Column store of engagement samples or transitions.

    ``kind == "samples"``: one row per observation, as collected.
    ``kind == "transitions"``: one row per consecutive pair within a trajectory,
    with ``targets`` holding the observed LOS-rate increment over the pair.
    """

    t: np.ndarray
    traj: np.ndarray
    features: np.ndarray
    controls: np.ndarray
    targets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def kind(self) -> str:
        return "samples" if self.targets is None else "transitions"

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    def model_inputs(self) -> np.ndarray:
        return np.hstack([self.features, self.controls])

    def qddot_targets(self) -> np.ndarray:
        if self.targets is None:
            raise ValueError("raw samples have no targets; run preprocess() first")
        return self.targets / self.dt

    def trajectory_ids(self) -> np.ndarray:
        return self.traj

    def columns(self) -> tuple[list[str], list[str], np.ndarray]:
        names = ["t", "traj", *STATE_FEATURES, *CONTROL_FEATURES]
        units = ["s", "-", *FEATURE_UNITS, "m/s^2", "m/s^2"]
        cols = [self.t, self.traj.astype(float), *self.features.T, *self.controls.T]
        if self.targets is not None:
            names += ["d_theta_L_dot", "d_phi_L_dot"]
            units += ["rad/s", "rad/s"]
            cols += list(self.targets.T)
        return names, units, np.column_stack(cols) if len(self) else np.zeros((0, len(names)))


def _collect_one(cfg: EngagementConfig, idx: int, seed: int):
    rng = np.random.default_rng([seed, idx])
    col = cfg.collection
    scen = replace(cfg, initial=col.initial, maneuver=col.maneuver, speed=col.speed,
                   fault=FaultSpec(), noise=col.noise).resolve(rng)
    state = scen.initial_state()
    maneuver, speed = scen.target_maneuver(), scen.speed_model()
    fault = scen.actuator_fault()
    noise = scen.noise_config()
    monitor = scen.monitor()
    monitor.t_max = col.t_max
    dt, a_max = cfg.sim.dt, cfg.sim.a_max
    rows_t, rows_x, rows_u = [], [], []
    monitor.check(state)
    k = 0
    while True:
        obs = observe(state, noise, [seed, idx, k])
        u = np.clip(rng.normal(0.0, col.control_sigma, 2), -a_max, a_max)
        rows_t.append(state.t)
        rows_x.append(obs.features())
        rows_u.append(u)
        state = step(state, ControlCommand(u[0], u[1]), fault, maneuver, speed, dt, a_max)
        if not isinstance(monitor.check(state), Continue):
            obs = observe(state, noise, [seed, idx, k + 1])
            rows_t.append(state.t)
            rows_x.append(obs.features())
            rows_u.append(np.zeros(2))
            break
        k += 1
    return np.array(rows_t), np.array(rows_x), np.array(rows_u)


def collect(config: EngagementConfig, n_trajectories: int | None = None, seed: int = 0) -> Dataset:
    """Roll out zero-mean Gaussian random controls from randomized initial states.

    Each trajectory ends when the terminal monitor fires (closest approach,
    range ceiling, or ``collection.t_max``).  Trajectories that hit a
    kinematic singularity are discarded and counted in ``meta``.
    """
    n = config.collection.n_trajectories if n_trajectories is None else n_trajectories
    if n < 1:
        raise ValueError("n_trajectories must be >= 1")
    ts, trs, xs, us = [], [], [], []
    discarded = 0
    for i in range(n):
        try:
            t, x, u = _collect_one(config, i, seed)
        except SingularGeometry as exc:
            discarded += 1
            log.warning("trajectory %d discarded: %s", i, exc)
            continue
        ts.append(t)
        xs.append(x)
        us.append(u)
        trs.append(np.full(len(t), i, dtype=np.int64))
    if not ts:
        raise EmptyDataset("every trajectory was discarded")
    meta = {
        "kind": "samples",
        "dt": config.sim.dt,
        "seed": seed,
        "config_hash": config.digest(),
        "n_trajectories": len(ts),
        "n_discarded": discarded,
        "n_rows": int(sum(len(t) for t in ts)),
    }
    return Dataset(np.concatenate(ts), np.concatenate(trs), np.vstack(xs), np.vstack(us), None, meta)


def preprocess(dataset: Dataset, noise_sigma: float = 0.01, seed: int = 0,
               scale_floor: float = 1e-3) -> tuple[Dataset, Normalizer]:
    """Slice samples into transitions, augment, and fit the input normalizer.

    Targets are the observed LOS-rate increments between consecutive samples of
    the same trajectory.  Gaussian noise with standard deviation
    ``noise_sigma`` times each state feature's spread is added to the state
    features only; the normalizer is fitted on the augmented inputs.
    """
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    same = dataset.traj[1:] == dataset.traj[:-1]
    i0 = np.nonzero(same)[0]
    if len(i0) == 0:
        raise EmptyDataset("no consecutive sample pairs within a trajectory")
    i1 = i0 + 1
    qd = dataset.features[:, QDOT_COLS]
    targets = qd[i1] - qd[i0]
    feats = dataset.features[i0].copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        spread = np.maximum(feats.std(axis=0), scale_floor)
        feats += rng.standard_normal(feats.shape) * (noise_sigma * spread)
    meta = dict(dataset.meta, kind="transitions", n_rows=int(len(i0)), augment_sigma=noise_sigma)
    out = Dataset(dataset.t[i0].copy(), dataset.traj[i0].copy(), feats,
                  dataset.controls[i0].copy(), targets, meta)
    norm = fit_normalizer(out.model_inputs(), scale_floor)
    return out, norm


# --- persistence ------------------------------------------------------------------

DATASET_MAGIC = b"MGUIDE-DATASET"
DATASET_VERSION = 1


def save_dataset(dataset: Dataset, path) -> Path:
    """Text header line (JSON: columns, units, counts, meta) + little-endian float64 columns."""
    names, units, table = dataset.columns()
    header = {
        "columns": names,
        "units": units,
        "n_rows": len(dataset),
        "meta": dataset.meta,
    }
    body = np.ascontiguousarray(table.T, dtype="<f8").tobytes()
    head = DATASET_MAGIC + b" %d\n" % DATASET_VERSION + json.dumps(header, sort_keys=True).encode() + b"\n"
    blob = head + body
    path = Path(path)
    path.write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
    return path


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    first = data[:nl] if nl >= 0 else data[:len(DATASET_MAGIC) + 8]
    parts = first.split(b" ")
    if parts[0] != DATASET_MAGIC:
        raise VersionMismatch(f"{path}: not a dataset file (bad magic)")
    if len(parts) != 2 or parts[1] != str(DATASET_VERSION).encode():
        raise VersionMismatch(f"{path}: unsupported dataset version {parts[1:]!r}")
    nl2 = data.find(b"\n", nl + 1)
    if nl < 0 or nl2 < 0:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(data[nl + 1:nl2])
        names, n = header["columns"], int(header["n_rows"])
    except (ValueError, KeyError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    expect = nl2 + 1 + 8 * n * len(names) + 4
    if len(data) != expect:
        raise CorruptFile(f"{path}: expected {expect} bytes, found {len(data)}")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptFile(f"{path}: checksum mismatch")
    table = np.frombuffer(data[nl2 + 1:-4], dtype="<f8").astype(float).reshape(len(names), n).T
    nf = len(STATE_FEATURES)
    targets = table[:, 2 + nf + 2:2 + nf + 4].copy() if len(names) > 2 + nf + 2 else None
    return Dataset(
        table[:, 0].copy(), table[:, 1].astype(np.int64), table[:, 2:2 + nf].copy(),
        table[:, 2 + nf:2 + nf + 2].copy(), targets, header["meta"],
    )


def export_csv(dataset: Dataset, path) -> int:
    """Plain comma-separated export for inspection; returns the number of data rows."""
    names, units, table = dataset.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return len(table)
