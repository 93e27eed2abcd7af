"""Toy photon-detector Monte Carlo.

Events are neutrino-like energy depositions in a 2-d detector of photon
collection modules. Each module observes a Poisson-distributed number of
photons whose arrival times follow a gamma law; the expected count falls
off exponentially with distance and depends on the orientation of the
deposition relative to the module. Generation is an inhomogeneous
tempo-spatial Poisson point process restricted spatially to the module
positions.

Five dataset flavours are supported:

  1  single module at the origin, events kept with > 1 detected photon
  2  4x4 module grid, > 5 detected photons
  3  like 2, with a randomized emission direction (third label dof)
  4  like 2, labels restricted to |x| < 10 m, |y| < 10 m
  5  like 2, with 20 m track-like depositions instead of point-like ones

An optional systematic scales every expected count by a truncated-Gaussian
light-yield factor nu drawn per event, which marginalizes the generated
joint distribution over that nuisance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import gammaln

FORMAT_VERSION = 1

# Detector and physics constants shared by all datasets.
MODULE_GRID_COORDS = (-15.0, -5.0, 5.0, 15.0)
YIELD_N0 = 50.0            # photons at zero distance
ATTENUATION_LENGTH = 10.0  # m
ANGULAR_COUPLING = 0.5     # dimensionless, in [0, 1)
PROPAGATION_SPEED = 0.2    # m / ns
TIMING_WIDTH = 5.0         # ns
TIMING_SHAPE_SCALE = 5.0   # m
REGION_HALF_WIDTH = 20.0   # m, label generation region
CONTAINED_HALF_WIDTH = 10.0  # m, dataset 4
TRACK_LENGTH = 20.0        # m, dataset 5
TRACK_EMITTERS = 20        # 1 m resolution along the track


class SchemaError(ValueError):
    """Malformed dataset or model file."""


@dataclass(frozen=True)
class SystematicsSpec:
    """Gaussian relative width of a multiplicative light-yield factor nu.

    nu is drawn per event from Normal(1, relative_yield_width) truncated
    to nu > 0.
    """

    relative_yield_width: float

    def __post_init__(self):
        if self.relative_yield_width < 0:
            raise ValueError("relative_yield_width must be >= 0")

    def draw(self, rng: np.random.Generator) -> float:
        while True:
            nu = 1.0 + self.relative_yield_width * rng.standard_normal()
            if nu > 0.0:
                return nu


@dataclass(frozen=True)
class DetectorConfig:
    module_positions: tuple
    trigger_threshold: int
    yield_n0: float = YIELD_N0
    attenuation_length: float = ATTENUATION_LENGTH
    angular_coupling: float = ANGULAR_COUPLING
    timing_shape_scale: float = TIMING_SHAPE_SCALE
    timing_width: float = TIMING_WIDTH
    propagation_speed: float = PROPAGATION_SPEED
    systematics: Optional[SystematicsSpec] = None

    def __post_init__(self):
        if len(set(self.module_positions)) != len(self.module_positions):
            raise ValueError("module positions must be distinct")
        if self.trigger_threshold < 1:
            raise ValueError("trigger_threshold must be >= 1")
        if self.yield_n0 <= 0 or self.attenuation_length <= 0:
            raise ValueError("yield_n0 and attenuation_length must be > 0")
        if not (0.0 <= self.angular_coupling < 1.0):
            raise ValueError("angular_coupling must be in [0, 1)")

    @property
    def n_modules(self) -> int:
        return len(self.module_positions)

    def module_array(self) -> np.ndarray:
        return np.asarray(self.module_positions, dtype=np.float64)


@dataclass(frozen=True)
class Label:
    """Ground-truth event parameters: position, optional direction, topology."""

    x: float
    y: float
    direction: Optional[float] = None  # angle in [0, 2*pi), measured from +x
    topology: str = "point"
    length: Optional[float] = None

    def __post_init__(self):
        if self.topology not in ("point", "track"):
            raise ValueError("topology must be 'point' or 'track'")
        if self.topology == "track" and not (self.length and self.length > 0):
            raise ValueError("track labels need a positive length")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def direction_vector(self) -> np.ndarray:
        # non-directional datasets: every deposition points along +x
        angle = 0.0 if self.direction is None else self.direction
        return np.array([math.cos(angle), math.sin(angle)])

    def emitter_positions(self) -> np.ndarray:
        """Point emitters this label expands to; (n_emitters, 2)."""
        if self.topology == "point":
            return self.position[None, :]
        u = self.direction_vector()
        offsets = (np.arange(TRACK_EMITTERS) + 0.5) * (self.length / TRACK_EMITTERS)
        return self.position[None, :] + offsets[:, None] * u[None, :]


@dataclass(frozen=True)
class PhotonHit:
    module_index: int
    t: float


@dataclass
class Event:
    """A set of photon hits plus optional truth label and yield factor."""

    modules: np.ndarray  # (n_hits,) int64, sorted together with times by t
    times: np.ndarray    # (n_hits,) float64
    label: Optional[Label] = None
    nu: Optional[float] = None

    @property
    def n_hits(self) -> int:
        return int(self.modules.size)

    def hits(self) -> list:
        return [PhotonHit(int(m), float(t)) for m, t in zip(self.modules, self.times)]


@dataclass(frozen=True)
class GammaSpec:
    """Shifted gamma law for photon arrival times."""

    shape: float
    scale: float
    offset: float

    def mean(self) -> float:
        return self.offset + self.shape * self.scale

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.offset + rng.gamma(self.shape, self.scale, size=n)

    def log_pdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        dt = t - self.offset
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = ((self.shape - 1.0) * np.log(dt) - dt / self.scale
                  - self.shape * math.log(self.scale) - gammaln(self.shape))
        # arrival before the propagation offset is impossible under this law;
        # keep log densities finite for grid scans with a steep linear penalty
        floor = -745.0 + dt / self.scale
        return np.where(dt > 0, np.nan_to_num(lp, nan=-np.inf, neginf=-745.0), floor)


def build_detector(dataset_id: int) -> DetectorConfig:
    """Detector geometry and trigger for one of the five dataset flavours."""
    if dataset_id == 1:
        return DetectorConfig(module_positions=((0.0, 0.0),), trigger_threshold=1)
    if dataset_id in (2, 3, 4, 5):
        positions = tuple((x, y) for x in MODULE_GRID_COORDS for y in MODULE_GRID_COORDS)
        return DetectorConfig(module_positions=positions, trigger_threshold=5)
    raise ValueError(f"unknown dataset id {dataset_id}")


def dataset_half_width(dataset_id: int) -> float:
    return CONTAINED_HALF_WIDTH if dataset_id == 4 else REGION_HALF_WIDTH


def dataset_has_direction(dataset_id: int) -> bool:
    return dataset_id == 3


def dataset_is_track(dataset_id: int) -> bool:
    return dataset_id == 5


def _emitter_yield(emitter: np.ndarray, direction: np.ndarray, module: np.ndarray,
                   config: DetectorConfig, yield_per_emitter: float, nu: float) -> float:
    delta = module - emitter
    d = float(np.hypot(delta[0], delta[1]))
    cos_psi = 1.0 if d < 1e-12 else float(np.dot(direction, delta)) / d
    kappa = config.angular_coupling
    return (nu * yield_per_emitter * math.exp(-d / config.attenuation_length)
            * (1.0 + kappa * cos_psi) / (1.0 + kappa))


def _gamma_for_distance(d: float, config: DetectorConfig) -> GammaSpec:
    growth = 1.0 + d / config.timing_shape_scale
    return GammaSpec(shape=growth, scale=config.timing_width * growth,
                     offset=d / config.propagation_speed)


def expected_yield(label: Label, module_index: int, config: DetectorConfig,
                   nu: float = 1.0) -> float:
    """Expected photon count lambda_j in one module for a given label."""
    if nu <= 0:
        raise ValueError("nu must be > 0")
    if not (0 <= module_index < config.n_modules):
        raise ValueError(f"invalid module index {module_index}")
    module = config.module_array()[module_index]
    emitters = label.emitter_positions()
    per_emitter = config.yield_n0 / len(emitters)
    u = label.direction_vector()
    return sum(_emitter_yield(e, u, module, config, per_emitter, nu) for e in emitters)


def arrival_time_density(label: Label, module_index: int,
                         config: DetectorConfig) -> GammaSpec:
    """Arrival-time law for a point-like label (tracks expand to mixtures)."""
    if label.topology != "point":
        raise ValueError("track labels expand to per-emitter mixtures; "
                         "use mixture_components")
    if not (0 <= module_index < config.n_modules):
        raise ValueError(f"invalid module index {module_index}")
    module = config.module_array()[module_index]
    d = float(np.hypot(*(module - label.position)))
    return _gamma_for_distance(d, config)


def mixture_components(label: Label, module_index: int, config: DetectorConfig,
                       nu: float = 1.0):
    """Per-emitter (expected count, time law) pairs for one module."""
    if not (0 <= module_index < config.n_modules):
        raise ValueError(f"invalid module index {module_index}")
    module = config.module_array()[module_index]
    emitters = label.emitter_positions()
    per_emitter = config.yield_n0 / len(emitters)
    u = label.direction_vector()
    out = []
    for e in emitters:
        lam = _emitter_yield(e, u, module, config, per_emitter, nu)
        d = float(np.hypot(*(module - e)))
        out.append((lam, _gamma_for_distance(d, config)))
    return out


def sample_event(label: Label, config: DetectorConfig, rng: np.random.Generator,
                 nu: float = 1.0) -> Optional[Event]:
    """One detector response draw; None if the trigger rejects the event."""
    modules_out = []
    times_out = []
    for j in range(config.n_modules):
        comps = mixture_components(label, j, config, nu)
        lams = np.array([c[0] for c in comps])
        total = float(lams.sum())
        k = int(rng.poisson(total)) if total > 0 else 0
        if k == 0:
            continue
        if len(comps) == 1:
            ts = comps[0][1].sample(rng, k)
        else:
            choice = rng.choice(len(comps), size=k, p=lams / total)
            ts = np.empty(k)
            for i, c in enumerate(choice):
                ts[i] = comps[c][1].sample(rng, 1)[0]
        modules_out.append(np.full(k, j, dtype=np.int64))
        times_out.append(ts)
    n_total = sum(m.size for m in modules_out)
    if n_total <= config.trigger_threshold:
        return None
    modules = np.concatenate(modules_out)
    times = np.concatenate(times_out)
    order = np.lexsort((modules, times))
    return Event(modules=modules[order], times=times[order], label=label, nu=None)


def _draw_label(dataset_id: int, rng: np.random.Generator) -> Label:
    half = dataset_half_width(dataset_id)
    x = rng.uniform(-half, half)
    y = rng.uniform(-half, half)
    direction = rng.uniform(0.0, 2.0 * math.pi) if dataset_has_direction(dataset_id) else None
    if dataset_is_track(dataset_id):
        return Label(x=x, y=y, direction=direction, topology="track", length=TRACK_LENGTH)
    return Label(x=x, y=y, direction=direction)


def event_rng(seed: int, event_index: int) -> np.random.Generator:
    """Independent counter-based stream per (seed, event index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, event_index))))


def generate_dataset(dataset_id: int, n_events: int, seed: int,
                     marginalize: bool = False, threads: int = 1) -> list:
    """n_events retained events; labels are resampled until retention.

    Per-event substreams make the output independent of any parallel
    scheduling of the event loop, so any thread count yields the same data.
    """
    if n_events <= 0:
        raise ValueError("n_events must be > 0")
    config = build_detector(dataset_id)
    systematics = SystematicsSpec(0.5) if marginalize else None

    def one(i: int) -> Event:
        rng = event_rng(seed, i)
        while True:
            label = _draw_label(dataset_id, rng)
            nu = systematics.draw(rng) if systematics is not None else 1.0
            event = sample_event(label, config, rng, nu=nu)
            if event is not None:
                event.nu = nu if marginalize else None
                return event

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(n_events)))
    return [one(i) for i in range(n_events)]


# -- dataset file format -------------------------------------------------------
#
# Line-oriented JSON: the first line is a header object, every further line is
# one event. Field names and their order are part of the format contract.
#
#   header: {"format_version", "kind", "dataset_id", "seed", "n_events",
#            "marginalize", "config": {...}}
#   event:  {"label": {"x", "y", "direction", "topology", "length"},
#            "hits": [[module_index, t], ...]  (sorted by t),
#            "nu": float | null}

def _config_dict(config: DetectorConfig) -> dict:
    return {
        "module_positions": [list(p) for p in config.module_positions],
        "trigger_threshold": config.trigger_threshold,
        "yield_n0": config.yield_n0,
        "attenuation_length": config.attenuation_length,
        "angular_coupling": config.angular_coupling,
        "timing_shape_scale": config.timing_shape_scale,
        "timing_width": config.timing_width,
        "propagation_speed": config.propagation_speed,
        "systematics": (None if config.systematics is None
                        else {"relative_yield_width": config.systematics.relative_yield_width}),
    }


def _config_from_dict(d: dict) -> DetectorConfig:
    sys_spec = d.get("systematics")
    return DetectorConfig(
        module_positions=tuple(tuple(p) for p in d["module_positions"]),
        trigger_threshold=int(d["trigger_threshold"]),
        yield_n0=float(d["yield_n0"]),
        attenuation_length=float(d["attenuation_length"]),
        angular_coupling=float(d["angular_coupling"]),
        timing_shape_scale=float(d["timing_shape_scale"]),
        timing_width=float(d["timing_width"]),
        propagation_speed=float(d["propagation_speed"]),
        systematics=None if sys_spec is None else SystematicsSpec(float(sys_spec["relative_yield_width"])),
    )


def _label_dict(label: Optional[Label]) -> Optional[dict]:
    if label is None:
        return None
    return {"x": label.x, "y": label.y, "direction": label.direction,
            "topology": label.topology, "length": label.length}


def _label_from_dict(d: Optional[dict]) -> Optional[Label]:
    if d is None:
        return None
    return Label(x=float(d["x"]), y=float(d["y"]),
                 direction=None if d["direction"] is None else float(d["direction"]),
                 topology=d["topology"],
                 length=None if d["length"] is None else float(d["length"]))


def write_dataset(path, events: Iterable[Event], dataset_id: int, seed: int,
                  marginalize: bool, config: DetectorConfig) -> None:
    events = list(events)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "event-dataset",
        "dataset_id": dataset_id,
        "seed": seed,
        "n_events": len(events),
        "marginalize": marginalize,
        "config": _config_dict(config),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for ev in events:
            order = np.lexsort((ev.modules, ev.times))
            rec = {
                "label": _label_dict(ev.label),
                "hits": [[int(ev.modules[i]), float(ev.times[i])] for i in order],
                "nu": ev.nu,
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path):
    """Returns (header dict, DetectorConfig, list of events)."""
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid dataset header in {path}: {exc}") from exc
        if header.get("kind") != "event-dataset":
            raise SchemaError(f"{path} is not an event dataset file")
        if header.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported dataset format version in {path}")
        config = _config_from_dict(header["config"])
        events = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hits = np.asarray(rec["hits"], dtype=np.float64).reshape(-1, 2)
                event = Event(
                    modules=hits[:, 0].astype(np.int64),
                    times=hits[:, 1].copy(),
                    label=_label_from_dict(rec["label"]),
                    nu=None if rec["nu"] is None else float(rec["nu"]),
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise SchemaError(f"bad event record at {path}:{line_no}: {exc}") from exc
            events.append(event)
    return header, config, events
