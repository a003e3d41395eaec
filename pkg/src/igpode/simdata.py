"""Ground-truth simulators for bouncing balls and charged particles, and the
binary dataset file format.

Observations are stored per sequence as ``[time][object][dims]`` with dims
``(s_x, s_y, v_x, v_y)``, or positions only when velocities are unobserved.
Noise is added after simulation; the clean trajectories are kept alongside
for evaluation.
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Callable
from typing import Sequence

import numpy as np

from igpode import diffmath as dm
from igpode.config import thread_count
from igpode.errors import ConfigError
from igpode.errors import FormatError
from igpode.errors import SimulationError

logger = logging.getLogger(__name__)

POS_DIM = 2


class NoiseLevel(str, Enum):
    NONE = "none"
    LOW = "low"
    HIGH = "high"

    @property
    def stddevs(self) -> tuple[float, float]:
        """``(sigma_s, sigma_v)`` added to positions and velocities."""
        return {
            NoiseLevel.NONE: (0.0, 0.0),
            NoiseLevel.LOW: (0.15, 0.02),
            NoiseLevel.HIGH: (0.30, 0.04),
        }[self]


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @property
    def key(self) -> int:
        return list(Split).index(self)


# --------------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """``P`` sequences of ``N`` frames for ``A`` objects with ``O`` observed dims.

    :param observations: shape ``(P, N, A, O)``
    :type observations: np.ndarray
    :param dt: spacing of the uniform time grid
    :type dt: float
    :param globals: static per-object features, shape ``(P, A, C)``
    :type globals: np.ndarray | None
    :param clean: noiseless copy of ``observations``
    :type clean: np.ndarray | None
    :param noise: ``(sigma_s, sigma_v)`` that produced ``observations``
    :type noise: tuple[float, float]
    """

    observations: np.ndarray
    dt: float
    globals: np.ndarray | None = None
    clean: np.ndarray | None = None
    noise: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        object.__setattr__(self, "observations", obs)
        if obs.ndim != 4:
            raise ConfigError(f"observations must be (P, N, A, O), got {obs.shape}")
        if self.dt <= 0:
            raise ConfigError(f"time step must be positive, got {self.dt}")
        if self.clean is not None:
            clean = np.asarray(self.clean, dtype=np.float64)
            if clean.shape != obs.shape:
                raise ConfigError(
                    f"clean copy {clean.shape} differs from observations {obs.shape}",
                )
            object.__setattr__(self, "clean", clean)
        if self.globals is not None:
            glob = np.asarray(self.globals, dtype=np.float64)
            if glob.ndim != 3 or glob.shape[:2] != (obs.shape[0], obs.shape[2]):
                raise ConfigError(
                    f"globals must be (P, A, C) = ({obs.shape[0]}, {obs.shape[2]}, C), "
                    f"got {glob.shape}",
                )
            object.__setattr__(self, "globals", glob)
        object.__setattr__(self, "noise", tuple(float(s) for s in self.noise))

    @property
    def num_sequences(self) -> int:
        return self.observations.shape[0]

    @property
    def num_steps(self) -> int:
        return self.observations.shape[1]

    @property
    def num_objects(self) -> int:
        return self.observations.shape[2]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[3]

    @property
    def global_dim(self) -> int:
        return 0 if self.globals is None else self.globals.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.num_steps)

    @property
    def truth(self) -> np.ndarray:
        """Clean trajectories when available, otherwise the observations."""
        return self.observations if self.clean is None else self.clean

    def positions_only(self, pos_dim: int = POS_DIM) -> Dataset:
        """Drops the velocity columns."""
        if self.obs_dim <= pos_dim:
            return self
        clean = None if self.clean is None else self.clean[..., :pos_dim]
        return replace(self, observations=self.observations[..., :pos_dim], clean=clean)

    def subset(self, indices: Sequence[int]) -> Dataset:
        indices = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            observations=self.observations[indices],
            globals=None if self.globals is None else self.globals[indices],
            clean=None if self.clean is None else self.clean[indices],
        )


# --------------------------------------------------------------------------------
# Simulators
# --------------------------------------------------------------------------------


def _reflect_walls(pos: np.ndarray, vel: np.ndarray, limit: float) -> None:
    """Elastic walls at ``+-limit``; mutates ``pos`` and ``vel`` in place."""
    low = pos < -limit
    pos[low] = -2.0 * limit - pos[low]
    vel[low] = -vel[low]
    high = pos > limit
    pos[high] = 2.0 * limit - pos[high]
    vel[high] = -vel[high]


@dataclass(frozen=True)
class BallsConfig:
    """Bouncing balls in a square box with elastic collisions, unit masses.

    ``inner_steps`` simulation steps are taken per observation interval.
    """

    num_objects: int = 3
    half_width: float = 4.0
    radius: float = 0.3
    num_train: int = 100
    num_val: int = 100
    num_test: int = 100
    num_steps: int = 100
    dt: float = 0.5
    inner_steps: int = 50
    noise: NoiseLevel = NoiseLevel.NONE
    max_speed: float = 0.49
    missing_velocity: bool = False
    placement_retries: int = 100

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseLevel(self.noise))
        if self.half_width <= self.radius or self.radius <= 0:
            raise ConfigError("the box must be wider than a ball")
        if self.num_objects < 1 or self.num_steps < 1 or self.inner_steps < 1:
            raise ConfigError("object, step and inner step counts must be positive")

    def count(self, split: Split) -> int:
        return {Split.TRAIN: self.num_train, Split.VAL: self.num_val}.get(
            split,
            self.num_test,
        )


class BallsSimulator:
    def __init__(self, config: BallsConfig):
        self.config = config

    def place(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Non-overlapping initial positions and velocities with ``|v| <= max_speed``.

        :raises SimulationError: a ball cannot be placed within the retry budget
        """
        cfg = self.config
        limit = cfg.half_width - cfg.radius
        positions: list[np.ndarray] = []
        for a in range(cfg.num_objects):
            for _ in range(cfg.placement_retries):
                candidate = rng.uniform(-limit, limit, POS_DIM)
                if all(
                    np.linalg.norm(candidate - other) >= 2.0 * cfg.radius
                    for other in positions
                ):
                    positions.append(candidate)
                    break
            else:
                raise SimulationError(
                    f"could not place ball {a} after {cfg.placement_retries} attempts",
                )
        angle = rng.uniform(0.0, 2.0 * np.pi, cfg.num_objects)
        speed = rng.uniform(0.5 * cfg.max_speed, cfg.max_speed, cfg.num_objects)
        velocities = speed[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        return np.array(positions), velocities

    def _collide(self, pos: np.ndarray, vel: np.ndarray) -> None:
        num = len(pos)
        for i in range(num):
            for j in range(i + 1, num):
                r_rel = pos[i] - pos[j]
                v_rel = vel[i] - vel[j]
                rr = r_rel @ r_rel
                approaching = v_rel @ r_rel < 0
                if rr < (2.0 * self.config.radius) ** 2 and approaching and rr > 0:
                    impulse = (v_rel @ r_rel) / rr * r_rel
                    vel[i] -= impulse
                    vel[j] += impulse

    def run(
        self,
        positions: np.ndarray,
        velocities: np.ndarray,
        num_steps: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Simulates from the given state.

        :return: positions and velocities at every observation time, each of
            shape ``(num_steps, A, 2)``, starting with the initial state
        :rtype: tuple[np.ndarray, np.ndarray]
        """
        cfg = self.config
        num_steps = cfg.num_steps if num_steps is None else num_steps
        pos = np.array(positions, dtype=np.float64)
        vel = np.array(velocities, dtype=np.float64)
        h = cfg.dt / cfg.inner_steps
        limit = cfg.half_width - cfg.radius
        out_s, out_v = [pos.copy()], [vel.copy()]
        for _ in range(num_steps - 1):
            for _ in range(cfg.inner_steps):
                pos += h * vel
                self._collide(pos, vel)
                _reflect_walls(pos, vel, limit)
            out_s.append(pos.copy())
            out_v.append(vel.copy())
        return np.stack(out_s), np.stack(out_v)


@dataclass(frozen=True)
class ChargesConfig:
    """Charged particles with clamped inverse-square forces in a box.

    Like charges repel and opposite charges attract.  The force magnitude is
    capped at ``force_clamp`` when two particles are closer than
    ``clamp_radius``.
    """

    num_objects: int = 5
    half_width: float = 5.0
    num_train: int = 500
    num_val: int = 100
    num_test: int = 100
    num_steps: int = 100
    dt: float = 0.05
    inner_steps: int = 50
    strength: float = 1.0
    force_clamp: float = 10.0
    clamp_radius: float = 0.3
    init_position_std: float = 1.0
    init_speed: float = 0.5
    noise: NoiseLevel = NoiseLevel.NONE
    missing_velocity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseLevel(self.noise))
        if self.num_objects < 1 or self.num_steps < 1 or self.inner_steps < 1:
            raise ConfigError("object, step and inner step counts must be positive")

    def count(self, split: Split) -> int:
        return {Split.TRAIN: self.num_train, Split.VAL: self.num_val}.get(
            split,
            self.num_test,
        )


class ChargesSimulator:
    def __init__(self, config: ChargesConfig):
        self.config = config

    def place(self, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        cfg = self.config
        pos = rng.normal(0.0, cfg.init_position_std, (cfg.num_objects, POS_DIM))
        pos = np.clip(pos, -cfg.half_width, cfg.half_width)
        vel = rng.normal(0.0, 1.0, (cfg.num_objects, POS_DIM))
        norms = np.linalg.norm(vel, axis=1, keepdims=True)
        vel = cfg.init_speed * vel / np.maximum(norms, 1e-12)
        charges = rng.choice(np.array([-1.0, 1.0]), size=cfg.num_objects)
        return pos, vel, charges

    def forces(self, pos: np.ndarray, charges: np.ndarray) -> np.ndarray:
        """Pairwise forces, equal and opposite for every pair"""
        cfg = self.config
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        magnitude = cfg.strength * np.abs(np.outer(charges, charges)) / dist**2
        magnitude = np.where(
            dist < cfg.clamp_radius,
            np.minimum(magnitude, cfg.force_clamp),
            magnitude,
        )
        sign = np.sign(np.outer(charges, charges))
        unit = diff / dist[..., None]
        return ((sign * magnitude)[..., None] * unit).sum(axis=1)

    def run(
        self,
        positions: np.ndarray,
        velocities: np.ndarray,
        charges: np.ndarray,
        num_steps: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Symplectic Euler: velocities are kicked first, then positions drift."""
        cfg = self.config
        num_steps = cfg.num_steps if num_steps is None else num_steps
        pos = np.array(positions, dtype=np.float64)
        vel = np.array(velocities, dtype=np.float64)
        charges = np.asarray(charges, dtype=np.float64)
        h = cfg.dt / cfg.inner_steps
        out_s, out_v = [pos.copy()], [vel.copy()]
        for _ in range(num_steps - 1):
            for _ in range(cfg.inner_steps):
                vel += h * self.forces(pos, charges)
                pos += h * vel
                _reflect_walls(pos, vel, cfg.half_width)
            if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
                raise SimulationError("charges simulation diverged")
            out_s.append(pos.copy())
            out_v.append(vel.copy())
        return np.stack(out_s), np.stack(out_v)


# --------------------------------------------------------------------------------
# Dataset generation
# --------------------------------------------------------------------------------


def _generate(
    count: int,
    seed: int,
    split: Split,
    one: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray | None]],
) -> tuple[np.ndarray, np.ndarray | None]:
    children = np.random.SeedSequence([seed, split.key]).spawn(count)
    workers = min(thread_count(), max(count, 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda child: one(dm.make_rng(child)), children))
    if not results:
        return None, None
    states = np.stack([r[0] for r in results])
    glob = None if results[0][1] is None else np.stack([r[1] for r in results])
    return states, glob


def _finish(
    clean: np.ndarray | None,
    glob: np.ndarray | None,
    shape: tuple[int, int, int],
    dt: float,
    noise: NoiseLevel,
    missing_velocity: bool,
    seed: int,
    split: Split,
) -> Dataset:
    if clean is None:
        clean = np.zeros((0,) + shape)
    sigma_s, sigma_v = noise.stddevs
    rng = dm.make_rng(np.random.SeedSequence([seed, split.key, 1]))
    scale = np.array([sigma_s] * POS_DIM + [sigma_v] * POS_DIM)
    noisy = clean + scale * dm.gaussian(rng, clean.shape)
    dataset = Dataset(noisy, dt, glob, clean.copy(), (sigma_s, sigma_v))
    return dataset.positions_only() if missing_velocity else dataset


def simulate_balls(
    config: BallsConfig,
    seed: int,
    split: Split = Split.TRAIN,
) -> Dataset:
    """Bouncing balls dataset; a fixed seed gives a bit-identical result.

    Every sequence draws from its own seed derived from ``(seed, split)``.
    """
    sim = BallsSimulator(config)

    def one(rng):
        s, v = sim.run(*sim.place(rng))
        return np.concatenate([s, v], axis=-1), None

    count = config.count(Split(split))
    clean, _ = _generate(count, seed, Split(split), one)
    logger.info(f"simulated {count} bouncing-ball sequences ({split})")
    return _finish(
        clean,
        None,
        (config.num_steps, config.num_objects, 2 * POS_DIM),
        config.dt,
        config.noise,
        config.missing_velocity,
        seed,
        Split(split),
    )


def simulate_charges(
    config: ChargesConfig,
    seed: int,
    split: Split = Split.TRAIN,
) -> Dataset:
    """Charged particles dataset with the charges stored as globals."""
    sim = ChargesSimulator(config)

    def one(rng):
        pos, vel, charges = sim.place(rng)
        s, v = sim.run(pos, vel, charges)
        return np.concatenate([s, v], axis=-1), charges[:, None]

    count = config.count(Split(split))
    clean, glob = _generate(count, seed, Split(split), one)
    if glob is None:
        glob = np.zeros((0, config.num_objects, 1))
    logger.info(f"simulated {count} charged-particle sequences ({split})")
    return _finish(
        clean,
        glob,
        (config.num_steps, config.num_objects, 2 * POS_DIM),
        config.dt,
        config.noise,
        config.missing_velocity,
        seed,
        Split(split),
    )


# --------------------------------------------------------------------------------
# Binary file format
# --------------------------------------------------------------------------------

MAGIC = b"IGPD"
VERSION = 1
# magic, version, P, N, A, O, C, dt, flags, sigma_s, sigma_v
HEADER = struct.Struct("<4sIIIIIIdIdd")
FLAG_GLOBALS = 1
FLAG_CLEAN = 2


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Writes ``dataset`` as little-endian float64 arrays after a fixed header.

    Layout: header, observations ``[P][N][A][O]``, the clean copy in the same
    layout when present, then globals ``[P][A][C]`` when present.
    """
    flags = 0
    payload = [dataset.observations]
    if dataset.clean is not None:
        flags |= FLAG_CLEAN
        payload.append(dataset.clean)
    if dataset.globals is not None:
        flags |= FLAG_GLOBALS
        payload.append(dataset.globals)
    header = HEADER.pack(
        MAGIC,
        VERSION,
        dataset.num_sequences,
        dataset.num_steps,
        dataset.num_objects,
        dataset.obs_dim,
        dataset.global_dim,
        dataset.dt,
        flags,
        *dataset.noise,
    )
    path = Path(path)
    with path.open("wb") as f:
        f.write(header)
        for array in payload:
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.debug(f"wrote {dataset.num_sequences} sequences to {path}")


def read_dataset(path: str | Path) -> Dataset:
    """Reads a file written by :func:`write_dataset`.

    :raises FormatError: bad magic, unsupported version, or a byte length that
        disagrees with the header
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError("file is shorter than the header", len(data))
    try:
        magic, version, p, n, a, o, c, dt, flags, sigma_s, sigma_v = HEADER.unpack_from(
            data,
        )
    except struct.error as e:
        raise FormatError(f"cannot decode header: {e}", 0) from e
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)

    shapes = [(p, n, a, o)]
    if flags & FLAG_CLEAN:
        shapes.append((p, n, a, o))
    if flags & FLAG_GLOBALS:
        shapes.append((p, a, c))
    expected = HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise FormatError(
            f"file holds {len(data)} bytes, header implies {expected}",
            min(len(data), expected),
        )

    arrays = []
    offset = HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape),
        )
        offset += 8 * count
    observations = arrays.pop(0)
    clean = arrays.pop(0) if flags & FLAG_CLEAN else None
    glob = arrays.pop(0) if flags & FLAG_GLOBALS else None
    return Dataset(observations, dt, glob, clean, (sigma_s, sigma_v))
