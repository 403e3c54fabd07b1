"""2D world, differential-drive kinematics, collision tests and raycast depth.

Coordinates are meters, headings radians, x to the right and y up. The robot is
a disc; obstacles are segments, axis-aligned boxes and discs. Episode rules
(reward, collision penalty, step limit) live in :class:`ObstacleEnv`.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import SchemaError, UsageError, WorldError

LINEAR_VELOCITIES = (0.2, 0.4)
ANGULAR_VELOCITIES = (math.pi / 6, math.pi / 12, 0.0, -math.pi / 12, -math.pi / 6)
N_LINEAR = len(LINEAR_VELOCITIES)
N_ANGULAR = len(ANGULAR_VELOCITIES)

DT = 0.2
MAX_STEPS = 500
COLLISION_PENALTY = -10.0
MAX_SPAWN_ATTEMPTS = 1000

WORLD_FORMAT = 1
WORLDS_DIR = Path(__file__).parent / "worlds"


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.pi - math.fmod(math.pi - theta, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


# ----------------------------------------------------------------------
# Shapes and world
# ----------------------------------------------------------------------


class Segment(NamedTuple):
    a: tuple[float, float]
    b: tuple[float, float]


class Box(NamedTuple):
    lo: tuple[float, float]
    hi: tuple[float, float]

    def edges(self) -> list[Segment]:
        (x0, y0), (x1, y1) = self.lo, self.hi
        return [
            Segment((x0, y0), (x1, y0)),
            Segment((x1, y0), (x1, y1)),
            Segment((x1, y1), (x0, y1)),
            Segment((x0, y1), (x0, y0)),
        ]


class Disc(NamedTuple):
    center: tuple[float, float]
    radius: float


Shape = Union[Segment, Box, Disc]
Rect = tuple[float, float, float, float]


def boundary_walls(bounds: Rect) -> list[Segment]:
    x0, y0, x1, y1 = bounds
    return Box((x0, y0), (x1, y1)).edges()


@dataclass(frozen=True)
class WorldMap:
    """Static obstacle geometry. Immutable once built.

    ``obstacles`` includes the four boundary walls as segments. Flattened numpy
    views used by the raycaster and collision checks are cached at build time.
    """

    bounds: Rect
    obstacles: tuple[Shape, ...]
    spawn_regions: tuple[Rect, ...]
    name: str = "world"
    _seg_a: np.ndarray = field(init=False, repr=False, compare=False)
    _seg_b: np.ndarray = field(init=False, repr=False, compare=False)
    _box_lo: np.ndarray = field(init=False, repr=False, compare=False)
    _box_hi: np.ndarray = field(init=False, repr=False, compare=False)
    _disc_c: np.ndarray = field(init=False, repr=False, compare=False)
    _disc_r: np.ndarray = field(init=False, repr=False, compare=False)
    _ray_a: np.ndarray = field(init=False, repr=False, compare=False)
    _ray_b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        segs = [s for s in self.obstacles if isinstance(s, Segment)]
        boxes = [s for s in self.obstacles if isinstance(s, Box)]
        discs = [s for s in self.obstacles if isinstance(s, Disc)]
        ray_segs = segs + [e for b in boxes for e in b.edges()]

        def arr(rows, width):
            return np.asarray(rows, dtype=np.float64).reshape(-1, width)

        setattr_ = object.__setattr__
        setattr_(self, "_seg_a", arr([s.a for s in segs], 2))
        setattr_(self, "_seg_b", arr([s.b for s in segs], 2))
        setattr_(self, "_box_lo", arr([b.lo for b in boxes], 2))
        setattr_(self, "_box_hi", arr([b.hi for b in boxes], 2))
        setattr_(self, "_disc_c", arr([d.center for d in discs], 2))
        setattr_(self, "_disc_r", np.asarray([d.radius for d in discs], dtype=np.float64))
        setattr_(self, "_ray_a", arr([s.a for s in ray_segs], 2))
        setattr_(self, "_ray_b", arr([s.b for s in ray_segs], 2))

    @classmethod
    def build(
        cls,
        bounds: Rect,
        obstacles: Sequence[Shape] = (),
        spawn_regions: Sequence[Rect] = (),
        name: str = "world",
    ) -> "WorldMap":
        """Validate geometry and prepend the implicit boundary walls."""
        bounds = tuple(float(v) for v in bounds)
        if not (bounds[0] < bounds[2] and bounds[1] < bounds[3]):
            raise WorldError(f"bounds {bounds} have non-positive extent")
        for shape in obstacles:
            _validate_shape(shape, bounds)
        regions = tuple(tuple(float(v) for v in r) for r in spawn_regions) or (bounds,)
        world = cls(
            bounds=bounds,
            obstacles=tuple(boundary_walls(bounds)) + tuple(obstacles),
            spawn_regions=regions,
            name=name,
        )
        for region in regions:
            if not (region[0] < region[2] and region[1] < region[3]):
                raise WorldError(f"spawn region {region} has non-positive extent")
            if not _rect_inside(region, bounds):
                raise WorldError(f"spawn region {region} lies outside bounds {bounds}")
            if not world._region_has_free_point(region):
                raise WorldError(f"spawn region {region} has no free space")
        return world

    def _region_has_free_point(self, region: Rect, samples: int = 21) -> bool:
        xs = np.linspace(region[0], region[2], samples)
        ys = np.linspace(region[1], region[3], samples)
        for x in xs:
            for y in ys:
                if not self.point_occupied(float(x), float(y)):
                    return True
        return False

    def point_occupied(self, x: float, y: float) -> bool:
        """True if the point lies inside a box or disc (segments have no interior)."""
        p = np.array([x, y])
        if len(self._box_lo) and np.any(np.all((self._box_lo <= p) & (p <= self._box_hi), axis=1)):
            return True
        if len(self._disc_r) and np.any(np.hypot(*(self._disc_c - p).T) <= self._disc_r):
            return True
        return False

    def to_document(self) -> dict:
        """Serialize back to the world-file layout (boundary walls omitted)."""
        n_walls = 4
        obstacles = []
        for shape in self.obstacles[n_walls:]:
            if isinstance(shape, Segment):
                obstacles.append({"type": "segment", "a": list(shape.a), "b": list(shape.b)})
            elif isinstance(shape, Box):
                obstacles.append({"type": "box", "min": list(shape.lo), "max": list(shape.hi)})
            else:
                obstacles.append(
                    {"type": "disc", "center": list(shape.center), "radius": shape.radius}
                )
        return {
            "format": WORLD_FORMAT,
            "name": self.name,
            "bounds": list(self.bounds),
            "obstacles": obstacles,
            "spawn_regions": [list(r) for r in self.spawn_regions],
        }


def _rect_inside(inner: Rect, outer: Rect) -> bool:
    return (
        outer[0] <= inner[0] and outer[1] <= inner[1]
        and inner[2] <= outer[2] and inner[3] <= outer[3]
    )


def _validate_shape(shape: Shape, bounds: Rect) -> None:
    if isinstance(shape, Segment):
        pts = [shape.a, shape.b]
        if shape.a == shape.b:
            raise WorldError(f"degenerate segment {shape}")
    elif isinstance(shape, Box):
        if not (shape.lo[0] < shape.hi[0] and shape.lo[1] < shape.hi[1]):
            raise WorldError(f"box min {shape.lo} must be strictly below max {shape.hi}")
        pts = [shape.lo, shape.hi]
    elif isinstance(shape, Disc):
        if not shape.radius > 0:
            raise WorldError(f"disc radius must be positive, got {shape.radius}")
        (cx, cy), r = shape.center, shape.radius
        pts = [(cx - r, cy - r), (cx + r, cy + r)]
    else:
        raise WorldError(f"unknown shape {shape!r}")
    for x, y in pts:
        if not (bounds[0] <= x <= bounds[2] and bounds[1] <= y <= bounds[3]):
            raise WorldError(f"obstacle {shape} extends outside bounds {bounds}")


# ----------------------------------------------------------------------
# World files
# ----------------------------------------------------------------------


def _point(value, where: str) -> tuple[float, float]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise SchemaError(f"{where}: expected [x, y], got {value!r}")
    try:
        return (float(value[0]), float(value[1]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: non-numeric coordinate in {value!r}") from exc


def _rect(value, where: str) -> Rect:
    if not (isinstance(value, (list, tuple)) and len(value) == 4):
        raise SchemaError(f"{where}: expected [xmin, ymin, xmax, ymax], got {value!r}")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: non-numeric value in {value!r}") from exc


def _parse_shape(doc, where: str) -> Shape:
    if not isinstance(doc, dict) or "type" not in doc:
        raise SchemaError(f"{where}: obstacle must be an object with a 'type' key")
    kind = doc["type"]
    try:
        if kind == "segment":
            return Segment(_point(doc["a"], where + ".a"), _point(doc["b"], where + ".b"))
        if kind == "box":
            return Box(_point(doc["min"], where + ".min"), _point(doc["max"], where + ".max"))
        if kind == "disc":
            return Disc(_point(doc["center"], where + ".center"), float(doc["radius"]))
    except KeyError as exc:
        raise SchemaError(f"{where}: {kind} is missing key {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: bad {kind} field: {exc}") from exc
    raise SchemaError(f"{where}: unknown obstacle type {kind!r}")


def load_world(document: str, name: Optional[str] = None) -> WorldMap:
    """Parse a JSON world description into a validated :class:`WorldMap`.

    Raises:
        SchemaError: malformed JSON (with line/column) or wrong layout.
        WorldError: geometry violating a WorldMap invariant.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        line = document.splitlines()[exc.lineno - 1] if exc.lineno <= len(document.splitlines()) else ""
        raise SchemaError(
            f"world file line {exc.lineno}, column {exc.colno}: {exc.msg}\n    {line}"
        ) from exc
    if not isinstance(doc, dict):
        raise SchemaError("world file must contain a JSON object")
    if doc.get("format") != WORLD_FORMAT:
        raise SchemaError(f"unsupported world format {doc.get('format')!r}, expected {WORLD_FORMAT}")
    if "bounds" not in doc:
        raise SchemaError("world file is missing 'bounds'")
    bounds = _rect(doc["bounds"], "bounds")
    raw_obs = doc.get("obstacles", [])
    raw_spawn = doc.get("spawn_regions", [])
    if not isinstance(raw_obs, list) or not isinstance(raw_spawn, list):
        raise SchemaError("'obstacles' and 'spawn_regions' must be lists")
    obstacles = [_parse_shape(o, f"obstacles[{i}]") for i, o in enumerate(raw_obs)]
    regions = [_rect(r, f"spawn_regions[{i}]") for i, r in enumerate(raw_spawn)]
    return WorldMap.build(bounds, obstacles, regions, name=name or str(doc.get("name", "world")))


def load_world_file(path: Union[str, Path]) -> WorldMap:
    """Load a world from disk; bare names like ``simple`` resolve to shipped fixtures."""
    p = Path(path)
    if not p.exists():
        shipped = WORLDS_DIR / (p.name if p.suffix == ".world" else p.name + ".world")
        if shipped.exists():
            p = shipped
    try:
        text = p.read_text()
    except OSError as exc:
        raise WorldError(f"cannot read world file {path}: {exc}") from exc
    return load_world(text, name=p.stem)


# ----------------------------------------------------------------------
# Kinematics, collision, raycast
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    radius: float = 0.2

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("robot radius must be positive")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


class ActionPair(NamedTuple):
    linear_idx: int
    angular_idx: int

    @property
    def v(self) -> float:
        return LINEAR_VELOCITIES[self.linear_idx]

    @property
    def omega(self) -> float:
        return ANGULAR_VELOCITIES[self.angular_idx]

    def validate(self) -> "ActionPair":
        if not (0 <= self.linear_idx < N_LINEAR and 0 <= self.angular_idx < N_ANGULAR):
            raise UsageError(f"action {tuple(self)} out of range")
        return self


def step_robot(state: RobotState, action: ActionPair, dt: float) -> RobotState:
    """Advance the pose by exact unicycle arc integration."""
    v, w = action.v, action.omega
    th = state.theta
    if w == 0.0:
        x = state.x + v * math.cos(th) * dt
        y = state.y + v * math.sin(th) * dt
    else:
        th1 = th + w * dt
        rho = v / w
        x = state.x + rho * (math.sin(th1) - math.sin(th))
        y = state.y - rho * (math.cos(th1) - math.cos(th))
    return RobotState(x, y, th + w * dt, state.radius)


def check_collision(world: WorldMap, state: RobotState) -> bool:
    """True iff the robot disc touches or overlaps any obstacle (closed contact)."""
    x, y, r = state.x, state.y, state.radius
    b = world.bounds
    if not (b[0] <= x <= b[2] and b[1] <= y <= b[3]):
        return True
    p = np.array([x, y])
    if len(world._seg_a):
        a, e = world._seg_a, world._seg_b - world._seg_a
        t = np.clip(np.einsum("ij,ij->i", p - a, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
        d = p - (a + t[:, None] * e)
        if np.any(np.hypot(d[:, 0], d[:, 1]) <= r):
            return True
    if len(world._box_lo):
        d = p - np.clip(p, world._box_lo, world._box_hi)
        if np.any(np.hypot(d[:, 0], d[:, 1]) <= r):
            return True
    if len(world._disc_r):
        d = p - world._disc_c
        if np.any(np.hypot(d[:, 0], d[:, 1]) <= world._disc_r + r):
            return True
    return False


def ray_bearings(theta: float, n_rays: int, fov: float) -> np.ndarray:
    return theta - fov / 2.0 + np.arange(n_rays) * (fov / (n_rays - 1))


def raycast_scan(
    world: WorldMap,
    state: RobotState,
    n_rays: int = 64,
    fov: float = math.pi / 2,
    max_range: float = 5.0,
) -> np.ndarray:
    """Distance from the robot center to the nearest hit along each ray.

    Ray ``k`` points at ``theta - fov/2 + k*fov/(n_rays-1)``; misses and hits
    beyond ``max_range`` read ``max_range``.
    """
    if n_rays < 2 or not (0 < fov <= 2 * math.pi) or not max_range > 0:
        raise UsageError("raycast needs n_rays >= 2, 0 < fov <= 2*pi, max_range > 0")
    ang = ray_bearings(state.theta, n_rays, fov)
    d = np.stack([np.cos(ang), np.sin(ang)], axis=1)  # (n, 2)
    p = np.array([state.x, state.y])
    best = np.full(n_rays, float(max_range))

    if len(world._ray_a):
        a = world._ray_a
        e = world._ray_b - a
        w = a - p
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        cross_we = w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]
        cross_wd = w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross_we[None, :] / denom
            u = cross_wd / denom
        ok = (denom != 0) & (t >= 0) & (u >= 0) & (u <= 1)
        t = np.where(ok, t, np.inf)
        best = np.minimum(best, t.min(axis=1))

    if len(world._disc_r):
        pc = p - world._disc_c  # (D, 2)
        bq = d @ pc.T  # (n, D)
        cq = np.einsum("ij,ij->i", pc, pc) - world._disc_r ** 2
        disc = bq * bq - cq[None, :]
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        t_near = -bq - root
        t_far = -bq + root
        t = np.where(t_near >= 0, t_near, t_far)
        t = np.where((disc >= 0) & (t >= 0), t, np.inf)
        best = np.minimum(best, t.min(axis=1))

    return best


# ----------------------------------------------------------------------
# Episode context
# ----------------------------------------------------------------------


class Terminal(str, enum.Enum):
    RUNNING = "running"
    COLLISION = "collision"
    STEP_LIMIT = "step_limit"


class EnvStepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    terminal: Terminal
    step_index: int

    @property
    def done(self) -> bool:
        return self.terminal is not Terminal.RUNNING


def step_reward(action: ActionPair, dt: float = DT) -> float:
    """Progress reward for a collision-free step: ``v * cos(omega) * dt``."""
    return action.v * math.cos(action.omega) * dt


class ObstacleEnv:
    """One episode context: a world, a robot, a step counter and a spawn RNG.

    Not thread-safe; give each concurrent episode its own instance.
    """

    def __init__(
        self,
        world: WorldMap,
        robot_radius: float = 0.2,
        n_rays: int = 64,
        fov: float = math.pi / 2,
        max_range: float = 5.0,
        dt: float = DT,
        max_steps: int = MAX_STEPS,
        seed: Optional[int] = None,
    ) -> None:
        self.world = world
        self.robot_radius = robot_radius
        self.n_rays = n_rays
        self.fov = fov
        self.max_range = max_range
        self.dt = dt
        self.max_steps = max_steps
        self.rng = np.random.default_rng(seed)
        self.state: Optional[RobotState] = None
        self.step_index = 0
        self.terminal = Terminal.RUNNING
        self.pose_log: list[tuple[float, float, float]] = []

    def sample_pose(self, rng: np.random.Generator) -> RobotState:
        regions = np.asarray(self.world.spawn_regions)
        areas = (regions[:, 2] - regions[:, 0]) * (regions[:, 3] - regions[:, 1])
        probs = areas / areas.sum()
        for _ in range(MAX_SPAWN_ATTEMPTS):
            x0, y0, x1, y1 = regions[rng.choice(len(regions), p=probs)]
            x = float(rng.uniform(x0, x1))
            y = float(rng.uniform(y0, y1))
            theta = float(rng.uniform(-math.pi, math.pi))
            state = RobotState(x, y, theta, self.robot_radius)
            if not check_collision(self.world, state):
                return state
        raise WorldError(
            f"no collision-free spawn pose in {self.world.name!r} after {MAX_SPAWN_ATTEMPTS} attempts"
        )

    def reset(self, seed: Optional[int] = None, state: Optional[RobotState] = None) -> np.ndarray:
        """Start a new episode and return the raw scan at the spawn pose.

        A given ``seed`` makes the spawn independent of the env's own stream;
        an explicit ``state`` skips sampling altogether.
        """
        if state is None:
            rng = np.random.default_rng(seed) if seed is not None else self.rng
            state = self.sample_pose(rng)
        self.state = state
        self.step_index = 0
        self.terminal = Terminal.RUNNING
        self.pose_log = [(state.x, state.y, state.theta)]
        return self.scan()

    def scan(self) -> np.ndarray:
        return raycast_scan(self.world, self.state, self.n_rays, self.fov, self.max_range)

    def step(self, action: ActionPair) -> EnvStepResult:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        if self.terminal is not Terminal.RUNNING:
            raise UsageError(f"episode already terminated ({self.terminal.value})")
        action = ActionPair(*action).validate()
        self.state = step_robot(self.state, action, self.dt)
        self.step_index += 1
        self.pose_log.append((self.state.x, self.state.y, self.state.theta))
        if check_collision(self.world, self.state):
            self.terminal = Terminal.COLLISION
            reward = COLLISION_PENALTY
        else:
            reward = step_reward(action, self.dt)
            if self.step_index >= self.max_steps:
                self.terminal = Terminal.STEP_LIMIT
        return EnvStepResult(self.scan(), reward, self.terminal, self.step_index)
