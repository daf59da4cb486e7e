"""Synthetic multi-target scenarios, GT rendering and a simulated noisy detector."""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .geometry import Box, clamp_to_arena, l1_box_distance
from .pld import PseudoLabel

FP_SIZE_RANGE = (0.05, 0.15)
FP_CONF_MAX = 0.3


class WorldError(ValueError):
    pass


class GTLabel(NamedTuple):
    box: Box
    identity: int


@dataclass(frozen=True)
class ScenarioConfig:
    num_targets: int = 6
    num_frames: int = 60
    speed_range: tuple[float, float] = (0.002, 0.010)
    size_range: tuple[float, float] = (0.08, 0.14)
    birth_prob: float = 0.4
    death_prob: float = 0.01
    motion_noise: float = 0.001

    def validate(self) -> None:
        if self.num_frames < 1:
            raise WorldError("num_frames must be >= 1")
        if self.num_targets < 0:
            raise WorldError("num_targets must be >= 0")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 1:
            raise WorldError("size_range must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise WorldError("speed_range must satisfy 0 <= lo <= hi")
        for name in ("birth_prob", "death_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise WorldError(f"{name} must lie in [0, 1]")
        if self.motion_noise < 0:
            raise WorldError("motion_noise must be >= 0")


@dataclass
class Target:
    identity: int
    birth_frame: int
    death_frame: int  # exclusive
    initial_box: Box
    velocity: tuple[float, float]
    motion_noise: float
    trajectory: list[Box] = field(default_factory=list, repr=False)  # one box per alive frame

    def alive(self, t: int) -> bool:
        return self.birth_frame <= t < self.death_frame


@dataclass
class Scenario:
    num_frames: int
    targets: list[Target]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        raw = json.loads(text)
        targets = [
            Target(
                t["identity"], t["birth_frame"], t["death_frame"], Box(*t["initial_box"]),
                tuple(t["velocity"]), t["motion_noise"], [Box(*b) for b in t["trajectory"]],
            )
            for t in raw["targets"]
        ]
        return cls(raw["num_frames"], targets)


def _reflect(c: float, v: float, half: float) -> tuple[float, float]:
    lo, hi = half, 1.0 - half
    if hi <= lo:
        return 0.5, 0.0
    for _ in range(4):
        if c < lo:
            c, v = 2 * lo - c, -v
        elif c > hi:
            c, v = 2 * hi - c, -v
        else:
            break
    return min(max(c, lo), hi), v


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Constant-velocity targets with Gaussian motion noise, reflected at the arena walls."""
    config.validate()
    rng = rngmod.stream(seed, "scenario")
    targets = []
    T = config.num_frames
    for ident in range(1, config.num_targets + 1):
        w = float(rng.uniform(*config.size_range))
        h = float(rng.uniform(*config.size_range))
        cx = float(rng.uniform(w / 2, 1 - w / 2))
        cy = float(rng.uniform(h / 2, 1 - h / 2))
        speed = float(rng.uniform(*config.speed_range))
        angle = float(rng.uniform(0, 2 * math.pi))
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        late = rng.random() < config.birth_prob
        birth = int(rng.integers(1, T)) if late and T > 1 else 0
        if config.death_prob > 0:
            death = min(T, birth + int(rng.geometric(config.death_prob)))
        else:
            death = T
        death = max(death, birth + 1)
        traj = []
        x, y, ux, uy = cx, cy, vx, vy
        for _ in range(birth, death):
            traj.append(Box(x, y, w, h))
            x = x + ux + (float(rng.normal(0, config.motion_noise)) if config.motion_noise else 0.0)
            y = y + uy + (float(rng.normal(0, config.motion_noise)) if config.motion_noise else 0.0)
            x, ux = _reflect(x, ux, w / 2)
            y, uy = _reflect(y, uy, h / 2)
        targets.append(Target(ident, birth, death, Box(cx, cy, w, h), (vx, vy), config.motion_noise, traj))
    return Scenario(T, targets)


def render_frame(scenario: Scenario, t: int) -> list[GTLabel]:
    if not 0 <= t < scenario.num_frames:
        raise WorldError(f"frame {t} outside [0, {scenario.num_frames})")
    return [
        GTLabel(clamp_to_arena(tg.trajectory[t - tg.birth_frame]), tg.identity)
        for tg in scenario.targets
        if tg.alive(t)
    ]


def render_all(scenario: Scenario) -> list[list[GTLabel]]:
    return [render_frame(scenario, t) for t in range(scenario.num_frames)]


@dataclass(frozen=True)
class DetectorParams:
    noise: float = 0.01
    fn_rate: float = 0.1
    fp_rate: float = 0.1
    kappa: float = 5.0

    def validate(self) -> None:
        for name in ("fn_rate", "fp_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise WorldError(f"{name} must lie in [0, 1]")
        if self.noise < 0 or self.kappa < 0:
            raise WorldError("noise and kappa must be >= 0")


def simulate_detector(gts, params: DetectorParams, rng: np.random.Generator) -> list[PseudoLabel]:
    """Drop, jitter and score GT boxes, then add uniform false positives."""
    params.validate()
    out = []
    for lab in gts:
        if rng.random() < params.fn_rate:
            continue
        jitter = rng.normal(0.0, params.noise, size=4) if params.noise > 0 else np.zeros(4)
        raw = np.asarray(lab.box, dtype=float) + jitter
        raw[2:] = np.maximum(raw[2:], 1e-3)
        noisy = clamp_to_arena(Box(*map(float, raw)))
        conf = math.exp(-params.kappa * l1_box_distance(noisy, lab.box))
        out.append(PseudoLabel(noisy, min(1.0, conf)))
    n_fp = int(rng.poisson(params.fp_rate * len(gts))) if gts else 0
    for _ in range(n_fp):
        w, h = rng.uniform(*FP_SIZE_RANGE, size=2)
        cx, cy = rng.uniform(0, 1, size=2)
        box = clamp_to_arena(Box(float(cx), float(cy), float(w), float(h)))
        out.append(PseudoLabel(box, float(rng.uniform(0, FP_CONF_MAX))))
    return out


# ---------------------------------------------------------------------------
# files


def write_gt(path, frames: list[list[GTLabel]]) -> None:
    """MOT-style GT lines ``frame,id,left,top,width,height,1,1,1`` (frames 1-based)."""
    lines = []
    for t, labels in enumerate(frames):
        for lab in sorted(labels, key=lambda lb: lb.identity):
            cx, cy, w, h = lab.box
            lines.append(f"{t + 1},{lab.identity},{cx - w / 2!r},{cy - h / 2!r},{w!r},{h!r},1,1,1\n")
    Path(path).write_text("".join(lines))


def read_gt(path, num_frames: int | None = None) -> list[list[GTLabel]]:
    per_frame: dict[int, list[GTLabel]] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 6:
            raise WorldError(f"{path}:{lineno}: expected at least 6 fields, got {len(parts)}")
        try:
            frame, ident = int(parts[0]), int(float(parts[1]))
            left, top, w, h = (float(x) for x in parts[2:6])
        except ValueError as exc:
            raise WorldError(f"{path}:{lineno}: {exc}") from None
        if frame < 1:
            raise WorldError(f"{path}:{lineno}: frame numbers start at 1")
        per_frame.setdefault(frame, []).append(GTLabel(Box(left + w / 2, top + h / 2, w, h), ident))
    n = max(per_frame, default=0)
    if num_frames is not None:
        if n > num_frames:
            raise WorldError(f"{path}: frame {n} exceeds num_frames={num_frames}")
        n = num_frames
    return [per_frame.get(t + 1, []) for t in range(n)]


def _tuple(value: str) -> tuple[float, float]:
    lo, hi = (float(x) for x in value.split(","))
    return (lo, hi)


def load_scenario_config(path) -> ScenarioConfig:
    """Read the ``[scenario]`` section of a key=value config file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise WorldError(f"cannot read config {path}")
    if not parser.has_section("scenario"):
        raise WorldError(f"{path}: missing [scenario] section")
    sec = parser["scenario"]
    kwargs = {}
    casts = {
        "num_targets": int, "num_frames": int, "speed_range": _tuple, "size_range": _tuple,
        "birth_prob": float, "death_prob": float, "motion_noise": float,
    }
    for key, value in sec.items():
        if key not in casts:
            raise WorldError(f"{path}: unknown scenario key {key!r}")
        try:
            kwargs[key] = casts[key](value)
        except ValueError as exc:
            raise WorldError(f"{path}: bad value for {key}: {exc}") from None
    cfg = ScenarioConfig(**kwargs)
    cfg.validate()
    return cfg
