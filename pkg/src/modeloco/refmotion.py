"""Reference motion library built from hand-authored keyframes.

A reference motion is a rough, piecewise-linear sketch of the base pose of a
planar biped over one clip, optionally annotated with a per-leg contact
schedule. Motions are stored as T x 5 sample arrays with channels
(dx, z, pitch, contact_left, contact_right). Forward progress is kept as a
per-step delta dx rather than an absolute x so that clips stay bounded and
can be re-anchored at an arbitrary world position. Row i stores the step
leading out of sample i; the last row carries the wrap-around step for
periodic clips and repeats the preceding step otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

PERIODIC = "periodic"
TRANSIENT = "transient"
STEADY_STATE = "steady_state"
KINDS = (PERIODIC, TRANSIENT, STEADY_STATE)

CHANNELS = ("dx", "z", "pitch", "contact_left", "contact_right")
NUM_CHANNELS = len(CHANNELS)

NOMINAL_HEIGHT = 0.5
DEFAULT_DT = 0.02
DEFAULT_CLIP_DURATION = 1.0

MODESET_NAMES = ("pi1", "pi2", "pi3")


class InvalidInputError(ValueError):
    """Raised when a construction precondition is violated."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Keyframe:
    """One hand-authored base pose at a given clip time."""

    time: float
    base_x: float = 0.0
    base_z: float = NOMINAL_HEIGHT
    base_pitch: float = 0.0

    def __post_init__(self):
        if self.time < 0.0:
            raise InvalidInputError(f"keyframe time must be >= 0, got {self.time}")


@dataclass(frozen=True)
class ContactPhase:
    """A phase interval [start, end) of the clip with fixed per-leg stance flags."""

    start_phase: float
    end_phase: float
    left: bool
    right: bool

    def __post_init__(self):
        if not (0.0 <= self.start_phase < self.end_phase <= 1.0):
            raise InvalidInputError(
                f"contact phase must satisfy 0 <= start < end <= 1, got "
                f"[{self.start_phase}, {self.end_phase}]"
            )


@dataclass(frozen=True)
class ReferenceMotion:
    """A sampled clip: T x 5 array of (dx, z, pitch, contact_left, contact_right)."""

    name: str
    samples: np.ndarray
    dt: float
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples))
        s = self.samples
        if s.ndim != 2 or s.shape[1] != NUM_CHANNELS:
            raise InvalidInputError(f"samples must be T x {NUM_CHANNELS}, got {s.shape}")
        if s.shape[0] < 2:
            raise InvalidInputError("a motion needs at least 2 samples")
        if self.dt <= 0.0:
            raise InvalidInputError("dt must be positive")
        if self.kind not in KINDS:
            raise InvalidInputError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not np.isfinite(s).all():
            raise InvalidInputError("samples must be finite")
        contacts = s[:, 3:5]
        if not np.isin(contacts, (0.0, 1.0)).all():
            raise InvalidInputError("contact channels must be 0 or 1")
        if self.kind == PERIODIC:
            gap = np.abs(s[0, 1:3] - s[-1, 1:3]).max()
            if gap > 1e-9:
                raise InvalidInputError(
                    f"periodic motion must close in z and pitch (endpoint gap {gap:.3e})"
                )

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Clip duration in seconds, endpoints inclusive."""
        return (self.length - 1) * self.dt

    @property
    def displacement(self) -> float:
        """Total forward travel over one clip (last wrap step excluded)."""
        return float(self.samples[:-1, 0].sum())

    def positions(self) -> np.ndarray:
        """Absolute x per sample, anchored at 0 (exclusive prefix sum of dx)."""
        return np.concatenate(([0.0], np.cumsum(self.samples[:-1, 0])))


@dataclass(frozen=True)
class ModeLibrary:
    """Ordered set of reference motions; the order defines the mode indices."""

    motions: tuple[ReferenceMotion, ...]
    latents: tuple

    def __post_init__(self):
        names = [m.name for m in self.motions]
        if len(set(names)) != len(names):
            raise InvalidInputError(f"mode names must be unique, got {names}")
        if len(self.latents) != len(self.motions):
            raise InvalidInputError("latents must match motions one-to-one")

    @staticmethod
    def from_motions(motions: Sequence[ReferenceMotion]) -> "ModeLibrary":
        return ModeLibrary(tuple(motions), (None,) * len(motions))

    @property
    def n(self) -> int:
        return len(self.motions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.motions)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no mode named {name!r} in library {self.names}") from None

    def with_latents(self, latents: Sequence) -> "ModeLibrary":
        return ModeLibrary(self.motions, tuple(latents))


def interpolate_keyframes(
    keyframes: Sequence[Keyframe],
    dt: float = DEFAULT_DT,
    name: str = "motion",
    kind: str = PERIODIC,
) -> ReferenceMotion:
    """Sample a piecewise-linear base-pose trajectory at a uniform dt.

    The x channel is converted to per-step deltas (row 0 gets 0). Contact
    channels are left at zero; attach a schedule with apply_contact_schedule.
    """
    if len(keyframes) < 2:
        raise InvalidInputError("need at least 2 keyframes")
    if dt <= 0.0:
        raise InvalidInputError("dt must be positive")
    times = np.array([k.time for k in keyframes], dtype=float)
    if not (np.diff(times) > 0.0).all():
        raise InvalidInputError(f"keyframe times must be strictly increasing, got {times}")

    duration = times[-1] - times[0]
    steps = int(round(duration / dt))
    if steps < 1:
        raise InvalidInputError("clip shorter than one sample step")
    grid = times[0] + np.arange(steps + 1) * dt

    x = np.interp(grid, times, [k.base_x for k in keyframes])
    z = np.interp(grid, times, [k.base_z for k in keyframes])
    pitch = np.interp(grid, times, [k.base_pitch for k in keyframes])

    samples = np.zeros((steps + 1, NUM_CHANNELS))
    samples[:-1, 0] = np.diff(x)
    # The last dx row is never consumed by trackers (positions use the
    # exclusive prefix sum); fill it with the wrap step for periodic clips
    # and the preceding step otherwise so the channel has no fake jump.
    samples[-1, 0] = samples[0, 0] if kind == PERIODIC else samples[-2, 0]
    samples[:, 1] = z
    samples[:, 2] = pitch
    return ReferenceMotion(name=name, samples=samples, dt=dt, kind=kind)


def apply_contact_schedule(
    motion: ReferenceMotion, phases: Sequence[ContactPhase]
) -> ReferenceMotion:
    """Fill the contact channels from a schedule that tiles the clip phase [0, 1]."""
    if not phases:
        raise InvalidInputError("need at least one contact phase")
    ordered = sorted(phases, key=lambda p: p.start_phase)
    if abs(ordered[0].start_phase) > 1e-12 or abs(ordered[-1].end_phase - 1.0) > 1e-12:
        raise InvalidInputError("contact phases must cover [0, 1]")
    for a, b in zip(ordered, ordered[1:]):
        if abs(a.end_phase - b.start_phase) > 1e-12:
            raise InvalidInputError(
                f"contact phases must tile without gaps or overlap "
                f"({a.end_phase} vs {b.start_phase})"
            )

    T = motion.length
    samples = np.array(motion.samples)
    for i in range(T):
        p = i / (T - 1)
        for ph in ordered:
            if ph.start_phase <= p < ph.end_phase or (p == 1.0 and ph.end_phase == 1.0):
                samples[i, 3] = float(ph.left)
                samples[i, 4] = float(ph.right)
                break
    return replace(motion, samples=samples)


# --- built-in mode sets ----------------------------------------------------
#
# The three selectors cover increasingly contact-aware training setups:
#   pi1: idle plus walk and leap in four directions (lateral directions are
#        folded into slower backward variants in this planar world)
#   pi2: idle, forward walk, forward leap, and a transient launch onto a block
#   pi3: idle, forward walk, forward hop, forward leap, with contact
#        schedules attached to walk (legs alternating) and hop (legs together)
#
# Pose values are illustrative sketches, not captured data; any mode set can
# be overridden with a modeset definition file (see modeset_from_spec).

WALK_SCHEDULE = (
    ContactPhase(0.0, 0.5, left=True, right=False),
    ContactPhase(0.5, 1.0, left=False, right=True),
)
HOP_SCHEDULE = (
    ContactPhase(0.0, 0.5, left=True, right=True),
    ContactPhase(0.5, 1.0, left=False, right=False),
)

_Z = NOMINAL_HEIGHT
_D = DEFAULT_CLIP_DURATION


def _pose_keys(points: Sequence[tuple[float, float, float, float]]) -> list[Keyframe]:
    return [Keyframe(time=t, base_x=x, base_z=z, base_pitch=p) for t, x, z, p in points]


def _idle() -> list[Keyframe]:
    return _pose_keys([(0.0, 0.0, _Z, 0.0), (_D, 0.0, _Z, 0.0)])


def _walk(stride: float) -> list[Keyframe]:
    return _pose_keys([(0.0, 0.0, _Z, 0.0), (_D, stride, _Z, 0.0)])


def _leap(stride: float, rise: float = 0.15) -> list[Keyframe]:
    return _pose_keys(
        [
            (0.0, 0.0, _Z, 0.0),
            (0.5 * _D, 0.5 * stride, _Z + rise, 0.0),
            (_D, stride, _Z, 0.0),
        ]
    )


def _hop(stride: float, rise: float = 0.1) -> list[Keyframe]:
    return _pose_keys(
        [
            (0.0, 0.0, _Z, 0.0),
            (0.5 * _D, 0.5 * stride, _Z, 0.0),
            (0.75 * _D, 0.75 * stride, _Z + rise, 0.0),
            (_D, stride, _Z, 0.0),
        ]
    )


def _launch() -> list[Keyframe]:
    # Jump onto a 0.4 m block: z is sketched relative to the support plane,
    # which flips from the ground to the block top as the base crosses onto it.
    return _pose_keys(
        [
            (0.0, 0.0, _Z, 0.0),
            (0.2 * _D, 0.1, _Z - 0.05, -0.1),
            (0.4 * _D, 0.2, _Z + 0.45, -0.15),
            (0.6 * _D, 0.3, _Z + 0.1, 0.0),
            (_D, 0.4, _Z, 0.0),
        ]
    )


def _modeset_spec(selector: str) -> dict:
    walk_f, walk_b = 0.5, -0.5
    walk_l, walk_r = -0.3, -0.2  # lateral directions folded to slow backward
    leap_f, leap_b = 0.5, -0.5
    leap_l, leap_r = -0.3, -0.2
    if selector == "pi1":
        modes = [
            ("idle", STEADY_STATE, _idle(), None),
            ("walk_f", PERIODIC, _walk(walk_f), None),
            ("walk_b", PERIODIC, _walk(walk_b), None),
            ("walk_l", PERIODIC, _walk(walk_l), None),
            ("walk_r", PERIODIC, _walk(walk_r), None),
            ("leap_f", PERIODIC, _leap(leap_f), None),
            ("leap_b", PERIODIC, _leap(leap_b), None),
            ("leap_l", PERIODIC, _leap(leap_l), None),
            ("leap_r", PERIODIC, _leap(leap_r), None),
        ]
    elif selector == "pi2":
        modes = [
            ("idle", STEADY_STATE, _idle(), None),
            ("walk_f", PERIODIC, _walk(walk_f), None),
            ("leap_f", PERIODIC, _leap(leap_f), None),
            ("launch", TRANSIENT, _launch(), None),
        ]
    elif selector == "pi3":
        modes = [
            ("idle", STEADY_STATE, _idle(), None),
            ("walk_f", PERIODIC, _walk(walk_f), WALK_SCHEDULE),
            ("hop_f", PERIODIC, _hop(0.3), HOP_SCHEDULE),
            ("leap_f", PERIODIC, _leap(leap_f), None),
        ]
    else:
        raise InvalidInputError(
            f"unknown mode set {selector!r}; valid selectors are {', '.join(MODESET_NAMES)}"
        )
    return {
        "name": selector,
        "dt": DEFAULT_DT,
        "modes": [
            {
                "name": name,
                "kind": kind,
                "keyframes": [
                    {"time": k.time, "x": k.base_x, "z": k.base_z, "pitch": k.base_pitch}
                    for k in keys
                ],
                "contact_phases": None
                if schedule is None
                else [
                    {
                        "start": ph.start_phase,
                        "end": ph.end_phase,
                        "left": ph.left,
                        "right": ph.right,
                    }
                    for ph in schedule
                ],
            }
            for name, kind, keys, schedule in modes
        ],
    }


def modeset_from_spec(spec: dict) -> ModeLibrary:
    """Build a library from a modeset definition (the gen-refs input schema).

    Schema: {"dt": float, "modes": [{"name", "kind",
    "keyframes": [{"time", "x", "z", "pitch"}],
    "contact_phases": null | [{"start", "end", "left", "right"}]}]}
    """
    dt = float(spec.get("dt", DEFAULT_DT))
    motions = []
    for mode in spec["modes"]:
        keys = [
            Keyframe(
                time=float(k["time"]),
                base_x=float(k.get("x", 0.0)),
                base_z=float(k.get("z", NOMINAL_HEIGHT)),
                base_pitch=float(k.get("pitch", 0.0)),
            )
            for k in mode["keyframes"]
        ]
        motion = interpolate_keyframes(keys, dt=dt, name=mode["name"], kind=mode["kind"])
        if mode.get("contact_phases"):
            phases = [
                ContactPhase(
                    start_phase=float(p["start"]),
                    end_phase=float(p["end"]),
                    left=bool(p["left"]),
                    right=bool(p["right"]),
                )
                for p in mode["contact_phases"]
            ]
            motion = apply_contact_schedule(motion, phases)
        motions.append(motion)
    return ModeLibrary.from_motions(motions)


def builtin_library(selector: str) -> ModeLibrary:
    """Return one of the built-in mode sets (pi1, pi2, pi3) with empty latents."""
    return modeset_from_spec(_modeset_spec(selector))


# --- serialization ---------------------------------------------------------


def library_to_payload(library: ModeLibrary) -> dict:
    return {
        "n": library.n,
        "channels": list(CHANNELS),
        "modes": [
            {
                "name": m.name,
                "kind": m.kind,
                "dt": m.dt,
                "samples": m.samples.tolist(),
                "latent": None
                if z is None
                else np.asarray(getattr(z, "z", z), dtype=float).tolist(),
            }
            for m, z in zip(library.motions, library.latents)
        ],
    }


def library_from_payload(payload: dict) -> ModeLibrary:
    from .encoder import LatentMode  # deferred: encoder depends on this module

    motions = []
    latents = []
    for mode in payload["modes"]:
        motions.append(
            ReferenceMotion(
                name=mode["name"],
                samples=np.array(mode["samples"], dtype=float),
                dt=float(mode["dt"]),
                kind=mode["kind"],
            )
        )
        z = mode.get("latent")
        latents.append(
            None if z is None else LatentMode(np.array(z, dtype=float), mode["name"])
        )
    return ModeLibrary(tuple(motions), tuple(latents))
