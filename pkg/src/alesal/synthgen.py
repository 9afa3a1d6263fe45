"""Synthetic MIMO-OFDM CSI from a sum of time-varying propagation paths.

Each antenna pair sees a handful of static reflections, one path off the
chest and one off a limb. Per subcarrier ``i`` the channel is

    h_i(t) = sum_l A_l * exp(-j 2 pi d_l(t) / lambda_i) + noise

where ``d_l(t)`` is the path's base length plus a displacement term. Breathing
is a sinusoidal displacement of the chest path, apnea collapses its amplitude,
and periodic limb movement adds short jerky bursts to the limb path.

Jitter ranges used by :func:`gen_dataset` (all uniform):

==========================  =====================================
breathing rate              0.2 - 0.4 Hz
breathing path excursion    4 - 10 mm
static paths per pair       3, |A| 0.3 - 1.0, length 2 - 10 m
chest path                  |A| 0.1 - 0.25 times a pair gain, length 2 - 6 m
pair gain                   0.6 - 1.0, or 0.1 - 0.3 for a "modest" pair (p = 0.25)
limb path                   |A| 0.05 - 0.25, length 1.5 - 5 m
limb burst                  0.5 - 2 s, 1 - 2 Hz, excursion 20 - 50 mm
apnea                       10 - 16 s flat at 0 - 10 % depth, 1 s ramps
==========================  =====================================
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .csi_data import CsiRecord, LabelInterval, SessionMeta, UniformCsi, records_from_uniform

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER = 5e9
DEFAULT_SPACING = 312.5e3


# ---------------------------------------------------------------------------
# displacement terms


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float  # meters
    freq: float  # Hz
    phase: float = 0.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(2 * np.pi * self.freq * t + self.phase)

    @property
    def max_freq(self) -> float:
        return self.freq


@dataclass(frozen=True)
class Burst:
    """A Hann-enveloped oscillation: a brief twitch or kick."""

    onset: float
    duration: float
    amplitude: float
    jerk_freq: float

    def __call__(self, t: np.ndarray) -> np.ndarray:
        u = (t - self.onset) / self.duration
        inside = (u >= 0) & (u <= 1)
        env = np.where(inside, np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
        return self.amplitude * env * np.sin(2 * np.pi * self.jerk_freq * (t - self.onset))

    @property
    def max_freq(self) -> float:
        return self.jerk_freq


@dataclass(frozen=True)
class ApneaEvent:
    """Chest excursion scaled to ``depth`` over [start, end] with linear ramps outside it."""

    start: float
    end: float
    depth: float = 0.05
    ramp: float = 1.0

    def envelope(self, t: np.ndarray) -> np.ndarray:
        down = np.clip((self.start - t) / self.ramp, 0.0, 1.0) if self.ramp > 0 else (t < self.start) * 1.0
        up = np.clip((t - self.end) / self.ramp, 0.0, 1.0) if self.ramp > 0 else (t > self.end) * 1.0
        outside = np.maximum(down, up)
        return self.depth + (1.0 - self.depth) * outside


Displacement = Union[Sinusoid, Burst]


@dataclass(frozen=True)
class PathComponent:
    attenuation: complex
    base_distance: float
    displacement: Tuple[Displacement, ...] = ()

    def __post_init__(self):
        if not abs(self.attenuation) > 0:
            raise ValueError("path attenuation must be non-zero")
        if not (math.isfinite(self.attenuation.real) and math.isfinite(self.attenuation.imag)
                and math.isfinite(self.base_distance)):
            raise ValueError("non-finite path parameters")

    def distance(self, t: np.ndarray, chest_envelope: Optional[np.ndarray] = None) -> np.ndarray:
        d = np.full(t.shape, float(self.base_distance))
        for term in self.displacement:
            move = term(t)
            if chest_envelope is not None and isinstance(term, Sinusoid):
                move = move * chest_envelope
            d = d + move
        return d


@dataclass
class ScenarioSpec:
    P: int = 4
    S: int = 114
    carrier: float = DEFAULT_CARRIER
    subcarrier_spacing: float = DEFAULT_SPACING
    static_paths: List[List[PathComponent]] = field(default_factory=list)
    chest_paths: List[List[PathComponent]] = field(default_factory=list)
    limb_paths: List[List[PathComponent]] = field(default_factory=list)
    apnea: List[ApneaEvent] = field(default_factory=list)
    noise_std: float = 0.0
    schedule: List[LabelInterval] = field(default_factory=list)
    single_wavelength: bool = False

    def __post_init__(self):
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise ValueError("noise_std must be finite and >= 0")
        for name in ("carrier", "subcarrier_spacing"):
            if not math.isfinite(getattr(self, name)) or getattr(self, name) <= 0:
                raise ValueError(f"{name} must be finite and positive")

    def pair_paths(self, p: int) -> List[Tuple[str, PathComponent]]:
        out = []
        for role, groups in (("static", self.static_paths), ("chest", self.chest_paths), ("limb", self.limb_paths)):
            if p < len(groups):
                out.extend((role, path) for path in groups[p])
        return out

    def wavelengths(self) -> np.ndarray:
        if self.single_wavelength:
            return np.full(self.S, SPEED_OF_LIGHT / self.carrier)
        offsets = self.subcarrier_spacing * (np.arange(self.S) - self.S / 2)
        return SPEED_OF_LIGHT / (self.carrier + offsets)

    def max_displacement_freq(self) -> float:
        freqs = [term.max_freq for p in range(self.P) for _, path in self.pair_paths(p) for term in path.displacement]
        return max(freqs, default=0.0)


# ---------------------------------------------------------------------------
# rendering


def render_uniform(spec: ScenarioSpec, duration: float, rate: float, seed=None) -> UniformCsi:
    """Render ``spec`` on the grid ``k / rate`` for ``0 <= k / rate < duration``."""
    if not (duration > 0 and math.isfinite(duration)):
        raise ValueError("duration must be positive and finite")
    if rate < 2 * spec.max_displacement_freq():
        raise ValueError(f"rate {rate} Hz is below twice the fastest displacement ({spec.max_displacement_freq():.3f} Hz)")
    n = int(math.floor(duration * rate + 1e-9))
    t = np.arange(n) / rate
    lam = spec.wavelengths()
    envelope = np.ones_like(t)
    for ev in spec.apnea:
        envelope = np.minimum(envelope, ev.envelope(t))
    h = np.zeros((n, spec.P, spec.S), dtype=np.complex128)
    for p in range(spec.P):
        paths = spec.pair_paths(p)
        if not paths:
            raise ValueError(f"antenna pair {p} has no propagation paths")
        for role, path in paths:
            if not path.displacement:
                h[:, p, :] += path.attenuation * np.exp(-2j * np.pi * path.base_distance / lam)
                continue
            d = path.distance(t, envelope if role == "chest" else None)
            h[:, p, :] += path.attenuation * np.exp(-2j * np.pi * d[:, None] / lam[None, :])
    if spec.noise_std > 0:
        rng = np.random.default_rng(seed)
        # noise_std is the std of the complex sample, split evenly over I and Q
        scale = spec.noise_std / math.sqrt(2.0)
        h += scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return UniformCsi(0.0, float(rate), h)


def render_csi(spec: ScenarioSpec, duration: float, rate: float, seed=None) -> Tuple[SessionMeta, List[CsiRecord]]:
    csi = render_uniform(spec, duration, rate, seed)
    return SessionMeta(spec.P, spec.S, float(rate), list(spec.schedule)), records_from_uniform(csi)


# ---------------------------------------------------------------------------
# class activation plans


@dataclass
class ActivationPlan:
    class_id: int
    apnea: List[ApneaEvent] = field(default_factory=list)
    bursts: List[Burst] = field(default_factory=list)
    label_track: List[LabelInterval] = field(default_factory=list)


def make_class_schedule(class_id: int, duration: float, rng: Optional[np.random.Generator] = None) -> ActivationPlan:
    """Decide which displacement terms are active for a ``duration``-second recording."""
    if class_id not in (0, 1, 2):
        raise ValueError(f"invalid class id {class_id}")
    rng = rng if rng is not None else np.random.default_rng()
    plan = ActivationPlan(class_id, label_track=[LabelInterval(0.0, float(duration), class_id)])
    if class_id == 1:
        ramp = 1.0
        longest = min(16.0, duration - 2 * ramp)
        if longest < 10.0:
            raise ValueError("apnea needs at least 12 s of recording")
        flat = rng.uniform(10.0, longest)
        start = rng.uniform(ramp, duration - ramp - flat)
        plan.apnea.append(ApneaEvent(start, start + flat, depth=rng.uniform(0.0, 0.1), ramp=ramp))
    elif class_id == 2:
        count = int(rng.integers(1, 4))
        for _ in range(100):
            lengths = rng.uniform(0.5, 2.0, size=count)
            onsets = np.sort(rng.uniform(0.5, duration - 0.5 - lengths.max(), size=count))
            if np.all(np.diff(onsets) > lengths[:-1] + 0.5):
                break
        else:
            count, lengths, onsets = 1, lengths[:1], onsets[:1]
        for onset, length in zip(onsets, lengths[:count]):
            plan.bursts.append(Burst(float(onset), float(length), rng.uniform(0.02, 0.05), rng.uniform(1.0, 2.0)))
    return plan


# ---------------------------------------------------------------------------
# scenario geometry


def _random_path(rng, mag_lo, mag_hi, dist_lo, dist_hi, displacement=(), gain=1.0) -> PathComponent:
    mag = gain * rng.uniform(mag_lo, mag_hi)
    return PathComponent(complex(mag * np.exp(1j * rng.uniform(0, 2 * np.pi))), float(rng.uniform(dist_lo, dist_hi)),
                         tuple(displacement))


def random_scenario(
    plan: ActivationPlan,
    rng: np.random.Generator,
    P: int = 4,
    S: int = 114,
    noise_std: float = 0.02,
    modest_prob: float = 0.25,
    breathing: Optional[Sinusoid] = None,
    carrier: float = DEFAULT_CARRIER,
) -> ScenarioSpec:
    """Draw per-pair geometry for one recording and attach the activation plan."""
    if breathing is None:
        breathing = Sinusoid(rng.uniform(0.004, 0.010), rng.uniform(0.2, 0.4), rng.uniform(0, 2 * np.pi))
    modest = rng.uniform(size=P) < modest_prob
    if modest.all():
        modest[rng.integers(P)] = False
    gains = np.where(modest, rng.uniform(0.1, 0.3, size=P), rng.uniform(0.6, 1.0, size=P))
    static, chest, limb = [], [], []
    for p in range(P):
        static.append([_random_path(rng, 0.3, 1.0, 2.0, 10.0) for _ in range(3)])
        chest.append([_random_path(rng, 0.1, 0.25, 2.0, 6.0, (breathing,), gain=gains[p])])
        limb.append([_random_path(rng, 0.05, 0.25, 1.5, 5.0, tuple(plan.bursts))])
    return ScenarioSpec(P=P, S=S, carrier=carrier, static_paths=static, chest_paths=chest, limb_paths=limb,
                        apnea=list(plan.apnea), noise_std=noise_std, schedule=list(plan.label_track))


def scale_chest(spec: ScenarioSpec, pair: int, factor: float) -> ScenarioSpec:
    """Copy of ``spec`` with one pair's chest-path attenuation multiplied by ``factor``."""
    chest = [list(paths) for paths in spec.chest_paths]
    chest[pair] = [replace(path, attenuation=path.attenuation * factor) for path in chest[pair]]
    return replace(spec, chest_paths=chest)


@dataclass
class LabeledSession:
    meta: SessionMeta
    csi: UniformCsi
    spec: ScenarioSpec
    plan: ActivationPlan

    @property
    def label(self) -> int:
        return self.plan.class_id


def gen_session(class_id: int, seed, duration: float = 20.0, rate: float = 10.0, P: int = 4, S: int = 114,
                noise_std: float = 0.02, weak_pair: Optional[int] = None, weak_factor: float = 0.1,
                carrier: float = DEFAULT_CARRIER) -> LabeledSession:
    rng = np.random.default_rng(seed)
    plan = make_class_schedule(class_id, duration, rng)
    spec = random_scenario(plan, rng, P=P, S=S, noise_std=noise_std, carrier=carrier)
    if weak_pair is not None:
        spec = scale_chest(spec, weak_pair, weak_factor)
    csi = render_uniform(spec, duration, rate, seed=rng)
    meta = SessionMeta(P, S, float(rate), list(plan.label_track))
    return LabeledSession(meta, csi, spec, plan)


def gen_dataset(
    counts: Union[Sequence[int], Dict[int, int]],
    seed: int,
    duration: float = 20.0,
    rate: float = 10.0,
    P: int = 4,
    S: int = 114,
    noise_std: float = 0.02,
    carrier: float = DEFAULT_CARRIER,
    weak_pair: Optional[int] = None,
    weak_factor: float = 0.1,
) -> List[LabeledSession]:
    """``counts[c]`` single-class recordings per class, fully determined by ``seed``."""
    if isinstance(counts, dict):
        counts = [counts.get(c, 0) for c in range(3)]
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError("need a count >= 1 for each of the three classes")
    children = np.random.SeedSequence(seed).spawn(sum(counts))
    sessions, k = [], 0
    for class_id, n in enumerate(counts):
        for _ in range(n):
            sessions.append(gen_session(class_id, children[k], duration, rate, P, S, noise_std, weak_pair,
                                        weak_factor, carrier))
            k += 1
    return sessions


# ---------------------------------------------------------------------------
# scenario config files (JSON)


def _encode(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, (Sinusoid, Burst)):
        return {"kind": type(obj).__name__.lower(), **asdict(obj)}
    raise TypeError(type(obj))


def scenario_to_json(spec: ScenarioSpec) -> str:
    def path_dict(path: PathComponent):
        return {"attenuation": [path.attenuation.real, path.attenuation.imag], "base_distance": path.base_distance,
                "displacement": [_encode(d) for d in path.displacement]}

    doc = {
        "P": spec.P, "S": spec.S, "carrier": spec.carrier, "subcarrier_spacing": spec.subcarrier_spacing,
        "noise_std": spec.noise_std, "single_wavelength": spec.single_wavelength,
        "static_paths": [[path_dict(x) for x in ps] for ps in spec.static_paths],
        "chest_paths": [[path_dict(x) for x in ps] for ps in spec.chest_paths],
        "limb_paths": [[path_dict(x) for x in ps] for ps in spec.limb_paths],
        "apnea": [asdict(ev) for ev in spec.apnea],
        "schedule": [[iv.start, iv.end, iv.class_id] for iv in spec.schedule],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def scenario_from_json(text: str) -> ScenarioSpec:
    doc = json.loads(text)

    def term(d):
        kind = d.pop("kind")
        return {"sinusoid": Sinusoid, "burst": Burst}[kind](**d)

    def path(d):
        return PathComponent(complex(*d["attenuation"]), d["base_distance"], tuple(term(dict(x)) for x in d["displacement"]))

    return ScenarioSpec(
        P=doc["P"], S=doc["S"], carrier=doc["carrier"], subcarrier_spacing=doc["subcarrier_spacing"],
        noise_std=doc["noise_std"], single_wavelength=doc.get("single_wavelength", False),
        static_paths=[[path(x) for x in ps] for ps in doc["static_paths"]],
        chest_paths=[[path(x) for x in ps] for ps in doc["chest_paths"]],
        limb_paths=[[path(x) for x in ps] for ps in doc["limb_paths"]],
        apnea=[ApneaEvent(**ev) for ev in doc["apnea"]],
        schedule=[LabelInterval(s, e, c) for s, e, c in doc["schedule"]],
    )
