"""Synthetic PCAP-like corpora with a planted failure motif.

Successful captures are background bytes only; failed captures additionally
carry one or more copies of a short byte motif.  Motif copies are placed at
stride-aligned columns (plus jitter) of random image rows, inside the part of
the file that survives image truncation.  A drift schedule mutates the
profile from a given day onward.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .byte_image import RawCapture
from .model_zoo import DESK, ArchitectureSpec, build_pcapvision

DEFAULT_MOTIF = bytes.fromhex("f0e1d2c3b4a59687f8e9dacbbcad9e8f")
PCAP_GLOBAL_HEADER = bytes.fromhex("d4c3b2a1020004000000000000000000ffff000001000000")


@dataclass(frozen=True)
class MotifSubstitution:
    index: int
    value: int


@dataclass(frozen=True)
class SizeShift:
    delta_mean: float


@dataclass(frozen=True)
class BackgroundShift:
    low: int
    high: int


Mutation = Union[MotifSubstitution, SizeShift, BackgroundShift]
_MUTATIONS = {cls.__name__: cls for cls in (MotifSubstitution, SizeShift, BackgroundShift)}


@dataclass(frozen=True)
class CorpusProfile:
    seed: int = 0
    size_mean: float = 1_030_000
    size_std: float = 700_000
    size_min: int = 1024
    size_max: int = 2_560_000
    motif: bytes = DEFAULT_MOTIF
    motif_count_range: tuple[int, int] = (1, 4)
    background_low: int = 0
    background_high: int = 255
    header_block: bytes | None = None
    header_period: int = 0
    image_width: int = 1600
    image_height: int = 1600
    align: int = 8
    jitter: int = 8
    drift_schedule: tuple = ()

    def __post_init__(self):
        if len(self.motif) < 4:
            raise ValueError("motif must be at least 4 bytes")
        lo, hi = self.motif_count_range
        if not 1 <= lo <= hi:
            raise ValueError("motif_count_range must satisfy 1 <= low <= high")
        if not 0 <= self.background_low <= self.background_high <= 255:
            raise ValueError("background range must lie in [0, 255]")
        if self.size_min < len(self.motif) or self.size_max < self.size_min:
            raise ValueError("bad size bounds")
        object.__setattr__(self, "drift_schedule", tuple((int(d), m) for d, m in self.drift_schedule))
        object.__setattr__(self, "motif_count_range", tuple(self.motif_count_range))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["motif"] = self.motif.hex()
        d["header_block"] = self.header_block.hex() if self.header_block else None
        d["motif_count_range"] = list(self.motif_count_range)
        d["drift_schedule"] = [
            {"day": day, "type": type(m).__name__, **dataclasses.asdict(m)} for day, m in self.drift_schedule
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusProfile":
        d = dict(d)
        if "motif" in d:
            d["motif"] = bytes.fromhex(d["motif"])
        if d.get("header_block"):
            d["header_block"] = bytes.fromhex(d["header_block"])
        if "motif_count_range" in d:
            d["motif_count_range"] = tuple(d["motif_count_range"])
        sched = []
        for item in d.get("drift_schedule", ()):
            item = dict(item)
            day = item.pop("day")
            kind = item.pop("type")
            sched.append((day, _MUTATIONS[kind](**item)))
        d["drift_schedule"] = tuple(sched)
        return cls(**d)


def _apply(profile: CorpusProfile, m: Mutation) -> CorpusProfile:
    if isinstance(m, MotifSubstitution):
        motif = bytearray(profile.motif)
        motif[m.index] = m.value & 0xFF
        return dataclasses.replace(profile, motif=bytes(motif))
    if isinstance(m, SizeShift):
        return dataclasses.replace(profile, size_mean=profile.size_mean + m.delta_mean)
    if isinstance(m, BackgroundShift):
        return dataclasses.replace(profile, background_low=m.low, background_high=m.high)
    raise TypeError(f"unknown mutation {m!r}")


def drift(profile: CorpusProfile, day: int) -> CorpusProfile:
    """Profile as seen on ``day``: every scheduled mutation with trigger day <= day, in day order.

    The schedule itself is kept, so always call this on the base profile.
    """
    if day < 0:
        raise ValueError("day must be >= 0")
    out = profile
    for when, m in sorted(profile.drift_schedule, key=lambda dm: dm[0]):
        if when <= day:
            out = _apply(out, m)
    return out


def motif_family(profile: CorpusProfile) -> list[bytes]:
    """Every motif variant the schedule can produce (base motif first)."""
    days = sorted({d for d, _ in profile.drift_schedule})
    family = [profile.motif]
    for d in days:
        m = drift(profile, d).motif
        if m not in family:
            family.append(m)
    return family


def count_occurrences(data: bytes, motif: bytes) -> int:
    n, start = 0, 0
    while True:
        k = data.find(motif, start)
        if k < 0:
            return n
        n += 1
        start = k + 1


def sample_sizes(profile: CorpusProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    """Normal(size_mean, size_std) truncated to [size_min, size_max] by rejection."""
    out = np.empty(n, dtype=np.int64)
    filled = 0
    for _ in range(1000):
        if filled == n:
            break
        draw = rng.normal(profile.size_mean, profile.size_std, size=2 * (n - filled) + 8)
        draw = draw[(draw >= profile.size_min) & (draw <= profile.size_max)]
        take = min(len(draw), n - filled)
        out[filled : filled + take] = np.round(draw[:take])
        filled += take
    if filled < n:
        out[filled:] = np.clip(np.round(profile.size_mean), profile.size_min, profile.size_max)
    return out


def _background(profile: CorpusProfile, size: int, rng: np.random.Generator) -> bytearray:
    if profile.background_low == 0 and profile.background_high == 255:
        buf = bytearray(rng.bytes(size))
    else:
        buf = bytearray(rng.integers(profile.background_low, profile.background_high + 1, size, dtype=np.uint8).tobytes())
    if profile.header_block:
        hb = profile.header_block
        buf[: len(hb)] = hb[:size]
        if profile.header_period > 0:
            for off in range(profile.header_period, size - len(hb) + 1, profile.header_period):
                buf[off : off + len(hb)] = hb
    return buf


def _plant(buf: bytearray, profile: CorpusProfile, motif: bytes, rng: np.random.Generator) -> None:
    w = profile.image_width
    limit = min(len(buf), w * profile.image_height) - len(motif)
    lo, hi = profile.motif_count_range
    count = int(rng.integers(lo, hi + 1))
    rows = max(1, limit // w + 1)
    for _ in range(count):
        for _attempt in range(64):
            row = int(rng.integers(0, rows))
            slots = max(1, (w - len(motif)) // max(1, profile.align) + 1)
            col = int(rng.integers(0, slots)) * profile.align
            if profile.jitter > 0:
                col += int(rng.integers(0, profile.jitter))
            col = min(col, max(0, w - len(motif)))
            off = row * w + col
            if 0 <= off <= limit:
                break
        else:
            off = int(rng.integers(0, limit + 1))
        buf[off : off + len(motif)] = motif


def generate(profile: CorpusProfile, n_success: int, n_fail: int, day: int = 0, stream: int = 0) -> list[tuple[RawCapture, int]]:
    """Deterministic corpus for ``(profile.seed, day, stream)``: successes first, then failures.

    ``stream`` separates independent corpora drawn for the same day (e.g. a
    train and a test split).
    """
    if n_success < 0 or n_fail < 0:
        raise ValueError("counts must be >= 0")
    p = drift(profile, day)
    family = motif_family(profile)
    out = []
    for idx in range(n_success + n_fail):
        failed = idx >= n_success
        rng = np.random.default_rng([profile.seed, day, stream, idx])
        for _retry in range(16):
            size = int(sample_sizes(p, 1, rng)[0])
            buf = _background(p, size, rng)
            if failed:
                _plant(buf, p, p.motif, rng)
                ok = count_occurrences(bytes(buf), p.motif) >= 1
            else:
                ok = not any(m in buf for m in family)
            if ok:
                break
        else:
            raise RuntimeError(f"could not generate a valid {'failed' if failed else 'successful'} capture")
        name = f"synth/d{day:03d}/s{stream}/{'fail' if failed else 'ok'}{idx:05d}.pcap"
        out.append((RawCapture(bytes(buf), name), int(failed)))
    return out


class MotifLabeler:
    """Stand-in for the external call-flow analyzer: failed iff any family motif occurs."""

    def __init__(self, motifs: Sequence[bytes]):
        self.motifs = [bytes(m) for m in motifs]

    @classmethod
    def for_profile(cls, profile: CorpusProfile) -> "MotifLabeler":
        return cls(motif_family(profile))

    def label(self, capture: RawCapture) -> int:
        data = capture.bytes if isinstance(capture, RawCapture) else bytes(capture)
        return int(any(m in data for m in self.motifs))


def scaled_profile(seed: int = 0) -> tuple[CorpusProfile, ArchitectureSpec]:
    """Desk-scale corpus + network: 256x256 images, files <= 64 KiB.

    The background is low-entropy (bytes 0-31, like header-heavy captures) and
    failed files repeat the motif many times, which keeps the planted signal
    learnable by the reduced network from a 200-file training set.
    """
    profile = CorpusProfile(
        seed=seed,
        size_mean=40_000,
        size_std=16_000,
        size_min=1024,
        size_max=65_536,
        motif_count_range=(24, 48),
        background_high=31,
        image_width=DESK.input_size,
        image_height=DESK.input_size,
        align=DESK.stride,
        jitter=DESK.stride,
    )
    return profile, build_pcapvision(DESK)


def write_corpus(items, directory: str | Path, split: str, day: int = 0, manifest=None) -> list[dict]:
    """Write captures under ``directory`` and return (and optionally append) manifest records."""
    root = Path(directory)
    records = []
    for capture, label in items:
        rel = Path(capture.source_path.replace("synth/", "", 1))
        path = root / split / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(capture.bytes)
        records.append({"path": str(path), "label": int(label), "day": int(day), "split": split})
    if manifest is not None:
        with open(manifest, "a") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return records


@dataclass(frozen=True)
class Scenario:
    """Scripted daily intake: per-day capture counts drawn from ``daily_range``."""

    profile: CorpusProfile
    spec: ArchitectureSpec
    days: int = 30
    daily_range: tuple[int, int] = (30, 60)
    failure_rate: float = 0.4
    initial_train: int = 200
    initial_val: int = 50

    def daily_count(self, day: int) -> int:
        lo, hi = self.daily_range
        return int(np.random.default_rng([self.profile.seed, day, 7]).integers(lo, hi + 1))

    def captures_for(self, day: int) -> list[RawCapture]:
        rng = np.random.default_rng([self.profile.seed, day, 8])
        n = self.daily_count(day)
        n_fail = int(rng.binomial(n, self.failure_rate))
        items = generate(self.profile, n - n_fail, n_fail, day=day, stream=1)
        return [items[i][0] for i in rng.permutation(len(items))]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "spec": self.spec.to_dict(),
            "days": self.days,
            "daily_range": list(self.daily_range),
            "failure_rate": self.failure_rate,
            "initial_train": self.initial_train,
            "initial_val": self.initial_val,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["profile"] = CorpusProfile.from_dict(d["profile"])
        d["spec"] = ArchitectureSpec.from_dict(d["spec"]) if "spec" in d else build_pcapvision(DESK)
        if "daily_range" in d:
            d["daily_range"] = tuple(d["daily_range"])
        return cls(**d)


def default_scenario(seed: int = 0, days: int = 30, drift_day: int | None = 10) -> Scenario:
    """Desk-scale month with a noisier background from ``drift_day`` on (None: stationary)."""
    profile, spec = scaled_profile(seed)
    if drift_day is not None:
        profile = dataclasses.replace(profile, drift_schedule=((drift_day, BackgroundShift(0, 63)),))
    return Scenario(profile, spec, days=days)
