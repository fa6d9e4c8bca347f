"""Synthetic moving-object sequences with exact analytic optical flow.

Scenes are axis-aligned squares on a noisy background.  Moving squares
translate at a constant integer pixel velocity; static squares are drawn
from the same size/intensity distributions, so a single frame carries no
information about which squares move.  Flow is computed from the known
velocities, nonzero only on moving-object pixels.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .setmatch import Box, CLS_MOVING

MAGIC = b"STDS1"
FORMAT_VERSION = 1


class ObjectsDontFit(ValueError):
    pass


class BadMode(ValueError):
    pass


class BadMagic(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


INPUT_CHANNELS = {"rgb": 3, "rgb_rgb": 6, "rgb_of": 5}


@dataclass
class DatasetSpec:
    num_sequences: int = 200
    T: int = 2
    img_size: int = 64
    moving_range: tuple = (1, 3)
    static_range: tuple = (1, 3)
    velocity_range: tuple = (1, 3)  # px/step, max-norm of (vx, vy)
    size_range: tuple = (8, 16)  # px
    noise_amp: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("moving_range", "static_range", "velocity_range", "size_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} empty: {lo} > {hi}")
        if self.velocity_range[0] < 1:
            raise ValueError("moving objects need velocity magnitude >= 1 px/step")
        if self.T < 1 or self.img_size < 8:
            raise ValueError("bad T or image size")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    flow: np.ndarray  # (T, 2, H, W) float32, step 0 all zeros
    gt_per_step: list  # per step: list of (class, Box)
    seed: int  # sequence index within the dataset

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    spec: DatasetSpec
    sequences: list


def _sample_velocity(rng, vmin: int, vmax: int):
    while True:
        vx = int(rng.integers(-vmax, vmax + 1))
        vy = int(rng.integers(-vmax, vmax + 1))
        if vmin <= max(abs(vx), abs(vy)) <= vmax:
            return vx, vy


def generate_sequence(spec: DatasetSpec, index: int) -> FrameSequence:
    """Deterministic function of (spec.seed, index)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    t_steps, n = spec.T, spec.img_size

    n_moving = int(rng.integers(spec.moving_range[0], spec.moving_range[1] + 1))
    n_static = int(rng.integers(spec.static_range[0], spec.static_range[1] + 1))

    objects = []  # (x0, y0, size, color, vx, vy, moving)
    swept = []  # conservative swept rectangles for overlap rejection
    for k in range(n_moving + n_static):
        moving = k < n_moving
        placed = False
        for _ in range(300):
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            color = rng.uniform(0.3, 1.0, size=3)
            if moving:
                vx, vy = _sample_velocity(rng, *spec.velocity_range)
            else:
                vx, vy = 0, 0
            # start positions that keep every step inside the image
            x_lo = max(0, -vx * (t_steps - 1))
            x_hi = min(n - size, n - size - vx * (t_steps - 1))
            y_lo = max(0, -vy * (t_steps - 1))
            y_hi = min(n - size, n - size - vy * (t_steps - 1))
            if x_lo > x_hi or y_lo > y_hi:
                continue
            x0 = int(rng.integers(x_lo, x_hi + 1))
            y0 = int(rng.integers(y_lo, y_hi + 1))
            rect = (
                min(x0, x0 + vx * (t_steps - 1)),
                min(y0, y0 + vy * (t_steps - 1)),
                max(x0, x0 + vx * (t_steps - 1)) + size,
                max(y0, y0 + vy * (t_steps - 1)) + size,
            )
            if any(
                rect[0] < r[2] and r[0] < rect[2] and rect[1] < r[3] and r[1] < rect[3]
                for r in swept
            ):
                continue
            objects.append((x0, y0, size, color, vx, vy, moving))
            swept.append(rect)
            placed = True
            break
        if not placed:
            raise ObjectsDontFit(
                f"could not place object {k} ({n_moving} moving, {n_static} static)"
            )

    frames = rng.uniform(0.0, spec.noise_amp, size=(t_steps, 3, n, n))
    flow = np.zeros((t_steps, 2, n, n))
    gt_per_step = [[] for _ in range(t_steps)]
    for x0, y0, size, color, vx, vy, moving in objects:
        for t in range(t_steps):
            x = x0 + vx * t
            y = y0 + vy * t
            frames[t, :, y : y + size, x : x + size] = color[:, None, None]
            if moving:
                if t >= 1:
                    flow[t, 0, y : y + size, x : x + size] = vx / n
                    flow[t, 1, y : y + size, x : x + size] = vy / n
                gt_per_step[t].append(
                    (
                        CLS_MOVING,
                        Box((x + size / 2) / n, (y + size / 2) / n, size / n, size / n),
                    )
                )

    return FrameSequence(
        frames=np.clip(frames, 0.0, 1.0).astype(np.float32),
        flow=flow.astype(np.float32),
        gt_per_step=gt_per_step,
        seed=index,
    )


def generate_dataset(spec: DatasetSpec) -> Dataset:
    return Dataset(spec, [generate_sequence(spec, i) for i in range(spec.num_sequences)])


def render_input(seq: FrameSequence, mode: str, t: int) -> np.ndarray:
    """Model input for step t as a float64 (C, H, W) array."""
    if mode not in INPUT_CHANNELS:
        raise BadMode(f"unknown input mode {mode!r}")
    if not (0 <= t < seq.T):
        raise ValueError(f"step {t} out of range for T={seq.T}")
    frame = seq.frames[t].astype(np.float64)
    if mode == "rgb":
        return frame
    if mode == "rgb_rgb":
        prev = seq.frames[max(t - 1, 0)].astype(np.float64)
        return np.concatenate([frame, prev], axis=0)
    return np.concatenate([frame, seq.flow[t].astype(np.float64)], axis=0)


# -- on-disk format ------------------------------------------------------------
#
# magic "STDS1" | u32 header length | UTF-8 JSON header | f32-LE blobs
# (frames then flow, per sequence, in header order)


def _spec_to_dict(spec: DatasetSpec) -> dict:
    d = asdict(spec)
    for k in ("moving_range", "static_range", "velocity_range", "size_range"):
        d[k] = list(d[k])
    return d


def _spec_from_dict(d: dict) -> DatasetSpec:
    kw = dict(d)
    for k in ("moving_range", "static_range", "velocity_range", "size_range"):
        kw[k] = tuple(kw[k])
    return DatasetSpec(**kw)


def write_dataset(ds: Dataset, path: str) -> None:
    seq_entries = []
    offset = 0
    for seq in ds.sequences:
        fr_bytes = seq.frames.astype("<f4").nbytes
        fl_bytes = seq.flow.astype("<f4").nbytes
        seq_entries.append(
            {
                "seed": seq.seed,
                "frames_shape": list(seq.frames.shape),
                "flow_shape": list(seq.flow.shape),
                "offset": offset,
                "gt": [
                    [[cls, b.cx, b.cy, b.w, b.h] for cls, b in step]
                    for step in seq.gt_per_step
                ],
            }
        )
        offset += fr_bytes + fl_bytes
    header = json.dumps(
        {
            "version": FORMAT_VERSION,
            "spec": _spec_to_dict(ds.spec),
            "sequences": seq_entries,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for seq in ds.sequences:
            f.write(seq.frames.astype("<f4").tobytes())
            f.write(seq.flow.astype("<f4").tobytes())


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != MAGIC:
        raise BadMagic(f"bad magic {blob[:5]!r}")
    if len(blob) < 9:
        raise TruncatedFile("file shorter than header prefix")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise TruncatedFile("header truncated")
    header = json.loads(blob[9 : 9 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"dataset version {header.get('version')}")
    spec = _spec_from_dict(header["spec"])
    base = 9 + hlen
    sequences = []
    for entry in header["sequences"]:
        fshape = tuple(entry["frames_shape"])
        lshape = tuple(entry["flow_shape"])
        fbytes = int(np.prod(fshape)) * 4
        lbytes = int(np.prod(lshape)) * 4
        off = base + entry["offset"]
        if off + fbytes + lbytes > len(blob):
            raise TruncatedFile("payload truncated")
        frames = np.frombuffer(blob, dtype="<f4", count=int(np.prod(fshape)), offset=off)
        flow = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(lshape)), offset=off + fbytes
        )
        gt = [
            [(int(cls), Box(cx, cy, w, h)) for cls, cx, cy, w, h in step]
            for step in entry["gt"]
        ]
        sequences.append(
            FrameSequence(
                frames=frames.reshape(fshape).copy(),
                flow=flow.reshape(lshape).copy(),
                gt_per_step=gt,
                seed=int(entry["seed"]),
            )
        )
    return Dataset(spec, sequences)
