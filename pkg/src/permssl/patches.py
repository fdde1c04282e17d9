"""Synthetic harmonic notes, patch slicing and the binary dataset format.

Spectrograms are ``(F, T)`` float32 arrays: rows are frequency bins from low
to high, columns are time frames.  Patches are numbered frequency-major,
``k = row * n_x + col``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .permcore import apply_permutation, check_permutation, identity

N_FAMILIES = 8
N_INSTRUMENTS = 64
PITCH_MIN, PITCH_MAX = 24.0, 84.0
GENERATOR_VERSION = 1

MAGIC = b"PERMSSL1"
_HEADER = struct.Struct("<III")
_RECORD_HEAD = struct.Struct("<fHH")

# Per-family timbre.  Frames are given for T=64 and scaled with T.  The
# envelope differs only mildly across families and the instrument jitter
# swamps it, so family identity lives mostly in the harmonic structure.
FAMILY_ALPHA = (0.3, 0.5, 0.7, 0.9, 0.3, 0.5, 0.7, 0.9)
FAMILY_EVEN_SUPPRESSED = (False, False, False, False, True, True, True, True)
FAMILY_ATTACK = (3.0, 4.0, 5.0, 6.0, 3.5, 4.5, 5.5, 6.5)
FAMILY_DECAY = (20.0, 22.0, 24.0, 26.0, 21.0, 23.0, 25.0, 27.0)
INSTRUMENT_JITTER = 0.4  # relative spread of the instrument's time constants
NOISE_STD = 0.01
HARMONIC_GAIN = 10.0  # amplitude of the fundamental before compression
_INSTRUMENT_SALT = 0x1A57


class FormatError(ValueError):
    """Malformed dataset or checkpoint file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset
        self.path = path


@dataclass
class NoteRecord:
    spectrogram: np.ndarray
    pitch: float
    family: int
    instrument_id: int

    def __eq__(self, other):
        if not isinstance(other, NoteRecord):
            return NotImplemented
        return (
            self.pitch == other.pitch
            and self.family == other.family
            and self.instrument_id == other.instrument_id
            and self.spectrogram.dtype == other.spectrogram.dtype
            and np.array_equal(self.spectrogram, other.spectrogram)
        )


@dataclass(frozen=True)
class SliceSpec:
    n_x: int  # time columns
    n_y: int  # frequency rows

    @property
    def n(self) -> int:
        return self.n_x * self.n_y

    def validate(self, F: int, T: int) -> None:
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError(f"n_x and n_y must be positive, got {self}")
        if self.n < 2:
            raise ValueError(f"need at least 2 patches, got n_x*n_y={self.n}")
        if self.n_x > T or self.n_y > F:
            raise ValueError(f"{self} does not fit a {F}x{T} spectrogram")

    def patch_shape(self, F: int, T: int) -> tuple[int, int]:
        return F // self.n_y, T // self.n_x

    def patch_dim(self, F: int, T: int) -> int:
        h, w = self.patch_shape(F, T)
        return h * w


@dataclass
class PatchSet:
    patches: np.ndarray  # (n, d)
    spec: SliceSpec
    label: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.label is None:
            self.label = identity(self.patches.shape[0])


def _check_note_args(pitch, family, instrument_id):
    if not PITCH_MIN <= pitch <= PITCH_MAX:
        raise ValueError(f"pitch {pitch} outside [{PITCH_MIN}, {PITCH_MAX}]")
    if not 0 <= family < N_FAMILIES:
        raise ValueError(f"family {family} outside [0, {N_FAMILIES})")
    if not 0 <= instrument_id < N_INSTRUMENTS:
        raise ValueError(f"instrument_id {instrument_id} outside [0, {N_INSTRUMENTS})")


def fundamental_bin(pitch: float, F: int) -> int:
    return 1 + int(round((pitch - PITCH_MIN) / (PITCH_MAX - PITCH_MIN) * (F / 2 - 2)))


def synth_note(pitch: float, family: int, instrument_id: int, seed, F: int = 64, T: int = 64) -> NoteRecord:
    """Log-compressed harmonic note spectrogram.

    Harmonic ``k`` sits at bin ``k * f0`` with amplitude ``alpha**(k-1)``
    (even harmonics scaled by 0.1 for half the families), smeared by a
    Gaussian of one bin.  The envelope is a linear attack followed by an
    exponential decay; the instrument id jitters both time constants.
    A half-normal noise floor keeps the magnitudes nonnegative before
    ``ln(1 + 10 x)``.
    """
    _check_note_args(pitch, family, instrument_id)
    if F < 8 or T < 2:
        raise ValueError(f"spectrogram too small: F={F}, T={T}")
    f0 = fundamental_bin(pitch, F)
    alpha = FAMILY_ALPHA[family]
    bins = np.arange(F, dtype=np.float64)
    spectrum = np.zeros(F)
    k = 1
    while k * f0 < F:
        amp = alpha ** (k - 1)
        if FAMILY_EVEN_SUPPRESSED[family] and k % 2 == 0:
            amp *= 0.1
        spectrum += amp * np.exp(-0.5 * (bins - k * f0) ** 2)
        k += 1

    jitter = np.random.default_rng([_INSTRUMENT_SALT, instrument_id]).uniform(1 - INSTRUMENT_JITTER, 1 + INSTRUMENT_JITTER, size=2)
    scale = T / 64.0
    attack = max(FAMILY_ATTACK[family] * scale * jitter[0], 1.0)
    decay = FAMILY_DECAY[family] * scale * jitter[1]
    t = np.arange(T, dtype=np.float64)
    envelope = np.where(t < attack, (t + 1) / attack, np.exp(-(t - attack) / decay))
    envelope = np.minimum(envelope, 1.0)

    noise = np.abs(np.random.default_rng(seed).normal(0.0, NOISE_STD, size=(F, T)))
    magnitude = HARMONIC_GAIN * spectrum[:, None] * envelope[None, :] + noise
    spec = np.log1p(10.0 * magnitude).astype(np.float32)
    return NoteRecord(spec, float(pitch), int(family), int(instrument_id))


def slice_batch(spectrograms: np.ndarray, spec: SliceSpec) -> np.ndarray:
    """Slice ``(N, F, T)`` spectrograms into ``(N, n, d)`` patches."""
    N, F, T = spectrograms.shape
    spec.validate(F, T)
    h, w = spec.patch_shape(F, T)
    crop = spectrograms[:, : h * spec.n_y, : w * spec.n_x]
    blocks = crop.reshape(N, spec.n_y, h, spec.n_x, w).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(N, spec.n, h * w)


def slice_patches(s: np.ndarray, spec: SliceSpec) -> PatchSet:
    s = np.asarray(s)
    if s.ndim != 2:
        raise ValueError(f"spectrogram must be 2-d, got shape {s.shape}")
    return PatchSet(slice_batch(s[None], spec)[0], spec)


def unslice_patches(ps: PatchSet, F: int, T: int) -> np.ndarray:
    """Reassemble the cropped spectrogram from patches in slice order."""
    h, w = ps.spec.patch_shape(F, T)
    blocks = ps.patches.reshape(ps.spec.n_y, ps.spec.n_x, h, w).transpose(0, 2, 1, 3)
    return blocks.reshape(ps.spec.n_y * h, ps.spec.n_x * w)


def shuffle_patches(ps: PatchSet, p) -> PatchSet:
    p = check_permutation(p)
    if p.size != ps.patches.shape[0]:
        raise ValueError(f"permutation of {p.size} for {ps.patches.shape[0]} patches")
    return PatchSet(apply_permutation(ps.patches, p), ps.spec, p.copy())


def write_dataset(records: Sequence[NoteRecord], path) -> None:
    path = Path(path)
    if records:
        F, T = records[0].spectrogram.shape
    else:
        F, T = 0, 0
    chunks = [MAGIC, _HEADER.pack(len(records), F, T)]
    for i, rec in enumerate(records):
        if rec.spectrogram.shape != (F, T):
            raise ValueError(f"record {i} has shape {rec.spectrogram.shape}, expected {(F, T)}")
        chunks.append(_RECORD_HEAD.pack(rec.pitch, rec.family, rec.instrument_id))
        chunks.append(np.ascontiguousarray(rec.spectrogram, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def load_dataset(path) -> list[NoteRecord]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic", 0, path)
    off = len(MAGIC)
    if len(buf) < off + _HEADER.size:
        raise FormatError("truncated header", off, path)
    count, F, T = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    rec_size = _RECORD_HEAD.size + 4 * F * T
    records = []
    for i in range(count):
        if len(buf) < off + rec_size:
            raise FormatError(f"truncated record {i}", off, path)
        pitch, family, inst = _RECORD_HEAD.unpack_from(buf, off)
        data = np.frombuffer(buf, dtype="<f4", count=F * T, offset=off + _RECORD_HEAD.size)
        if family >= N_FAMILIES or inst >= N_INSTRUMENTS:
            raise FormatError(f"record {i} class out of range", off, path)
        records.append(NoteRecord(data.astype(np.float32).reshape(F, T), pitch, family, inst))
        off += rec_size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off, path)
    return records


@dataclass
class NoteArrays:
    """Column view of a record list, convenient for batched training."""

    spectrograms: np.ndarray  # (N, F, T) float32
    pitch: np.ndarray
    family: np.ndarray
    instrument_id: np.ndarray

    def __len__(self):
        return self.spectrograms.shape[0]

    @classmethod
    def from_records(cls, records: Sequence[NoteRecord]) -> "NoteArrays":
        if not records:
            raise ValueError("empty dataset")
        return cls(
            np.stack([r.spectrogram for r in records]).astype(np.float32, copy=False),
            np.array([r.pitch for r in records], dtype=np.float64),
            np.array([r.family for r in records], dtype=np.int64),
            np.array([r.instrument_id for r in records], dtype=np.int64),
        )

    def labels(self, task: str) -> np.ndarray:
        try:
            return {"family": self.family, "instrument": self.instrument_id, "pitch": self.pitch}[task]
        except KeyError:
            raise ValueError(f"unknown task {task!r}") from None


_SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}


def generate_split(count: int, split: str, seed: int, F: int = 64, T: int = 64) -> list[NoteRecord]:
    """Family-stratified records; record ``i`` depends only on ``(seed, split, i)``."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    code = _SPLIT_CODES.get(split, sum(split.encode()) + 100)
    order = np.random.default_rng([seed, code]).permutation(count)
    families = np.arange(count) % N_FAMILIES
    families = families[order]
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, code, i])
        pitch = float(np.float32(rng.uniform(PITCH_MIN, PITCH_MAX)))
        inst = int(rng.integers(0, N_INSTRUMENTS))
        noise_seed = int(rng.integers(0, 2**63 - 1))
        records.append(synth_note(pitch, int(families[i]), inst, noise_seed, F, T))
    return records


def make_dataset(out_dir, counts: dict[str, int], seed: int = 0, F: int = 64, T: int = 64, config: dict | None = None) -> Path:
    """Write one dataset file per split plus ``manifest.json``; return the manifest path."""
    for name, c in counts.items():
        if c < 1:
            raise ValueError(f"split {name!r} needs a positive count, got {c}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    splits = {}
    for name, c in counts.items():
        fname = f"{name}.bin"
        try:
            write_dataset(generate_split(c, name, seed, F, T), out_dir / fname)
        except OSError as exc:
            raise OSError(f"cannot write {out_dir / fname}: {exc}") from exc
        splits[name] = {"path": fname, "count": c}
    manifest = {"splits": splits, "F": F, "T": T, "seed": seed, "generator_version": GENERATOR_VERSION}
    if config is not None:
        manifest["config"] = config
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_split(manifest_path, split: str) -> list[NoteRecord]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    try:
        entry = manifest["splits"][split]
    except KeyError:
        raise ValueError(f"{manifest_path}: no split {split!r}") from None
    return load_dataset(manifest_path.parent / entry["path"])
