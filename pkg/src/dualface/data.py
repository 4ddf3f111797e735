"""Data containers, binary file formats, audio frontend, and the synthetic
paired audio/motion dataset generator.

Motion is stored as per-frame vertex displacements from a shared neutral
template. On-disk formats are little-endian with 4-byte magics; see the
save_* functions for the exact layouts.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from dataclasses import dataclass, field
from pathlib import Path

MOTION_MAGIC = b"DTMO"
TEMPLATE_MAGIC = b"DTPL"
FEATURE_MAGIC = b"DTFT"
FORMAT_VERSION = 1

SYNTH_FPS = 25.0
SYNTH_DISPLACEMENT_SCALE = 0.1
SYNTH_LIP_AMPLIFICATION = 3.0

_F4 = np.dtype("<f4")


class FileFormatError(ValueError):
    pass


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


# ---------------------------------------------------------------------------
# containers

@dataclass
class NeutralTemplate:
    """Resting-face vertex positions, shape (V, 3), millimeters."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"template positions must be (V, 3), got {self.positions.shape}")
        if self.positions.shape[0] < 4:
            raise ValueError("template needs at least 4 vertices")
        if not np.isfinite(self.positions).all():
            raise ValueError("template positions must be finite")

    @property
    def vertex_count(self) -> int:
        return self.positions.shape[0]


@dataclass
class MotionSequence:
    """Per-frame vertex displacements from the template, shape (T, V, 3)."""

    displacements: np.ndarray
    fps: float

    def __post_init__(self):
        self.displacements = np.ascontiguousarray(np.asarray(self.displacements, dtype=np.float64))
        if self.displacements.ndim != 3 or self.displacements.shape[2] != 3:
            raise ValueError(f"displacements must be (T, V, 3), got {self.displacements.shape}")
        if self.displacements.shape[0] < 1:
            raise ValueError("motion needs at least one frame")
        if not np.isfinite(self.displacements).all():
            raise ValueError("displacements must be finite")
        self.fps = float(self.fps)
        if not (self.fps > 0 and np.isfinite(self.fps)):
            raise ValueError("fps must be positive and finite")

    @property
    def frames(self) -> int:
        return self.displacements.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.displacements.shape[1]


@dataclass
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples must be finite")
        if self.samples.min() < -1.0 or self.samples.max() > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class FeatureSequence:
    """Frame-aligned feature rows, shape (frames, dim)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"feature values must be (frames, dim), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic paired dataset.

    A smoothed latent path drives both the spectral-band features and the
    vertex displacements of each sequence, so the two modalities share a
    common cause the models can recover.
    """

    n_speakers: int = 8
    n_sequences: int = 40
    frames: int = 60
    vertex_count: int = 120
    bands: int = 32
    latent_dim: int = 8
    smooth_window: int = 9
    noise_scale: float = 0.01
    seed: int = 0

    def validate(self):
        for name in ("n_speakers", "n_sequences", "frames", "vertex_count", "bands", "latent_dim", "smooth_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.smooth_window % 2 != 1:
            raise ValueError("smooth_window must be odd")
        if self.vertex_count < 12:
            raise ValueError("vertex_count must be >= 12 so the region sets are non-empty and disjoint")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


@dataclass
class ManifestEntry:
    speaker: int
    features: str
    motion: str
    split: str


@dataclass
class DatasetManifest:
    template: str
    speakers: int
    entries: list[ManifestEntry]
    lip_indices: list[int]
    upper_indices: list[int]

    def validate(self):
        if self.speakers < 1:
            raise ValueError("manifest needs at least one speaker")
        if not self.entries:
            raise ValueError("manifest has no entries")
        seen = set()
        for e in self.entries:
            if e.split not in ("train", "val", "test"):
                raise ValueError(f"unknown split {e.split!r}")
            if not (0 <= e.speaker < self.speakers):
                raise ValueError(f"speaker id {e.speaker} out of range")
            seen.add(e.speaker)
        lips, upper = set(self.lip_indices), set(self.upper_indices)
        if not lips or not upper:
            raise ValueError("lip and upper-face index sets must be non-empty")
        if lips & upper:
            raise ValueError("lip and upper-face index sets must be disjoint")
        if min(lips | upper) < 0:
            raise ValueError("region indices must be non-negative")

    def to_json(self) -> str:
        payload = {
            "template": self.template,
            "speakers": self.speakers,
            "entries": [
                {"speaker": e.speaker, "features": e.features, "motion": e.motion, "split": e.split}
                for e in self.entries
            ],
            "lip_indices": list(self.lip_indices),
            "upper_indices": list(self.upper_indices),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def save_manifest(path, manifest: DatasetManifest):
    manifest.validate()
    Path(path).write_text(manifest.to_json() + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {"template", "speakers", "entries", "lip_indices", "upper_indices"}
    unknown = set(raw) - known
    if unknown:
        raise FileFormatError(f"manifest has unknown keys: {sorted(unknown)}")
    missing = known - set(raw)
    if missing:
        raise FileFormatError(f"manifest is missing keys: {sorted(missing)}")
    entries = []
    for e in raw["entries"]:
        if set(e) != {"speaker", "features", "motion", "split"}:
            raise FileFormatError(f"malformed manifest entry: {sorted(e)}")
        entries.append(ManifestEntry(int(e["speaker"]), e["features"], e["motion"], e["split"]))
    m = DatasetManifest(
        template=raw["template"],
        speakers=int(raw["speakers"]),
        entries=entries,
        lip_indices=[int(i) for i in raw["lip_indices"]],
        upper_indices=[int(i) for i in raw["upper_indices"]],
    )
    m.validate()
    return m


# ---------------------------------------------------------------------------
# binary formats

def _read_exact(data: bytes, offset: int, n: int, path) -> bytes:
    if offset + n > len(data):
        raise TruncatedFileError(f"{path}: expected {offset + n} bytes, file has {len(data)}")
    return data[offset:offset + n]


def _check_header(data: bytes, magic: bytes, path):
    got = _read_exact(data, 0, 4, path)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")


def _check_payload(data: bytes, header: int, count: int, path):
    expected = header + 4 * count
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise FileFormatError(f"{path}: {len(data) - expected} trailing bytes")


def save_motion(path, motion: MotionSequence):
    """DTMO: magic, u32 version, u32 frames, u32 vertices, f32 fps, then
    frames*vertices*3 little-endian f32 displacements in frame-major order."""
    t, v = motion.frames, motion.vertex_count
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIIf", MOTION_MAGIC, FORMAT_VERSION, t, v, motion.fps))
        f.write(np.ascontiguousarray(motion.displacements, dtype=_F4).tobytes())


def load_motion(path) -> MotionSequence:
    data = Path(path).read_bytes()
    _check_header(data, MOTION_MAGIC, path)
    if len(data) < 20:
        raise TruncatedFileError(f"{path}: header truncated")
    _, _, t, v, fps = struct.unpack_from("<4sIIIf", data, 0)
    _check_payload(data, 20, t * v * 3, path)
    values = np.frombuffer(data, dtype=_F4, count=t * v * 3, offset=20)
    return MotionSequence(values.astype(np.float64).reshape(t, v, 3), float(fps))


def save_template(path, template: NeutralTemplate):
    """DTPL: magic, u32 version, u32 vertices, then vertices*3 f32 positions."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", TEMPLATE_MAGIC, FORMAT_VERSION, template.vertex_count))
        f.write(np.ascontiguousarray(template.positions, dtype=_F4).tobytes())


def load_template(path) -> NeutralTemplate:
    data = Path(path).read_bytes()
    _check_header(data, TEMPLATE_MAGIC, path)
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    _, _, v = struct.unpack_from("<4sII", data, 0)
    _check_payload(data, 12, v * 3, path)
    values = np.frombuffer(data, dtype=_F4, count=v * 3, offset=12)
    return NeutralTemplate(values.astype(np.float64).reshape(v, 3))


def save_features(path, features: FeatureSequence):
    """DTFT: magic, u32 version, u32 frames, u32 dim, then frames*dim f32."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", FEATURE_MAGIC, FORMAT_VERSION, features.frames, features.dim))
        f.write(np.ascontiguousarray(features.values, dtype=_F4).tobytes())


def load_features(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    _check_header(data, FEATURE_MAGIC, path)
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: header truncated")
    _, _, frames, dim = struct.unpack_from("<4sIII", data, 0)
    _check_payload(data, 16, frames * dim, path)
    values = np.frombuffer(data, dtype=_F4, count=frames * dim, offset=16)
    return FeatureSequence(values.astype(np.float64).reshape(frames, dim))


def export_obj(path, template: NeutralTemplate, motion: MotionSequence, frame: int, faces=None):
    """Write one deformed frame as Wavefront OBJ vertices (6 decimals).

    The template carries no connectivity, so faces are written only when the
    caller supplies them explicitly (1-based triples).
    """
    if motion.vertex_count != template.vertex_count:
        raise ValueError(
            f"vertex count mismatch: motion has {motion.vertex_count}, template has {template.vertex_count}"
        )
    if not (0 <= frame < motion.frames):
        raise ValueError(f"frame {frame} out of range for {motion.frames} frames")
    pos = template.positions + motion.displacements[frame]
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in pos]
    if faces is not None:
        lines.extend(f"f {a} {b} {c}" for a, b, c in faces)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# frontend ops

def extract_features(clip: AudioClip, frame_ms: float = 25.0, hop_ms: float = 40.0, bands: int = 64) -> FeatureSequence:
    """Hann-windowed DFT magnitudes pooled into `bands` equal-width bands.

    Frame count is floor((len - frame)/hop) + 1; each pooled band is the mean
    rFFT magnitude of a contiguous bin group, compressed with log1p. The
    default hop of 40 ms lines frames up with 25 fps motion.
    """
    frame_len = int(round(frame_ms * clip.sample_rate / 1000.0))
    hop = int(round(hop_ms * clip.sample_rate / 1000.0))
    if frame_len < 2 or hop < 1:
        raise ValueError("analysis frame must cover >= 2 samples and hop >= 1")
    n = clip.samples.size
    if n < frame_len:
        raise ValueError(f"clip too short: {n} samples < one {frame_len}-sample analysis frame")
    n_bins = frame_len // 2 + 1
    if bands < 1 or bands > n_bins:
        raise ValueError(f"bands must be in [1, {n_bins}] for a {frame_len}-sample frame")
    n_frames = (n - frame_len) // hop + 1
    window = np.hanning(frame_len)
    starts = np.arange(n_frames) * hop
    frames = clip.samples[starts[:, None] + np.arange(frame_len)] * window
    mags = np.abs(np.fft.rfft(frames, axis=1))
    groups = np.array_split(np.arange(n_bins), bands)
    pooled = np.stack([mags[:, g].mean(axis=1) for g in groups], axis=1)
    return FeatureSequence(np.log1p(pooled))


def resample_features(features: FeatureSequence, target_frames: int) -> FeatureSequence:
    """Linear interpolation onto `target_frames` frames over a shared
    normalized [0, 1] time axis; endpoint frames are preserved exactly."""
    if features.frames < 2:
        raise ValueError("resampling needs at least 2 source frames")
    if target_frames < 2:
        raise ValueError("resampling needs at least 2 target frames")
    src = np.linspace(0.0, 1.0, features.frames)
    dst = np.linspace(0.0, 1.0, target_frames)
    out = np.empty((target_frames, features.dim), dtype=np.float64)
    for j in range(features.dim):
        out[:, j] = np.interp(dst, src, features.values[:, j])
    return FeatureSequence(out)


def motion_to_positions(motion: MotionSequence, template: NeutralTemplate) -> np.ndarray:
    """Absolute vertex positions, shape (T, V, 3)."""
    if motion.vertex_count != template.vertex_count:
        raise ValueError(
            f"vertex count mismatch: motion has {motion.vertex_count}, template has {template.vertex_count}"
        )
    return motion.displacements + template.positions[None, :, :]


# ---------------------------------------------------------------------------
# synthetic dataset

def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    # convolve 'same' needs the kernel no longer than the signal; clamp to
    # the largest odd width that fits so short sequences still smooth
    if window > x.shape[0]:
        window = x.shape[0] if x.shape[0] % 2 else x.shape[0] - 1
    kernel = np.ones(window) / window
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        out[:, j] = np.convolve(x[:, j], kernel, mode="same")
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def default_region_sets(vertex_count: int) -> tuple[list[int], list[int]]:
    """Contiguous lip and upper-face index ranges used by the generator."""
    lips = list(range(0, vertex_count // 6))
    upper = list(range(vertex_count // 2, vertex_count // 2 + vertex_count // 4))
    return lips, upper


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Generate a paired dataset under out_dir and return its manifest.

    Draw order from the single seeded generator is fixed (template, then
    per-speaker mixing/blendshape matrices, then per-sequence latent noise
    and feature noise), so a given spec reproduces byte-identical files.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    t, v, b, p = spec.frames, spec.vertex_count, spec.bands, spec.latent_dim

    dirs = rng.standard_normal((v, 3))
    norms = np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    template = NeutralTemplate(dirs / norms)
    save_template(out / "template.bin", template)

    lips, upper = default_region_sets(v)
    lip_cols = np.array([3 * i + c for i in lips for c in range(3)])

    mixing = []
    blend = []
    for _ in range(spec.n_speakers):
        u = rng.standard_normal((p, b)) / np.sqrt(p)
        d = rng.standard_normal((p, v * 3)) / np.sqrt(p)
        d[:, lip_cols] *= SYNTH_LIP_AMPLIFICATION
        mixing.append(u)
        blend.append(d)

    n = spec.n_sequences
    n_val = max(1, n // 10)
    n_test = max(1, n // 10)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("n_sequences too small for an 8:1:1 split")

    entries = []
    for i in range(n):
        speaker = i % spec.n_speakers
        z = _moving_average(rng.standard_normal((t, p)), spec.smooth_window)
        noise = rng.standard_normal((t, b))
        feats = FeatureSequence(_softplus(z @ mixing[speaker]) + spec.noise_scale * noise)
        disp = (z @ blend[speaker]).reshape(t, v, 3) * SYNTH_DISPLACEMENT_SCALE
        motion = MotionSequence(disp, SYNTH_FPS)
        feat_name = f"seq{i:03d}_features.bin"
        mot_name = f"seq{i:03d}_motion.bin"
        save_features(out / feat_name, feats)
        save_motion(out / mot_name, motion)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        entries.append(ManifestEntry(speaker, feat_name, mot_name, split))

    manifest = DatasetManifest(
        template="template.bin",
        speakers=spec.n_speakers,
        entries=entries,
        lip_indices=lips,
        upper_indices=upper,
    )
    save_manifest(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# loaded view used by training/evaluation

@dataclass
class SequenceRecord:
    speaker: int
    features: FeatureSequence
    motion: MotionSequence
    split: str
    name: str


@dataclass
class LoadedDataset:
    root: Path
    manifest: DatasetManifest
    template: NeutralTemplate
    sequences: list[SequenceRecord]
    lip_indices: np.ndarray = field(init=False)
    upper_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lip_indices = np.asarray(self.manifest.lip_indices, dtype=np.int64)
        self.upper_indices = np.asarray(self.manifest.upper_indices, dtype=np.int64)
        v = self.template.vertex_count
        if self.lip_indices.max() >= v or self.upper_indices.max() >= v:
            raise ValueError("region indices exceed template vertex count")

    def split(self, name: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if s.split == name]

    @property
    def audio_dim(self) -> int:
        return self.sequences[0].features.dim

    @property
    def max_frames(self) -> int:
        return max(s.motion.frames for s in self.sequences)


def load_dataset(manifest_path) -> LoadedDataset:
    """Load every sequence referenced by a manifest into memory.

    Features whose frame count differs from the motion's are resampled to the
    motion length here, so downstream code always sees aligned pairs.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    template = load_template(root / manifest.template)
    sequences = []
    for e in manifest.entries:
        feats = load_features(root / e.features)
        motion = load_motion(root / e.motion)
        if motion.vertex_count != template.vertex_count:
            raise ValueError(f"{e.motion}: vertex count differs from template")
        if feats.frames != motion.frames:
            feats = resample_features(feats, motion.frames)
        sequences.append(SequenceRecord(e.speaker, feats, motion, e.split, Path(e.features).stem))
    ds = LoadedDataset(root=root, manifest=manifest, template=template, sequences=sequences)
    return ds
