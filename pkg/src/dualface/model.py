"""Shared-backbone dual-direction sequence model.

The primal direction maps audio features to per-frame vertex displacements;
the dual direction maps motion back to audio features (lip reading). Both
ride on the same encoders, style table, and positional table, and the fusion
attention shares its projection matrices across directions: the matrix
applied to audio-derived rows serves as the query projection in the primal
direction and the key projection in the dual direction (and vice versa for
motion-derived rows), as single Parameter objects, not copies.

Attention is causally masked in both the history self-attention and the
fusion cross-attention, so frame t never sees history rows beyond t; that is
what makes step-by-step generation reproduce the teacher-forced pass.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from dataclasses import dataclass, asdict
from pathlib import Path

from . import diffcore as dc
from .data import (
    BadMagicError,
    FeatureSequence,
    FileFormatError,
    MotionSequence,
    SYNTH_FPS,
    TruncatedFileError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1

# Additive mask value for blocked attention positions: large enough that
# exp underflows to exactly 0 after max subtraction, while staying finite.
_MASK_VALUE = -1e30


@dataclass
class ModelConfig:
    d: int
    audio_dim: int
    vertex_count: int
    n_speakers: int
    max_frames: int
    fusion_heads: int = 4
    self_heads: int = 4
    squeeze_ratio: int = 16
    ff_dim: int = 2048
    share_transpose_codec: bool = False

    def validate(self):
        for name in ("d", "audio_dim", "vertex_count", "n_speakers", "max_frames",
                     "fusion_heads", "self_heads", "squeeze_ratio", "ff_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d % self.fusion_heads != 0:
            raise ValueError("d must be divisible by fusion_heads")
        if self.d % self.self_heads != 0:
            raise ValueError("d must be divisible by self_heads")
        if (2 * self.d) % self.squeeze_ratio != 0:
            raise ValueError("2*d must be divisible by squeeze_ratio")


class ModelParams:
    """Registration-ordered parameter store.

    Registration order is the serialization order; shared tensors are
    registered once and referenced through the same Parameter object
    everywhere they are used.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self._params: dict[str, dc.Parameter] = {}
        c = config
        dk_self = c.d // c.self_heads
        dk_fuse = c.d // c.fusion_heads
        hidden = (2 * c.d) // c.squeeze_ratio

        def w(name, shape, fan_in):
            values = np.zeros(shape) if rng is None else rng.standard_normal(shape) / np.sqrt(fan_in)
            return self._register(name, values)

        def b(name, width):
            return self._register(name, np.zeros((1, width)))

        def table(name, shape):
            values = np.zeros(shape) if rng is None else 0.1 * rng.standard_normal(shape)
            return self._register(name, values)

        w("audio_encoder.weight", (c.audio_dim, c.d), c.audio_dim)
        b("audio_encoder.bias", c.d)
        w("motion_encoder.weight", (3 * c.vertex_count, c.d), 3 * c.vertex_count)
        b("motion_encoder.bias", c.d)
        table("style_table", (c.n_speakers, c.d))
        table("positional_table", (c.max_frames, c.d))
        table("start_token.motion", (1, c.d))
        table("start_token.audio", (1, c.d))
        for stream in ("motion", "audio"):
            for h in range(c.self_heads):
                for proj in ("q", "k", "v"):
                    w(f"self_attn.{stream}.h{h}.{proj}", (c.d, dk_self), c.d)
            w(f"self_attn.{stream}.out", (c.d, c.d), c.d)
            w(f"speaker_gate.{stream}.fc1.weight", (2 * c.d, hidden), 2 * c.d)
            b(f"speaker_gate.{stream}.fc1.bias", hidden)
            w(f"speaker_gate.{stream}.fc2.weight", (hidden, c.d), hidden)
            b(f"speaker_gate.{stream}.fc2.bias", c.d)
        for h in range(c.fusion_heads):
            w(f"fusion.qk_audio.h{h}", (c.d, dk_fuse), c.d)
        for h in range(c.fusion_heads):
            w(f"fusion.qk_motion.h{h}", (c.d, dk_fuse), c.d)
        for direction in ("primal", "dual"):
            for h in range(c.fusion_heads):
                w(f"fusion.{direction}.v.h{h}", (c.d, dk_fuse), c.d)
            w(f"fusion.{direction}.out", (c.d, c.d), c.d)
            w(f"fusion.{direction}.ff1.weight", (c.d, c.ff_dim), c.d)
            b(f"fusion.{direction}.ff1.bias", c.ff_dim)
            w(f"fusion.{direction}.ff2.weight", (c.ff_dim, c.d), c.ff_dim)
            b(f"fusion.{direction}.ff2.bias", c.d)
        if not c.share_transpose_codec:
            w("motion_decoder.weight", (c.d, 3 * c.vertex_count), c.d)
        b("motion_decoder.bias", 3 * c.vertex_count)
        w("audio_decoder.hidden.weight", (c.d, c.d), c.d)
        b("audio_decoder.hidden.bias", c.d)
        if not c.share_transpose_codec:
            w("audio_decoder.out.weight", (c.d, c.audio_dim), c.d)
        b("audio_decoder.out.bias", c.audio_dim)

    def _register(self, name: str, values) -> dc.Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = dc.Parameter(name, values)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> dc.Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def t(self, name: str) -> dc.Tensor:
        return self._params[name].value

    def named_parameters(self) -> list[tuple[str, dc.Parameter]]:
        return list(self._params.items())

    def parameters(self) -> list[dc.Parameter]:
        return list(self._params.values())

    def zero_gradients(self):
        for p in self._params.values():
            p.zero_gradient()

    def motion_decoder_weight(self) -> dc.Tensor:
        """(d, 3V) decoder weight; the transpose of the encoder when tied."""
        if self.config.share_transpose_codec:
            return dc.transpose_last_two(self.t("motion_encoder.weight"))
        return self.t("motion_decoder.weight")

    def audio_decoder_out_weight(self) -> dc.Tensor:
        if self.config.share_transpose_codec:
            return dc.transpose_last_two(self.t("audio_encoder.weight"))
        return self.t("audio_decoder.out.weight")


@dataclass
class ForwardOutputs:
    """One direction's teacher-forced outputs, still attached to the tape."""

    direction: str
    prediction: dc.Tensor      # (T, 3V) primal, (T, audio_dim) dual
    fused: dc.Tensor           # (T, d) fusion output feeding the decoder
    audio_latent: dc.Tensor    # (T, d) encoded audio
    motion_latent: dc.Tensor   # (T, d) encoded ground-truth motion

    def prediction_motion(self, vertex_count: int, fps: float = SYNTH_FPS) -> MotionSequence:
        t = self.prediction.data.shape[0]
        return MotionSequence(self.prediction.data.reshape(t, vertex_count, 3).copy(), fps)

    def prediction_features(self) -> FeatureSequence:
        return FeatureSequence(self.prediction.data.copy())


# ---------------------------------------------------------------------------
# building blocks

_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> dc.Tensor:
    arr = _MASK_CACHE.get(t)
    if arr is None:
        arr = np.triu(np.full((t, t), _MASK_VALUE), k=1)
        _MASK_CACHE[t] = arr
    return dc.Tensor(arr)


def _affine(x: dc.Tensor, weight: dc.Tensor, bias: dc.Tensor) -> dc.Tensor:
    rows = x.data.shape[0]
    return dc.add(dc.matmul(x, weight), dc.broadcast_row(bias, rows))


def concat_rows(top: dc.Tensor, bottom: dc.Tensor) -> dc.Tensor:
    """Stack two row blocks; composed from the closed primitive catalog."""
    return dc.transpose_last_two(dc.concat_last(dc.transpose_last_two(top), dc.transpose_last_two(bottom)))


def attention_heads(q_src, kv_src, q_weights, k_weights, v_weights, mask) -> list[dc.Tensor]:
    """Per-head scaled-dot-product contexts (pre output projection)."""
    dk = q_weights[0].data.shape[1]
    scale = 1.0 / np.sqrt(dk)
    heads = []
    for qw, kw, vw in zip(q_weights, k_weights, v_weights):
        q = dc.matmul(q_src, qw)
        k = dc.matmul(kv_src, kw)
        v = dc.matmul(kv_src, vw)
        logits = dc.scalar_multiply(dc.matmul(q, dc.transpose_last_two(k)), scale)
        if mask is not None:
            logits = dc.add(logits, mask)
        heads.append(dc.matmul(dc.softmax_rows(logits), v))
    return heads


def _as_tensor(x, expect_cols: int, what: str) -> dc.Tensor:
    if isinstance(x, dc.Tensor):
        arr_cols = x.data.shape[1] if x.data.ndim == 2 else -1
    elif isinstance(x, FeatureSequence):
        x = dc.Tensor(x.values)
        arr_cols = x.data.shape[1]
    elif isinstance(x, MotionSequence):
        t = x.frames
        x = dc.Tensor(x.displacements.reshape(t, 3 * x.vertex_count))
        arr_cols = x.data.shape[1]
    else:
        raise TypeError(f"{what}: unsupported input type {type(x).__name__}")
    if arr_cols != expect_cols:
        raise dc.ShapeMismatchError(f"{what}: expected {expect_cols} columns, got {arr_cols}")
    return x


def _check_frames(params: ModelParams, t: int, what: str):
    if t < 1:
        raise ValueError(f"{what}: need at least one frame")
    if t > params.config.max_frames:
        raise ValueError(f"{what}: {t} frames exceeds max_frames={params.config.max_frames}")


def encode_audio(params: ModelParams, features) -> dc.Tensor:
    """Affine band-feature encoding plus learned positional rows, (T, d)."""
    x = _as_tensor(features, params.config.audio_dim, "encode_audio")
    t = x.data.shape[0]
    _check_frames(params, t, "encode_audio")
    pos = dc.slice_axis(params.t("positional_table"), 0, 0, t)
    return dc.add(_affine(x, params.t("audio_encoder.weight"), params.t("audio_encoder.bias")), pos)


def encode_motion(params: ModelParams, motion) -> dc.Tensor:
    """Affine flattened-displacement encoding plus positional rows, (T, d)."""
    x = _as_tensor(motion, 3 * params.config.vertex_count, "encode_motion")
    t = x.data.shape[0]
    _check_frames(params, t, "encode_motion")
    pos = dc.slice_axis(params.t("positional_table"), 0, 0, t)
    return dc.add(_affine(x, params.t("motion_encoder.weight"), params.t("motion_encoder.bias")), pos)


def style_embed(params: ModelParams, speaker: int) -> dc.Tensor:
    """(1, d) style row; gradients reach only the selected row."""
    n = params.config.n_speakers
    if not 0 <= speaker < n:
        raise ValueError(f"speaker {speaker} out of range [0, {n})")
    return dc.slice_axis(params.t("style_table"), 0, speaker, speaker + 1)


def _direction_stream(direction: str) -> str:
    if direction == "primal":
        return "motion"
    if direction == "dual":
        return "audio"
    raise ValueError(f"direction must be 'primal' or 'dual', got {direction!r}")


def self_attend(params: ModelParams, stream: dc.Tensor, direction: str) -> dc.Tensor:
    """Causally masked multi-head self-attention with post-norm residual."""
    name = _direction_stream(direction)
    t = stream.data.shape[0]
    _check_frames(params, t, "self_attend")
    hs = params.config.self_heads
    qw = [params.t(f"self_attn.{name}.h{h}.q") for h in range(hs)]
    kw = [params.t(f"self_attn.{name}.h{h}.k") for h in range(hs)]
    vw = [params.t(f"self_attn.{name}.h{h}.v") for h in range(hs)]
    heads = attention_heads(stream, stream, qw, kw, vw, _causal_mask(t))
    ctx = dc.matmul(dc.concat_last(*heads), params.t(f"self_attn.{name}.out"))
    return dc.layer_norm_rows(dc.add(stream, ctx))


def speaker_modulate(params: ModelParams, stream: dc.Tensor, style: dc.Tensor, direction: str) -> dc.Tensor:
    """Sigmoid gates from MLP(concat(style, frame)) applied to the stream."""
    name = _direction_stream(direction)
    t = stream.data.shape[0]
    joint = dc.concat_last(dc.broadcast_row(style, t), stream)
    hidden = dc.relu(_affine(joint, params.t(f"speaker_gate.{name}.fc1.weight"), params.t(f"speaker_gate.{name}.fc1.bias")))
    gate = dc.sigmoid(_affine(hidden, params.t(f"speaker_gate.{name}.fc2.weight"), params.t(f"speaker_gate.{name}.fc2.bias")))
    return dc.multiply(gate, stream)


def cross_attend(params: ModelParams, queries: dc.Tensor, kv: dc.Tensor, direction: str) -> dc.Tensor:
    """Fusion attention between modalities, then position-wise feed-forward.

    Projections are shared across directions per modality of the projected
    rows. The mask keeps query row t from attending history rows beyond t,
    which generation relies on.
    """
    if direction not in ("primal", "dual"):
        raise ValueError(f"direction must be 'primal' or 'dual', got {direction!r}")
    tq, tk = queries.data.shape[0], kv.data.shape[0]
    if tq != tk:
        raise dc.ShapeMismatchError(f"cross_attend expects equal lengths, got {tq} and {tk}")
    h = params.config.fusion_heads
    if direction == "primal":
        qw = [params.t(f"fusion.qk_audio.h{i}") for i in range(h)]
        kw = [params.t(f"fusion.qk_motion.h{i}") for i in range(h)]
    else:
        qw = [params.t(f"fusion.qk_motion.h{i}") for i in range(h)]
        kw = [params.t(f"fusion.qk_audio.h{i}") for i in range(h)]
    vw = [params.t(f"fusion.{direction}.v.h{i}") for i in range(h)]
    heads = attention_heads(queries, kv, qw, kw, vw, _causal_mask(tq))
    ctx = dc.matmul(dc.concat_last(*heads), params.t(f"fusion.{direction}.out"))
    x = dc.layer_norm_rows(dc.add(queries, ctx))
    ff = _affine(
        dc.relu(_affine(x, params.t(f"fusion.{direction}.ff1.weight"), params.t(f"fusion.{direction}.ff1.bias"))),
        params.t(f"fusion.{direction}.ff2.weight"),
        params.t(f"fusion.{direction}.ff2.bias"),
    )
    return dc.layer_norm_rows(dc.add(x, ff))


def _shifted_history(params: ModelParams, encoded: dc.Tensor, start_name: str) -> dc.Tensor:
    """[start token; encoded rows 0..T-1) ] -- the teacher-forcing shift."""
    t = encoded.data.shape[0]
    start = params.t(start_name)
    if t == 1:
        return start
    return concat_rows(start, dc.slice_axis(encoded, 0, 0, t - 1))


def forward_primal(params: ModelParams, features, speaker: int, gt_motion) -> ForwardOutputs:
    """Teacher-forced audio-to-motion pass; the last gt frame is never read."""
    c = params.config
    feats = _as_tensor(features, c.audio_dim, "forward_primal")
    gt = _as_tensor(gt_motion, 3 * c.vertex_count, "forward_primal")
    t = feats.data.shape[0]
    if gt.data.shape[0] != t:
        raise dc.ShapeMismatchError(
            f"forward_primal: audio has {t} frames but motion has {gt.data.shape[0]}"
        )
    _check_frames(params, t, "forward_primal")
    audio_latent = encode_audio(params, feats)
    motion_latent = encode_motion(params, gt)
    history = _shifted_history(params, motion_latent, "start_token.motion")
    ctx = self_attend(params, history, "primal")
    gated = speaker_modulate(params, ctx, style_embed(params, speaker), "primal")
    fused = cross_attend(params, audio_latent, gated, "primal")
    pred = dc.add(
        dc.matmul(fused, params.motion_decoder_weight()),
        dc.broadcast_row(params.t("motion_decoder.bias"), t),
    )
    return ForwardOutputs("primal", pred, fused, audio_latent, motion_latent)


def forward_dual(params: ModelParams, motion, speaker: int, gt_features) -> ForwardOutputs:
    """Teacher-forced motion-to-audio pass (lip reading)."""
    c = params.config
    mot = _as_tensor(motion, 3 * c.vertex_count, "forward_dual")
    gt = _as_tensor(gt_features, c.audio_dim, "forward_dual")
    t = mot.data.shape[0]
    if gt.data.shape[0] != t:
        raise dc.ShapeMismatchError(
            f"forward_dual: motion has {t} frames but audio has {gt.data.shape[0]}"
        )
    _check_frames(params, t, "forward_dual")
    motion_latent = encode_motion(params, mot)
    audio_latent = encode_audio(params, gt)
    history = _shifted_history(params, audio_latent, "start_token.audio")
    ctx = self_attend(params, history, "dual")
    gated = speaker_modulate(params, ctx, style_embed(params, speaker), "dual")
    fused = cross_attend(params, motion_latent, gated, "dual")
    hidden = dc.relu(_affine(fused, params.t("audio_decoder.hidden.weight"), params.t("audio_decoder.hidden.bias")))
    pred = dc.add(
        dc.matmul(hidden, params.audio_decoder_out_weight()),
        dc.broadcast_row(params.t("audio_decoder.out.bias"), t),
    )
    return ForwardOutputs("dual", pred, fused, audio_latent, motion_latent)


def generate_motion(params: ModelParams, features: FeatureSequence, speaker: int, fps: float = SYNTH_FPS) -> MotionSequence:
    """Strict autoregressive decoding: frame t is predicted from audio rows
    0..t and the frames generated so far, then appended.

    Each step runs the teacher-forced pass on the prefix with a zero dummy
    last frame (which the shift drops), so generation and teacher forcing
    share one code path.
    """
    c = params.config
    t_total = features.frames
    _check_frames(params, t_total, "generate_motion")
    width = 3 * c.vertex_count
    generated = np.zeros((0, width))
    for t in range(t_total):
        prefix = dc.Tensor(features.values[: t + 1])
        stub = dc.Tensor(np.vstack([generated, np.zeros((1, width))]))
        out = forward_primal(params, prefix, speaker, stub)
        generated = np.vstack([generated, out.prediction.data[t : t + 1]])
    return MotionSequence(generated.reshape(t_total, c.vertex_count, 3), fps)


def generate_audio(params: ModelParams, motion: MotionSequence, speaker: int) -> FeatureSequence:
    """Autoregressive feature decoding, mirror of generate_motion."""
    c = params.config
    t_total = motion.frames
    _check_frames(params, t_total, "generate_audio")
    flat = motion.displacements.reshape(t_total, 3 * c.vertex_count)
    generated = np.zeros((0, c.audio_dim))
    for t in range(t_total):
        prefix = dc.Tensor(flat[: t + 1])
        stub = dc.Tensor(np.vstack([generated, np.zeros((1, c.audio_dim))]))
        out = forward_dual(params, prefix, speaker, stub)
        generated = np.vstack([generated, out.prediction.data[t : t + 1]])
    return FeatureSequence(generated)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ModelParams, single_precision: bool = False):
    """DTCK: magic, u32 version, u32 json_len, config JSON, then for each
    parameter in registration order: u32 name_len, name, u32 rank, u32 dims,
    little-endian values (f64, or f32 when single_precision)."""
    header = {"config": asdict(params.config), "dtype": "f32" if single_precision else "f64"}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dtype = np.dtype("<f4") if single_precision else np.dtype("<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for name, p in params.named_parameters():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            shape = p.value.data.shape
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(np.ascontiguousarray(p.value.data, dtype=dtype).tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, blob_len = struct.unpack_from("<4sII", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    if offset + blob_len > len(data):
        raise TruncatedFileError(f"{path}: config block truncated")
    header = json.loads(data[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    dtype = np.dtype("<f4") if header.get("dtype") == "f32" else np.dtype("<f8")
    config = ModelConfig(**header["config"])
    params = ModelParams(config, rng=None)
    for name, p in params.named_parameters():
        if offset + 4 > len(data):
            raise TruncatedFileError(f"{path}: truncated before parameter {name!r}")
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        got = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if got != name:
            raise FileFormatError(f"{path}: expected parameter {name!r}, found {got!r}")
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        if tuple(shape) != p.value.data.shape:
            raise FileFormatError(f"{path}: {name!r} has shape {shape}, expected {p.value.data.shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise TruncatedFileError(f"{path}: values truncated for {name!r}")
        values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        p.value.data[...] = values.astype(np.float64).reshape(p.value.data.shape)
    if offset != len(data):
        raise FileFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return params
