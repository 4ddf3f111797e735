"""Training loop, Adam optimizer, evaluation, and the ablation harness.

One optimizer step per sequence, epochs shuffled by a seeded generator.
Checkpointing keeps whichever parameters score the best validation
lip-vertex error. Loss components are watched for non-finite values and
abort the run naming the failing term.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import diffcore as dc
from .data import LoadedDataset, SequenceRecord
from .losses import CCRLConfig, LossBundle, LossWeights, total_loss
from .metrics import MetricReport, RegionSet, SequenceMetrics, build_report, fdd, lip_distance, lip_vertex_error
from .model import (
    ModelConfig,
    ModelParams,
    forward_dual,
    forward_primal,
    generate_motion,
    load_checkpoint,
    save_checkpoint,
)


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: int):
        self.term = term
        self.step = step
        super().__init__(
            f"non-finite value in {term!r} at step {step}; "
            "lower the learning rate or enable train.grad_clip"
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    seed: int = 0
    val_every: int = 1
    grad_clip: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    ccrl: CCRLConfig = field(default_factory=CCRLConfig)
    disable_dual: bool = False
    disable_ccrl: bool = False
    disable_dr: bool = False
    share_transpose_codec: bool = False

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when given")
        self.ccrl.validate()

    def effective_weights(self) -> LossWeights:
        w = LossWeights(self.weights.primal, self.weights.dual, self.weights.dr, self.weights.ccrl)
        if self.disable_dual:
            w.dual = w.dr = w.ccrl = 0.0
        if self.disable_ccrl:
            w.ccrl = 0.0
        if self.disable_dr:
            w.dr = 0.0
        return w


@dataclass
class TrainState:
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> [m, v]
    best_val_lve: float = float("inf")
    best_checkpoint: str | None = None


def adam_step(params: ModelParams, state: TrainState, cfg: TrainConfig):
    """Bias-corrected Adam over every registered parameter; shared tensors
    are registered once, so they get exactly one moment accumulator."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    if cfg.grad_clip is not None:
        total = sum(float((p.gradient.data**2).sum()) for p in params.parameters())
        norm = np.sqrt(total)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for p in params.parameters():
                p.gradient.data *= scale
    for name, p in params.named_parameters():
        mv = state.moments.get(name)
        if mv is None:
            mv = [np.zeros_like(p.value.data), np.zeros_like(p.value.data)]
            state.moments[name] = mv
        g = p.gradient.data
        mv[0] = cfg.beta1 * mv[0] + (1.0 - cfg.beta1) * g
        mv[1] = cfg.beta2 * mv[1] + (1.0 - cfg.beta2) * (g * g)
        m_hat = mv[0] / c1
        v_hat = mv[1] / c2
        p.value.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.zero_gradient()


def _check_bundle(bundle: LossBundle, step: int):
    for term in ("l_primal", "l_dual", "l_dr", "l_ccrl", "total"):
        if not np.isfinite(getattr(bundle, term)):
            raise NonFiniteLossError(term, step)


def train_step(params: ModelParams, seq: SequenceRecord, cfg: TrainConfig, state: TrainState) -> LossBundle:
    weights = cfg.effective_weights()
    try:
        with dc.Tape() as tape:
            primal = forward_primal(params, seq.features, seq.speaker, seq.motion)
            dual = None
            if not cfg.disable_dual:
                dual = forward_dual(params, seq.motion, seq.speaker, seq.features)
            bundle, total = total_loss(primal, dual, seq.motion, seq.features, weights, cfg.ccrl)
    except dc.NonFiniteError as e:
        raise NonFiniteLossError("forward pass", state.step) from e
    _check_bundle(bundle, state.step)
    dc.backpropagate(tape, total, np.ones_like(total.data))
    adam_step(params, state, cfg)
    return bundle


def _regions(dataset: LoadedDataset) -> tuple[RegionSet, RegionSet]:
    return RegionSet("lips", dataset.lip_indices), RegionSet("upper", dataset.upper_indices)


def evaluate_params(
    params: ModelParams,
    dataset: LoadedDataset,
    split: str = "test",
    predict_gt: bool = False,
) -> MetricReport:
    """Autoregressive generation per sequence, then LVE/FDD against ground
    truth. predict_gt swaps the prediction for the ground truth itself (the
    all-zero oracle row used to sanity-check the metric plumbing)."""
    lips, upper = _regions(dataset)
    rows = dataset.split(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    per_seq = []
    for seq in rows:
        if predict_gt:
            pred = seq.motion
        else:
            pred = generate_motion(params, seq.features, seq.speaker, seq.motion.fps)
        per_seq.append(
            SequenceMetrics(seq.name, lip_vertex_error(pred, seq.motion, lips), fdd(pred, seq.motion, upper))
        )
    return build_report(per_seq)


def evaluate(checkpoint_path, dataset: LoadedDataset, split: str = "test", predict_gt: bool = False) -> MetricReport:
    params = load_checkpoint(checkpoint_path)
    return evaluate_params(params, dataset, split, predict_gt=predict_gt)


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    state: TrainState
    history: list[LossBundle] = field(default_factory=list)


def _bundle_line(step: int, bundle: LossBundle) -> str:
    return json.dumps(
        {
            "step": step,
            "l_primal": bundle.l_primal,
            "l_dual": bundle.l_dual,
            "l_dr": bundle.l_dr,
            "l_ccrl": bundle.l_ccrl,
            "total": bundle.total,
        },
        sort_keys=False,
    )


def train(dataset: LoadedDataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir) -> TrainResult:
    """Train from a fresh seeded initialization; returns the best-validation
    checkpoint path (final parameters if the val split is empty)."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams(model_cfg, rng)
    state = TrainState()
    train_rows = dataset.split("train")
    if not train_rows:
        raise ValueError("train split is empty")
    val_rows = dataset.split("val")
    ckpt_path = out / "best.ckpt"
    log_path = out / "train_log.jsonl"
    history: list[LossBundle] = []
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_rows))
            for idx in order:
                bundle = train_step(params, train_rows[idx], cfg, state)
                history.append(bundle)
                log.write(_bundle_line(state.step, bundle) + "\n")
            if val_rows and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
                report = evaluate_params(params, dataset, "val")
                if report.lve < state.best_val_lve:
                    state.best_val_lve = report.lve
                    save_checkpoint(ckpt_path, params)
                    state.best_checkpoint = str(ckpt_path)
    if state.best_checkpoint is None:
        save_checkpoint(ckpt_path, params)
        state.best_checkpoint = str(ckpt_path)
    return TrainResult(str(ckpt_path), str(log_path), state, history)


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_VARIANTS = ("full", "disable_dual", "disable_ccrl", "share_transpose_codec")


@dataclass
class AblationRow:
    variant: str
    seed: int
    lve: float
    fdd: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    table_path: str
    json_path: str
    csv_paths: list[str]

    def format(self) -> str:
        lines = [f"{'variant':<24} {'seed':>6} {'val LVE':>14} {'val FDD':>14}"]
        for r in self.rows:
            lines.append(f"{r.variant:<24} {r.seed:>6} {r.lve:>14.6e} {r.fdd:>14.6e}")
        return "\n".join(lines)


def _variant_configs(model_cfg: ModelConfig, cfg: TrainConfig, variant: str) -> tuple[ModelConfig, TrainConfig]:
    m = ModelConfig(**asdict(model_cfg))
    t = TrainConfig(**{**asdict(cfg), "weights": LossWeights(**asdict(cfg.weights)), "ccrl": CCRLConfig(**asdict(cfg.ccrl))})
    if variant == "disable_dual":
        t.disable_dual = True
    elif variant == "disable_ccrl":
        t.disable_ccrl = True
    elif variant == "share_transpose_codec":
        t.share_transpose_codec = True
        m.share_transpose_codec = True
    elif variant != "full":
        raise ValueError(f"unknown ablation variant {variant!r}")
    return m, t


def ablate(dataset: LoadedDataset, model_cfg: ModelConfig, cfg: TrainConfig, seeds: list[int], out_dir) -> AblationResult:
    """Train every ablation variant on every seed and tabulate val metrics.

    Also writes one per-seed CSV tracing the upper-lip/lower-lip centroid
    distance over the first val sequence for ground truth and each variant.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lips = list(dataset.manifest.lip_indices)
    upper_lip = RegionSet("upper_lip", lips[: len(lips) // 2] or lips[:1])
    lower_lip = RegionSet("lower_lip", lips[len(lips) // 2 :] or lips[-1:])
    val_rows = dataset.split("val")
    probe = val_rows[0] if val_rows else dataset.split("train")[0]
    rows: list[AblationRow] = []
    csv_paths: list[str] = []
    for seed in seeds:
        curves: dict[str, np.ndarray] = {
            "gt": lip_distance(probe.motion, dataset.template, upper_lip, lower_lip)
        }
        for variant in ABLATION_VARIANTS:
            m_cfg, t_cfg = _variant_configs(model_cfg, cfg, variant)
            t_cfg.seed = seed
            run_dir = out / f"{variant}_seed{seed}"
            result = train(dataset, m_cfg, t_cfg, run_dir)
            params = load_checkpoint(result.checkpoint)
            report = evaluate_params(params, dataset, "val" if val_rows else "train")
            rows.append(AblationRow(variant, seed, report.lve, report.fdd))
            pred = generate_motion(params, probe.features, probe.speaker, probe.motion.fps)
            curves[variant] = lip_distance(pred, dataset.template, upper_lip, lower_lip)
        csv_path = out / f"lip_distance_seed{seed}.csv"
        names = ["gt", *ABLATION_VARIANTS]
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("frame," + ",".join(names) + "\n")
            for i in range(probe.motion.frames):
                f.write(str(i) + "," + ",".join(f"{curves[n][i]:.9e}" for n in names) + "\n")
        csv_paths.append(str(csv_path))
    table_path = out / "ablation.txt"
    json_path = out / "ablation.json"
    result = AblationResult(rows, str(table_path), str(json_path), csv_paths)
    table_path.write_text(result.format() + "\n", encoding="utf-8")
    json_path.write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n", encoding="utf-8")
    return result


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
