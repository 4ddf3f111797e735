"""Command-line interface.

Subcommands: synth, train, eval, animate, lipread, gradcheck, ablate. A JSON
config file (sections: synthetic, model, train) merges over built-in
defaults, and repeated --set key.path=value flags override both. Unknown
keys are rejected. Every command prints its resolved configuration and the
tool version; artifact-producing commands write a run_manifest.json with the
config hash, seed, and a file inventory.

Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
4 numeric failure during training, 5 verification (gradcheck) failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import diffcore as dc
from .data import (
    FeatureSequence,
    FileFormatError,
    MotionSequence,
    SyntheticSpec,
    export_obj,
    generate_synthetic,
    load_dataset,
    load_features,
    load_motion,
    load_template,
    resample_features,
    save_features,
    save_motion,
)
from .losses import CCRLConfig, LossWeights, ccrl_direction, ccrl_total, duality_regularizer, mse, smooth_l1, total_loss
from .model import (
    ModelConfig,
    ModelParams,
    cross_attend,
    encode_audio,
    encode_motion,
    forward_dual,
    forward_primal,
    generate_audio,
    generate_motion,
    load_checkpoint,
    self_attend,
    speaker_modulate,
    style_embed,
)
from .train import NonFiniteLossError, TrainConfig, ablate, evaluate_params, file_sha256, train


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    """Desk-scale defaults: the model section is sized for the synthetic
    dataset profile (ff_dim deliberately small); data-dependent dimensions
    (audio_dim, vertex_count, n_speakers) always come from the manifest."""
    return {
        "synthetic": asdict(SyntheticSpec()),
        "model": {
            "d": 32,
            "fusion_heads": 4,
            "self_heads": 4,
            "squeeze_ratio": 16,
            "ff_dim": 128,
            "max_frames": None,
        },
        "train": asdict(TrainConfig()),
    }


def _merge(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a section")
            _merge(base[key], value, here)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {here!r} is not a section")
            base[key] = value


def _apply_set(resolved: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key_path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = resolved
    parts = key_path.strip().split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key_path!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {key_path!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {key_path!r} is a section, not a value")
    node[leaf] = value


def resolve_config(args) -> dict:
    resolved = default_config()
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(resolved, raw)
    for assignment in getattr(args, "set", None) or []:
        _apply_set(resolved, assignment)
    seed = getattr(args, "seed", None)
    if seed is not None:
        resolved["synthetic"]["seed"] = seed
        resolved["train"]["seed"] = seed
    return resolved


def _print_resolved(command: str, resolved: dict):
    print(f"dualface {__version__} :: {command}")
    print("resolved config:")
    print(json.dumps(resolved, indent=2, sort_keys=True))


def _config_hash(resolved: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode("utf-8")).hexdigest()


def _write_run_manifest(out_dir: Path, command: str, resolved: dict, seed, files: list[Path]):
    inventory = {}
    for f in sorted(files):
        inventory[str(Path(f).relative_to(out_dir))] = file_sha256(f)
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config_sha256": _config_hash(resolved),
        "files": inventory,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(section: dict) -> TrainConfig:
    try:
        weights = LossWeights(**section["weights"])
        ccrl = CCRLConfig(**section["ccrl"])
        rest = {k: v for k, v in section.items() if k not in ("weights", "ccrl")}
        cfg = TrainConfig(**rest, weights=weights, ccrl=ccrl)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e
    return cfg


def _model_config(section: dict, dataset, share_codec: bool) -> ModelConfig:
    try:
        cfg = ModelConfig(
            d=section["d"],
            audio_dim=dataset.audio_dim,
            vertex_count=dataset.template.vertex_count,
            n_speakers=dataset.manifest.speakers,
            max_frames=section["max_frames"] or dataset.max_frames,
            fusion_heads=section["fusion_heads"],
            self_heads=section["self_heads"],
            squeeze_ratio=section["squeeze_ratio"],
            ff_dim=section["ff_dim"],
            share_transpose_codec=share_codec,
        )
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, resolved: dict) -> int:
    try:
        spec = SyntheticSpec(**resolved["synthetic"])
        spec.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synthetic spec: {e}") from e
    out = Path(args.out)
    generate_synthetic(spec, out)
    files = sorted(p for p in out.iterdir() if p.suffix in (".bin", ".json") and p.name != "run_manifest.json")
    _write_run_manifest(out, "synth", resolved, spec.seed, files)
    print(f"wrote {len(files)} dataset files under {out}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args, resolved: dict) -> int:
    train_cfg = _train_config(resolved["train"])
    dataset = load_dataset(args.data)
    model_cfg = _model_config(resolved["model"], dataset, train_cfg.share_transpose_codec)
    out = Path(args.out)
    result = train(dataset, model_cfg, train_cfg, out)
    _write_run_manifest(out, "train", resolved, train_cfg.seed, [Path(result.checkpoint), Path(result.log_path)])
    print(f"steps: {result.state.step}")
    print(f"best val LVE: {result.state.best_val_lve:.6e}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args, resolved: dict) -> int:
    dataset = load_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    report = evaluate_params(params, dataset, args.split, predict_gt=args.predict_gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.format() + "\n", encoding="utf-8")
    _write_run_manifest(out, "eval", resolved, None, [out / "report.json", out / "report.txt"])
    print(report.format())
    return 0


def cmd_animate(args, resolved: dict) -> int:
    params = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    if args.frames is not None:
        features = resample_features(features, args.frames)
    motion = generate_motion(params, features, args.speaker, args.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    motion_path = out / "motion.bin"
    save_motion(motion_path, motion)
    files = [motion_path]
    if args.obj_every is not None:
        template = load_template(args.template) if args.template else None
        if template is None:
            raise ConfigError("--obj-every needs --template to resolve vertex positions")
        for t in range(0, motion.frames, args.obj_every):
            obj_path = out / f"frame{t:04d}.obj"
            export_obj(obj_path, template, motion, t)
            files.append(obj_path)
    _write_run_manifest(out, "animate", resolved, None, files)
    print(f"generated {motion.frames} frames -> {motion_path}")
    return 0


def cmd_lipread(args, resolved: dict) -> int:
    params = load_checkpoint(args.checkpoint)
    motion = load_motion(args.motion)
    features = generate_audio(params, motion, args.speaker)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feat_path = out / "features.bin"
    save_features(feat_path, features)
    _write_run_manifest(out, "lipread", resolved, None, [feat_path])
    print(f"read {features.frames} frames of {features.dim}-band features -> {feat_path}")
    return 0


def cmd_ablate(args, resolved: dict) -> int:
    train_cfg = _train_config(resolved["train"])
    dataset = load_dataset(args.data)
    model_cfg = _model_config(resolved["model"], dataset, False)
    seeds = [train_cfg.seed + i for i in range(args.seeds)]
    out = Path(args.out)
    result = ablate(dataset, model_cfg, train_cfg, seeds, out)
    files = [Path(result.table_path), Path(result.json_path), *map(Path, result.csv_paths)]
    _write_run_manifest(out, "ablate", resolved, train_cfg.seed, files)
    print(result.format())
    full = {r.seed: r.lve for r in result.rows if r.variant == "full"}
    no_dual = {r.seed: r.lve for r in result.rows if r.variant == "disable_dual"}
    wins = sum(1 for s in full if no_dual[s] >= full[s])
    print(f"dual-path benefit: disable_dual val LVE >= full on {wins}/{len(full)} seeds")
    return 0


# ---------------------------------------------------------------------------
# gradcheck suites

def _proj_scalar(out: dc.Tensor, proj: np.ndarray) -> dc.Tensor:
    return dc.mean_all(dc.multiply(out, dc.Tensor(proj)))


def _op_checks(rng: np.random.Generator):
    def p(name, values):
        return dc.Parameter(name, values)

    checks = []

    def simple(name, build, *parameters):
        checks.append((f"op {name}", list(parameters), build))

    a = p("a", rng.standard_normal((3, 4)))
    b = p("b", rng.standard_normal((4, 2)))
    r_ab = rng.standard_normal((3, 2))
    simple("matmul", lambda: _proj_scalar(dc.matmul(a.value, b.value), r_ab), a, b)

    c = p("c", rng.standard_normal((3, 4)))
    d_ = p("d", rng.standard_normal((3, 4)))
    r_cd = rng.standard_normal((3, 4))
    simple("add", lambda: _proj_scalar(dc.add(c.value, d_.value), r_cd), c, d_)
    simple("subtract", lambda: _proj_scalar(dc.subtract(c.value, d_.value), r_cd), c, d_)
    simple("elementwise-multiply", lambda: _proj_scalar(dc.multiply(c.value, d_.value), r_cd), c, d_)
    simple("scalar-multiply", lambda: _proj_scalar(dc.scalar_multiply(c.value, 1.7), r_cd), c)

    # Keep relu inputs clear of the kink at 0.
    e = p("e", np.where(rng.standard_normal((3, 4)) > 0, 1.0, -1.0) * rng.uniform(0.2, 1.5, (3, 4)))
    simple("relu", lambda: _proj_scalar(dc.relu(e.value), r_cd), e)
    simple("sigmoid", lambda: _proj_scalar(dc.sigmoid(c.value), r_cd), c)
    simple("tanh", lambda: _proj_scalar(dc.tanh(c.value), r_cd), c)
    simple("exp", lambda: _proj_scalar(dc.exp(c.value), r_cd), c)

    f = p("f", rng.uniform(0.5, 2.0, (3, 4)))
    simple("log", lambda: _proj_scalar(dc.log(f.value), r_cd), f)

    g = p("g", rng.standard_normal((3, 5)))
    r_g = rng.standard_normal((3, 5))
    simple("softmax-per-row", lambda: _proj_scalar(dc.softmax_rows(g.value), r_g), g)
    simple("layer-normalize-per-row", lambda: _proj_scalar(dc.layer_norm_rows(g.value), r_g), g)

    h1 = p("h1", rng.standard_normal((3, 2)))
    h2 = p("h2", rng.standard_normal((3, 3)))
    r_h = rng.standard_normal((3, 5))
    simple("concat-last-axis", lambda: _proj_scalar(dc.concat_last(h1.value, h2.value), r_h), h1, h2)

    k = p("k", rng.standard_normal((4, 5)))
    r_k = rng.standard_normal((2, 5))
    simple("slice", lambda: _proj_scalar(dc.slice_axis(k.value, 0, 1, 3), r_k), k)
    r_kt = rng.standard_normal((5, 4))
    simple("transpose-last-two", lambda: _proj_scalar(dc.transpose_last_two(k.value), r_kt), k)
    r_sum = rng.standard_normal((4, 5))
    simple("sum", lambda: dc.sum_all(dc.multiply(k.value, dc.Tensor(r_sum))), k)
    simple("mean", lambda: dc.mean_all(k.value), k)

    m = p("m", rng.standard_normal((1, 4)))
    r_m = rng.standard_normal((5, 4))
    simple("broadcast-row", lambda: _proj_scalar(dc.broadcast_row(m.value, 5), r_m), m)
    return checks


def _small_model(rng: np.random.Generator) -> ModelParams:
    cfg = ModelConfig(
        d=8, audio_dim=5, vertex_count=4, n_speakers=2, max_frames=4,
        fusion_heads=2, self_heads=2, squeeze_ratio=4, ff_dim=12,
    )
    return ModelParams(cfg, rng)


def _named(params: ModelParams, *prefixes) -> list[dc.Parameter]:
    return [p for name, p in params.named_parameters() if name.startswith(prefixes)]


def _block_checks(rng: np.random.Generator):
    params = _small_model(rng)
    t = 3
    stream = dc.Parameter("stream", rng.standard_normal((t, 8)))
    queries = dc.Parameter("queries", rng.standard_normal((t, 8)))
    audio_in = dc.Parameter("audio_in", rng.standard_normal((t, 5)))
    motion_in = dc.Parameter("motion_in", rng.standard_normal((t, 12)))
    r_d = rng.standard_normal((t, 8))
    checks = [
        (
            "block encode_audio",
            [audio_in, *_named(params, "audio_encoder", "positional_table")],
            lambda: _proj_scalar(encode_audio(params, audio_in.value), r_d),
        ),
        (
            "block encode_motion",
            [motion_in, *_named(params, "motion_encoder", "positional_table")],
            lambda: _proj_scalar(encode_motion(params, motion_in.value), r_d),
        ),
        (
            "block self_attend primal",
            [stream, *_named(params, "self_attn.motion")],
            lambda: _proj_scalar(self_attend(params, stream.value, "primal"), r_d),
        ),
        (
            "block self_attend dual",
            [stream, *_named(params, "self_attn.audio")],
            lambda: _proj_scalar(self_attend(params, stream.value, "dual"), r_d),
        ),
        (
            "block speaker_modulate primal",
            [stream, *_named(params, "speaker_gate.motion", "style_table")],
            lambda: _proj_scalar(speaker_modulate(params, stream.value, style_embed(params, 1), "primal"), r_d),
        ),
        (
            "block cross_attend primal",
            [queries, stream, *_named(params, "fusion.qk_", "fusion.primal")],
            lambda: _proj_scalar(cross_attend(params, queries.value, stream.value, "primal"), r_d),
        ),
        (
            "block cross_attend dual",
            [queries, stream, *_named(params, "fusion.qk_", "fusion.dual")],
            lambda: _proj_scalar(cross_attend(params, queries.value, stream.value, "dual"), r_d),
        ),
    ]
    return checks


def _full_checks(rng: np.random.Generator):
    t = 3
    # Loss-level builders over parameter-backed feature matrices.
    p1 = dc.Parameter("p1", rng.standard_normal((t, 6)))
    p2 = dc.Parameter("p2", rng.standard_normal((t, 6)))
    p3 = dc.Parameter("p3", rng.standard_normal((t, 6)))
    p4 = dc.Parameter("p4", rng.standard_normal((t, 6)))
    motion = MotionSequence(rng.standard_normal((t, 4, 3)), 25.0)
    ccrl_cfg = CCRLConfig()
    checks = [
        ("loss mse", [p1, p2], lambda: mse(p1.value, p2.value)),
        ("loss smooth_l1", [p1, p2], lambda: smooth_l1(p1.value, p2.value)),
        (
            "loss duality_regularizer",
            [p1, p2, p3, p4],
            lambda: duality_regularizer(p1.value, p2.value, p3.value, p4.value),
        ),
        ("loss ccrl_direction", [p1, p2], lambda: ccrl_direction(p1.value, p2.value, motion, ccrl_cfg)),
        (
            "loss ccrl_total",
            [p1, p2, p3, p4],
            lambda: ccrl_total(p1.value, p2.value, p3.value, p4.value, motion, ccrl_cfg),
        ),
    ]

    params = _small_model(rng)
    feats = FeatureSequence(rng.standard_normal((t, 5)))
    gt_motion = MotionSequence(0.1 * rng.standard_normal((t, 4, 3)), 25.0)
    # Unit weights: the production lambdas scale some gradients down to ~1e-8
    # where the relative-error formula amplifies finite-difference noise;
    # derivative correctness does not depend on the weights.
    unit = LossWeights(1.0, 1.0, 1.0, 1.0)

    def build_total():
        primal = forward_primal(params, feats, 1, gt_motion)
        dual = forward_dual(params, gt_motion, 1, feats)
        _, total = total_loss(primal, dual, gt_motion, feats, unit, ccrl_cfg)
        return total

    checks.append(("full model + all losses", params.parameters(), build_total))
    return checks


def run_gradcheck(scope: str, tolerance: float, step: float) -> tuple[bool, list[str]]:
    rng = np.random.default_rng(1234)
    checks = []
    if scope in ("op", "full"):
        checks.extend(_op_checks(rng))
    if scope in ("block", "full"):
        checks.extend(_block_checks(rng))
    if scope == "full":
        checks.extend(_full_checks(rng))
    lines = []
    ok = True
    for name, parameters, build in checks:
        report = dc.check_gradients(parameters, build, tolerance=tolerance, step=step)
        status = "PASS" if report.passed else "FAIL"
        flagged = f", {report.n_flagged} flagged" if report.n_flagged else ""
        lines.append(f"{status} {name}: max rel err {report.max_rel_err:.3e} over {report.n_entries} entries{flagged}")
        if not report.passed:
            ok = False
            lines.extend("    " + ln for ln in report.format().splitlines())
    return ok, lines


def cmd_gradcheck(args, resolved: dict) -> int:
    ok, lines = run_gradcheck(args.scope, args.tolerance, args.step)
    for line in lines:
        print(line)
    print("gradcheck: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 5


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualface", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dualface {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="JSON config file merged over defaults")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override synthetic.seed and train.seed")

    p = sub.add_parser("synth", help="generate the synthetic paired dataset")
    p.add_argument("--out", required=True)
    common(p, seed=True)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--out", required=True)
    common(p, seed=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--predict-gt", action="store_true", help="score ground truth against itself (metric oracle)")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("animate", help="drive face motion from a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--frames", type=int, help="resample features to this many frames first")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--obj-every", type=int, help="export every Nth frame as OBJ (needs --template)")
    p.add_argument("--template", help="template file for OBJ export")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("lipread", help="recover audio features from motion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference verification of gradients")
    p.add_argument("--scope", default="full", choices=["op", "block", "full"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    common(p)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds starting at train.seed")
    p.add_argument("--out", required=True)
    common(p, seed=True)

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "animate": cmd_animate,
    "lipread": cmd_lipread,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    _print_resolved(args.command, resolved)
    try:
        return _HANDLERS[args.command](args, resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (FileFormatError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
