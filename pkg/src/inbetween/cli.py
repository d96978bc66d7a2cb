"""Command line entry point: ``python3 -m inbetween <command> [flags]``.

Every command reads one YAML config (the bundled toy config when
``--config`` is omitted), applies flag overrides, writes its artifacts
under ``--out`` and finishes with a ``manifest.txt`` that can be passed
back as ``--config`` to repeat the run.
"""

import argparse
import copy
import csv
import hashlib
import subprocess
import sys
import time
import zlib
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bvh import clip_to_bvh, load_clips, save_bvh
from .diffusion import DenoiserConfig, TrainConfig, load_model, sample_inbetween_batch, save_model, train_diffusion
from .diffusion import write_history as write_diffusion_history
from .errors import ConfigError, InbetweenError, IoError, SimDiverged
from .metrics import (AutoencoderConfig, evaluate, interpolation_baseline, keyframe_indices, train_autoencoder,
                      write_metrics_csv)
from .motion import MotionClip, clip_to_poses, extract_features
from .physics import Environment, load_character, load_environment, toy_biped
from .retarget import JointMapping, Pose, load_mapping, reference_features, retarget_pose, scale_environment
from .rl import (PPOConfig, RewardWeights, TrackingConfig, load_policy, refine_motion, save_policy, track,
                 train_controller, write_history)
from .synth import GaitParams, SynthConfig, add_root_drift, canonical_skeleton, gait_clip, synth_dataset

COMMANDS = ("synth", "train-diffusion", "sample", "retarget", "train-controller", "adapt", "eval", "pipeline")
BUILTIN_CHARACTERS = {"toy_biped": toy_biped}


# config ----------------------------------------------------------------------


def bundled_config() -> dict:
    text = resources.files("inbetween").joinpath("configs/toy.yaml").read_text()
    return yaml.safe_load(text)


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are errors so typos do not pass silently."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """The bundled defaults overlaid with ``path`` (a config file or a run manifest)."""
    base = bundled_config()
    if path is None:
        return base
    p = Path(path)
    if not p.is_file():
        raise IoError(f"config file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: expected a key/value tree")
    if "manifest" in doc:
        doc = doc["config"]
    return merge(base, doc)


def check_paths(cfg: dict) -> None:
    d, s2 = cfg["dataset"], cfg["stage2"]
    candidates = []
    if d["source"] == "bvh":
        candidates.append(d["bvh_dir"])
    if s2["character"] not in BUILTIN_CHARACTERS:
        candidates.append(s2["character"])
    if s2["environment"]:
        candidates.append(s2["environment"])
    if isinstance(s2["mapping"], str):
        candidates.append(s2["mapping"])
    for c in candidates:
        if c is None or not Path(c).exists():
            raise IoError(f"config path {c!r} does not exist")


def subset(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items() if k in names}
    kwargs.update(extra)
    return cls(**kwargs)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named part of an experiment."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def subseed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31))


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """Output directory, config and the artifacts written so far."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.seed = int(cfg["seed"])
        self.artifacts = []
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def log(self, msg: str) -> None:
        print(f"[{self.command} {time.time() - self.started:7.1f}s] {msg}", flush=True)

    def write_manifest(self) -> Path:
        doc = {"manifest": 1, "command": self.command, "version": version_string(), "seed": self.seed,
               "artifacts": sorted(set(self.artifacts)), "config": self.cfg}
        p = self.out / "manifest.txt"
        p.write_text(yaml.safe_dump(doc, sort_keys=True))
        return p


# helpers -----------------------------------------------------------------------


def _canonical(cfg):
    return canonical_skeleton(cfg["dataset"]["skeleton"])


def _as_canonical(clips, skeleton):
    """Re-attach the canonical skeleton (BVH files lose its name and hip height)."""
    out = []
    for c in clips:
        if [j.name for j in c.skeleton.joints] != [j.name for j in skeleton.joints]:
            raise ConfigError(f"clip joints {c.skeleton.names} do not match skeleton {skeleton.name}")
        out.append(MotionClip(c.frames, skeleton, c.fps, c.keyframe_indices))
    return out


def _synth_config(section: dict, skeleton: str, n_clips: int, n_frames: int) -> SynthConfig:
    return subset(SynthConfig, section, skeleton=skeleton, n_clips=n_clips, n_frames=n_frames)


def _write_clips(run: Run, folder: str, prefix: str, clips) -> None:
    for i, c in enumerate(clips):
        save_bvh(clip_to_bvh(c), run.path(f"{folder}/{prefix}_{i:03d}.bvh"))


def _read_clips(path, skeleton=None, prefix: str = ""):
    p = Path(path)
    if not p.exists():
        raise IoError(f"{p} does not exist")
    if p.is_dir() and prefix:
        files = sorted(p.glob(f"{prefix}_*.bvh"))
        clips = [c for f in files for c in load_clips(f)]
    else:
        clips = load_clips(p)
    if not clips:
        raise IoError(f"no BVH clips found in {p}")
    return _as_canonical(clips, skeleton) if skeleton is not None else clips


def training_clips(cfg):
    d = cfg["dataset"]
    if d["source"] == "bvh":
        return _as_canonical(load_clips(d["bvh_dir"], d["bvh_scale"]), _canonical(cfg))
    if d["source"] != "synth":
        raise ConfigError(f"dataset.source must be 'synth' or 'bvh', not {d['source']!r}")
    sc = _synth_config(d["synth"], d["skeleton"], d["n_clips"], d["n_frames"])
    return synth_dataset(sc, subseed(cfg["seed"], "data"))


def heldout_clips(cfg, n_frames: int):
    d = cfg["dataset"]
    sc = _synth_config(d["synth"], d["skeleton"], d["holdout_clips"], n_frames)
    return synth_dataset(sc, subseed(cfg["seed"], "heldout"))


def load_stage2(cfg):
    s2 = cfg["stage2"]
    name = s2["character"]
    character = BUILTIN_CHARACTERS[name]() if name in BUILTIN_CHARACTERS else load_character(name)
    env = load_environment(s2["environment"]) if s2["environment"] else Environment()
    canon = _canonical(cfg)
    if isinstance(s2["mapping"], str):
        mapping = load_mapping(s2["mapping"], canon, character.skeleton)
    else:
        mapping = JointMapping.from_names([tuple(p) for p in s2["mapping"]], canon, character.skeleton)
    if s2["scale_colliders"]:
        env = scale_environment(env, character.hip_height / canon.hip_height)
    return character, env, mapping


def retarget_clip(clip: MotionClip, mapping: JointMapping, target) -> MotionClip:
    root, rots = clip_to_poses(clip)
    out = retarget_pose(Pose(root, rots), mapping, clip.skeleton, target)
    return extract_features(out.root_pos, out.local_rots, target, clip.fps, clip.keyframe_indices)


def stage2_references(cfg, character, mapping):
    """Training references for the controller: procedural clips on the canonical skeleton."""
    s2, canon = cfg["stage2"], _canonical(cfg)
    ref = s2["reference"]
    rng = substream(cfg["seed"], "references")
    clips = []
    for _ in range(ref["n_clips"]):
        params = GaitParams(kind=ref["kind"], amplitude=rng.uniform(*ref["amplitude_range"]),
                            frequency=rng.uniform(*ref["frequency_range"]), heading=rng.uniform(-np.pi, np.pi))
        clip = gait_clip(params, canon, ref["frames"])
        if ref["max_drift"] > 0:
            a = rng.uniform(-np.pi, np.pi)
            clip = add_root_drift(clip, rng.uniform(0, ref["max_drift"]) * np.array([np.sin(a), 0.0, np.cos(a)]))
        clips.append(clip)
    return clips, [reference_features(c, mapping, character) for c in clips]


def ppo_config(cfg) -> PPOConfig:
    s2 = cfg["stage2"]
    return subset(PPOConfig, s2["ppo"], seed=subseed(cfg["seed"], "rollout"),
                  tracking=subset(TrackingConfig, s2["tracking"]))


# commands ----------------------------------------------------------------------


def cmd_synth(run: Run, args) -> None:
    clips = training_clips(run.cfg)
    _write_clips(run, "dataset", "clip", clips)
    digest = hashlib.sha256(b"".join((run.out / f"dataset/clip_{i:03d}.bvh").read_bytes()
                                     for i in range(len(clips)))).hexdigest()
    run.log(f"wrote {len(clips)} clips, sha256 {digest[:16]}")


def _encoder(cfg):
    m, d = cfg["metrics"], cfg["dataset"]
    sc = _synth_config(m["encoder_synth"], d["skeleton"], m["encoder_clips"], d["n_frames"])
    enc = train_autoencoder(synth_dataset(sc, subseed(cfg["seed"], "encoder")),
                            subset(AutoencoderConfig, m["autoencoder"], seed=subseed(cfg["seed"], "encoder")))
    return enc


def cmd_train_diffusion(run: Run, args) -> None:
    cfg = run.cfg
    clips = training_clips(cfg)
    tc = subset(TrainConfig, cfg["diffusion"]["train"], seed=subseed(cfg["seed"], "diffusion"))
    mc = subset(DenoiserConfig, cfg["diffusion"]["model"], dim=clips[0].skeleton.feature_dim,
                skeleton=cfg["dataset"]["skeleton"])
    run.log(f"training denoiser on {len(clips)} clips for {tc.steps} steps")
    model, _, history = train_diffusion(clips, tc, mc)
    save_model(run.path("denoiser.ibck"), model)
    write_diffusion_history(run.path("diffusion_train.csv"), history)
    run.log(f"final loss {history[-1]['L_total']:.4f}" if history else "no steps")


def _checkpoint(args, run: Run, default: str) -> Path:
    p = Path(args.checkpoint) if args.checkpoint else run.out / default
    if not p.is_file():
        raise IoError(f"checkpoint {p} does not exist")
    return p


def cmd_sample(run: Run, args) -> None:
    cfg = run.cfg
    model, schedule = load_model(_checkpoint(args, run, "denoiser.ibck"))
    n, interval = cfg["sample"]["frames"], cfg["sample"]["keyframe_interval"]
    gt = heldout_clips(cfg, n)
    idx = keyframe_indices(n, interval)
    gen = sample_inbetween_batch(model, schedule, [c.frames[idx] for c in gt], [idx] * len(gt), n,
                                 substream(cfg["seed"], "sampling"), _canonical(cfg))
    interp = [interpolation_baseline(c.frames[idx], idx, n, c.skeleton) for c in gt]
    _write_clips(run, "samples", "gt", gt)
    _write_clips(run, "samples", "sample", gen)
    _write_clips(run, "samples", "interp", interp)
    run.log(f"sampled {len(gen)} clips of {n} frames, keyframes {idx}")


def cmd_retarget(run: Run, args) -> None:
    cfg = run.cfg
    character, _, mapping = load_stage2(cfg)
    src = Path(args.input) if args.input else run.out / "samples"
    clips = _read_clips(src, _canonical(cfg), "" if args.input else "sample")
    out = [retarget_clip(c, mapping, character.skeleton) for c in clips]
    _write_clips(run, "retargeted", "clip", out)
    run.log(f"retargeted {len(out)} clips onto {character.skeleton.name}")


def cmd_train_controller(run: Run, args) -> None:
    cfg = run.cfg
    character, env, mapping = load_stage2(cfg)
    _, refs = stage2_references(cfg, character, mapping)
    pc = ppo_config(cfg)
    run.log(f"PPO on {character.skeleton.name}: {pc.iterations} iterations x {pc.n_envs} envs x {pc.horizon} steps")

    def progress(it, row, _):
        if it % 50 == 0 or it == pc.iterations - 1:
            run.log(f"iteration {it} mean reward {row['mean_reward']:.3f}")

    policy, history = train_controller(character, env, refs, pc, RewardWeights(**cfg["stage2"]["reward"]),
                                       callback=progress)
    write_history(run.path("controller_train.csv"), history)
    save_policy(run.path("policy.ibck"), policy, pc.tracking, character=character.skeleton.name)


def cmd_adapt(run: Run, args) -> None:
    cfg = run.cfg
    character, env, mapping = load_stage2(cfg)
    policy, tracking, _ = load_policy(_checkpoint(args, run, "policy.ibck"))
    src = Path(args.input) if args.input else run.out / "samples"
    clips = _read_clips(src, _canonical(cfg), "" if args.input else "sample")
    window = cfg["stage2"]["correction_window"]
    interval = args.keyframe_interval or cfg["sample"]["keyframe_interval"]
    rows = []
    for i, clip in enumerate(clips):
        ref = reference_features(clip, mapping, character)
        keys = keyframe_indices(ref.n_frames, interval)
        targets = character.root_position(ref.q[keys])

        def key_error(res):
            return float(100 * np.linalg.norm(character.root_position(res.q[keys]) - targets, axis=1).mean())
        try:
            res = first = track(policy, character, env, ref, tracking)
            if window:
                first, res = refine_motion(policy, character, env, ref, dict(zip(keys, targets)), window, tracking)
        except SimDiverged as exc:
            rows.append({"clip_id": i, "status": f"diverged at frame {exc.frame}", "mean_reward": "",
                         "max_foot_penetration_mm": "", "keyframe_root_error_cm": "", "corrected_error_cm": ""})
            continue
        save_bvh(clip_to_bvh(res.clip), run.path(f"adapted/clip_{i:03d}.bvh"))
        rows.append({"clip_id": i, "status": "ok", "mean_reward": float(res.rewards.mean()),
                     "max_foot_penetration_mm": float(1000 * res.foot_penetration.max()),
                     "keyframe_root_error_cm": key_error(first),
                     "corrected_error_cm": key_error(res) if window else ""})
    with open(run.path("adapt.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ok = [r for r in rows if r["status"] == "ok"]
    run.log(f"adapted {len(ok)}/{len(rows)} clips" +
            (f", mean reward {np.mean([r['mean_reward'] for r in ok]):.3f}" if ok else ""))


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    canon = _canonical(cfg)
    samples = run.out / "samples"
    gen_src = Path(args.input) if args.input else samples
    ref_src = Path(args.reference) if args.reference else samples
    gen = _read_clips(gen_src, canon, "" if args.input else "sample")
    ref = _read_clips(ref_src, canon, "" if args.reference else "gt")
    if len(gen) != len(ref):
        raise ConfigError(f"{len(gen)} generated clips but {len(ref)} references")
    interval = cfg["sample"]["keyframe_interval"]
    idx = keyframe_indices(gen[0].n_frames, interval)
    gen = [MotionClip(g.frames, canon, g.fps, idx) for g in gen]
    enc = _encoder(cfg)
    report = evaluate(gen, ref, enc, interval, cfg["metrics"]["num_pairs"], subseed(cfg["seed"], "metrics"))
    write_metrics_csv(run.path("metrics.csv"), report)
    run.log(f"K-FID {report.k_fid:.3f}  K-Diversity {report.k_diversity:.3f}  K-Error {report.k_error:.3f} cm")
    if not args.input and (samples / "interp_000.bvh").exists():
        interp = [MotionClip(c.frames, canon, c.fps, idx) for c in _read_clips(samples, canon, "interp")]
        base = evaluate(interp, ref, enc, interval, cfg["metrics"]["num_pairs"], subseed(cfg["seed"], "metrics"))
        write_metrics_csv(run.path("metrics_interpolation.csv"), base)
        run.log(f"interpolation K-FID {base.k_fid:.3f}  K-Error {base.k_error:.3f} cm")


def cmd_pipeline(run: Run, args) -> None:
    for name, fn in (("synth", cmd_synth), ("train-diffusion", cmd_train_diffusion), ("sample", cmd_sample),
                     ("eval", cmd_eval), ("retarget", cmd_retarget), ("train-controller", cmd_train_controller),
                     ("adapt", cmd_adapt)):
        run.command = f"pipeline:{name}"
        fn(run, args)
    run.command = "pipeline"


HANDLERS = {"synth": cmd_synth, "train-diffusion": cmd_train_diffusion, "sample": cmd_sample,
            "retarget": cmd_retarget, "train-controller": cmd_train_controller, "adapt": cmd_adapt,
            "eval": cmd_eval, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inbetween", description="Keyframe in-betweening with diffusion and "
                                     "physics-based adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config or a previous run's manifest.txt (default: bundled toy config)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="denoiser (sample) or policy (adapt) checkpoint")
        p.add_argument("--frames", type=int, help="frames per sampled clip")
        p.add_argument("--keyframe-interval", type=int, help="frames between keyframes")
        p.add_argument("--input", help="BVH file or directory to process instead of the run's samples")
        p.add_argument("--reference", help="reference BVH file or directory for eval")
    return parser


def apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.frames is not None:
        cfg["sample"]["frames"] = args.frames
    if args.keyframe_interval is not None:
        cfg["sample"]["keyframe_interval"] = args.keyframe_interval
    if cfg["sample"]["frames"] < 2 or cfg["sample"]["keyframe_interval"] < 1:
        raise ConfigError("need frames >= 2 and keyframe interval >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        check_paths(cfg)
        run = Run(args.command, cfg, Path(cfg["out"]))
        HANDLERS[args.command](run, args)
        run.write_manifest()
    except InbetweenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
