"""Command-line surface: dataset synthesis, per-stage training, scene
generation, reconstruction refinement, format conversion and evaluation.

Every command is deterministic given --seed; the seed and the checkpoint
hashes are echoed into a JSON manifest next to the outputs.  Exit codes:
0 success, 2 input error, 3 degenerate-layout abort, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cascade import (CascadeConfig, LatentStats, StageConfig, generate_scene,
                      make_schedule, train_stage)
from .diffusion import Denoiser, DenoiserSpec
from .errors import DegenerateLayoutError, NumericalError
from .formats import (file_sha256, load_checkpoint, load_svox, load_tsdf,
                      save_checkpoint, save_svox, save_tsdf)
from .fusion import FusionPolicy, refine_from_occupancy
from .geometry import (TsdfVolume, load_mesh, marching_cubes, save_mesh,
                       synthetic_rooms)
from .grids import OccupancyMask, SparseVolume
from .metrics import (format_normal_grid, format_quality_grid,
                      mesh_quality_summary, normal_error)
from .vq import OccupancyVq, VqLossWeights, VqSpec, VqTrainConfig, VqTrainer

# paper-reported constants are the defaults; everything is overridable via
# the INI config file and then by command-line flags
DEFAULTS = {
    "data": {
        "voxel_size": 0.04,
        "truncation": 0.12,
        "extent": "64x64x32",
        "count": 32,
    },
    "vq": {
        "embed_dim": 4,
        "codebook_size": 8192,
        "enc_channels": "8,16,32,32",
        "dec_channels": "32,32",
        "blocks": 1,
        "quantizer": "gumbel",
        "lr": 1e-5,
        "steps": 1000,
        "batch_size": 1,
        "lambda_vq": 1.0,
        "lambda_gan": 0.2,
        "gan": False,
        "gan_start_step": 0,
        "disc_lr": 1e-5,
    },
    "stage1": {
        "channels": "16,32",
        "blocks_per_level": 1,
        "attention_levels": "0,1",
        "heads": 2,
        "emb_dim": 16,
        "schedule": "cosine",
        "timesteps": 2000,
        "beta_start": 1e-6,
        "beta_end": 0.01,
        "lr": 1e-4,
        "lr_final": 0.0,
        "steps": 1000,
        "batch_size": 1,
        "sample_steps": 200,
        "sample_method": "ddim",
    },
    "stage2": {
        "channels": "16,32",
        "blocks_per_level": 1,
        "attention_levels": "1",
        "heads": 2,
        "emb_dim": 16,
        "schedule": "cosine",
        "timesteps": 2000,
        "beta_start": 1e-6,
        "beta_end": 0.01,
        "lr": 1e-4,
        "lr_final": 0.0,
        "steps": 1000,
        "batch_size": 1,
        "sample_steps": 200,
        "sample_method": "ddim",
    },
    "stage3": {
        "channels": "16,32",
        "blocks_per_level": 1,
        "attention_levels": "1",
        "heads": 2,
        "emb_dim": 16,
        "schedule": "linear",
        "timesteps": 2000,
        "beta_start": 1e-6,
        "beta_end": 0.01,
        "lr": 1e-4,
        "lr_final": 0.0,
        "steps": 1000,
        "batch_size": 1,
        "sample_steps": 100,
        "sample_method": "ddim",
        "condition": "latents",
    },
    "fusion": {
        "crop_size": 96,
        "overlap": 32,
        "mode": "stochastic",
    },
    "eval": {
        "samples": 100000,
    },
}


@dataclass
class RunConfig:
    """Effective settings of one invocation: defaults, then the config
    file, then command-line overrides."""

    sections: dict

    def __getitem__(self, section):
        return self.sections[section]


def load_config(path: str | None) -> RunConfig:
    sections = {k: dict(v) for k, v in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in sections:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in sections[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                default = sections[section][key]
                if isinstance(default, bool):
                    sections[section][key] = raw.strip().lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    sections[section][key] = int(raw)
                elif isinstance(default, float):
                    sections[section][key] = float(raw)
                else:
                    sections[section][key] = raw.strip()
    return RunConfig(sections)


def _ints(csv: str) -> tuple[int, ...]:
    csv = str(csv).strip()
    if not csv:
        return ()
    return tuple(int(x) for x in csv.split(","))


def _extent(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in str(text).lower().split("x")]
    if len(parts) != 3:
        raise ValueError(f"extent must look like 64x64x32, got {text!r}")
    return tuple(parts)


def _denoiser_spec(section: dict, in_channels: int, cond_channels: int) -> DenoiserSpec:
    return DenoiserSpec(
        in_channels=in_channels,
        cond_channels=cond_channels,
        channels=_ints(section["channels"]),
        blocks_per_level=int(section["blocks_per_level"]),
        attention_levels=_ints(section["attention_levels"]),
        heads=int(section["heads"]),
        emb_dim=int(section["emb_dim"]),
    )


def _write_manifest(out_dir: Path, payload: dict):
    payload = dict(payload)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# checkpoint helpers


def _save_vq(path, model: OccupancyVq, extra_meta=None):
    meta = {"kind": "vq", "spec": model.spec.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, model.state_dict(), meta)


def _load_vq(path) -> OccupancyVq:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "vq":
        raise ValueError(f"{path}: not an autoencoder checkpoint")
    model = OccupancyVq(VqSpec.from_dict(meta["spec"]))
    model.load_state_dict(arrays)
    return model


def _save_stage(path, stage: int, den: Denoiser, section: dict,
                stats1: LatentStats, stats2: LatentStats, steps_trained: int,
                condition: str):
    meta = {
        "kind": f"stage{stage}",
        "spec": den.spec.to_dict(),
        "schedule": {"kind": section["schedule"], "T": int(section["timesteps"]),
                     "beta_start": float(section["beta_start"]),
                     "beta_end": float(section["beta_end"])},
        "sample_steps": int(section["sample_steps"]),
        "sample_method": section.get("sample_method", "ddim"),
        "stats1": stats1.to_dict(),
        "stats2": stats2.to_dict(),
        "steps_trained": steps_trained,
        "condition": condition,
    }
    save_checkpoint(path, den.state_dict(), meta)


def _load_stage(path, stage: int):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != f"stage{stage}":
        raise ValueError(f"{path}: expected a stage-{stage} checkpoint, "
                         f"found {meta.get('kind')}")
    den = Denoiser(DenoiserSpec.from_dict(meta["spec"]))
    den.load_state_dict(arrays)
    sched = make_schedule(meta["schedule"]["kind"], meta["schedule"]["T"],
                          meta["schedule"]["beta_start"], meta["schedule"]["beta_end"])
    cfg = StageConfig(den.spec, sched, int(meta["sample_steps"]),
                      method=meta.get("sample_method", "ddim"))
    stats1 = LatentStats.from_dict(meta["stats1"])
    stats2 = LatentStats.from_dict(meta["stats2"])
    return den, cfg, stats1, stats2, meta


def _load_dataset(data_dir: Path):
    files = sorted(Path(data_dir).glob("*.tsdf"))
    if not files:
        raise ValueError(f"no .tsdf files in {data_dir}")
    return [load_tsdf(f) for f in files], files


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    data = cfg["data"]
    extent = _extent(args.extent or data["extent"])
    count = args.count if args.count is not None else int(data["count"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rooms = synthetic_rooms(args.seed, extent=extent, count=count,
                            voxel_size=float(data["voxel_size"]),
                            truncation=float(data["truncation"]))
    checksums = {}
    for i, (tsdf, mesh) in enumerate(rooms):
        tname = f"room_{i:04d}.tsdf"
        mname = f"room_{i:04d}.ply"
        save_tsdf(tsdf, out / tname)
        save_mesh(mesh, out / mname)
        checksums[tname] = file_sha256(out / tname)
        checksums[mname] = file_sha256(out / mname)
    _write_manifest(out, {"command": "synth", "seed": args.seed,
                          "extent": list(extent), "count": count,
                          "voxel_size": float(data["voxel_size"]),
                          "truncation": float(data["truncation"]),
                          "files": checksums})
    print(f"wrote {count} rooms to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.stage not in ("vq", "1", "2", "3"):
        raise ValueError(f"unknown stage {args.stage!r} (use vq, 1, 2 or 3)")
    tsdfs, _ = _load_dataset(args.data)
    volumes = [t.volume for t in tsdfs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.stage == "vq":
        sec = cfg["vq"]
        spec = VqSpec(embed_dim=int(sec["embed_dim"]),
                      codebook_size=int(sec["codebook_size"]),
                      enc_channels=_ints(sec["enc_channels"]),
                      dec_channels=_ints(sec["dec_channels"]),
                      blocks=int(sec["blocks"]),
                      quantizer=sec["quantizer"])
        steps = args.steps or int(sec["steps"])
        prev_steps = 0
        model = OccupancyVq(spec, seed=args.seed)
        if args.resume:
            arrays, meta = load_checkpoint(args.resume)
            model = OccupancyVq(VqSpec.from_dict(meta["spec"]), seed=args.seed)
            model.load_state_dict(arrays)
            prev_steps = int(meta.get("steps_trained", 0))
        train_cfg = VqTrainConfig(lr=float(sec["lr"]), steps=steps,
                                  batch_size=int(sec["batch_size"]),
                                  gan_enabled=bool(sec["gan"]),
                                  gan_start_step=int(sec["gan_start_step"]),
                                  disc_lr=float(sec["disc_lr"]))
        weights = VqLossWeights(vq=float(sec["lambda_vq"]),
                                gan=float(sec["lambda_gan"]))
        trainer = VqTrainer(model, train_cfg, weights, seed=args.seed)
        rng = np.random.default_rng(args.seed)
        for step in range(steps):
            idx = rng.integers(0, len(volumes), size=train_cfg.batch_size)
            report = trainer.train_step([volumes[i] for i in idx])
            if args.log_every and (step + 1) % args.log_every == 0:
                print(f"vq step {step + 1}/{steps} "
                      f"total {report['total']:.4f} rec {report['rec']:.4f} "
                      f"l1={report['lambda1']:.2f} l2={report['lambda2']:.2f}")
        _save_vq(out, model, {"steps_trained": prev_steps + steps})
        print(f"saved {out} (steps_trained={prev_steps + steps})")
        return 0

    stage = int(args.stage)
    if not args.vq:
        raise ValueError("training a diffusion stage requires --vq CHECKPOINT")
    vq = _load_vq(args.vq)
    sec = cfg[f"stage{stage}"]
    d = vq.spec.embed_dim
    condition = sec.get("condition", "latents") if stage == 3 else "latents"
    if stage == 1:
        in_ch, cond_ch = d, 0
    elif stage == 2:
        in_ch, cond_ch = d, d
    else:
        in_ch = 1
        cond_ch = {"latents": 2 * d, "tsdf": 1, "none": 0}[condition]
    spec = _denoiser_spec(sec, in_ch, cond_ch)
    sched = make_schedule(sec["schedule"], int(args.timesteps or sec["timesteps"]),
                          float(sec["beta_start"]), float(sec["beta_end"]))
    steps = args.steps or int(sec["steps"])
    den = None
    prev_steps = 0
    if args.resume:
        den, _, s1, s2, meta = _load_stage(args.resume, stage)
        prev_steps = int(meta.get("steps_trained", 0))
    lr_final = float(sec.get("lr_final", 0.0)) or None
    den, stats1, stats2, history = train_stage(
        stage, vq, volumes, spec, sched, steps, lr=float(sec["lr"]),
        lr_final=lr_final, batch_size=int(sec["batch_size"]), seed=args.seed,
        condition_mode=condition, denoiser=den,
        log_every=args.log_every or 0)
    sec = dict(sec)
    if args.timesteps:
        sec["timesteps"] = args.timesteps
    _save_stage(out, stage, den, sec, stats1, stats2, prev_steps + steps, condition)
    print(f"saved {out} (steps_trained={prev_steps + steps}, "
          f"final loss {history[-1]:.4f})")
    return 0


def _build_cascade(args, cfg) -> tuple[CascadeConfig, dict]:
    vq = _load_vq(args.vq)
    stages = {}
    hashes = {"vq": file_sha256(args.vq)}
    for n, path in ((1, args.stage1), (2, args.stage2), (3, args.stage3)):
        den, stage_cfg, stats1, stats2, _ = _load_stage(path, n)
        if args.steps:
            stage_cfg.sample_steps = args.steps
        stats = stats1 if n == 1 else stats2
        stages[n] = (den, stage_cfg, stats)
        hashes[f"stage{n}"] = file_sha256(path)
    # conditioning stats for stages 2/3 come from their own checkpoints
    fusion = cfg["fusion"]
    cascade = CascadeConfig(vq=vq, stages=stages,
                            crop_size=int(fusion["crop_size"]),
                            overlap=int(fusion["overlap"]))
    return cascade, hashes


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    cascade, hashes = _build_cascade(args, cfg)
    extent = _extent(args.extent)
    data = cfg["data"]
    fusion_mode = args.fusion or cfg["fusion"]["mode"]
    art = generate_scene(cascade, extent, args.seed, fusion_mode=fusion_mode,
                         threads=args.threads,
                         voxel_size=float(data["voxel_size"]),
                         truncation=float(data["truncation"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_svox(art.tsdf, out / "scene.svox")
    tsdf = TsdfVolume(art.tsdf, float(data["voxel_size"]), float(data["truncation"]))
    save_tsdf(tsdf, out / "scene.tsdf")
    save_svox(art.z1.volume, out / "z1.svox")
    save_svox(art.z2.volume, out / "z2.svox")
    if art.mesh is not None and art.mesh.n_triangles:
        save_mesh(art.mesh, out / "scene.ply")
    _write_manifest(out, {"command": "generate", "seed": args.seed,
                          "extent": list(extent), "fusion": fusion_mode,
                          "threads": args.threads, "checkpoints": hashes,
                          "active_voxels": art.tsdf.n_active})
    print(f"generated scene with {art.tsdf.n_active} active voxels -> {out}")
    return 0


def cmd_refine(args) -> int:
    cfg = load_config(args.config)
    den, stage_cfg, _, _, meta = _load_stage(args.checkpoint, 3)
    if args.steps:
        stage_cfg.sample_steps = args.steps
    in_path = Path(args.occupancy)
    if in_path.suffix == ".svox":
        occ_vol = load_svox(in_path)
        occupancy = occ_vol.mask()
    elif in_path.suffix == ".tsdf":
        occupancy = load_tsdf(in_path).volume.mask()
    else:
        raise ValueError("occupancy must be an .svox or .tsdf file")
    condition = None
    if args.condition:
        cvol = load_tsdf(args.condition).volume
        condition = cvol
    fusion = cfg["fusion"]
    mode = args.fusion or fusion["mode"]
    policy = FusionPolicy(mode, args.seed)
    x = refine_from_occupancy(occupancy, condition, den, stage_cfg.schedule,
                              policy, stage_cfg.sample_steps,
                              np.random.default_rng([args.seed, 3]),
                              crop_size=int(fusion["crop_size"]),
                              overlap=int(fusion["overlap"]),
                              method=stage_cfg.method,
                              threads=args.threads)
    data = cfg["data"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_svox(x, out / "refined.svox")
    tsdf = TsdfVolume(x, float(data["voxel_size"]), float(data["truncation"]))
    save_tsdf(tsdf, out / "refined.tsdf")
    mesh = marching_cubes(tsdf)
    if mesh.n_triangles:
        save_mesh(mesh, out / "refined.ply")
    _write_manifest(out, {"command": "refine", "seed": args.seed,
                          "fusion": mode, "threads": args.threads,
                          "conditioned": condition is not None,
                          "checkpoints": {"stage3": file_sha256(args.checkpoint)},
                          "active_voxels": x.n_active})
    print(f"refined {x.n_active} voxels -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pred = load_mesh(args.pred)
    lines = [format_quality_grid(mesh_quality_summary(pred), label=str(args.pred))]
    report_kv = {}
    for key, val in mesh_quality_summary(pred).items():
        report_kv[f"pred_{key}"] = val
    if args.gt:
        gt = load_mesh(args.gt)
        samples = args.samples or int(cfg["eval"]["samples"])
        rep = normal_error(pred, gt, samples=samples,
                           rng=np.random.default_rng(args.seed))
        lines.append(format_normal_grid(rep))
        report_kv.update(rep.as_dict())
        lines.append(format_quality_grid(mesh_quality_summary(gt), label="reference"))
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            for key in sorted(report_kv):
                f.write(f"{key}={report_kv[key]}\n")
    return 0


def cmd_convert(args) -> int:
    src = Path(args.src)
    dst = Path(args.out)
    cfg = load_config(args.config)
    data = cfg["data"]
    if src.suffix == ".tsdf" and dst.suffix in (".ply", ".obj"):
        mesh = marching_cubes(load_tsdf(src))
        save_mesh(mesh, dst)
    elif src.suffix == ".tsdf" and dst.suffix == ".svox":
        save_svox(load_tsdf(src).volume, dst)
    elif src.suffix == ".svox" and dst.suffix == ".tsdf":
        vol = load_svox(src)
        save_tsdf(TsdfVolume(vol, float(data["voxel_size"]),
                             float(data["truncation"])), dst)
    elif src.suffix in (".ply", ".obj") and dst.suffix in (".ply", ".obj"):
        save_mesh(load_mesh(src), dst)
    else:
        raise ValueError(f"unsupported conversion {src.suffix} -> {dst.suffix}")
    print(f"wrote {dst}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomdiff",
                                description="sparse cascaded TSDF diffusion")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", default=None, help="INI config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="RNG seed (default: drawn and logged)")

    sp = sub.add_parser("synth", help="generate a synthetic room dataset")
    common(sp)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--extent", default=None, help="HxWxL voxels")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train the autoencoder or one stage")
    common(sp)
    sp.add_argument("--stage", required=True, help="vq | 1 | 2 | 3")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output checkpoint")
    sp.add_argument("--vq", default=None, help="autoencoder checkpoint (stages)")
    sp.add_argument("--resume", default=None, help="continue from a checkpoint")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--timesteps", type=int, default=None)
    sp.add_argument("--log-every", type=int, default=0)

    sp = sub.add_parser("generate", help="sample a scene through all stages")
    common(sp)
    sp.add_argument("--vq", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--stage3", required=True)
    sp.add_argument("--extent", required=True, help="HxWxL voxels")
    sp.add_argument("--fusion", choices=["stochastic", "average", "independent"],
                    default=None)
    sp.add_argument("--steps", type=int, default=None, help="sampler steps")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("refine", help="TSDF generation on a given occupancy")
    common(sp)
    sp.add_argument("--occupancy", required=True, help=".svox or .tsdf input")
    sp.add_argument("--condition", default=None, help="optional TSDF condition")
    sp.add_argument("--checkpoint", required=True, help="stage-3 checkpoint")
    sp.add_argument("--fusion", choices=["stochastic", "average", "independent"],
                    default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="mesh quality and normal-error report")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", default=None)
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--out", default=None, help="key=value report file")

    sp = sub.add_parser("convert", help="convert between volume/mesh formats")
    common(sp, seed=False)
    sp.add_argument("--in", required=True, dest="src")
    sp.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "convert": cmd_convert,
}

EXIT_INPUT_ERROR = 2
EXIT_DEGENERATE = 3
EXIT_NUMERICAL = 4


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "convert":
        args.seed = int(np.random.SeedSequence().entropy % (2 ** 31))
        print(f"seed not given; using {args.seed}")
    try:
        return COMMANDS[args.command](args)
    except DegenerateLayoutError as e:
        print(f"degenerate layout: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
