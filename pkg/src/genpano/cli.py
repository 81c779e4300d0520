"""``genpano`` command line: synth, layout, train, generate, select, evaluate, demo."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ArtifactIOError, ConfigError, GenPanoError, NoModel, PipelineError

log = logging.getLogger("genpano")

WORKSPACE_ENV = "GENPANO_WORKSPACE"
RUN_CONFIG_NAME = "run_config.json"

# Desk-scale defaults: a 256x768 synthetic scene, 128-px tiles and a 4x patchify codec that
# keeps the 2x2 lowest frequencies. Fine-tuning rates are 10x the full-scale ones because the
# desk run takes 2000 small steps.
DEFAULTS = {
    "seed": 0,
    "scene": {"views": 3, "pano_dims": [256, 768], "jitter": True},
    "layout": {"images": None, "center_id": None, "focal": None, "pano_dims": None, "margin": 0.05,
               "motion_model": "rotation"},
    "posenc": {"f_min": 1.0, "f_max": 50.0, "channels": 12},
    "backbone": {"codec": {"name": "patchify", "patch": 4, "keep": 2}, "channels": [32, 64], "d_ctx": 64, "heads": 4,
                 "ctx_hidden": 32,
                 "pretrain": {"steps": 1500, "batch_size": 8, "lr": 1e-3, "n_textures": 12,
                              "texture_dims": [256, 512]}},
    "train": {"iterations": 2000, "batch_size": 8, "lr_lora": 1e-3, "lr_cross": 3e-3, "lr_ctx": 8e-3,
              "lora_rank": 8, "lora_alpha": 8.0, "weight_decay": 1e-2, "crop_size": 128,
              "checkpoint_every": 500},
    "generation": {"guidance": 1.5, "overlap": 0.2, "tile": 128, "steps": 50, "order": "distance",
                   "init_noise_level": 1.0, "start_id": None},
    "selection": {"seeds": 10, "reference": None},
    "evaluate": {"generated": None, "reference": None, "mask": None},
}


# -- configuration -------------------------------------------------------

def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and k != "codec":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(tree, dotted, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


@dataclass
class RunConfig:
    """Merged configuration (flags > file > defaults) with the origin of every value."""

    values: dict
    provenance: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, file_cfg: dict | None = None, flags: dict | None = None) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        prov = {k: "default" for k in _flatten(values)}
        known = set(prov)
        for source, layer in (("file", file_cfg or {}), ("flag", flags or {})):
            flat = _flatten(layer) if source == "file" else dict(layer)
            for k, v in flat.items():
                if v is None and source == "flag":
                    continue
                if k not in known:
                    raise ConfigError(f"unknown configuration key {k!r} (from {source})")
                _set(values, k, v)
                prov[k] = source
        return cls(values, prov)

    def get(self, dotted):
        node = self.values
        for p in dotted.split("."):
            node = node[p]
        return node

    def to_dict(self, command: str) -> dict:
        return {"command": command, "version": __version__, "config": self.values,
                "provenance": dict(sorted(self.provenance.items()))}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


# -- helpers -------------------------------------------------------------

def workspace_root(args) -> Path:
    root = args.workspace or os.environ.get(WORKSPACE_ENV)
    if not root:
        raise ConfigError(f"no workspace: pass --workspace or set {WORKSPACE_ENV}")
    return Path(root)


def prepare_output(path: Path, force: bool) -> Path:
    """Refuse to reuse a non-empty output directory unless ``force``."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_config(directory: Path, rc: RunConfig, command: str) -> None:
    from .scene_io import write_json
    write_json(Path(directory) / RUN_CONFIG_NAME, rc.to_dict(command))


def open_workspace(root: Path):
    from .scene_io import Workspace
    return Workspace.open(root)


def build_model(rc: RunConfig):
    from .backbone.model import InpaintModel
    b = rc.get("backbone")
    torch.manual_seed(int(rc.get("seed")))
    return InpaintModel.toy(channels=tuple(b["channels"]), d_ctx=b["d_ctx"], heads=b["heads"],
                            ctx_hidden=b["ctx_hidden"], codec=b["codec"],
                            posenc_channels=rc.get("posenc.channels"))


def generation_config(rc: RunConfig):
    from .generation import GenerationConfig
    g = dict(rc.get("generation"))
    g.pop("start_id", None)
    return GenerationConfig(**g)


# -- subcommands ---------------------------------------------------------

def cmd_synth(args, rc: RunConfig):
    from .scene_io import make_synthetic_scene, save_scene
    root = workspace_root(args)
    out = prepare_output(root / "scene", args.force)
    s = rc.get("scene")
    scene = make_synthetic_scene(int(rc.get("seed")), s["views"], tuple(s["pano_dims"]),
                                 jitter=None if s["jitter"] else False)
    save_scene(scene, out)
    write_run_config(out, rc, "synth")
    print(f"synthetic scene: {len(scene.views)} views of {scene.view_dims[1]}x{scene.view_dims[0]} "
          f"over a {s['pano_dims'][1]}x{s['pano_dims'][0]} texture -> {out}")
    return scene


def cmd_layout(args, rc: RunConfig):
    from .layout import LayoutConfig, build_sparse_panoramas, save_layout
    from .posenc import build_posenc
    from .scene_io import load_references, read_json
    root = workspace_root(args)
    lc = rc.get("layout")
    images = Path(lc["images"]) if lc["images"] else root / "scene" / "refs"
    refs = load_references(images)
    center = lc["center_id"]
    focal = lc["focal"]
    scene_meta = images.parent / "scene.json"
    if scene_meta.exists() and (center is None or focal is None):
        meta = read_json(scene_meta)
        center = center or meta.get("center_id")
        focal = focal or meta.get("focal")
    center = center or refs[(len(refs) - 1) // 2].id
    dims = lc["pano_dims"]
    if dims is None and scene_meta.exists():
        dims = read_json(scene_meta).get("pano_dims")
    prepare_output(root / "sparse", args.force)
    out = prepare_output(root / "layout", args.force)
    sps = build_sparse_panoramas(refs, center, tuple(dims) if dims else None,
                                 LayoutConfig(focal=focal, margin=lc["margin"], motion_model=lc["motion_model"]))
    ws = open_workspace(root)
    pe = rc.get("posenc")
    params = build_posenc(*sps[0].dims, pe["f_min"], pe["f_max"], pe["channels"]).params()
    save_layout(ws, sps, center, "given" if dims else "auto", params)
    write_run_config(out, rc, "layout")
    H, W = sps[0].dims
    print(f"layout: {len(sps)} images on a {W}x{H} canvas, center {center}, focal {sps[0].frame.focal:.1f}")
    for sp in sps:
        ys, xs = np.nonzero(sp.valid)
        print(f"  {sp.source_id}: x {xs.min()}..{xs.max()}, y {ys.min()}..{ys.max()}, "
              f"coverage {sp.valid.mean():.3f}")
    return ws.manifest


def cmd_train(args, rc: RunConfig):
    from .backbone.model import save_checkpoint
    from .layout import load_layout
    from .posenc import build_posenc
    from .training import PretrainConfig, TrainConfig, pretrain_base, train
    root = workspace_root(args)
    ws = open_workspace(root)
    sps = load_layout(ws)
    out = prepare_output(ws.checkpoint_dir, args.force)
    pe = rc.get("posenc")
    posenc = build_posenc(*sps[0].dims, pe["f_min"], pe["f_max"], pe["channels"])
    seed = int(rc.get("seed"))
    model = build_model(rc)
    p = dict(rc.get("backbone.pretrain"))
    p["texture_dims"] = tuple(p["texture_dims"])
    pcfg = PretrainConfig(**p, seed=seed + 1_000_003, crop_size=rc.get("train.crop_size"))
    extra = {"pano_dims": list(sps[0].dims), "posenc": posenc.params(), "seed": seed}
    t0 = time.perf_counter()
    if pcfg.steps:
        losses = pretrain_base(model, pcfg)
        log.info("pretraining: %d steps, final loss %.4f", pcfg.steps, float(np.mean(losses[-50:])))
    save_checkpoint(out / "base.safetensors", model, {**extra, "stage": "pretrain", "pretrain": pcfg.to_dict()})
    tcfg = TrainConfig.from_dict({**rc.get("train"), "seed": seed})
    res = train(sps, posenc, tcfg, model, out_dir=out, extra_meta={**extra, "stage": "finetune"})
    write_run_config(out, rc, "train")
    frozen_ok = res.frozen_digest_before == res.frozen_digest_after
    print(f"train: {tcfg.iterations} steps in {time.perf_counter() - t0:.0f}s, "
          f"final loss {np.mean(res.losses[-50:]) if res.losses else float('nan'):.4f}, "
          f"frozen parameters unchanged: {frozen_ok}, checkpoint {out / 'final.safetensors'}")
    return res


def _checkpoint(ws, args):
    ck = Path(args.checkpoint) if getattr(args, "checkpoint", None) else ws.latest_checkpoint()
    if ck is None or not ck.exists():
        raise NoModel(f"missing checkpoint {ck or ws.checkpoint_dir / 'final.safetensors'}; run train first")
    return ck


def cmd_generate(args, rc: RunConfig):
    from .generation import generate_panorama
    from .scene_io import save_panorama
    root = workspace_root(args)
    ws = open_workspace(root)
    ck = _checkpoint(ws, args)
    seed = int(rc.get("seed"))
    out = prepare_output(root / "generate" / f"seed_{seed:03d}", args.force)
    state = generate_panorama(ws, ck, rc.get("generation.start_id"), seed, generation_config(rc))
    save_panorama(out / "panorama.png", state.pixels)
    write_run_config(out, rc, "generate")
    print(f"generate: seed {seed} -> {out / 'panorama.png'}")
    return state


def _reference(ws, rc, key="selection.reference"):
    from .scene_io import load_panorama
    ref = rc.get(key)
    path = Path(ref) if ref else ws.path("scene", "groundtruth.png")
    if not path.exists():
        raise ArtifactIOError(f"reference image not found: {path}")
    return load_panorama(path)[0], path


def _input_mask(ws, start_id=None):
    from .layout import load_layout
    start_id = start_id or ws.manifest["center_id"]
    return {sp.source_id: sp for sp in load_layout(ws)}[start_id].valid


def cmd_select(args, rc: RunConfig):
    from .scene_io import save_panorama
    from .selection import pick, select_best
    root = workspace_root(args)
    ws = open_workspace(root)
    ck = _checkpoint(ws, args)
    ref, ref_path = _reference(ws, rc)
    out = prepare_output(root / "select", args.force)
    start = rc.get("generation.start_id")
    state, scores = select_best(ws, ck, int(rc.get("selection.seeds")), ref, _input_mask(ws, start),
                                generation_config(rc), out_dir=out, start_id=start)
    best = pick(scores)
    save_panorama(out / "selected.png", state.pixels)
    write_run_config(out, rc, "select")
    print(f"select: {len(scores)} seeds scored against {ref_path}; seed {best.seed} wins with "
          f"{best.match_count} matches")
    return state, scores


def cmd_evaluate(args, rc: RunConfig):
    from .metrics import evaluate
    root = workspace_root(args)
    ws = open_workspace(root)
    e = rc.get("evaluate")
    gen = Path(e["generated"]) if e["generated"] else root / "select" / "selected.png"
    ref = Path(e["reference"]) if e["reference"] else root / "scene" / "groundtruth.png"
    mask = e["mask"] if e["mask"] else _input_mask(ws, rc.get("generation.start_id"))
    out = prepare_output(root / "eval", args.force)
    rep = evaluate(root, gen, ref, mask)
    write_run_config(out, rc, "evaluate")
    print(f"evaluate: PSNR {rep.psnr_db:.2f} dB, SSIM {rep.ssim:.4f}, match L2 {rep.loftr_l2:.2f} px, "
          f"match proportion {rep.loftr_match_proportion:.4f}")
    return rep


def cmd_demo(args, rc: RunConfig):
    """synth -> layout -> train -> select -> evaluate, plus an untrained-backbone baseline."""
    from .generation import generate_panorama
    from .metrics import evaluate_arrays, write_report
    from .scene_io import save_panorama, write_json
    from .backbone.model import save_checkpoint
    t0 = time.perf_counter()
    root = workspace_root(args)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise ConfigError(f"{root} is not empty; pass --force to overwrite")
        shutil.rmtree(root)
    args.force = False
    cmd_synth(args, rc)
    cmd_layout(args, rc)
    cmd_train(args, rc)
    state, scores = cmd_select(args, rc)
    ws = open_workspace(root)
    ref, _ = _reference(ws, rc)
    m_input = _input_mask(ws, rc.get("generation.start_id"))
    out = prepare_output(root / "demo", False)
    # untrained baseline: fresh initialization, no pretraining, no fine-tuning
    untrained = build_model(rc)
    ck = save_checkpoint(out / "untrained.safetensors", untrained,
                         {"pano_dims": list(m_input.shape), "posenc": ws.manifest["posenc"], "stage": "init"})
    base_state = generate_panorama(ws, ck, rc.get("generation.start_id"), 0, generation_config(rc), model=untrained)
    save_panorama(out / "untrained.png", base_state.pixels)
    trained_rep = evaluate_arrays(ref, state.pixels, m_input)
    base_rep = evaluate_arrays(ref, base_state.pixels, m_input)
    write_report(trained_rep, out / "report_selected.json", out / "report_selected.csv")
    write_report(base_rep, out / "report_untrained.json", out / "report_untrained.csv")
    gain = trained_rep.psnr_db - base_rep.psnr_db
    ratio = (trained_rep.loftr_match_proportion / base_rep.loftr_match_proportion
             if base_rep.loftr_match_proportion > 0 else float("inf"))
    summary = {"selected_seed": min(scores, key=lambda s: (-s.match_count, s.seed)).seed,
               "psnr_selected": trained_rep.psnr_db, "psnr_untrained": base_rep.psnr_db, "psnr_gain_db": gain,
               "match_proportion_selected": trained_rep.loftr_match_proportion,
               "match_proportion_untrained": base_rep.loftr_match_proportion,
               "match_proportion_ratio": ratio if np.isfinite(ratio) else None,
               "psnr_gain_ok": gain >= 3.0, "match_ratio_ok": ratio >= 2.0}
    write_json(out / "summary.json", summary)
    write_run_config(out, rc, "demo")
    elapsed = time.perf_counter() - t0
    print("demo (AC-7 metrics):")
    print(f"  masked PSNR  selected {trained_rep.psnr_db:.2f} dB  untrained {base_rep.psnr_db:.2f} dB  "
          f"gain {gain:+.2f} dB (need >= 3)")
    print(f"  match prop.  selected {trained_rep.loftr_match_proportion:.4f}  untrained "
          f"{base_rep.loftr_match_proportion:.4f}  ratio {ratio:.2f} (need >= 2)")
    print(f"  runtime {elapsed / 60:.1f} min")
    return summary


COMMANDS = {"synth": cmd_synth, "layout": cmd_layout, "train": cmd_train, "generate": cmd_generate,
            "select": cmd_select, "evaluate": cmd_evaluate, "demo": cmd_demo}


# -- argument parsing ----------------------------------------------------

def _dims(s):
    try:
        h, w = (int(v) for v in s.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}") from exc
    return [h, w]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help=f"workspace directory (default: ${WORKSPACE_ENV})")
    common.add_argument("--seed", type=int, dest="seed", help="root seed for all randomness")
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--guidance", type=float, dest="generation.guidance")
    gen.add_argument("--overlap", type=float, dest="generation.overlap")
    gen.add_argument("--tiles", type=int, dest="generation.tile", help="tile size in pixels")
    gen.add_argument("--steps", type=int, dest="generation.steps", help="inference steps")
    gen.add_argument("--order", choices=["distance", "rows"], dest="generation.order")
    gen.add_argument("--init-noise-level", type=float, dest="generation.init_noise_level")
    gen.add_argument("--start", dest="generation.start_id", help="id of the starting reference")
    gen.add_argument("--checkpoint", help="checkpoint file (default: checkpoints/final.safetensors)")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--iterations", type=int, dest="train.iterations")
    train.add_argument("--batch-size", type=int, dest="train.batch_size")
    train.add_argument("--pretrain-steps", type=int, dest="backbone.pretrain.steps")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--views", type=int, dest="scene.views")
    scene.add_argument("--dims", type=_dims, dest="scene.pano_dims", help="panorama size HxW")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--seeds", type=int, dest="selection.seeds", help="number of seeds to try")
    sel.add_argument("--reference", dest="selection.reference", help="scoring reference image")

    p = argparse.ArgumentParser(prog="genpano", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common, scene], help="render a synthetic multi-view scene")
    lp = sub.add_parser("layout", parents=[common], help="align references into sparse panoramas")
    lp.add_argument("--images", dest="layout.images", help="reference image directory")
    lp.add_argument("--center", dest="layout.center_id")
    lp.add_argument("--focal", type=float, dest="layout.focal")
    lp.add_argument("--pano-dims", type=_dims, dest="layout.pano_dims")
    sub.add_parser("train", parents=[common, train], help="pretrain the toy base and fine-tune")
    sub.add_parser("generate", parents=[common, gen], help="outpaint one panorama")
    sub.add_parser("select", parents=[common, gen, sel], help="generate several seeds and keep the best")
    ep = sub.add_parser("evaluate", parents=[common], help="masked metrics against a reference")
    ep.add_argument("--generated", dest="evaluate.generated")
    ep.add_argument("--reference", dest="evaluate.reference")
    ep.add_argument("--mask", dest="evaluate.mask", help="image whose alpha marks the input region")
    sub.add_parser("demo", parents=[common, scene, train, gen, sel], help="end-to-end desk-scale run")
    return p


NON_CONFIG = {"command", "workspace", "config", "force", "verbose", "checkpoint"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        flags = {k: v for k, v in vars(args).items() if k not in NON_CONFIG}
        rc = RunConfig.resolve(load_config_file(args.config), flags)
        COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArtifactIOError, FileNotFoundError, PermissionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except PipelineError as exc:
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except GenPanoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
