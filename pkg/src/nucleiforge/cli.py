"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``), honours
``--seed``/``--out``/``--jobs`` and writes deterministic files into ``--out``.
Exit codes: 0 ok, 2 config error, 3 data/format error, 4 pipeline-stage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from . import io
from .assemble import (
    FusionParams,
    PostprocParams,
    assemble_detections,
    fuse_fill_missing,
    fuse_superposition,
    hover_postproc,
)
from .core import ClassGroup, composition, semantic_map, split_groups, to_yolo_labels
from .losses import EPS, EflParams, ciou_loss, cross_entropy, ciou_alpha, dice_loss, efl, grad_check, sample_box_pair
from .metrics import evaluate
from .pipeline import ImageInputs, StageError, run_image
from .sample import DatasetStats, compose_mosaic, draw_recipe, upsample_plan, replicated_frequencies
from .synth import SynthSpec, gen_instance_map, render_detections, render_hover
from .tiler import extract, plan_tiles, stitch_dense

log = logging.getLogger("nucleiforge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4
GROUP_DIRS = {ClassGroup.EPI_LYM_CON: "hover_epi_lym_con", ClassGroup.NEU_EOS_PLA: "hover_neu_eos_pla"}


class ConfigError(ValueError):
    pass


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def _section(cfg: dict, key: str, cls):
    try:
        return cls(**cfg.get(key, {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{key}' section: {exc}") from exc


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing '{key}'")
    return cfg[key]


def _map_stems(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"missing input directory: {directory}")
    return sorted(p.with_suffix("") for p in directory.glob("*.npy"))


# --- synth ------------------------------------------------------------------


def _synth_one(args):
    index, seed, cfg = args
    img_seed = _image_seed(seed, index)
    spec = SynthSpec(**{**_spec_kwargs(cfg), "seed": img_seed})
    gt = gen_instance_map(spec)
    sigma = float(cfg.get("noise_sigma", 0.0))
    hovers = {g: render_hover(gt, g, sigma, img_seed + k + 1) for k, g in enumerate(GROUP_DIRS)}
    dets = render_detections(gt, float(cfg.get("drop_rate", 0.0)), int(cfg.get("jitter_px", 0)), img_seed + 7)
    return gt, hovers, dets


def _spec_kwargs(cfg: dict) -> dict:
    kw = dict(cfg.get("synth", {}))
    for k in ("count_range", "axis_range", "class_mix"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return kw


def cmd_synth(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    n = int(cfg.get("n", 1))
    try:
        SynthSpec(**_spec_kwargs(cfg))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'synth' section: {exc}") from exc
    tasks = [(i, seed, cfg) for i in range(n)]
    results = _map(_synth_one, tasks, jobs)
    names = []
    for i, (gt, hovers, dets) in enumerate(results):
        name = f"img_{i:04d}"
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        io.write_instance_map(d / "gt", gt)
        for g, sub in GROUP_DIRS.items():
            io.write_hover(d / sub, hovers[g])
        io.write_detections(d / "detections", dets)
        names.append(name)
    io.write_json(out / "manifest.json", {"n": n, "seed": seed, "images": names, "config": cfg})
    log.info("wrote %d synthetic images to %s", n, out)


# --- convert ----------------------------------------------------------------


def cmd_convert(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    m = io.read_instance_map(_require(cfg, "input"))
    (out / "yolo.txt").write_text("".join(lbl.to_line() + "\n" for lbl in to_yolo_labels(m)))
    io.write_array(out / "semantic.npy", semantic_map(m), io.IDS_DTYPE)
    io.write_composition_csv(out / "composition.csv", [(Path(cfg["input"]).name, composition(m))])
    major, rare = split_groups(m)
    io.write_instance_map(out / "group_epi_lym_con", major)
    io.write_instance_map(out / "group_neu_eos_pla", rare)


# --- mosaic -----------------------------------------------------------------


def cmd_mosaic(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    stems = _map_stems(Path(_require(cfg, "corpus")))
    corpus = [io.read_instance_map(s) for s in stems]
    stats = DatasetStats.from_maps(corpus)
    tile_shape = tuple(cfg.get("tile_shape", (256, 256)))
    if "target" in cfg:
        factors = upsample_plan(stats, cfg["target"], float(cfg.get("tolerance", 0.05)))
        io.write_json(
            out / "upsample_plan.json",
            {
                "tiles": [s.name for s in stems],
                "factors": [int(f) for f in factors],
                "frequencies": [float(f) for f in replicated_frequencies(stats, factors, cfg["target"])],
            },
        )
    recipes = []
    for k in range(int(cfg.get("count", 1))):
        recipe = draw_recipe(stats, _image_seed(seed, k))
        mosaic = compose_mosaic(recipe, [corpus[i] for i in recipe.sources], tile_shape)
        io.write_instance_map(out / f"mosaic_{k:04d}", mosaic)
        recipes.append({**recipe.to_dict(), "tiles": [stems[i].name for i in recipe.sources]})
    io.write_json(out / "recipes.json", recipes)


# --- tile -------------------------------------------------------------------


def cmd_tile(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    src = Path(_require(cfg, "input"))
    if src.with_suffix(".json").exists():
        source = io.read_instance_map(src.with_suffix(""))
    else:
        source = io.read_array(src.with_suffix(".npy"))
    h, w = source.shape[:2]
    try:
        plan = plan_tiles(h, w, int(cfg.get("patch", 256)), int(cfg.get("stride", 192)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    io.write_json(out / "plan.json", plan.to_dict())
    pdir = out / "patches"
    pdir.mkdir(parents=True, exist_ok=True)
    patches = extract(source, plan)
    for k, p in enumerate(patches):
        if isinstance(p, np.ndarray):
            io.write_array(pdir / f"patch_{k:04d}.npy", p)
        else:
            io.write_instance_map(pdir / f"patch_{k:04d}", p)
    if cfg.get("stitch") and isinstance(source, np.ndarray):
        io.write_array(out / "stitched.npy", stitch_dense(patches, plan), io.DENSE_DTYPE)


# --- postproc / assemble / fuse --------------------------------------------


def cmd_postproc(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    params = _section(cfg, "postproc", PostprocParams)
    hover = io.read_hover(_require(cfg, "input"))
    io.write_instance_map(out / "instances", hover_postproc(hover, params))


def cmd_assemble(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    params = _section(cfg, "fusion", FusionParams)
    shape = (int(_require(cfg, "height")), int(_require(cfg, "width")))
    dets = io.read_detections(_require(cfg, "input"))
    io.write_instance_map(out / "instances", assemble_detections(dets, shape, params))


def cmd_fuse(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    mode = cfg.get("mode", "superposition")
    params = _section(cfg, "fusion", FusionParams)
    a = io.read_instance_map(_require(cfg, "a"))
    b = io.read_instance_map(_require(cfg, "b"))
    if a.shape != b.shape:
        raise io.FormatError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if mode == "superposition":
        fused = fuse_superposition(a, b)
    elif mode == "fill_missing":
        fused = fuse_fill_missing(a, b, params)
    else:
        raise ConfigError(f"unknown fuse mode {mode!r}")
    io.write_instance_map(out / "fused", fused)


# --- eval -------------------------------------------------------------------


def _eval_and_write(preds, gts, names, out: Path) -> None:
    report = evaluate(preds, gts)
    io.write_report(out / "report", report)
    io.write_composition_csv(out / "composition.csv", zip(names, (composition(p) for p in preds)))


def cmd_eval(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    pred_dir, gt_dir = Path(_require(cfg, "pred")), Path(_require(cfg, "gt"))
    gt_stems = _map_stems(gt_dir)
    pred_stems = [pred_dir / s.name for s in gt_stems]
    preds = [io.read_instance_map(s) for s in pred_stems]
    gts = [io.read_instance_map(s) for s in gt_stems]
    _eval_and_write(preds, gts, [s.name for s in gt_stems], out)


# --- gradcheck --------------------------------------------------------------


def _gradcheck_all(rng: np.random.Generator, points: int, step: float) -> Dict[str, float]:
    worst = {"cross_entropy": 0.0, "dice": 0.0, "efl": 0.0, "ciou": 0.0}
    efl_params = EflParams(2.0, (0.0, 1.0, 3.0))
    for _ in range(points):
        p = rng.dirichlet(np.ones(5), 4) * 0.9 + 0.02
        t = rng.integers(0, 5, 4)
        worst["cross_entropy"] = max(worst["cross_entropy"], grad_check(lambda x: cross_entropy(x, t), p, step, EPS))
        p = rng.uniform(0.05, 0.95, (6, 6))
        t = (rng.random((6, 6)) < 0.5).astype(float)
        worst["dice"] = max(worst["dice"], grad_check(lambda x: dice_loss(x, t), p, step, 0.0, 1.0))
        p = rng.uniform(0.05, 0.95, (5, 3))
        t = (rng.random((5, 3)) < 0.5).astype(float)
        worst["efl"] = max(worst["efl"], grad_check(lambda x: efl(x, t, efl_params), p, step, 0.0, 1.0))
        pred, gt = sample_box_pair(rng, margin=10 * step)
        worst["ciou"] = max(worst["ciou"], grad_check(lambda x: ciou_loss(x, gt, ciou_alpha(pred, gt)), pred, step, 0.0))
    return worst


def cmd_gradcheck(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    rng = np.random.default_rng(seed)
    worst = _gradcheck_all(rng, int(cfg.get("points", 100)), float(cfg.get("step", 1e-5)))
    io.write_json(out / "gradcheck.json", {"seed": seed, "max_relative_error": worst})


# --- pipeline ---------------------------------------------------------------


def _pipeline_one(args):
    d, postproc, fusion, use_dets = args
    inputs = ImageInputs(
        io.read_hover(d / GROUP_DIRS[ClassGroup.EPI_LYM_CON]),
        io.read_hover(d / GROUP_DIRS[ClassGroup.NEU_EOS_PLA]),
        io.read_detections(d / "detections") if use_dets else [],
    )
    return run_image(inputs, postproc, fusion, use_dets)


def cmd_pipeline(cfg: dict, seed: int, out: Path, jobs: int) -> None:
    src = Path(_require(cfg, "input"))
    manifest = io.read_json(src / "manifest.json")
    postproc = _section(cfg, "postproc", PostprocParams)
    fusion = _section(cfg, "fusion", FusionParams)
    use_dets = bool(cfg.get("use_detections", True))
    names = list(manifest["images"])
    preds = _map(_pipeline_one, [(src / n, postproc, fusion, use_dets) for n in names], jobs)
    pred_dir = out / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for name, p in zip(names, preds):
        io.write_instance_map(pred_dir / name, p)
    gts = [io.read_instance_map(src / n / "gt") for n in names]
    _eval_and_write(preds, gts, names, out)


# --- plumbing ---------------------------------------------------------------


def _map(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


COMMANDS = {
    "synth": cmd_synth,
    "convert": cmd_convert,
    "mosaic": cmd_mosaic,
    "tile": cmd_tile,
    "postproc": cmd_postproc,
    "assemble": cmd_assemble,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucleiforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="64-bit seed (overrides config)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def _configure_logging():
    level = os.environ.get("NUCLEIFORGE_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = {}
        if args.config is not None:
            try:
                cfg = json.loads(Path(args.config).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {args.config}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, seed, args.out, max(1, args.jobs))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except (io.FormatError, FileNotFoundError, KeyError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
