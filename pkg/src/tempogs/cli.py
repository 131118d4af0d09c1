"""Command-line entry point: ``tempogs <gen|align|confidence|update|eval|pipeline>``."""

from __future__ import annotations

import functools
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import io
from .bench import SceneSpec, evaluate, generate_dataset, load_dataset
from .confidence import ConfidenceMap, dump_heatmap
from .config import TrainConfig
from .geometry import SimilarityTransform
from .optimizer import initial_confidence, progressive_optimize
from .registration import AlignSettings, align, apply_alignment
from .splat import GaussianModel

logger = logging.getLogger("tempogs")


class StageError(click.ClickException):
    exit_code = 2


def _stage(fn):
    """Turn expected failures into a one-line diagnostic and a nonzero exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (FileNotFoundError, ValueError, KeyError, IndexError, RuntimeError) as exc:
            raise StageError(f"{fn.__name__.replace('_cmd', '')}: {exc}") from exc

    return wrapper


def _load_spec(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing file: {p}")
    if p.suffix == ".toml":
        from .config import tomllib

        with open(p, "rb") as f:
            return tomllib.load(f)
    return json.loads(p.read_text())


def _config(config_path: Optional[str], seed: Optional[int], literal_eq2: bool, base_seed: int = 0) -> TrainConfig:
    """CLI flags > config file > defaults."""
    cfg = TrainConfig(seed=base_seed)
    if config_path:
        if not Path(config_path).exists():
            raise FileNotFoundError(f"missing file: {config_path}")
        cfg = TrainConfig.from_toml(config_path, cfg)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if literal_eq2:
        overrides["literal_eq2"] = True
    return cfg.replace(**overrides) if overrides else cfg


def _spec(spec_file: Optional[str], seed: Optional[int], views: Optional[int], layout: Optional[str]) -> SceneSpec:
    data = _load_spec(spec_file)
    if seed is not None:
        data["seed"] = seed
    if views is not None:
        data["tn_train_views"] = views
    if layout is not None:
        data["layout"] = layout
    return SceneSpec.from_dict(data)


def _read_alignment(path) -> tuple[SimilarityTransform, AlignSettings]:
    rec = io.read_json(path)
    settings = AlignSettings(**{k: v for k, v in rec.get("settings", {}).items() if k in ("downsample_fraction", "dedup_voxel", "seed")})
    return SimilarityTransform.from_list(rec["total"]), settings


def _read_confidence(path) -> list[ConfidenceMap]:
    return [ConfidenceMap.from_record(r) for r in io.read_json(path)]


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Update a Gaussian scene captured at t0 with sparse views from a later time tn."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------------------


@main.command("gen")
@click.option("--spec", "spec_file", type=click.Path(), help="Scene spec (JSON or TOML); defaults otherwise.")
@click.option("--out", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--seed", type=int)
@click.option("--views", type=int, help="Number of tn training views.")
@click.option("--layout", type=click.Choice(["uniform", "concentrated"]))
@click.option("--no-cache", is_flag=True, help="Always retrain the t0 model.")
@_stage
def gen_cmd(spec_file, out, seed, views, layout, no_cache):
    """Generate a synthetic paired dataset."""
    spec = _spec(spec_file, seed, views, layout)
    generate_dataset(spec, out, use_cache=not no_cache)
    click.echo(f"dataset written to {out}")


def _align(dataset, settings: AlignSettings):
    ds = load_dataset(dataset, load_model=False)
    for name in ("matches.json", "seed_correspondences.json"):
        if not (Path(dataset) / name).exists():
            raise FileNotFoundError(f"missing file: {Path(dataset) / name}")
    result = align(ds.p_n, ds.p_c, ds.tn_cameras, ds.t0_cameras, ds.matches, ds.seeds, settings)
    rec = result.to_record()
    rec["settings"] = {"use_lm": settings.use_lm, "use_icp": settings.use_icp,
                       "downsample_fraction": settings.downsample_fraction, "dedup_voxel": settings.dedup_voxel,
                       "inject_residual_deg": settings.inject_residual_deg, "seed": settings.seed,
                       "icp_trim_fraction": settings.icp.trim_fraction}
    return rec


@main.command("align")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="alignment.json")
@click.option("--no-lm", is_flag=True)
@click.option("--no-icp", is_flag=True)
@click.option("--inject-residual", type=float, default=0.0, help="Degrees of rotation added after the coarse stage.")
@click.option("--seed", type=int, default=0)
@_stage
def align_cmd(dataset, out, no_lm, no_icp, inject_residual, seed):
    """Estimate the tn -> t0 similarity and report residuals."""
    if not Path(dataset).is_dir():
        raise FileNotFoundError(f"missing dataset directory: {dataset}")
    for name in ("matches.json", "seed_correspondences.json"):
        if not (Path(dataset) / name).exists():
            raise FileNotFoundError(f"missing file: {Path(dataset) / name}")
    settings = AlignSettings(use_lm=not no_lm, use_icp=not no_icp, inject_residual_deg=inject_residual, seed=seed)
    rec = _align(dataset, settings)
    io.write_json(out, rec)
    click.echo(json.dumps(rec["residual_report"]))


@main.command("confidence")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--model", "model_path", type=click.Path(), help="t0 model (default: the dataset's).")
@click.option("--alignment", type=click.Path(), help="alignment.json; identity if omitted.")
@click.option("--config", "config_path", type=click.Path())
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--dump-heatmaps", is_flag=True)
@_stage
def confidence_cmd(dataset, model_path, alignment, config_path, seed, out, dump_heatmaps):
    """Adapt the t0 model to tn and write per-view confidence maps."""
    maps, cfg = _confidence(dataset, model_path, alignment, _config(config_path, seed, False))
    _write_confidence(maps, out, dataset, dump_heatmaps)
    click.echo(f"coverage {np.mean([m.coverage() for m in maps]):.4f}")


def _tn_views(ds, alignment):
    if alignment:
        total, settings = _read_alignment(alignment)
    else:
        total, settings = SimilarityTransform(), AlignSettings()
    _, cams, fused = apply_alignment(total, ds.p_n, ds.p_c, ds.tn_cameras, settings)
    views = [(c, img) for c, (_, img) in zip(cams, ds.tn_views)]
    return views, fused


def _confidence(dataset, model_path, alignment, cfg):
    ds = load_dataset(dataset, load_model=model_path is None)
    g0 = GaussianModel.load_ply(_existing(model_path)) if model_path else ds.g0
    views, _ = _tn_views(ds, alignment)
    train = [views[i] for i in ds.train_ids]
    return initial_confidence(g0, ds.t0_views, train, cfg), cfg


def _write_confidence(maps, out, dataset, heatmaps: bool):
    out = Path(out)
    io.write_json(out / "confidence.json", [m.to_record() for m in maps])
    if heatmaps:
        ds = load_dataset(dataset, load_model=False)
        by_id = {c.id: (c, img) for c, img in ds.t0_views}
        for m in maps:
            cam, img = by_id[m.view_id]
            dump_heatmap(out / "heatmaps" / f"view_{m.view_id:04d}.png", m, cam.height, cam.width, img)


def _existing(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def _update(dataset, model_t0, alignment, cfg, confidence=None):
    ds = load_dataset(dataset, load_model=model_t0 is None)
    g0 = GaussianModel.load_ply(_existing(model_t0)) if model_t0 else ds.g0
    views, fused = _tn_views(ds, alignment)
    train = [views[i] for i in ds.train_ids]
    maps = _read_confidence(confidence) if confidence else None
    model, report, maps = progressive_optimize(g0, fused, ds.t0_views, train, cfg, maps=maps)
    rec = report.to_record()
    rec["config"] = cfg.to_dict()
    return model, rec, maps


@main.command("update")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--model-t0", type=click.Path(), help="t0 model (default: the dataset's).")
@click.option("--alignment", required=True, type=click.Path())
@click.option("--confidence", type=click.Path(), help="Precomputed confidence.json (skips adaptation).")
@click.option("--config", "config_path", type=click.Path())
@click.option("--seed", type=int)
@click.option("--literal-eq2", is_flag=True, help="Unnormalized per-patch loss (pixel sums, unit SSIM weight).")
@click.option("--out", required=True, type=click.Path(), help="model_tn.ply")
@click.option("--report", "report_path", required=True, type=click.Path(), help="report.json")
@_stage
def update_cmd(dataset, model_t0, alignment, confidence, config_path, seed, literal_eq2, out, report_path):
    """Train the tn model with confidence-guided t0 supervision."""
    _existing(alignment)
    cfg = _config(config_path, seed, literal_eq2)
    model, rec, _ = _update(dataset, model_t0, alignment, cfg, confidence)
    model.save_ply(out)
    io.write_json(report_path, rec)
    click.echo(f"{rec['iterations']} iterations, termination: {rec['termination']}")


def _eval(model_path, dataset, alignment, split):
    ds = load_dataset(dataset, load_model=False)
    model = GaussianModel.load_ply(_existing(model_path))
    if split == "t0":
        views = ds.t0_views
    else:
        tn, _ = _tn_views(ds, alignment)
        views = [tn[i] for i in (ds.test_ids if split == "test" else ds.train_ids)]
    return evaluate(model, views).to_record()


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--dataset", required=True, type=click.Path())
@click.option("--alignment", type=click.Path(), help="alignment.json for tn splits; identity if omitted.")
@click.option("--split", type=click.Choice(["test", "train", "t0"]), default="test")
@click.option("--out", required=True, type=click.Path(), help="metrics.json (a .csv table is written alongside).")
@_stage
def eval_cmd(model_path, dataset, alignment, split, out):
    """PSNR / SSIM of a model on a dataset split."""
    if alignment:
        _existing(alignment)
    rec = _eval(model_path, dataset, alignment, split)
    _write_metrics(rec, out)
    click.echo(f"PSNR {rec['mean_psnr']}  SSIM {rec['mean_ssim']:.4f}")


def _write_metrics(rec, out):
    io.write_json(out, rec)
    with io.atomic_path(Path(out).with_suffix(".csv")) as tmp:
        lines = ["view,psnr,ssim"] + [f"{i},{p},{s}" for i, (p, s) in enumerate(zip(rec["psnr"], rec["ssim"]))]
        tmp.write_text("\n".join(lines) + "\n")


@main.command("pipeline")
@click.option("--spec", "spec_file", type=click.Path(), help="Scene spec to generate from.")
@click.option("--dataset", type=click.Path(), help="Existing dataset (skips generation).")
@click.option("--config", "config_path", type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int)
@click.option("--views", type=int)
@click.option("--layout", type=click.Choice(["uniform", "concentrated"]))
@click.option("--dump-heatmaps", is_flag=True)
@click.option("--literal-eq2", is_flag=True)
@_stage
def pipeline_cmd(spec_file, dataset, config_path, out, seed, views, layout, dump_heatmaps, literal_eq2):
    """Generate (or read) a dataset, align, estimate confidence, update and evaluate."""
    out = Path(out)
    timings = {}
    t = time.perf_counter()
    if dataset is None:
        spec = _spec(spec_file, seed, views, layout)
        dataset = out / "dataset"
        generate_dataset(spec, dataset)
    elif not Path(dataset).is_dir():
        raise FileNotFoundError(f"missing dataset directory: {dataset}")
    timings["gen"] = time.perf_counter() - t
    ds_seed = SceneSpec.from_dict(io.read_json(Path(dataset) / "spec.json")).seed
    cfg = _config(config_path, seed, literal_eq2, base_seed=ds_seed)

    t = time.perf_counter()
    rec = _align(dataset, AlignSettings(seed=cfg.seed))
    io.write_json(out / "alignment.json", rec)
    timings["align"] = time.perf_counter() - t

    t = time.perf_counter()
    maps, _ = _confidence(dataset, None, out / "alignment.json", cfg)
    _write_confidence(maps, out / "confidence", dataset, dump_heatmaps)
    timings["confidence"] = time.perf_counter() - t

    t = time.perf_counter()
    model, report, _ = _update(dataset, None, out / "alignment.json", cfg, out / "confidence" / "confidence.json")
    model.save_ply(out / "model_tn.ply")
    timings["update"] = time.perf_counter() - t

    metrics = _eval(out / "model_tn.ply", dataset, out / "alignment.json", "test")
    _write_metrics(metrics, out / "metrics.json")
    report["metrics"] = metrics
    report["alignment"] = rec
    report["stage_seconds"] = timings
    io.write_json(out / "report.json", report)
    click.echo(f"PSNR {metrics['mean_psnr']}  SSIM {metrics['mean_ssim']:.4f}  ({report['termination']})")


if __name__ == "__main__":
    main()
