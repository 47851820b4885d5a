"""``synth2real`` command line.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numerical abort.
Relative paths resolve against the workspace root (``--workspace`` or
``$SYNTH2REAL_WORKSPACE``, else the current directory).  Every command writes
a manifest that ``synth2real replay`` can re-execute.
"""
from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import generator as gen
from . import imageops, io, metrics, perception, pipeline, synthrender
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, resolve, workspace_root

EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4
log = logging.getLogger("synth2real")


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map library exceptions onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (io.InputError, FileNotFoundError) as exc:
            _fail(EXIT_INPUT, str(exc))
        except (NonFiniteError, pipeline.PipelineAbort) as exc:
            _fail(EXIT_NUMERIC, str(exc))
    return wrapper


def _manifest(path: Path, command: str, args: dict, **extra) -> None:
    io.write_json(path, {"command": command, "args": args, "version": __version__, **extra})


@click.group()
@click.version_option(__version__)
@click.option("--workspace", type=click.Path(file_okay=False), default=None,
              help="Root for relative paths (default: $SYNTH2REAL_WORKSPACE or cwd).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, workspace, verbose):
    """Zero-shot adaptation of synthetic face renders through a style-based generator."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"root": workspace_root(workspace)}


# --- make-generator ----------------------------------------------------------------------

@main.command("make-generator")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--layers", type=int, default=6, show_default=True)
@click.option("--style-dim", type=int, default=32, show_default=True)
@click.option("--resolution", type=int, default=64, show_default=True)
@click.option("--pretrain-steps", type=int, default=1500, show_default=True)
@click.option("--out", "out", default="generator.npz", show_default=True)
@click.pass_context
@_guarded
def make_generator_cmd(ctx, seed, layers, style_dim, resolution, pretrain_steps, out):
    """Build (and pretrain) a toy generator; prints its content hash."""
    args = dict(seed=seed, layers=layers, style_dim=style_dim, resolution=resolution,
                pretrain_steps=pretrain_steps, out=out)
    try:
        spec = gen.make_generator(seed, layers, style_dim, resolution, pretrain_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = resolve(ctx.obj["root"], out)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = gen.save_generator(spec, path)
    _manifest(Path(f"{path}.manifest.json"), "make-generator", args, content_hash=digest)
    click.echo(digest)


# --- derive-basis ------------------------------------------------------------------------

@main.command("derive-basis")
@click.argument("generator_path")
@click.option("--n-annotate", type=int, default=2000, show_default=True)
@click.option("--centroids", "k_centroids", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="basis.npz", show_default=True)
@click.pass_context
@_guarded
def derive_basis_cmd(ctx, generator_path, n_annotate, k_centroids, seed, out):
    """Annotate prior samples and derive centroids plus control vectors."""
    root = ctx.obj["root"]
    spec = _load_generator(resolve(root, generator_path))
    try:
        basis = gen.derive_basis(spec, n_annotate=n_annotate, k_centroids=k_centroids, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = resolve(root, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    basis.save(path)
    _manifest(Path(f"{path}.manifest.json"), "derive-basis",
              dict(generator_path=generator_path, n_annotate=n_annotate, k_centroids=k_centroids,
                   seed=seed, out=out), generator_hash=gen.content_hash(spec))
    click.echo(f"{len(basis.centroids)} centroids, {len(basis.directions)} controls -> {path}")


def _load_generator(path: Path) -> gen.GeneratorSpec:
    try:
        return gen.load_generator(path)
    except (OSError, ValueError, KeyError) as exc:
        raise io.InputError(f"cannot load generator {path}: {exc}") from exc


def _load_basis(path: Path) -> gen.SteeringBasis:
    try:
        return gen.SteeringBasis.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise io.InputError(f"cannot load basis {path}: {exc}") from exc


# --- render-corpus -------------------------------------------------------------------------

@main.command("render-corpus")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-n", "--count", type=int, default=20, show_default=True)
@click.option("--resolution", type=int, default=64, show_default=True)
@click.option("--style", type=click.Choice(["flat", "photo"]), default="flat", show_default=True)
@click.option("--out", default="corpus", show_default=True)
@click.pass_context
@_guarded
def render_corpus_cmd(ctx, seed, count, resolution, style, out):
    """Render numbered (render, face alpha, hair alpha) PNG triples plus params.csv."""
    if count < 1:
        raise ConfigError("--count must be >= 1")
    directory = resolve(ctx.obj["root"], out)
    scenes = synthrender.sample_scene(seed, count)
    for i, params in enumerate(scenes):
        io.write_maskset(directory, synthrender.render(params, resolution, style=style), stem=f"{i:04d}_")
    synthrender.write_params_csv(directory / "params.csv", scenes)
    _manifest(directory / "manifest.json", "render-corpus",
              dict(seed=seed, count=count, resolution=resolution, style=style, out=out))
    click.echo(f"{count} renders -> {directory}")


# --- adapt ----------------------------------------------------------------------------------

def _input_triple(render_path: Path) -> tuple[Path, Path, Path, str]:
    if render_path.is_dir():
        return (render_path / "render.png", render_path / "face_alpha.png",
                render_path / "hair_alpha.png", render_path.name)
    name = render_path.name
    if "render" not in name:
        raise io.InputError(f"{render_path}: input file names must contain 'render'")
    face = render_path.with_name(name.replace("render", "face_alpha"))
    hair = render_path.with_name(name.replace("render", "hair_alpha"))
    stem = name.replace("render", "").replace(".png", "").strip("_-.") or render_path.stem
    return render_path, face, hair, stem


def _write_result(out_dir: Path, spec, masks, result: pipeline.PipelineResult) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    traces = {}
    for r in result.restarts:
        rdir = out_dir / f"restart_{r.restart:02d}"
        (rdir / "proposals").mkdir(parents=True, exist_ok=True)
        (rdir / "latents").mkdir(parents=True, exist_ok=True)
        for j, p in enumerate(r.proposals):
            io.write_png(rdir / "proposals" / f"{j:02d}.png", pipeline.render_proposal(spec, p))
            io.save_latent(rdir / "latents" / f"{j:02d}.npy", p.code)
        io.save_latent(rdir / "latents" / "w_f.npy", r.w_f.code)
        traces[str(r.restart)] = {stage: {k: v.tolist() for k, v in t.items()}
                                  for stage, t in r.traces.items()}
    best = result.selected_proposal
    final = pipeline.render_proposal(spec, best)
    io.write_png(out_dir / "final.png", final)
    io.write_png(out_dir / "face_only.png", pipeline.composite_face_only(spec, best, masks))
    io.save_latent(out_dir / "selected.npy", best.code)
    first = result.restarts[0]
    panel = [masks.render] + [pipeline.render_proposal(spec, p) for p in (first.w_s, first.w_n, first.w_f)]
    io.write_png(out_dir / "panel.png", np.concatenate(panel + [final], axis=1))
    io.write_json(out_dir / "traces.json", traces)
    return {
        "selected": {"restart": best.restart, "label": best.label, "brightness": best.brightness,
                     "ssim": result.selected_ssim},
        "restarts": [{"restart": r.restart, "losses": r.losses,
                      "labels": [p.label for p in r.proposals]} for r in result.restarts],
        "ssim": result.ssim.tolist(),
        "aborted": [{"restart": r, "reason": m} for m, r in result.aborted],
    }


def run_adapt(root: Path, run: RunConfig, inputs: list[str], workers: int) -> dict:
    spec = _load_generator(resolve(root, run.generator))
    basis = _load_basis(resolve(root, run.basis))
    out_root = resolve(root, run.output)
    out_root.mkdir(parents=True, exist_ok=True)
    summary = {}
    for item in inputs:
        render, face, hair, stem = _input_triple(resolve(root, item))
        masks = io.read_maskset(render, face, hair if hair.exists() else None)
        if masks.render.shape[:2] != (spec.resolution, spec.resolution):
            raise io.InputError(f"{render}: size {masks.render.shape[:2]} does not match "
                                f"generator resolution {spec.resolution}")
        result = pipeline.run_pipeline(spec, masks, basis, run.pipeline, workers=workers)
        summary[stem] = _write_result(out_root / stem, spec, masks, result)
        click.echo(f"{stem}: selected {summary[stem]['selected']['label']} "
                   f"(restart {summary[stem]['selected']['restart']}, "
                   f"ssim {summary[stem]['selected']['ssim']:.4f})")
    manifest = {
        "command": "adapt",
        "version": __version__,
        "args": {"config": run.to_dict(), "inputs": list(inputs)},
        "generator_hash": gen.content_hash(spec),
        "extractor": perception.default_extractor().describe(),
        "results": summary,
    }
    io.write_json(out_root / "manifest.json", manifest)
    return manifest


@main.command("adapt")
@click.argument("inputs", nargs=-1, required=True)
@click.option("--config", "config_path", required=True, help="Run configuration (YAML or JSON).")
@click.option("--restarts", type=int, default=None, help="Override the restart count.")
@click.option("--out", default=None, help="Override the output directory.")
@click.option("--workers", type=int, default=None,
              help="Parallel restarts (default: CPU count); results do not depend on it.")
@click.pass_context
@_guarded
def adapt_cmd(ctx, inputs, config_path, restarts, out, workers):
    """Adapt each INPUT (a *render*.png with sibling alpha masks, or a directory)."""
    root = ctx.obj["root"]
    run = RunConfig.load(resolve(root, config_path))
    if restarts is not None:
        if restarts < 1:
            raise ConfigError("--restarts must be >= 1")
        run = RunConfig(run.generator, run.basis, run.preset,
                        run.pipeline.with_overrides(restarts=restarts), run.output)
    if out is not None:
        run = RunConfig(run.generator, run.basis, run.preset, run.pipeline, out)
    run_adapt(root, run, list(inputs), workers or os.cpu_count() or 1)


# --- metrics --------------------------------------------------------------------------------

def _collect(directory: Path, pattern: str) -> list[Path]:
    files = sorted(p for p in directory.rglob(pattern) if p.is_file())
    if not files:
        raise io.InputError(f"no images matching {pattern!r} under {directory}")
    return files


def _parse_crop(text: str) -> tuple[str, tuple]:
    try:
        name, box = text.split("=", 1)
        vals = tuple(float(v) for v in box.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad crop {text!r}; expected name=top,left,bottom,right") from exc
    if len(vals) != 4 or not (0 <= vals[0] < vals[2] <= 1 and 0 <= vals[1] < vals[3] <= 1):
        raise ConfigError(f"bad crop box {text!r}")
    return name, vals


def image_key(path: Path) -> str:
    """Pairing key: the file stem without ``render``/``final``, else the parent directory name."""
    stem = path.stem.replace("render", "").replace("final", "").strip("_-.")
    return stem or path.parent.name


def pair_images(results: dict, references: dict) -> list[tuple]:
    """Match by key; fall back to sorted order when no keys coincide but counts agree."""
    shared = sorted(set(results) & set(references))
    if shared:
        return [(results[k], references[k]) for k in shared]
    if len(results) == len(references):
        return list(zip((results[k] for k in sorted(results)), (references[k] for k in sorted(references))))
    raise io.InputError("cannot pair result and reference images for SSIM and landmarks")


METRIC_NAMES = ("fid", "is", "ssim", "landmark_median_x", "landmark_median_y")


def compute_metrics(results: list[np.ndarray], references: list[np.ndarray], crops: dict,
                    seed: int = 0, pairs: list[tuple] | None = None) -> list[dict]:
    """One row per (crop, metric) in ``METRIC_NAMES``.

    Set-level metrics use all images; SSIM and landmark medians use ``pairs``
    (default: ``results`` and ``references`` zipped in order).  Result crops are
    area-resized to the reference crop size.
    """
    if pairs is None:
        if len(results) != len(references):
            raise ValueError("unequal set sizes need explicit pairs")
        pairs = list(zip(results, references))
    model = perception.LabelModel(seed=seed)
    rows = []
    for name, box in crops.items():
        ref = [metrics.crop(r, box) for r in references]
        size = ref[0].shape[:2]

        def fit(img):
            return imageops.resize_area(metrics.crop(img, box), size)

        res = [fit(r) for r in results]
        pa = [fit(a) for a, _ in pairs]
        pb = [metrics.crop(b, box) for _, b in pairs]
        lm = metrics.landmark_error_stats(
            [(perception.extract_landmarks(a), perception.extract_landmarks(b)) for a, b in zip(pa, pb)])
        values = {
            "fid": metrics.frechet_distance(metrics.feature_stats(res), metrics.feature_stats(ref)),
            "is": metrics.image_inception_score(res, model)[0],
            "ssim": float(np.mean([imageops.ssim(a, b) for a, b in zip(pa, pb)])),
            "landmark_median_x": lm["x"]["pooled_median"],
            "landmark_median_y": lm["y"]["pooled_median"],
        }
        for metric in METRIC_NAMES:
            n = len(pairs) if metric not in ("fid", "is") else len(res)
            rows.append({"metric": metric, "crop": name, "value": float(values[metric]), "n": n, "seed": seed})
    return rows


@main.command("metrics")
@click.argument("result_dir")
@click.argument("reference_dir")
@click.option("--result-pattern", default="final.png", show_default=True)
@click.option("--reference-pattern", default="*render.png", show_default=True)
@click.option("--crop", "crops", multiple=True,
              help="name=top,left,bottom,right in image fractions (repeatable).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="metrics.csv", show_default=True)
@click.pass_context
@_guarded
def metrics_cmd(ctx, result_dir, reference_dir, result_pattern, reference_pattern, crops, seed, out):
    """FID, IS, SSIM and landmark medians per crop, written as CSV."""
    root = ctx.obj["root"]
    crop_map = dict(_parse_crop(c) for c in crops) if crops else {
        "large": (0.0, 0.0, 1.0, 1.0), "tight": (0.15, 0.2, 0.85, 0.8)}
    res_files = _collect(resolve(root, result_dir), result_pattern)
    ref_files = _collect(resolve(root, reference_dir), reference_pattern)
    if len(res_files) < 2 or len(ref_files) < 2:
        raise io.InputError("metrics need at least two images on each side")
    results = {image_key(p): _rgb(io.read_png(p)) for p in res_files}
    references = {image_key(p): _rgb(io.read_png(p)) for p in ref_files}
    if len(results) != len(res_files) or len(references) != len(ref_files):
        raise io.InputError("image keys are not unique; use a narrower --*-pattern")
    pairs = pair_images(results, references)
    rows = compute_metrics(list(results.values()), list(references.values()), crop_map, seed, pairs)
    path = resolve(root, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(path, rows)
    _manifest(Path(f"{path}.manifest.json"), "metrics",
              dict(result_dir=result_dir, reference_dir=reference_dir, result_pattern=result_pattern,
                   reference_pattern=reference_pattern, crops=list(crops), seed=seed, out=out))
    for row in rows:
        click.echo(f"{row['crop']:>8} {row['metric']:<20} {row['value']:.6g}")


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


# --- replay ---------------------------------------------------------------------------------

@main.command("replay")
@click.argument("manifest_path")
@click.option("--workers", type=int, default=None)
@click.pass_context
@_guarded
def replay_cmd(ctx, manifest_path, workers):
    """Re-run the command recorded in a manifest."""
    root = ctx.obj["root"]
    data = io.read_json(resolve(root, manifest_path))
    command, args = data.get("command"), data.get("args", {})
    if command == "adapt":
        run = RunConfig.from_dict(args["config"])
        run_adapt(root, run, args["inputs"], workers or os.cpu_count() or 1)
        return
    commands = {"make-generator": make_generator_cmd, "derive-basis": derive_basis_cmd,
                "render-corpus": render_corpus_cmd, "metrics": metrics_cmd}
    if command not in commands:
        raise ConfigError(f"manifest records unknown command {command!r}")
    if command == "metrics":
        args = {**args, "crops": tuple(args.get("crops", ()))}
    ctx.invoke(commands[command], **args)


if __name__ == "__main__":
    main()
