"""``stokes-ae`` command line: synth, import, train, detect, score, gradcheck.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from . import __version__
from .errors import EmptyDirectory, StokesAEError

log = logging.getLogger("stokes_ae")


class RuntimeFailure(click.ClickException):
    exit_code = 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, subcommand: str, config: dict, inputs, outputs, seed, started: float) -> Path:
    """Atomically write the run manifest next to the outputs."""
    path = Path(path)
    doc = {
        "tool": "stokes-ae",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.monotonic() - started, 6),
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _run(fn):
    """Map library errors onto exit status 1 with a one-line message."""
    try:
        return fn()
    except (StokesAEError, OSError, ValueError, KeyError) as exc:
        raise RuntimeFailure(f"{type(exc).__name__}: {exc}") from exc


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int):
    """Autoencoder anomaly detection for Stokes I/V spectropolarimetric maps."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(message)s")


def _parse_anomalies(text: str | None):
    from .synth import Anomaly

    out = []
    for item in filter(None, (t.strip() for t in (text or "").split(";"))):
        parts = [p.strip() for p in item.split(",")]
        if len(parts) not in (3, 4):
            raise click.BadParameter(f"{item!r}: expected x,y,kind[,strength]", param_hint="--anomalies")
        try:
            out.append(Anomaly(int(parts[0]), int(parts[1]), parts[2], float(parts[3]) if len(parts) == 4 else 1.0))
        except ValueError as exc:
            raise click.BadParameter(str(exc), param_hint="--anomalies") from exc
    return out


@main.command()
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output .spa archive.")
@click.option("--width", default=64, show_default=True, type=click.IntRange(min=1))
@click.option("--height", default=64, show_default=True, type=click.IntRange(min=1))
@click.option("--layout", default="ar", show_default=True,
              help="quiet | spot | ar | random:<seed> | class:cx,cy,r[,pol];...")
@click.option("--anomalies", default=None, help='Injected pixels, e.g. "7,3,three-lobed;10,12,broadened,0.6".')
@click.option("--mode", type=click.Choice(["QT", "FL"]), default="QT", show_default=True)
@click.option("--sigma-ref", default=0.005, show_default=True, type=click.FloatRange(min=0.0),
              help="Noise std at the reference integration time (1.6 s).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--truth", default=None, type=click.Path(dir_okay=False),
              help="Ground-truth sidecar (default: <out>.truth.json).")
def synth(out, width, height, layout, anomalies, mode, sigma_ref, seed, truth):
    """Generate a synthetic map with optional injected anomalies."""
    from .fitsio import write_archive, write_truth
    from .spectra import MapMetadata
    from .synth import NoiseModel, parse_layout, synth_map

    started = time.monotonic()
    anoms = _parse_anomalies(anomalies)
    try:
        regions = parse_layout(layout)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--layout") from exc
    meta = MapMetadata.for_mode(mode)

    def go():
        res = synth_map(width, height, regions, anoms, meta, NoiseModel(sigma_ref), seed)
        write_archive(res.map, out)
        truth_path = truth or f"{out}.truth.json"
        write_truth(res.anomalies, truth_path)
        config = {"width": width, "height": height, "layout": layout, "mode": mode, "sigma_ref": sigma_ref,
                  "metadata": meta.to_dict(), "anomalies": [a.to_dict() for a in res.anomalies]}
        write_manifest(f"{out}.manifest.json", "synth", config, [], [out, truth_path], seed, started)

    _run(go)


@main.command(name="import")
@click.option("--fits-dir", required=True, type=click.Path(file_okay=False))
@click.option("--axis-convention", type=click.Choice(["wave-stokes-slit", "wave-slit-stokes"]),
              default="wave-stokes-slit", show_default=True, help="FITS axis order, NAXIS1 first.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def import_(fits_dir, axis_convention, out):
    """Assemble per-slit FITS scans into a .spa archive."""
    from .fitsio import import_scan_directory, write_archive

    started = time.monotonic()
    if not Path(fits_dir).is_dir():
        raise click.BadParameter(f"{fits_dir} is not a directory", param_hint="--fits-dir")
    try:
        m = import_scan_directory(fits_dir, axis_convention)
    except EmptyDirectory as exc:
        raise click.UsageError(str(exc)) from exc
    except StokesAEError as exc:
        raise RuntimeFailure(f"{type(exc).__name__}: {exc}") from exc
    files = sorted(p for p in Path(fits_dir).iterdir() if p.suffix.lower() in (".fits", ".fts", ".fit"))
    _run(lambda: write_archive(m, out))
    write_manifest(f"{out}.manifest.json", "import", {"axis_convention": axis_convention,
                                                      "width": m.width, "height": m.height},
                   files, [out], None, started)


def _threads_option(fn):
    return click.option("--threads", type=click.IntRange(min=1), default=None, envvar="SPAE_THREADS",
                        help="Worker threads (falls back to $SPAE_THREADS, then 1).")(fn)


@main.command()
@click.option("--train", "train_paths", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--val", "val_paths", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None, help="Training config JSON.")
@click.option("--out-checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--history", default=None, type=click.Path(dir_okay=False),
              help="History CSV (default: <checkpoint>.history.csv).")
@click.option("--max-epochs", type=click.IntRange(min=1), default=None, help="Override the config value.")
@click.option("--seed", type=int, default=None, help="Override the config value.")
@_threads_option
def train(train_paths, val_paths, config, out_checkpoint, history, max_epochs, seed, threads):
    """Train the autoencoder on normal maps."""
    from .fitsio import read_archive
    from .nn.checkpoint import save_checkpoint
    from .trainer import TrainConfig, build_dataset, train as run_train

    started = time.monotonic()
    try:
        cfg_dict = json.loads(Path(config).read_text()) if config else {}
        if max_epochs is not None:
            cfg_dict["max_epochs"] = max_epochs
        if seed is not None:
            cfg_dict["seed"] = seed
        if threads is not None:
            cfg_dict["threads"] = threads
        if cfg_dict.get("architecture") and config:
            cfg_dict["architecture"] = str(Path(config).parent / cfg_dict["architecture"])
        cfg = TrainConfig.from_dict(cfg_dict)
    except (ValueError, TypeError) as exc:
        raise click.BadParameter(str(exc), param_hint="--config") from exc

    def go():
        ds = build_dataset([read_archive(p) for p in train_paths], mode=cfg.normalization)
        vs = build_dataset([read_archive(p) for p in val_paths], mode=cfg.normalization)

        def progress(epoch, tl, vl, lr):
            log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, tl, vl, lr)

        model, hist, state = run_train(ds, vs, cfg, progress=progress)
        save_checkpoint(model, state, hist, out_checkpoint)
        hist_path = history or f"{out_checkpoint}.history.csv"
        hist.write_csv(hist_path)
        resolved = cfg.to_dict()
        resolved.pop("threads")  # results do not depend on it
        write_manifest(f"{out_checkpoint}.manifest.json", "train",
                       {**resolved, "stop_reason": hist.stop_reason.value, "best_epoch": hist.best_epoch,
                        "n_train": len(ds), "n_val": len(vs), "skipped": ds.skipped + vs.skipped},
                       [*train_paths, *val_paths], [out_checkpoint, hist_path], cfg.seed, started)
        click.echo(f"{hist.stop_reason.value} after {len(hist)} epochs; best epoch {hist.best_epoch} "
                   f"val loss {min(hist.val_loss):.6g}")

    _run(go)


@main.command()
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--top-k", type=click.IntRange(min=0), default=None, help="Default: 1% of the pixels, rounded up.")
@click.option("--normalization", type=click.Choice(["per-spectrum", "per-map"]), default="per-spectrum",
              show_default=True)
def detect(map_path, checkpoint, out_dir, top_k, normalization):
    """Score a map and write heatmaps, statistics and neighborhoods."""
    from .anomaly import detect as run_detect, emit_report
    from .fitsio import read_archive
    from .nn.checkpoint import load_checkpoint

    started = time.monotonic()

    def go():
        model = load_checkpoint(checkpoint)[0]
        m = read_archive(map_path)
        report = run_detect(m, model, top_k, normalization)
        files = emit_report(report, out_dir)
        write_manifest(Path(out_dir) / "manifest.json", "detect",
                       {"top_k": len(report.top_k), "normalization": normalization},
                       [map_path, checkpoint], files, None, started)
        s = report.stats
        click.echo(f"h_pixel {report.h_pixel}  mu_rmse ({s.mu_rmse_i:.6g}, {s.mu_rmse_v:.6g})  "
                   f"sigma_obs ({s.sigma_obs_i:.6g}, {s.sigma_obs_v:.6g})")

    _run(go)


@main.command()
@click.option("--report", required=True, type=click.Path(exists=True, dir_okay=False), help="report.json from detect.")
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False), help="Ground-truth sidecar.")
def score(report, truth):
    """Recall and precision of a report's top-k pixels against ground truth."""
    from .anomaly import score as run_score
    from .fitsio import read_truth

    def go():
        doc = json.loads(Path(report).read_text())
        s = run_score(doc["top_k"], read_truth(truth))
        click.echo(json.dumps(s.to_dict(), sort_keys=True))

    _run(go)


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Architecture JSON (default architecture when omitted).")
@click.option("--seed", "seeds", multiple=True, type=int, help="Repeatable; default 1..5.")
@click.option("--h", "h", default=1e-6, show_default=True, type=float)
@click.option("--batch", default=4, show_default=True, type=click.IntRange(min=1))
@click.option("--per-layer", default=128, show_default=True, type=click.IntRange(min=0),
              help="Weight entries sampled per tensor; 0 checks every entry.")
@click.option("--tol", default=1e-5, show_default=True, type=float)
def gradcheck(config, seeds, h, batch, per_layer, tol):
    """Compare backprop gradients with central finite differences."""
    from .nn.gradcheck import gradcheck_seeds
    from .nn.model import load_architecture

    if not h > 0:
        raise click.BadParameter("must be positive", param_hint="--h")
    specs, latent = load_architecture(config) if config else (None, None)
    results = _run(lambda: gradcheck_seeds(seeds or (1, 2, 3, 4, 5), batch, specs, latent, h, per_layer or None))
    worst = 0.0
    for s, r in results.items():
        click.echo(f"seed {s}: max rel error {r.max_rel_error:.3e} over {r.checked} entries "
                   f"({r.skipped_kinks} skipped at kinks)")
        worst = max(worst, r.max_rel_error)
    ok = all(r.passed(tol) for r in results.values())
    click.echo(f"max relative error {worst:.3e} {'<' if ok else '>='} {tol:g}: {'PASS' if ok else 'FAIL'}")
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
