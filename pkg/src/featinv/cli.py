"""``featinv`` command-line entry point.

Exit codes: 0 success, 1 other failure, 2 configuration or input error,
3 numeric failure, 4 capability error.
"""

import functools
import json
import logging
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import __version__
from .errors import FeatInvError, InputError

log = logging.getLogger("featinv")


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FeatInvError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
    return wrapper


def _config_options(fn):
    fn = click.option("--overwrite", is_flag=True, help="Replace an existing run directory.")(fn)
    fn = click.option("--run-id", default=None, help="Run directory name (default: command + config hash).")(fn)
    fn = click.option("--out", "output_dir", default=None, help="Output root (config key output_dir).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Config key seed.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key, e.g. --set attack.iterations=200. Repeatable.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), default=None, help="TOML run config.")(fn)
    return fn


def _quote(s):
    return json.dumps(str(s))


def _load(config_path, overrides, seed=None, output_dir=None, run_id=None, extra=()):
    from .config import parse_config

    sets = list(extra) + list(overrides)
    if seed is not None:
        sets.append(f"seed={seed}")
    if output_dir is not None:
        sets.append(f"output_dir={_quote(output_dir)}")
    if run_id is not None:
        sets.append(f"run_id={_quote(run_id)}")
    return parse_config(config_path, sets)


def _run(cfg, command, overwrite):
    from .runner import run, run_dir

    manifest = run(cfg, command, overwrite=overwrite)
    click.echo(json.dumps({"run_dir": str(run_dir(cfg, command)), "status": manifest["status"],
                           "config_hash": manifest["config_hash"], **manifest.get("aggregate", {})}))
    return manifest


@click.group()
@click.version_option(__version__, prog_name="featinv")
@click.option("-v", "--verbose", count=True, help="More logging.")
def cli(verbose):
    """Feature-inversion attacks on split neural networks."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_config_options
@click.option("--text", default=None, help="Text prompt; switches to the text-conditioned attack.")
@click.option("--frames", type=click.Path(), default=None, help="Directory of consecutive frames; multi-frame attack.")
@_handled
def whitebox(config_path, overrides, seed, output_dir, run_id, overwrite, text, frames):
    """White-box inversion of intercepted features."""
    extra = []
    if text is not None and frames is not None:
        raise InputError("--text and --frames select different attacks; pass one")
    if text is not None:
        extra += ['attack.variant="whitebox-text"', f"attack.text={_quote(text)}"]
    if frames is not None:
        extra += ['attack.variant="multiframe"', f"data.frames={_quote(frames)}"]
    _run(_load(config_path, overrides, seed, output_dir, run_id, extra), "whitebox", overwrite)


@cli.command("whitebox-text")
@_config_options
@click.option("--text", default=None, help="Text prompt (config key attack.text).")
@_handled
def whitebox_text(config_path, overrides, seed, output_dir, run_id, overwrite, text):
    """White-box inversion with a text-conditioned prior."""
    extra = ['attack.variant="whitebox-text"']
    if text is not None:
        extra.append(f"attack.text={_quote(text)}")
    _run(_load(config_path, overrides, seed, output_dir, run_id, extra), "whitebox", overwrite)


@cli.command()
@_config_options
@click.option("--frames", type=click.Path(), default=None, help="Directory of consecutive frames (config key data.frames).")
@_handled
def multiframe(config_path, overrides, seed, output_dir, run_id, overwrite, frames):
    """Joint white-box inversion of correlated frames."""
    extra = ['attack.variant="multiframe"']
    if frames is not None:
        extra.append(f"data.frames={_quote(frames)}")
    _run(_load(config_path, overrides, seed, output_dir, run_id, extra), "whitebox", overwrite)


@cli.command()
@click.argument("stage", type=click.Choice(["collect", "train", "run"]))
@_config_options
@_handled
def blackbox(stage, config_path, overrides, seed, output_dir, run_id, overwrite):
    """Black-box attack stages: collect queries, train the inverter, run it."""
    _run(_load(config_path, overrides, seed, output_dir, run_id), f"blackbox-{stage}", overwrite)


@cli.command()
@_config_options
@click.option("--sigmas", default=None, help="Comma-separated noise levels (config key defense.sigmas).")
@click.option("--csv", "csv_out", type=click.Path(), default=None, help="Also copy tradeoff.csv here.")
@_handled
def defend(config_path, overrides, seed, output_dir, run_id, overwrite, sigmas, csv_out):
    """Noise-defence sweep: task accuracy against attack quality."""
    from .runner import run_dir

    extra = []
    if sigmas is not None:
        try:
            values = [float(s) for s in sigmas.split(",") if s.strip()]
        except ValueError:
            raise InputError(f"--sigmas must be comma-separated numbers, got {sigmas!r}") from None
        extra.append(f"defense.sigmas={json.dumps(values)}")
    cfg = _load(config_path, overrides, seed, output_dir, run_id, extra)
    _run(cfg, "defend", overwrite)
    if csv_out:
        shutil.copyfile(run_dir(cfg, "defend") / "tradeoff.csv", csv_out)


@cli.command()
@click.option("--original", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--recon", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(), required=True, help="JSON report path; a CSV table is written beside it.")
@click.option("--classifier", default="toy_cnn", help="Model used for the Inception Score; 'none' to skip.")
@click.option("--grid", type=click.Path(), default=None, help="Also write an image-grid PNG.")
@_handled
def metrics(original, recon, out, classifier, grid):
    """PSNR, SSIM and Inception Score for paired image directories (matched by file name)."""
    from .io import load_png_dir
    from .metrics import SoftmaxClassifier, evaluate
    from .report import image_grid
    from .splitnet import build_model

    ids_a, a = load_png_dir(original)
    ids_b, b = load_png_dir(recon)
    if ids_a != ids_b:
        missing = sorted(set(ids_a) ^ set(ids_b))
        raise InputError(f"original and recon directories do not pair up; unmatched: {missing[:5]}")
    clf = None if classifier == "none" else SoftmaxClassifier(build_model(classifier), classifier)
    report = evaluate(a, b, clf, ids=ids_a)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    report.write_csv(out.with_suffix(".csv"))
    if grid:
        image_grid(a, b, grid)
    click.echo(json.dumps(report.aggregate))


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--max-images", default=10, show_default=True)
@_handled
def report(run_dir, max_images):
    """Render figures (loss curves, image grids, trade-off plot) for a finished run."""
    from .report import render_report

    for p in render_report(run_dir, max_images):
        click.echo(str(p))


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "output_dir", type=click.Path(), required=True, help="Output root for the re-run.")
@click.option("--overwrite", is_flag=True)
@_handled
def replay(manifest, output_dir, overwrite):
    """Re-execute a run from its manifest and compare artifact checksums."""
    from .runner import replay as do_replay

    _, diff = do_replay(manifest, output_dir, overwrite=overwrite)
    if diff:
        for name, (old, new) in diff.items():
            click.echo(f"MISMATCH {name}: {old} != {new}", err=True)
        sys.exit(1)
    click.echo("identical")


@cli.command()
@click.argument("configs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--command", "sub", default="whitebox", show_default=True,
              type=click.Choice(["whitebox", "whitebox-text", "multiframe", "defend"]))
@click.option("--jobs", "-j", default=1, show_default=True, type=click.IntRange(1))
@click.option("--out", "output_dir", default=None)
def batch(configs, sub, jobs, output_dir):
    """Run several configs, each in its own process."""
    def one(path):
        argv = [sys.executable, "-m", "featinv.cli", sub, "--config", path]
        if output_dir:
            argv += ["--out", output_dir]
        proc = subprocess.run(argv, capture_output=True, text=True)
        return path, proc.returncode, (proc.stdout + proc.stderr).strip()

    worst = 0
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for path, code, text in pool.map(one, configs):
            click.echo(f"[{code}] {path}: {text.splitlines()[-1] if text else ''}")
            worst = max(worst, code)
    sys.exit(worst)


def main(argv=None):
    cli.main(args=argv, prog_name="featinv")


if __name__ == "__main__":
    main()
