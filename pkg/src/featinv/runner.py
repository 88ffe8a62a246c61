"""Execute a validated :class:`~featinv.config.RunConfig` and write its artifacts.

Every run writes into a temporary sibling directory that is renamed into
place only on success. A failed run's partial output is moved under
``<output_dir>/.quarantine/`` so the final location never holds half a run.
The manifest lists every emitted file with its SHA-256.
"""

import contextlib
import csv
import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .blackbox import (
    build_inverter,
    collect_queries,
    load_dataset,
    run_inverter,
    save_dataset,
    train_inverter,
    train_inverter_multiframe,
    train_inverter_with_text,
    TrainedInverter,
)
from .config import from_dict
from .data import make_shapes, make_translated_frames
from .defense import tradeoff_sweep, write_sweep_csv
from .errors import FeatInvError, InputError
from .io import load_png_dir, save_png, sha256_file, write_json
from .metrics import SoftmaxClassifier, evaluate
from .priors import HashTextEncoder, build_prior, embed_text
from .splitnet import build_model, deterministic_from_env, extract_features, split
from .whitebox import invert, invert_multiframe, invert_with_text

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("total", "reconstruction", "tv", "negentropy", "temporal")
COMMANDS = ("whitebox", "blackbox-collect", "blackbox-train", "blackbox-run", "defend")


class StageError(FeatInvError):
    """Wraps an engine error with the stage it came from; keeps the original exit code."""

    def __init__(self, stage, exc):
        self.stage = stage
        self.original = exc
        self.exit_code = getattr(exc, "exit_code", 1)
        super().__init__(f"[{stage}] {exc}")


@contextlib.contextmanager
def staged_dir(final, overwrite=False):
    """Yield a temp dir that becomes ``final`` on success, or is quarantined on failure."""
    final = Path(final)
    if final.exists() and not overwrite:
        raise InputError(f"output directory {final} already exists (use --overwrite)")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.parent / f".tmp-{final.name}-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        qdir = final.parent / ".quarantine"
        qdir.mkdir(exist_ok=True)
        dest = qdir / f"{final.name}-{time.strftime('%Y%m%d-%H%M%S')}-{os.getpid()}"
        shutil.move(str(tmp), str(dest))
        raise
    if final.exists():
        trash = final.parent / f".old-{final.name}-{os.getpid()}"
        final.rename(trash)
        tmp.rename(final)
        shutil.rmtree(trash)
    else:
        tmp.rename(final)


def _write_trace(path, traces):
    """``traces``: list (per frame) of per-iteration breakdown dicts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        multi = len(traces) > 1
        writer.writerow((["frame"] if multi else []) + ["iteration", *TRACE_COLUMNS])
        for k, trace in enumerate(traces):
            for i, row in enumerate(trace):
                writer.writerow(([k] if multi else []) + [i + 1] + [repr(row[c]) for c in TRACE_COLUMNS])


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _artifacts(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


def _build_split(cfg):
    model = build_model(cfg.model.name, cfg.model.weights_path)
    return split(model, cfg.model.split_index)


def _build_prior(cfg, sm):
    p = cfg.prior
    settings = {}
    if p.name == "ldm_adapter":
        settings = {"scheduler": p.scheduler, "guidance_scale": p.guidance_scale}
    return build_prior(p.name, image_shape=sm.input_shape, weights_path=p.weights_path,
                       sampling_steps=p.sampling_steps, **settings)


def _classifier(cfg):
    return SoftmaxClassifier(build_model(cfg.metrics.classifier), cfg.metrics.classifier)


def load_targets(cfg):
    """``(ids, images, labels)`` from ``data.images`` or the procedural corpus."""
    if cfg.data.images:
        ids, images = load_png_dir(cfg.data.images)
        return ids, torch.from_numpy(images), None
    images, labels, _ = make_shapes(cfg.data.synthetic_count, seed=cfg.data.synthetic_seed)
    ids = [f"{i:04d}" for i in range(len(images))]
    return ids, torch.from_numpy(images), labels


def load_frame_groups(cfg, k):
    """(G, K, C, H, W) frames: consecutive PNGs of ``data.frames`` grouped by K, or synthetic."""
    if cfg.data.frames:
        _, frames = load_png_dir(cfg.data.frames)
        if len(frames) % k:
            raise InputError(f"{len(frames)} frames in {cfg.data.frames} do not split into groups of {k}")
        return torch.from_numpy(frames.reshape(-1, k, *frames.shape[1:]))
    frames, _ = make_translated_frames(cfg.data.synthetic_count, k=k, shift=cfg.data.frame_shift,
                                       seed=cfg.data.synthetic_seed)
    return torch.from_numpy(frames)


def _captions(cfg, n, default):
    if cfg.data.captions:
        mapping = json.loads(Path(cfg.data.captions).read_text())
        return [mapping.get(str(i)) for i in range(n)]
    return default


# ---------------------------------------------------------------- stages


def _stage_whitebox(cfg, out):
    sm = _build_split(cfg)
    prior = _build_prior(cfg, sm)
    icfg = cfg.inversion_config()
    variant = cfg.attack.variant
    if variant == "multiframe":
        frames = load_frame_groups(cfg, cfg.attack.frames)
        g, k = frames.shape[:2]
        z = extract_features(sm, frames.reshape(g * k, *frames.shape[2:])).reshape(g, k, *sm.feature_shape)
        results = invert_multiframe(sm, z, prior, icfg)
        recon = torch.stack([r.images for r in results], dim=1).reshape(g * k, *prior.output_shape)
        originals = frames.reshape(g * k, *frames.shape[2:])
        ids = [f"{i:04d}_{j}" for i in range(g) for j in range(k)]
        traces = [r.loss_trace for r in results]
        engine = results[0].manifest
    else:
        ids, originals, _ = load_targets(cfg)
        z = extract_features(sm, originals)
        if variant == "whitebox-text":
            e = embed_text(HashTextEncoder(), cfg.attack.text)
            result = invert_with_text(sm, z, prior, e, icfg, text=cfg.attack.text)
        else:
            result = invert(sm, z, prior, icfg)
        recon, traces, engine = result.images, [result.loss_trace], result.manifest
    for i, (orig, img) in enumerate(zip(originals, recon)):
        save_png(out / f"recon_{i:04d}.png", img.clamp(0, 1))
        save_png(out / f"original_{i:04d}.png", orig)
    _write_trace(out / "loss_trace.csv", traces)
    report = evaluate(originals, recon, _classifier(cfg), ids=ids)
    report.save(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    return {"engine": engine, "aggregate": report.aggregate}


def _stage_collect(cfg, out):
    sm = _build_split(cfg)
    b = cfg.blackbox
    if b.variant == "multiframe":
        train_x, _ = make_translated_frames(b.train_size, k=b.frames, shift=cfg.data.frame_shift, seed=cfg.seed + 11)
        test_x, _ = make_translated_frames(b.test_size, k=b.frames, shift=cfg.data.frame_shift, seed=cfg.seed + 12)
        train_t = test_t = None
    elif cfg.data.images:
        _, images = load_png_dir(cfg.data.images)
        if len(images) < 2:
            raise InputError("need at least two query images to form train and test splits")
        n_test = min(b.test_size, len(images) // 2)
        train_x, test_x = images[:-n_test], images[-n_test:]
        caps = _captions(cfg, len(images), None)
        train_t = caps[:-n_test] if caps else None
        test_t = caps[-n_test:] if caps else None
    else:
        train_x, _, train_t = make_shapes(b.train_size, seed=cfg.seed + 11)
        test_x, _, test_t = make_shapes(b.test_size, seed=cfg.seed + 12)
    train = collect_queries(sm, train_x, train_t, split="train")
    test = collect_queries(sm, test_x, test_t, split="test")
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    return {"engine": {"train_sha256": train.checksum(), "test_sha256": test.checksum(),
                       "split": sm.descriptor(), "train_size": len(train), "test_size": len(test)}}


def _stage_train(cfg, out, root):
    sm = _build_split(cfg)
    prior = _build_prior(cfg, sm)
    b = cfg.blackbox
    ds = load_dataset(root / "collect" / "train")
    k = b.frames if b.variant == "multiframe" else 1
    spec = build_inverter(ds.feature_shape, prior.latent_shape, k=k, param_budget=b.param_budget, fuse=b.fuse,
                          unet_depth=b.unet_depth, normalize_output=prior.normalized_input, width=b.width)
    tcfg = cfg.train_config()
    if b.variant == "text":
        inv = train_inverter_with_text(ds, spec, prior, tcfg, HashTextEncoder())
    elif b.variant == "multiframe":
        inv = train_inverter_multiframe(ds, spec, prior, tcfg)
    else:
        inv = train_inverter(ds, spec, prior, tcfg)
    inv.save(out / "inverter.zip")
    with open(out / "train_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in inv.manifest["loss_trace"]:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row.get("val_loss", "")), repr(row["lr"])])
    manifest = dict(inv.manifest)
    manifest.pop("loss_trace")
    return {"engine": manifest, "spec": spec.to_dict()}


def _stage_run(cfg, out, root):
    sm = _build_split(cfg)
    prior = _build_prior(cfg, sm)
    inv = TrainedInverter.load(root / "train" / "inverter.zip", prior=prior)
    ds = load_dataset(root / "collect" / "test")
    e = None
    if cfg.blackbox.variant == "text":
        # attack time has no caption for the victim image; use the configured prompt
        e = embed_text(HashTextEncoder(), cfg.blackbox.text)
    recon = run_inverter(inv, ds.y, e)
    originals = ds.x
    if ds.group_size > 1:
        recon = recon.reshape(-1, *recon.shape[2:])
        originals = originals.reshape(-1, *originals.shape[2:])
    for i, (orig, img) in enumerate(zip(originals, recon)):
        save_png(out / f"recon_{i:04d}.png", img.clamp(0, 1))
        save_png(out / f"original_{i:04d}.png", orig)
    report = evaluate(originals, recon, _classifier(cfg))
    report.save(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    return {"aggregate": report.aggregate}


def _stage_defend(cfg, out):
    sm = _build_split(cfg)
    prior = _build_prior(cfg, sm)
    icfg = cfg.inversion_config()
    d = cfg.defense
    images, labels, _ = make_shapes(d.eval_count, seed=cfg.data.synthetic_seed)

    def attack(z_noisy):
        return invert(sm, z_noisy, prior, icfg).images

    rows = tradeoff_sweep(sm, images, labels, attack, d.sigmas, d.noise_kind, seeds=tuple(d.seeds),
                          attack_count=d.attack_count)
    write_sweep_csv(rows, out / "tradeoff.csv")
    write_json(out / "tradeoff.json", rows)
    return {"engine": {"split": sm.descriptor(), "prior": prior.describe()}}


# ---------------------------------------------------------------- entry points


def run_dir(cfg, command):
    group = "blackbox" if command.startswith("blackbox") else command
    run_id = cfg.run_id or f"{group}-{cfg.digest()[:12]}"
    return Path(cfg.output_dir) / run_id


def run(cfg, command="whitebox", overwrite=False):
    """Execute ``command`` for ``cfg``; returns the manifest dict."""
    if command not in COMMANDS:
        raise InputError(f"unknown command {command!r}; choose from {COMMANDS}")
    deterministic = deterministic_from_env()
    root = run_dir(cfg, command)
    final = root if not command.startswith("blackbox") else root / command.split("-", 1)[1]
    t0 = time.time()
    with staged_dir(final, overwrite=overwrite) as tmp:
        try:
            if command == "whitebox":
                info = _stage_whitebox(cfg, tmp)
            elif command == "blackbox-collect":
                info = _stage_collect(cfg, tmp)
            elif command == "blackbox-train":
                info = _stage_train(cfg, tmp, root)
            elif command == "blackbox-run":
                info = _stage_run(cfg, tmp, root)
            else:
                info = _stage_defend(cfg, tmp)
        except FeatInvError as exc:
            raise StageError(command, exc) from exc
        manifest = {
            "command": command,
            "run_id": root.name,
            "config_hash": cfg.digest(),
            "config": cfg.to_dict(),
            "toolkit_version": __version__,
            "torch_version": torch.__version__,
            "deterministic": deterministic,
            "seeds": {"run": cfg.seed, "data": cfg.data.synthetic_seed},
            "timing": {"started": t0, "seconds": round(time.time() - t0, 3)},
            "status": info.get("engine", {}).get("status", "ok"),
            "artifacts": _artifacts(tmp),
        }
        manifest.update({k: v for k, v in info.items()})
        write_json(tmp / "manifest.json", manifest)
    return manifest


def replay(manifest_path, output_dir=None, overwrite=False):
    """Re-run the config stored in a manifest; returns ``(new_manifest, mismatched_artifacts)``.

    ``mismatched_artifacts`` maps each file whose checksum differs to
    ``(old, new)``. Blackbox stages need their upstream stages already
    present in the new output directory.
    """
    old = json.loads(Path(manifest_path).read_text())
    data = dict(old["config"])
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    data["run_id"] = old["run_id"]
    cfg = from_dict(data)
    new = run(cfg, old["command"], overwrite=overwrite)
    keys = set(old["artifacts"]) | set(new["artifacts"])
    diff = {k: (old["artifacts"].get(k), new["artifacts"].get(k)) for k in sorted(keys)
            if old["artifacts"].get(k) != new["artifacts"].get(k)}
    return new, diff
