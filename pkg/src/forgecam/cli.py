"""forgecam command line: synth, train, eval, explain.

Every command writes ``run_config.json`` next to its outputs; the stored
``argv`` reruns it exactly. Seeds default to fixed constants.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcam as G
from .dataset import DatasetManifest, ManifestError, Record, load_image_tensor, manifest_from_records
from .imaging import ImageReadError, bilinear_resize, read_mask, read_png, write_png
from .model import ArchConfig, CheckpointError, load_checkpoint, save_checkpoint
from .procedural import ProceduralConfig, make_procedural_image
from .synth import SynthConfig, SynthesisSkipped, synth_copy_move, synth_inpaint
from .training import SCENARIOS, TrainConfig, TrainingAborted, evaluate, scenario_manifest, train

log = logging.getLogger("forgecam")

DEFAULT_SEED = 0
RUN_CONFIG = "run_config.json"


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 2."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run_config(out_dir: Path, args, argv) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
             if k != "func"}
    for k, v in flags.items():
        if isinstance(v, list):
            flags[k] = [str(x) for x in v]
    _write_json(out_dir / RUN_CONFIG, {"command": args.command, "flags": flags, "argv": argv})


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable ({exc})") from None
    return path


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def _procedural_sources(args):
    pc = ProceduralConfig(size=args.size, radius_range=(args.radius_min, args.radius_max))
    ss = np.random.SeedSequence(args.seed)
    # one stream of image seeds for authentic sources, another for forged ones
    a_seeds, f_seeds = (np.random.default_rng(s) for s in ss.spawn(2))

    def gen(rng, prefix):
        k = 0
        while True:
            s = int(rng.integers(2**31))
            img, masks = make_procedural_image(s, pc)
            yield f"{prefix}{k:05d}", s, img, masks
            k += 1
    return gen(a_seeds, "proc-a"), gen(f_seeds, "proc-f")


def _directory_sources(args):
    """Images ``<stem>.png`` in --source-dir with masks ``<stem>_*.png`` in --mask-dir."""
    src = Path(args.source_dir)
    mask_dir = Path(args.mask_dir) if args.mask_dir else src / "masks"
    items = []
    for p in sorted(src.glob("*.png")):
        masks = [read_mask(m) for m in sorted(mask_dir.glob(f"{p.stem}_*.png"))]
        items.append((p.stem, read_png(p), masks))
    if not items:
        raise CliError(f"no PNG images in {src}")
    seeds = np.random.default_rng(args.seed).integers(2**31, size=len(items))

    # each source is written once as authentic and offered once for forgery
    def gen():
        for (stem, img, masks), s in zip(items, seeds):
            yield stem, int(s), img, masks
    return gen(), gen()


def _forge(kind, config, item):
    source_id, seed, img, masks = item
    try:
        if kind == "copy_move":
            return synth_copy_move(img, masks, seed, config, source_id)
        return synth_inpaint(img, masks, seed, config, source_id)
    except SynthesisSkipped as exc:
        return exc


def cmd_synth(args, argv) -> int:
    out = _prepare_out(Path(args.out))
    if args.procedural:
        authentic_src, forged_src = _procedural_sources(args)
        max_tries = args.count * args.max_tries_factor
    else:
        if not args.source_dir:
            raise CliError("pass --procedural or --source-dir")
        authentic_src, forged_src = _directory_sources(args)
        max_tries = None
    config = SynthConfig(alpha_interior=args.alpha_interior, feather_px=args.feather_px,
                         area_bounds=(args.area_min, args.area_max))

    (out / "authentic").mkdir(exist_ok=True)
    (out / "forged" / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for k, (source_id, _, img, _) in zip(range(args.count), authentic_src):
        rel = f"authentic/a{k:05d}.png"
        write_png(out / rel, img)
        records.append(Record(rel, 0))
    n_auth = len(records)

    forged, provenance, skipped, tried = [], [], 0, 0
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        while len(forged) < args.count:
            chunk = []
            for item in forged_src:
                chunk.append(item)
                if len(chunk) >= args.count - len(forged):
                    break
            if not chunk or (max_tries is not None and tried >= max_tries):
                break
            tried += len(chunk)
            # map preserves order, so the result is independent of --threads
            for res in pool.map(lambda it: _forge(args.kind, config, it), chunk):
                if isinstance(res, SynthesisSkipped):
                    skipped += 1
                    log.debug("skipped source: %s", res.reason)
                    continue
                if len(forged) < args.count:
                    forged.append(res)
    if not forged:
        raise CliError(f"zero admissible sources for {args.kind} ({skipped} skipped)")

    for k, rec in enumerate(forged):
        img_rel, mask_rel = f"forged/f{k:05d}.png", f"forged/masks/f{k:05d}.png"
        write_png(out / img_rel, rec.forged_image)
        write_png(out / mask_rel, rec.truth_mask)
        records.append(Record(img_rel, 1, rec.forgery_kind, mask_rel))
        prov = rec.provenance(mask_rel.removeprefix("forged/"))
        prov["image_path"] = img_rel.removeprefix("forged/")
        provenance.append(prov)
    (out / "forged" / "records.jsonl").write_text(
        "".join(json.dumps(p, sort_keys=True, separators=(",", ":")) + "\n" for p in provenance),
        encoding="utf-8")

    manifest = manifest_from_records(records, args.split_seed, out)
    manifest.save(out / "manifest.jsonl")
    _write_run_config(out, args, argv)
    print(f"authentic: {n_auth}")
    print(f"{args.kind}: {len(forged)}")
    print(f"skipped sources: {skipped}")
    print(f"manifest: {out / 'manifest.jsonl'} ({len(manifest)} records)")
    return 0 if len(forged) == args.count and n_auth == args.count else 1


# --------------------------------------------------------------------------
# train / eval
# --------------------------------------------------------------------------

def _load_manifests(paths) -> list[DatasetManifest]:
    out = []
    for p in paths:
        try:
            out.append(DatasetManifest.load(p).with_absolute_paths())
        except OSError as exc:
            raise CliError(f"cannot read manifest {p} ({exc})") from None
    return out


def cmd_train(args, argv) -> int:
    paths = args.manifests or ([args.manifest] if args.manifest else [])
    if not paths:
        raise CliError("pass --manifest or --manifests")
    out = _prepare_out(Path(args.out))
    seed = args.seed
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
        rho=args.rho, epsilon=args.rms_epsilon,
        init_seed=seed if args.init_seed is None else args.init_seed,
        shuffle_seed=seed if args.shuffle_seed is None else args.shuffle_seed,
        split_seed=seed if args.split_seed is None else args.split_seed,
        scenario=args.scenario, arch=ArchConfig(input_size=args.input_size))
    manifest = scenario_manifest(config.scenario, _load_manifests(paths), config.split_seed)
    _write_run_config(out, args, argv)
    _write_json(out / "train_config.json", config.to_dict())

    metrics = out / "metrics.csv"
    with open(metrics, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_acc"])
        writer.writeheader()

        def progress(row):
            writer.writerow({"epoch": row["epoch"], "train_loss": repr(row["train_loss"]),
                             "val_acc": repr(row["val_acc"])})
            fh.flush()
            print(f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}  "
                  f"val_acc {row['val_acc']:.3f}")
        try:
            model = train(config, manifest, progress=progress)
        except TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 3
    save_checkpoint(model, out / "model.fgl")
    manifest.save(out / "train_manifest.jsonl")
    print(f"checkpoint: {out / 'model.fgl'}")
    return 0


def _check_data_size(model, manifest: DatasetManifest, ids) -> None:
    size = model.arch.input_size
    for i in ids[:1]:
        img = read_png(manifest.resolve(manifest.records[i].image_path))
        if img.shape[:2] != (size, size):
            raise CliError(f"checkpoint expects {size}x{size} inputs but "
                           f"{manifest.records[i].image_path} is {img.shape[1]}x{img.shape[0]}")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path} ({exc})") from None


def cmd_eval(args, argv) -> int:
    model = _load_model(args.checkpoint)
    manifest = _load_manifests([args.manifest])[0]
    ids = manifest.split_ids(args.split)
    if not ids:
        raise CliError(f"split {args.split!r} of {args.manifest} is empty")
    _check_data_size(model, manifest, ids)
    report = evaluate(model, manifest, args.split)
    out = Path(args.out)
    _prepare_out(out.parent)
    d = report.to_dict()
    d.update(split=args.split, n=report.total, manifest=str(args.manifest),
             checkpoint=str(args.checkpoint))
    _write_json(out, d)
    _write_run_config(out.parent, args, argv)
    print(f"split {args.split}: accuracy {report.accuracy:.4f} over {report.total} images")
    print(f"  confusion: tp {report.tp}  fp {report.fp}  tn {report.tn}  fn {report.fn}")
    for kind, row in report.per_kind.items():
        print(f"  {kind:10s} accuracy {row['accuracy']:.4f} ({row['correct']}/{row['total']})")
    return 0


# --------------------------------------------------------------------------
# explain
# --------------------------------------------------------------------------

def _explain_items(args):
    """(output stem, image path, mask path or None, path as recorded) per image."""
    if args.manifest:
        try:
            m = DatasetManifest.load(args.manifest)
        except OSError as exc:
            raise CliError(f"cannot read manifest {args.manifest} ({exc})") from None
        ids = m.split_ids(args.split) if args.split != "all" else range(len(m))
        for i in ids:
            r = m.records[i]
            yield (f"{i:05d}_{Path(r.image_path).stem}", m.resolve(r.image_path),
                   None if r.mask_path is None else m.resolve(r.mask_path), r.image_path)
    mask_dir = Path(args.mask_dir) if args.mask_dir else None
    for p in args.images or []:
        path = Path(p)
        mask = mask_dir / path.name if mask_dir and (mask_dir / path.name).is_file() else None
        yield path.stem, path, mask, p


def explain_one(model, image_u8: np.ndarray, mask, top_fraction: float, blend: float):
    size = model.arch.input_size
    if image_u8.shape[:2] != (size, size):
        raise CliError(f"checkpoint expects {size}x{size} inputs, got "
                       f"{image_u8.shape[1]}x{image_u8.shape[0]}")
    x = (image_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    heatmap, logit = G.grad_cam(model, x, G.FORGED)
    sidecar = {
        "predicted_label": G.FORGED if logit > 0 else G.AUTHENTIC,
        "logit": logit,
        "class_explained": G.FORGED,
        "degenerate_flag": heatmap.degenerate,
        "normalization": {"min": heatmap.min, "max": heatmap.max},
    }
    if mask is not None:
        score = G.localization_score(heatmap, mask, top_fraction)
        sidecar["localization_score"] = {
            "mass_in_mask_fraction": score.mass_in_mask_fraction,
            "mask_area_fraction": score.mask_area_fraction,
            "concentration_ratio": score.concentration_ratio,
            "top_fraction": top_fraction,
            "degenerate": score.degenerate,
        }
    return heatmap, sidecar, G.render_overlay(image_u8, heatmap, blend)


def cmd_explain(args, argv) -> int:
    if not args.manifest and not args.images:
        raise CliError("pass --manifest or --images")
    model = _load_model(args.checkpoint)
    out = _prepare_out(Path(args.out))
    _write_run_config(out, args, argv)
    ratios, written, skipped, failed = [], 0, 0, 0
    for stem, img_path, mask_path, recorded in _explain_items(args):
        try:
            img = read_png(img_path)
            mask = read_mask(mask_path) if mask_path is not None else None
        except (OSError, ImageReadError) as exc:
            log.error("unreadable input %s: %s", img_path, exc)
            failed += 1
            continue
        if mask is not None and mask.shape != img.shape[:2]:
            mask = bilinear_resize(mask.astype(np.float64), *img.shape[:2]) >= 0.5
        if mask is not None and not mask.any():
            mask = None
        size = model.arch.input_size
        if img.shape[:2] != (size, size):
            log.error("%s is %dx%d but the checkpoint expects %dx%d",
                      img_path, img.shape[1], img.shape[0], size, size)
            failed += 1
            continue
        x = load_image_tensor(img_path, size)
        logit = float(model.predict_logits(x[None])[0])
        if logit <= 0 and not args.force:
            log.info("skipped %s: predicted authentic (logit %.4f); use --force", img_path, logit)
            skipped += 1
            continue
        heatmap, sidecar, overlay = explain_one(model, img, mask, args.top_fraction, args.blend)
        sidecar["image_path"] = recorded  # as written in the manifest or on the command line
        write_png(out / f"{stem}.cam.png", G.heatmap_to_gray(heatmap))
        write_png(out / f"{stem}.overlay.png", overlay)
        _write_json(out / f"{stem}.json", sidecar)
        written += 1
        if "localization_score" in sidecar:
            ratios.append(sidecar["localization_score"]["concentration_ratio"])
    summary = {"explained": written, "skipped": skipped, "failed": failed,
               "scored": len(ratios),
               "mean_concentration_ratio": float(np.mean(ratios)) if ratios else None}
    _write_json(out / "summary.json", summary)
    print(f"explained {written}, skipped {skipped} (predicted authentic), failed {failed}")
    if ratios:
        print(f"mean concentration_ratio {summary['mean_concentration_ratio']:.4f} "
              f"over {len(ratios)} masked images")
    return 0 if failed == 0 else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgecam", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate an authentic + forged dataset and its manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--procedural", action="store_true", help="use the built-in scene generator")
    s.add_argument("--source-dir", help="PNG sources (masks <stem>_*.png in --mask-dir)")
    s.add_argument("--mask-dir")
    s.add_argument("--count", type=int, default=100, help="authentic and forged images each")
    s.add_argument("--kind", choices=["copy_move", "inpaint"], default="copy_move")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--split-seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--radius-min", type=float, default=0.12)
    s.add_argument("--radius-max", type=float, default=0.28)
    s.add_argument("--alpha-interior", type=float, default=0.95)
    s.add_argument("--feather-px", type=int, default=2)
    s.add_argument("--area-min", type=float, default=0.01)
    s.add_argument("--area-max", type=float, default=0.30)
    s.add_argument("--max-tries-factor", type=int, default=20)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one of the three scenario models")
    t.add_argument("--manifest")
    t.add_argument("--manifests", nargs="+")
    t.add_argument("--scenario", choices=sorted(SCENARIOS), default="model3_combined")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=15)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--learning-rate", type=float, default=1e-4)
    t.add_argument("--rho", type=float, default=0.9)
    t.add_argument("--rms-epsilon", type=float, default=1e-8)
    t.add_argument("--input-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help="default for the init, shuffle and split seeds")
    t.add_argument("--init-seed", type=int)
    t.add_argument("--shuffle-seed", type=int)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--threads", type=int, default=1, help="accepted for symmetry; training is serial")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion counts on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="Grad-CAM heatmaps and overlays")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest")
    x.add_argument("--split", choices=["train", "val", "all"], default="val")
    x.add_argument("--images", nargs="+")
    x.add_argument("--mask-dir", help="masks with the same file names as --images")
    x.add_argument("--out", required=True)
    x.add_argument("--force", action="store_true", help="also explain authentic predictions")
    x.add_argument("--top-fraction", type=float, default=0.1)
    x.add_argument("--blend", type=float, default=0.4)
    x.add_argument("--threads", type=int, default=1)
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except (CliError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
