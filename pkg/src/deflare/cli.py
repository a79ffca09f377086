"""Command-line interface.

Subcommands: synth (build a dataset), train, eval, bank (inspect the
pseudo-label store), bench-attention, check-grads. A JSON config file is the
source of truth for training; individual fields can be overridden with
``--set dotted.key=value``. Exit codes: 0 success, 1 usage, 2 validation,
3 runtime numeric failure. DEFLARE_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .checks import attention_benchmark, gradient_suite
from .engine import (
    PseudoLabelBank,
    TrainConfig,
    Trainer,
    ValidationError,
    load_dataset,
)
from .metrics import aggregate_reports, evaluate_pair
from .synth import (
    AugmentationParams,
    DomainError,
    Rng,
    flare_region_masks,
    procedural_background,
    procedural_flare,
    synthesize_pair,
)
from .tensor import ConfigError, DimensionError, NumericError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out(command: str, given) -> Path:
    if given:
        return Path(given)
    root = os.environ.get("DEFLARE_OUT")
    if not root:
        raise UsageError(f"--out is required (or set DEFLARE_OUT) for '{command}'")
    return Path(root) / command


# -- synth -------------------------------------------------------------------------

def _source_images(directory, size: int):
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise UsageError(f"no .png files found in {directory}")
    return files


def _load_source(files, rng: Rng, size: int) -> np.ndarray:
    from PIL import Image

    path = files[int(rng.integers(0, len(files)))]
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def build_dataset(
    out_dir: Path,
    count: int,
    unlabeled_count: int,
    size: int,
    seed: int,
    backgrounds=None,
    flares=None,
    params: AugmentationParams | None = None,
) -> dict:
    """Write a labeled/unlabeled split with ground-truth flare masks."""
    params = params or AugmentationParams()
    out_dir = Path(out_dir)
    (out_dir / "labeled").mkdir(parents=True, exist_ok=True)
    (out_dir / "unlabeled").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    bg_files = _source_images(backgrounds, size) if backgrounds else None
    fl_files = _source_images(flares, size) if flares else None
    rng = Rng(seed)

    def make_background(r: Rng):
        return _load_source(bg_files, r, size) if bg_files else procedural_background(r, size)

    def make_flare(r: Rng):
        return _load_source(fl_files, r, size) if fl_files else procedural_flare(r, size)

    labeled = []
    for i in range(count):
        r = rng.child(10, i)
        pair, flare_lin = synthesize_pair(make_background(r.child(0)), make_flare(r.child(1)), params, r.child(2), return_flare=True)
        glare, streak = flare_region_masks(flare_lin)
        sid = f"L{i:04d}"
        dio.save_image(out_dir / "labeled" / f"{sid}_input.png", pair.input)
        dio.save_image(out_dir / "labeled" / f"{sid}_target.png", pair.target)
        dio.save_mask(out_dir / "masks" / f"{sid}_glare.png", glare)
        dio.save_mask(out_dir / "masks" / f"{sid}_streak.png", streak)
        labeled.append(
            {
                "id": sid,
                "input": f"labeled/{sid}_input.png",
                "target": f"labeled/{sid}_target.png",
                "glare_mask": f"masks/{sid}_glare.png",
                "streak_mask": f"masks/{sid}_streak.png",
            }
        )
    unlabeled = []
    for i in range(unlabeled_count):
        r = rng.child(20, i)
        pair = synthesize_pair(make_background(r.child(0)), make_flare(r.child(1)), params, r.child(2))
        uid = f"U{i:04d}"
        dio.save_image(out_dir / "unlabeled" / f"{uid}.png", pair.input)
        unlabeled.append({"id": uid, "image": f"unlabeled/{uid}.png"})
    manifest = {
        "seed": seed,
        "size": size,
        "background_source": str(backgrounds) if backgrounds else "procedural",
        "flare_source": str(flares) if flares else "procedural",
        "labeled": labeled,
        "unlabeled": unlabeled,
    }
    dio.write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def cmd_synth(args) -> int:
    out = _default_out("synth", args.out)
    unlabeled = args.count if args.unlabeled_count is None else args.unlabeled_count
    manifest = build_dataset(out, args.count, unlabeled, args.size, args.seed, args.backgrounds, args.flares)
    print(f"wrote {len(manifest['labeled'])} labeled pairs, {len(manifest['unlabeled'])} unlabeled images to {out}")
    return 0


# -- train -------------------------------------------------------------------------

def _apply_overrides(cfg_dict: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg_dict
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValidationError(f"unknown config field '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config field '{key}'")
        node[parts[-1]] = value
    return cfg_dict


def load_train_config(config_path=None, overrides=None) -> TrainConfig:
    base = TrainConfig().to_dict()
    if config_path:
        user = json.loads(Path(config_path).read_text())
        for key, value in user.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                base[key].update(value)
            elif key in base:
                base[key] = value
            else:
                raise ValidationError(f"unknown config field '{key}'")
    _apply_overrides(base, overrides)
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    manifest = Path(args.data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise UsageError(f"dataset manifest not found: {manifest}")
    cfg = load_train_config(args.config, args.set)
    data = load_dataset(manifest)
    if args.steps is not None:
        steps = args.steps
    else:
        per_epoch = max(1, math.ceil(len(data.labeled) / cfg.batch_labeled))
        steps = cfg.schedule.total_epochs * per_epoch
    out = _default_out("train", args.out)
    trainer = Trainer(data, cfg, out, args.seed, steps)
    summary = trainer.run()
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise UsageError("eval: --pred and --gt must be directories")
    pred_names = {p.name for p in pred_dir.glob("*.png")}
    gt_names = {p.name for p in gt_dir.glob("*.png")}
    missing = sorted(gt_names - pred_names)
    extra = sorted(pred_names - gt_names)
    if missing or extra:
        for name in missing:
            print(f"missing prediction: {name}", file=sys.stderr)
        for name in extra:
            print(f"prediction without ground truth: {name}", file=sys.stderr)
        raise ValidationError("eval: prediction/ground-truth filenames do not align")
    reports = {}
    per_image = []
    for name in sorted(gt_names):
        pred = dio.load_image(pred_dir / name)
        gt = dio.load_image(gt_dir / name)
        masks = {}
        if args.masks:
            stem = Path(name).stem
            for mask_name in ("glare", "streak"):
                mpath = Path(args.masks) / f"{stem}_{mask_name}.png"
                if mpath.exists():
                    m = dio.load_mask(mpath)
                    if m.any():
                        masks[mask_name] = m
        rep = evaluate_pair(pred, gt, masks)
        reports[name] = rep.to_dict()
        per_image.append(rep)
    mean = aggregate_reports(per_image)
    payload = {"images": reports, "mean": mean.to_dict(), "count": len(per_image)}
    Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"evaluated {len(per_image)} pairs; mean PSNR {mean.psnr_db:.3f} dB, SSIM {mean.ssim:.4f}")
    return 0


# -- bank --------------------------------------------------------------------------

def cmd_bank(args) -> int:
    bank = PseudoLabelBank.load(args.repo)
    if args.action == "inspect":
        print(f"{'id':<10} {'init':<5} {'score':>8} {'mean':>8}")
        for sid in sorted(bank.entries):
            e = bank.entries[sid]
            print(f"{sid:<10} {str(e.initialized):<5} {e.score:>8.3f} {float(e.pseudo_label.mean()):>8.4f}")
        print(f"{len(bank.entries)} entries")
        return 0
    # stats
    scores = [e.score for e in bank.entries.values() if e.initialized]
    print(f"entries: {len(bank.entries)}  initialized: {len(scores)}")
    if scores:
        hist, edges = np.histogram(scores, bins=10, range=(0.0, 100.0))
        for h, lo, hi in zip(hist, edges[:-1], edges[1:]):
            print(f"  [{lo:5.1f},{hi:5.1f}) {h}")
    if args.log:
        _, records = dio.read_log(args.log)
        accepted = sum(r.get("bank_accepted", 0) for r in records)
        rejected = sum(r.get("bank_rejected", 0) for r in records)
        print(f"log: accepted={accepted} rejected={rejected}")
        # replay per-entry accept events: under gating, the stored score can
        # only have ratcheted up from the first accepted candidate
        first_accepted: dict[str, float] = {}
        for rec in records:
            for ev in rec.get("bank_events", []):
                if ev["accepted"] and ev["sample_id"] not in first_accepted:
                    first_accepted[ev["sample_id"]] = ev["candidate_score"]
        regressions = [
            sid for sid, first in first_accepted.items()
            if sid in bank.entries and bank.entries[sid].score < first
        ]
        print(f"log-replay: entries with stored score below first accepted score: {len(regressions)}")
    return 0


# -- bench + grad check --------------------------------------------------------------

def cmd_bench_attention(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rows = attention_benchmark(sizes, dim=args.dim, value_dim=args.dim, reps=args.reps, seed=args.seed)
    lines = ["n_tokens,t_linear_s,t_quadratic_s,max_abs_diff"]
    for r in rows:
        lines.append(f"{r.n_tokens},{r.t_linear:.6e},{r.t_quadratic:.6e},{r.max_abs_diff:.3e}")
    out = Path(args.out) if args.out else _default_out("bench", None) / "attention.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if len(rows) >= 2:
        print(f"linear ratio {rows[-1].t_linear / rows[0].t_linear:.2f}, quadratic ratio {rows[-1].t_quadratic / rows[0].t_quadratic:.2f}")
    return 0


def cmd_check_grads(args) -> int:
    reports = gradient_suite()
    failures = 0
    for r in reports:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name:<26} max_rel_error={r.max_rel_error:.3e}")
        failures += 0 if r.ok else 1
    print(f"{len(reports) - failures}/{len(reports)} gradient checks passed")
    return 0 if failures == 0 else 3


# -- parser ------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="deflare", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a labeled/unlabeled flare dataset")
    sp.add_argument("--out", default=None)
    sp.add_argument("--count", type=int, default=8, help="labeled pair count")
    sp.add_argument("--unlabeled-count", type=int, default=None, help="defaults to --count")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--backgrounds", default=None, help="directory of background PNGs (default: procedural)")
    sp.add_argument("--flares", default=None, help="directory of flare PNGs (default: procedural)")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="run semi-supervised training")
    tp.add_argument("--data", required=True, help="dataset directory or manifest.json")
    tp.add_argument("--out", default=None)
    tp.add_argument("--steps", type=int, default=None, help="total optimizer steps (default: from epochs)")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--config", default=None, help="JSON training config")
    tp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="compute metrics over aligned directories")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--masks", default=None)
    ep.add_argument("--report", required=True)
    ep.set_defaults(func=cmd_eval)

    bp = sub.add_parser("bank", help="inspect a pseudo-label bank archive")
    bp.add_argument("action", choices=["inspect", "stats"])
    bp.add_argument("--repo", required=True)
    bp.add_argument("--log", default=None, help="training log for accept/reject stats")
    bp.set_defaults(func=cmd_bank)

    ap = sub.add_parser("bench-attention", help="time linear vs quadratic attention")
    ap.add_argument("--sizes", default="1024,4096")
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    ap.set_defaults(func=cmd_bench_attention)

    gp = sub.add_parser("check-grads", help="run the gradient-check suite")
    gp.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValidationError, DomainError, DimensionError, ConfigError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
