"""Command line harness: train, infer, eval, viz-denoise, ablate-steps, synth-data, make-gt.

Errors exit nonzero and print one JSON line ``{"error": <category>, ...}``
on stderr so callers can branch on the category.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import viz
from .config import ExperimentConfig
from .data import DatasetManifest, load_dataset, load_image, read_fixations, resize_image, synth_dataset
from .errors import ConfigError, DatasetError, DiffAttnError, ShapeError
from .metrics import EvalReport, evaluate_sample
from .saliency import FixationMap, make_gt
from .schedule import plan_steps
from .train import Trainer, determinism_flags, evaluate, load_model, predict, resolve_device

log = logging.getLogger("diffattn")

EXIT_CODES = {
    "error": 1,
    "config": 3,
    "dataset": 4,
    "checkpoint-version": 5,
    "numeric": 6,
    "shape": 7,
    "contract": 7,
    "step-index": 8,
    "dependency": 9,
    "degenerate-target": 10,
    "undefined-metric": 10,
    "io": 11,
}

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


# --- helpers -----------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.toy()
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "out", None):
        cfg.run.out_dir = str(args.out)
    return cfg


def _model_from_checkpoint(args, device):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    cfg = ExperimentConfig.load(args.config) if args.config else None
    model, cfg, _ = load_model(args.checkpoint, cfg, device)
    if args.seed is not None:
        cfg.run.seed = args.seed
    return model, cfg


def _schedule(cfg):
    from .schedule import make_schedule

    d = cfg.diffusion
    return make_schedule(d.T_i, d.beta_start, d.beta_end), plan_steps(d.T_i, d.T_e)


def _image_paths(inputs) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            paths.append(p)
        else:
            raise DatasetError(f"input not found: {p}")
    if not paths:
        raise DatasetError("no input images")
    return paths


def _prepare(path: Path, cfg) -> tuple[np.ndarray, np.ndarray]:
    """(native image, image resized to the model input)."""
    native = load_image(path)
    return native, resize_image(native, (cfg.data.height, cfg.data.width))


def _to_native(s_map: np.ndarray, hw) -> np.ndarray:
    if s_map.shape == tuple(hw):
        return s_map
    t = torch.from_numpy(s_map)[None, None]
    return torch.nn.functional.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False)[0, 0].numpy()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.optim.max_steps = args.steps
    cfg.validate()
    device = resolve_device()
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    trainer = Trainer(cfg, device=device)
    if args.checkpoint:
        trainer.resume(args.checkpoint)
    res = trainer.fit(log_path=out / "loss.csv")
    summary = {"steps": res.steps, "final_loss": res.losses[-1] if res.losses else None,
               "last_checkpoint": str(res.last_checkpoint), "stopped_early": res.stopped_early,
               "determinism": determinism_flags(device)}
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_infer(args) -> int:
    device = resolve_device()
    model, cfg = _model_from_checkpoint(args, device)
    sched, plan = _schedule(cfg)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in _image_paths(args.inputs):
        native, image = _prepare(path, cfg)
        s_map = _to_native(predict(model, image[None], sched, plan, cfg.run.seed)[0], native.shape[1:])
        viz.save_map(out / f"{path.stem}.png", s_map)
        if args.overlay:
            viz.save_overlay(out / f"{path.stem}_overlay.png", native, s_map)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    root = args.data or cfg.data.root
    if not root:
        raise ConfigError("dataset root needed (--data or data.root in the config)")
    manifest = DatasetManifest(root, args.split or cfg.data.split, cfg.data.sigma or None, None)
    samples = load_dataset(manifest)
    if not samples:
        raise DatasetError(f"no samples in split {manifest.split!r} under {root}")
    report = EvalReport()
    pred_dir = Path(args.pred_dir)
    for s in samples:
        path = pred_dir / f"{s.id}.png"
        if not path.exists():
            raise DatasetError(f"missing prediction {path}")
        pred = viz.load_map(path)
        if pred.shape != s.gt.shape:
            raise ShapeError(f"{path}: prediction {pred.shape} vs ground truth {s.gt.shape}")
        report.add(s.id, evaluate_sample(pred, s.gt, s.fixation_map))
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    summary = report.write_summary(out / "eval_summary.json", {"determinism": determinism_flags()})
    print(json.dumps({k: v for k, v in summary.items() if k != "determinism"}))
    return 0


def cmd_viz_denoise(args) -> int:
    device = resolve_device()
    model, cfg = _model_from_checkpoint(args, device)
    sched, plan = _schedule(cfg)
    path = _image_paths([args.image])[0]
    _, image = _prepare(path, cfg)
    # chain state k is the latent entering denoising step k; state T_e is the output map
    n_states = plan.T_e + 1
    wanted = list(range(n_states)) if not args.steps else _int_list(args.steps)
    bad = [k for k in wanted if not 0 <= k < n_states]
    if bad:
        raise ConfigError(f"states {bad} outside 0..{plan.T_e} (plan {list(plan.steps)})")
    frames, latents = {}, {}
    scale = model.latent_scale

    def grab(s, k, tau, x):
        if s == 0 and k in wanted:
            latents[k] = x[0, 0].detach().double().cpu().numpy()
            frames[k] = torch.sigmoid(scale * x[0, 0]).double().cpu().numpy()

    frames[plan.T_e] = predict(model, image[None], sched, plan, cfg.run.seed, callback=grab)[0]
    tiles = [frames[k] for k in wanted]
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    viz.save_strip(out / f"{path.stem}_denoise.png", tiles)
    taus = [plan.steps[k] if k < plan.T_e else -1 for k in wanted]
    np.savez(out / f"{path.stem}_latents.npz", states=np.asarray(wanted), taus=np.asarray(taus),
             **{f"state_{k}": latents[k] for k in wanted if k in latents})
    print(json.dumps({"states": wanted, "taus": taus, "width": int(sum(t.shape[1] for t in tiles))}))
    return 0


def ablate_rows(model, cfg, samples, taus: list[int]) -> list[dict]:
    """Mode B: re-plan inference steps on a fixed model (no retraining)."""
    sched, _ = _schedule(cfg)
    rows = []
    for k, T_e in enumerate([cfg.diffusion.T_e] + list(taus)):
        plan = plan_steps(cfg.diffusion.T_i, T_e)
        agg = evaluate(model, samples, sched, plan, cfg.run.seed).aggregate()
        rows.append({"setting": "baseline" if k == 0 else f"tau={T_e}", "T_e": T_e, **agg})
    return rows


def cmd_ablate_steps(args) -> int:
    device = resolve_device()
    out = Path(args.out or "ablation")
    if args.te_list:
        # mode A: retrain one model per T_e
        cfg = _load_config(args)
        cfg.validate()
        samples = load_dataset(DatasetManifest(cfg.data.root, args.split or cfg.data.split, cfg.data.sigma or None,
                                               (cfg.data.height, cfg.data.width)))
        rows = []
        for T_e in _int_list(args.te_list):
            cfg.diffusion.T_e = T_e
            cfg.run.out_dir = str(out / f"te_{T_e}")
            trainer = Trainer(cfg, samples, device=device)
            trainer.fit(write_checkpoints=True)
            agg = evaluate(trainer.model, samples, trainer.sched, trainer.plan, cfg.run.seed).aggregate()
            rows.append({"setting": f"train T_e={T_e}", "T_e": T_e, **agg})
    else:
        if not args.tau_list:
            raise ConfigError("give --tau-list (re-plan a checkpoint) or --te-list (retrain per T_e)")
        model, cfg = _model_from_checkpoint(args, device)
        root = args.data or cfg.data.root
        samples = load_dataset(DatasetManifest(root, args.split or cfg.data.split, cfg.data.sigma or None,
                                               (cfg.data.height, cfg.data.width)))
        rows = ablate_rows(model, cfg, samples, _int_list(args.tau_list))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_synth_data(args) -> int:
    splits = {"train": 1.0 - args.val_frac, "val": args.val_frac} if args.val_frac > 0 else None
    root = synth_dataset(args.out, args.n, args.height, args.width, args.seed if args.seed is not None else 0,
                         splits=splits)
    print(json.dumps({"root": str(root), "n": args.n}))
    return 0


def cmd_make_gt(args) -> int:
    out = Path(args.out)
    if args.fixations:
        if not (args.height and args.width):
            raise ConfigError("--height and --width are required with --fixations")
        fix = FixationMap.from_points(read_fixations(args.fixations), args.height, args.width)
        out.parent.mkdir(parents=True, exist_ok=True)
        viz.save_map(out, make_gt(fix, args.sigma).grid)
        return 0
    if not args.data:
        raise ConfigError("give --fixations FILE or --data ROOT")
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(DatasetManifest(args.data, args.split or "train", args.sigma, None))
    for s in samples:
        viz.save_map(out / f"{s.id}.png", s.gt.grid)
    print(json.dumps({"written": len(samples)}))
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file (default: toy profile)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model (resumes with --checkpoint)")
    t.add_argument("--steps", type=int, default=None, help="override optim.max_steps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="write saliency maps for images")
    i.add_argument("inputs", nargs="+", help="image files or directories")
    i.add_argument("--overlay", action="store_true", help="also write heat overlays")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score a prediction directory against a dataset")
    e.add_argument("pred_dir")
    e.add_argument("--data", help="dataset root (default: data.root)")
    e.add_argument("--split", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-denoise", parents=[common], help="dump the denoising trajectory as a strip")
    v.add_argument("image")
    v.add_argument("--steps", default="",
                   help="comma-separated chain states 0..T_e; 0 is the prior, T_e the output (default: all)")
    v.set_defaults(func=cmd_viz_denoise)

    a = sub.add_parser("ablate-steps", parents=[common], help="compare denoising step counts")
    a.add_argument("--tau-list", default="", help="re-plan a fixed checkpoint with these step counts")
    a.add_argument("--te-list", default="", help="retrain one model per T_e")
    a.add_argument("--data", help="dataset root (default: data.root)")
    a.add_argument("--split", default=None)
    a.set_defaults(func=cmd_ablate_steps)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic road-scene dataset")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--val-frac", type=float, default=0.0)
    s.set_defaults(func=cmd_synth_data)

    g = sub.add_parser("make-gt", parents=[common], help="ground-truth maps from fixations")
    g.add_argument("--fixations", help="fixation file (one 'x y' per line)")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--sigma", type=float, default=None)
    g.add_argument("--data", help="dataset root: write a map per sample")
    g.add_argument("--split", default=None)
    g.set_defaults(func=cmd_make_gt)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, DiffAttnError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    if args.command == "synth-data" and not args.out:
        args.out = "synth"
    try:
        return args.func(args)
    except (DiffAttnError, OSError, ValueError) as exc:
        cat = _category(exc)
        print(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
