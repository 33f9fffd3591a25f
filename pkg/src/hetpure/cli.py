"""Command-line entry point: ``hetpure <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from hetpure.attack import MODES, AttackConfig, run_attack
from hetpure.attention import POOL_MODES, attention_mask, block_maps, normalize_map
from hetpure.config import ConfigError, load_config
from hetpure.data import GENERATORS, DatasetSpec, load_dataset, make_dataset
from hetpure.io import FormatError, load_images, load_model, save_checkpoint, save_mask_png, save_png, save_tensor
from hetpure.purifier import PurifyConfig, ensemble_classify, purify
from hetpure.rng import NoiseStream, derive_seed
from hetpure.schedule import build_linear_schedule

log = logging.getLogger("hetpure")


def _schedule_for(denoiser):
    T, b0, b1 = getattr(denoiser, "schedule", None) or (1000, 1e-4, 0.02)
    return build_linear_schedule(int(T), float(b0), float(b1))


def _load_inputs(path: str, split: str, limit: int | None):
    """Images plus labels (``None`` when the input carries no labels)."""
    p = Path(path)
    if p.is_dir() and (p / "index.csv").is_file():
        files, labels = [], []
        with open(p / "index.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                if row["split"] == split:
                    files.append(p / row["path"])
                    labels.append(int(row["label"]))
        if not files:
            raise FileNotFoundError(f"no {split!r} images listed in {p / 'index.csv'}")
        if limit:
            files, labels = files[:limit], labels[:limit]
        from hetpure.io import load_png

        return files, torch.stack([load_png(f) for f in files]), torch.tensor(labels)
    files, x = load_images(p)
    if limit:
        files, x = files[:limit], x[:limit]
    return files, x, None


def _split_tensors(path: str, split: str):
    data = load_dataset(path)
    if split not in data:
        raise FileNotFoundError(f"dataset {path} has no {split!r} split")
    return data[split]


def cmd_make_dataset(args):
    spec = DatasetSpec(args.generator, args.size, args.classes, args.n_train, args.n_test, args.seed)
    index = make_dataset(spec, args.out)
    print(f"wrote {index}")


def cmd_train_classifier(args):
    from hetpure.classifier import train_classifier

    x, y = _split_tensors(args.data, "train")
    val = _split_tensors(args.data, "test") if (Path(args.data) / "test").exists() else (None, None)
    clf = train_classifier(x, y, args.epochs, args.lr, args.batch, args.seed, *val, log=log.info)
    save_checkpoint(clf, args.out, {"train_accuracy": clf.train_accuracy, "val_accuracy": clf.val_accuracy})
    print(f"train accuracy {clf.train_accuracy:.4f}" + (f", test accuracy {clf.val_accuracy:.4f}" if clf.val_accuracy is not None else ""))


def cmd_train_denoiser(args):
    from hetpure.denoiser import train_denoiser

    x, _ = _split_tensors(args.data, "train")
    sched = build_linear_schedule(args.T, args.beta_start, args.beta_end)
    den = train_denoiser(x * 2 - 1, sched, args.epochs, args.lr, args.seed, args.batch, args.base, log=log.info, t_max=args.t_max or min(300, args.T))
    save_checkpoint(den, args.out, {"final_loss": den.final_loss, "schedule": [args.T, args.beta_start, args.beta_end]})
    print(f"final loss {den.final_loss:.4f}")


def cmd_mask(args):
    clf = load_model(args.classifier)
    files, x, _ = _load_inputs(args.input, args.split, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blocks = tuple(args.blocks) if args.blocks else None
    mask = attention_mask(clf, x, args.tau, args.pool, args.p, blocks)
    if args.maps:
        with torch.no_grad():
            _, acts = clf.forward_with_activations(x)
        maps = block_maps(acts, x.shape[-2], x.shape[-1], args.pool, args.p)
    for i, f in enumerate(files):
        stem = f"{i:05d}_{Path(f).stem}"
        save_mask_png(mask[i], out / f"{stem}_mask.png")
        if args.maps:
            for m, am in enumerate(maps):
                save_png(normalize_map(am[i])[None], out / f"{stem}_map{m}.png")
    print(f"wrote {len(files)} masks to {out} (mean area {float(mask.mean()):.3f})")


def _purify_cfg(args) -> PurifyConfig:
    return PurifyConfig(
        t_l_frac=args.t_l, t_s_frac=args.t_s, tau=args.tau, U=args.resample_U, pool_mode=args.pool, p=args.p,
        S=args.ensemble_S, rng_seed=args.seed, swap_mask_roles=args.swap_mask_roles,
        legacy_resample=args.legacy_resample,
    )


def cmd_attack(args):
    clf = load_model(args.classifier)
    files, x, labels = _load_inputs(args.input, args.split, args.limit)
    y = labels if labels is not None else clf.predict(x).label
    eps = args.eps if args.eps is not None else (8 / 255 if args.norm == "linf" else 0.5)
    mode = "pgd_eot_adaptive" if args.mode == "adaptive" else args.mode
    acfg = AttackConfig(args.norm, eps, args.step, args.iters, args.eot, mode, args.seed)
    stream = NoiseStream([derive_seed(args.seed, i) for i in range(len(x))])
    purifier_fn = None
    if mode in ("bpda_eot", "pgd_eot_adaptive"):
        if not args.denoiser:
            raise SystemExit(f"--mode {args.mode} needs --denoiser")
        den = load_model(args.denoiser)
        sched = _schedule_for(den)
        pcfg = _purify_cfg(args)

        def purifier_fn(xx, key):
            return purify(xx, clf, den, sched, pcfg, stream.child(0xB0, key)).image

    xa = run_attack(x, y, clf, acfg, purifier_fn=purifier_fn, stream=stream.child(0xA7))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adv_pred = clf.predict(xa).label
    norms = (xa - x).flatten(1).abs().amax(1) if args.norm == "linf" else (xa - x).flatten(1).norm(dim=1)
    save_tensor(xa, out / "adversarial.hpt")
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "source", "adversarial", "clean_label", "adversarial_label", "perturbation_norm"])
        for i, f in enumerate(files):
            name = f"{i:05d}_adv.png"
            save_png(xa[i], out / name)
            w.writerow([i, str(f), name, int(y[i]), int(adv_pred[i]), f"{float(norms[i]):.6f}"])
    acc = float((adv_pred == y).float().mean())
    print(f"wrote {len(files)} adversarial images to {out}; classifier accuracy on them {acc:.4f}")


def cmd_purify(args):
    clf = load_model(args.classifier)
    den = load_model(args.denoiser)
    sched = _schedule_for(den)
    files, x, labels = _load_inputs(args.input, args.split, args.limit)
    cfg = _purify_cfg(args)
    try:
        cfg.validate(sched)
    except ValueError as exc:
        raise SystemExit(f"invalid purification settings: {exc}")
    stream = NoiseStream([derive_seed(args.seed, i) for i in range(len(x))])
    pred, runs = ensemble_classify(x, clf, den, sched, cfg, stream)
    in_pred = clf.predict(x).label
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "purified.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "input", "label", "input_label", "purified_label", "denoiser_calls", "mask_area"])
        for i, f in enumerate(files):
            save_png(runs[0].image[i], out / f"{i:05d}_purified.png")
            save_mask_png(runs[0].mask[i], out / f"{i:05d}_mask.png")
            w.writerow([
                i, str(f), "" if labels is None else int(labels[i]), int(in_pred[i]), int(pred.label[i]),
                sum(r.denoiser_calls for r in runs), f"{float(runs[0].mask[i].mean()):.6f}",
            ])
    msg = f"purified {len(files)} images into {out}"
    if labels is not None:
        msg += f"; accuracy {float((pred.label == labels).float().mean()):.4f}"
    print(msg)


def cmd_evaluate(args):
    from hetpure.harness import run_experiment

    overrides = list(args.set or [])
    if args.out:
        overrides.append(f"output.dir={args.out}")
    cfg = load_config(args.config, overrides)
    result = run_experiment(cfg)
    for key, rec in result.records.items():
        rob = "" if rec.robust_accuracy is None else f"  robust {rec.robust_accuracy:.4f} +- {rec.robust_std:.4f}"
        print(f"{key:<28} standard {rec.standard_accuracy:.4f} +- {rec.standard_std:.4f}{rob}  calls {rec.denoiser_calls_mean:.1f}")
    print(f"metrics written to {result.out_dir / 'metrics.csv'}")


def cmd_report(args):
    from hetpure.report import report

    summary = report(args.metrics, args.out, plots=not args.no_plots)
    for rec in summary:
        rob = rec["robust_acc_mean"]
        print(
            f"{rec['mode']:<12} t_l={rec['t_l'] or '-':>4} t_s={rec['t_s'] or '-':>4} tau={rec['tau'] or '-':>8} "
            f"n={rec['runs']} standard {rec['standard_acc_mean']:.4f}+-{rec['standard_acc_std']:.4f}"
            + ("" if rob is None else f" robust {rob:.4f}+-{rec['robust_acc_std']:.4f}")
        )


def _add_purify_args(p):
    p.add_argument("--t-l", type=float, default=0.2, help="large-noise fraction t_l in [0, 1]")
    p.add_argument("--t-s", type=float, default=0.05, help="small-noise fraction t_s in [0, 1]")
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--pool", choices=POOL_MODES, default="sum_p")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--resample-U", type=int, default=10)
    p.add_argument("--ensemble-S", type=int, default=1)
    p.add_argument("--swap-mask-roles", action="store_true", help="keep the input inside the mask, predict outside")
    p.add_argument("--legacy-resample", action="store_true", help="multi-step resampling baseline")


def _add_input_args(p):
    p.add_argument("--input", required=True, help="PNG, tensor file, PNG directory or dataset directory")
    p.add_argument("--split", default="test", help="split to read from a dataset directory")
    p.add_argument("--limit", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetpure", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a synthetic PNG dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--generator", choices=GENERATORS, default="shapes")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--n-train", type=int, default=500, help="images per class")
    p.add_argument("--n-test", type=int, default=100, help="images per class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--base", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--t-max", type=int, default=None, help="largest training timestep (default min(300, T))")
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("mask", help="attention masks for input images")
    _add_input_args(p)
    p.add_argument("--classifier", required=True)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--pool", choices=POOL_MODES, default="sum_p")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--blocks", type=int, nargs="*", help="block indices to use (default: all)")
    p.add_argument("--maps", action="store_true", help="also write per-block normalized maps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("attack", help="craft adversarial examples")
    _add_input_args(p)
    p.add_argument("--classifier", required=True)
    p.add_argument("--denoiser", help="needed for bpda_eot and adaptive")
    p.add_argument("--mode", choices=[m for m in MODES if m != "pgd_eot_adaptive"] + ["adaptive"], default="pgd")
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--eps", type=float, default=None, help="budget (default 8/255 for linf, 0.5 for l2)")
    p.add_argument("--step", type=float, default=0.007)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--eot", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_purify_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("purify", help="purify images and classify the result")
    _add_input_args(p)
    p.add_argument("--classifier", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_purify_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("evaluate", help="end-to-end experiment from a config file")
    p.add_argument("--config", help="flat section.key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="shorthand for --set output.dir=...")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize metrics.csv files")
    p.add_argument("metrics", help="metrics.csv or a directory searched recursively")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"hetpure {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
