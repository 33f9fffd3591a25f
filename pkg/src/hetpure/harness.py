"""End-to-end evaluation: train or load models, attack, purify, and write metrics.

Every random draw is keyed by a per-image seed derived from ``eval.seed``, the
repeat index and the image index, so results do not depend on the worker
count or on how images are split into chunks.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch

from hetpure.attack import run_attack
from hetpure.classifier import feature_distance, train_classifier
from hetpure.config import ExperimentConfig, dump_config
from hetpure.data import generate
from hetpure.denoiser import train_denoiser
from hetpure.io import load_model, save_checkpoint, save_mask_png, save_png
from hetpure.purifier import PurifiedResult, PurifyConfig, ensemble_classify, purify, purify_homogeneous, to_model_space
from hetpure.rng import NoiseStream, derive_seed
from hetpure.schedule import NoiseSchedule, build_linear_schedule

log = logging.getLogger("hetpure")

METRIC_COLUMNS = [
    "run_id", "seed", "mode", "eps", "norm", "t_l", "t_s", "tau", "U", "S",
    "standard_acc", "robust_acc", "feat_dist_clean", "feat_dist_adv", "denoiser_calls_mean", "wall_seconds",
]
DETAIL_COLUMNS = [
    "run_id", "mode", "index", "label", "pred_clean", "pred_adv",
    "feat_dist_clean", "feat_dist_adv", "denoiser_calls", "mask_area", "error",
]

# stream keys for the independent draws of one image
_STANDARD, _ATTACK, _ROBUST, _BPDA = 1, 2, 3, 4


def worker_count() -> int:
    raw = os.environ.get("HETPURE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HETPURE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class MetricsRecord:
    mode: str
    standard_accuracy: float
    standard_std: float
    robust_accuracy: float | None
    robust_std: float | None
    runs: int
    feat_dist_clean: float
    feat_dist_adv: float | None
    denoiser_calls_mean: float
    wall_seconds: float


@dataclass
class Defense:
    mode: str
    purifier: Callable[[torch.Tensor, NoiseStream], PurifiedResult] | None
    cfg: PurifyConfig
    t_l: int | None = None
    t_s: int | None = None
    tau: float | None = None
    attack: bool = True


@dataclass
class ExperimentResult:
    records: dict[str, MetricsRecord]
    rows: list[dict] = field(default_factory=list)
    out_dir: Path | None = None


def prepare_models(cfg: ExperimentConfig, data=None, out_dir: Path | None = None):
    """Train inline or load the classifier and denoiser named in ``cfg``."""
    schedule = build_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    if data is None and (cfg.classifier.train_inline or cfg.denoiser.train_inline):
        data = generate(cfg.dataset)
    if cfg.classifier.train_inline:
        xtr, ytr = data["train"]
        xte, yte = data["test"]
        c = cfg.classifier
        clf = train_classifier(xtr, ytr, c.epochs, c.lr, c.batch, c.seed, xte, yte, log=log.debug)
        log.info("classifier: train acc %.4f, test acc %.4f", clf.train_accuracy, clf.val_accuracy)
        if out_dir is not None:
            save_checkpoint(clf, out_dir / "classifier.ckpt", {"train_accuracy": clf.train_accuracy, "val_accuracy": clf.val_accuracy})
    else:
        clf = load_model(cfg.classifier.checkpoint)
    if cfg.denoiser.train_inline:
        d = cfg.denoiser
        xtr = to_model_space(data["train"][0], cfg.purify)
        den = train_denoiser(xtr, schedule, d.epochs, d.lr, d.seed, d.batch, d.base, log=log.debug, t_max=d.t_max)
        log.info("denoiser: final loss %.4f", den.final_loss)
        if out_dir is not None:
            meta = {"final_loss": den.final_loss, "schedule": [cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end]}
            save_checkpoint(den, out_dir / "denoiser.ckpt", meta)
    else:
        den = load_model(cfg.denoiser.checkpoint)
    return clf, den, schedule


def _identity(x: torch.Tensor, stream: NoiseStream) -> PurifiedResult:
    return PurifiedResult(x, torch.zeros(x.shape[0], *x.shape[-2:], dtype=x.dtype), 0)


def build_defenses(cfg: ExperimentConfig, clf, den, schedule: NoiseSchedule) -> list[Defense]:
    pc = cfg.purify
    t_l, t_s = pc.steps(schedule)

    def hetero(p: PurifyConfig):
        return lambda x, st: purify(x, clf, den, schedule, p, st)

    def homog(t: int):
        return lambda x, st: purify_homogeneous(x, den, schedule, t, pc, st)

    out = []
    if cfg.eval.baselines:
        out.append(Defense("undefended", _identity, replace(pc, S=1)))
    out.append(Defense("hetero", hetero(pc), pc, t_l, t_s, pc.tau))
    if cfg.eval.baselines:
        out.append(Defense("homog_ts", homog(t_s), pc, t_s, t_s))
        out.append(Defense("homog_tl", homog(t_l), pc, t_l, t_l))
    if cfg.sweep.enabled:
        for tau in cfg.sweep.taus:
            p = replace(pc, tau=tau)
            out.append(Defense("sweep_tau", hetero(p), p, t_l, t_s, tau, cfg.sweep.attack))
        for tl_frac, ts_frac in cfg.sweep.pairs:
            p = replace(pc, t_l_frac=tl_frac, t_s_frac=ts_frac)
            a, b = p.steps(schedule)
            out.append(Defense("sweep_pair", hetero(p), p, a, b, pc.tau, cfg.sweep.attack))
    return out


def _craft(cfg: ExperimentConfig, defense: Defense, clf, x, y, stream: NoiseStream) -> torch.Tensor:
    acfg = cfg.attack.attack_config()
    attack_stream = stream.child(_ATTACK)
    if acfg.mode in ("fgsm", "pgd"):
        return run_attack(x, y, clf, acfg, stream=attack_stream)

    def purifier_fn(xx, key):
        return defense.purifier(xx, stream.child(_BPDA, key)).image

    return run_attack(x, y, clf, acfg, purifier_fn=purifier_fn, stream=attack_stream)


def _chunk(cfg, defense: Defense, clf, den, schedule, x, y, idx, stream, adv_cache, dump):
    """Evaluate one defense on one chunk; returns per-image rows (and tensors for dumping)."""
    rows = [dict(index=int(i), label=int(y[k])) for k, i in enumerate(idx)]
    pred, runs = ensemble_classify(x, clf, den, schedule, defense.cfg, stream.child(_STANDARD), purifier=defense.purifier)
    fd = feature_distance(clf, x, runs[0].image)
    area = runs[0].mask.flatten(1).mean(1)
    for k, r in enumerate(rows):
        r.update(
            pred_clean=int(pred.label[k]),
            feat_dist_clean=float(fd[k]),
            denoiser_calls=sum(run.denoiser_calls for run in runs),
            mask_area=float(area[k]),
        )
    tensors = {"clean": x, "purified": runs[0].image, "mask": runs[0].mask} if dump else {}
    if cfg.attack.enabled and defense.attack:
        if cfg.attack.mode in ("fgsm", "pgd"):
            xa = adv_cache
        else:
            xa = _craft(cfg, defense, clf, x, y, stream)
        pred_a, runs_a = ensemble_classify(xa, clf, den, schedule, defense.cfg, stream.child(_ROBUST), purifier=defense.purifier)
        fd_a = feature_distance(clf, x, runs_a[0].image)
        for k, r in enumerate(rows):
            r.update(pred_adv=int(pred_a.label[k]), feat_dist_adv=float(fd_a[k]))
        if dump:
            tensors.update(adversarial=xa, purified_adv=runs_a[0].image)
    return rows, tensors


def _safe_chunk(cfg, defense, clf, den, schedule, x, y, idx, stream, adv_cache, dump):
    # a failing chunk is recorded per image (counted as misclassified) instead of aborting the run
    try:
        return _chunk(cfg, defense, clf, den, schedule, x, y, idx, stream, adv_cache, dump)
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        log.error("%s failed on images %d..%d: %s", defense.mode, idx[0], idx[-1], exc)
        rows = [
            dict(index=int(i), label=int(y[k]), pred_clean=-1, pred_adv=-1, feat_dist_clean=float("nan"),
                 feat_dist_adv=float("nan"), denoiser_calls=0, mask_area=float("nan"), error=str(exc))
            for k, i in enumerate(idx)
        ]
        if not (cfg.attack.enabled and defense.attack):
            for r in rows:
                del r["pred_adv"], r["feat_dist_adv"]
        return rows, {}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _mean(vals):
    return sum(vals) / len(vals) if vals else None


def _std(vals):
    if len(vals) < 2:
        return 0.0
    m = _mean(vals)
    return (sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) ** 0.5


def run_experiment(cfg: ExperimentConfig, models=None) -> ExperimentResult:
    """Run every defense for ``eval.repeats`` seeded repeats and write the CSV artifacts.

    ``models`` may pass a pre-built ``(classifier, denoiser, schedule)`` triple.
    """
    cfg.validate()
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(cfg))
    data = generate(cfg.dataset)
    if models is None:
        models = prepare_models(cfg, data, out_dir)
    clf, den, schedule = models
    x_all, y_all = data["test"]
    n = min(cfg.eval.n_images, len(x_all))
    if n < cfg.eval.n_images:
        log.warning("only %d test images available (eval.n_images = %d)", n, cfg.eval.n_images)
    x_all, y_all = x_all[:n], y_all[:n]
    defenses = build_defenses(cfg, clf, den, schedule)
    chunks = [list(range(i, min(i + cfg.eval.chunk, n))) for i in range(0, n, cfg.eval.chunk)]
    acfg = cfg.attack
    metric_rows, detail_rows, timing_rows = [], [], []
    per_mode: dict[str, list[dict]] = {}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for rep in range(cfg.eval.repeats):
            seed = derive_seed(cfg.eval.seed, rep)
            run_id = f"r{rep}"
            base = NoiseStream([derive_seed(seed, i) for i in range(n)])
            adv = [None] * len(chunks)
            if acfg.enabled and acfg.mode in ("fgsm", "pgd"):
                # the same classifier-only attack is reused by every defense
                jobs = [
                    pool.submit(_craft, cfg, defenses[0], clf, x_all[c], y_all[c], base.subset(c))
                    for c in chunks
                ]
                adv = [j.result() for j in jobs]
            for d_i, defense in enumerate(defenses):
                t0 = time.perf_counter()
                dump = rep == 0 and defense.mode == "hetero" and cfg.output.dump_images > 0
                jobs = [
                    pool.submit(
                        _safe_chunk, cfg, defense, clf, den, schedule, x_all[c], y_all[c], c,
                        base.subset(c), adv[k], dump and c[0] < cfg.output.dump_images,
                    )
                    for k, c in enumerate(chunks)
                ]
                rows, dumped = [], []
                for j in jobs:
                    r, t = j.result()
                    rows.extend(r)
                    if t:
                        dumped.append(t)
                wall = time.perf_counter() - t0
                rows.sort(key=lambda r: r["index"])
                if dumped:
                    _dump_images(out_dir / "images", dumped, cfg.output.dump_images)
                has_adv = all("pred_adv" in r for r in rows)
                std = _mean([float(r["pred_clean"] == r["label"]) for r in rows])
                rob = _mean([float(r["pred_adv"] == r["label"]) for r in rows]) if has_adv else None
                row = dict(
                    run_id=run_id, seed=seed, mode=defense.mode,
                    eps=acfg.epsilon if has_adv else None, norm=acfg.norm if has_adv else None,
                    t_l=defense.t_l, t_s=defense.t_s, tau=defense.tau,
                    U=defense.cfg.U if defense.tau is not None else None, S=defense.cfg.S,
                    standard_acc=std, robust_acc=rob,
                    feat_dist_clean=_mean([r["feat_dist_clean"] for r in rows]),
                    feat_dist_adv=_mean([r["feat_dist_adv"] for r in rows]) if has_adv else None,
                    denoiser_calls_mean=_mean([r["denoiser_calls"] for r in rows]),
                    wall_seconds=wall if cfg.output.timing else None,
                )
                metric_rows.append(row)
                key = _row_key(row)
                per_mode.setdefault(key, []).append(dict(row, wall_seconds=wall))
                timing_rows.append((run_id, defense.mode, d_i, f"{wall:.3f}"))
                for r in rows:
                    detail_rows.append(dict(r, run_id=run_id, mode=defense.mode))
                log.info(
                    "%s %-10s std %.4f rob %s calls %.1f (%.1fs)",
                    run_id, defense.mode, std, "-" if rob is None else f"{rob:.4f}", row["denoiser_calls_mean"], wall,
                )

    columns = METRIC_COLUMNS if acfg.enabled else [c for c in METRIC_COLUMNS if c != "robust_acc"]
    _write_csv(out_dir / "metrics.csv", columns, metric_rows)
    _write_csv(out_dir / "details.csv", DETAIL_COLUMNS, detail_rows)
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "mode", "defense_index", "wall_seconds"])
        w.writerows(timing_rows)
    records = {k: _aggregate(v) for k, v in per_mode.items()}
    if cfg.output.plots:
        from hetpure.report import report

        report(out_dir)
    return ExperimentResult(records, metric_rows, out_dir)


def _row_key(row: dict) -> str:
    if row["mode"] in ("sweep_tau", "sweep_pair"):
        return f"{row['mode']}:{row['t_l']}:{row['t_s']}:{row['tau']}"
    return row["mode"]


def _aggregate(rows: list[dict]) -> MetricsRecord:
    std = [r["standard_acc"] for r in rows]
    rob = [r["robust_acc"] for r in rows if r["robust_acc"] is not None]
    fda = [r["feat_dist_adv"] for r in rows if r["feat_dist_adv"] is not None]
    return MetricsRecord(
        mode=rows[0]["mode"],
        standard_accuracy=_mean(std),
        standard_std=_std(std),
        robust_accuracy=_mean(rob) if rob else None,
        robust_std=_std(rob) if rob else None,
        runs=len(rows),
        feat_dist_clean=_mean([r["feat_dist_clean"] for r in rows]),
        feat_dist_adv=_mean(fda) if fda else None,
        denoiser_calls_mean=_mean([r["denoiser_calls_mean"] for r in rows]),
        wall_seconds=sum(r["wall_seconds"] for r in rows),
    )


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _dump_images(root: Path, dumped: list[dict], cap: int) -> None:
    root.mkdir(parents=True, exist_ok=True)
    i = 0
    for t in dumped:
        for k in range(len(t["clean"])):
            if i >= cap:
                return
            for name, batch in t.items():
                if name == "mask":
                    save_mask_png(batch[k], root / f"{i:04d}_mask.png")
                else:
                    save_png(batch[k], root / f"{i:04d}_{name}.png")
            i += 1
