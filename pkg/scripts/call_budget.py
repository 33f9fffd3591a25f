"""Denoiser-call and wall-time comparison of single-call versus multi-step resampling.

Runs the purifier on random images with the closed-form Gaussian denoiser so
only the sampling loop is timed.

    python scripts/call_budget.py --U 20 --t-l 200 --t-s 50
"""
import argparse
import time

import torch

from hetpure.denoiser import AnalyticDenoiser
from hetpure.purifier import PurifyConfig, expected_calls, purify
from hetpure.rng import NoiseStream
from hetpure.schedule import build_linear_schedule


def run(args, legacy: bool):
    sch = build_linear_schedule(args.T)
    den = AnalyticDenoiser(torch.zeros(1, args.size, args.size), 0.5)
    x = torch.rand(args.batch, 1, args.size, args.size, generator=torch.Generator().manual_seed(args.seed))
    mask = (torch.rand(args.batch, args.size, args.size, generator=torch.Generator().manual_seed(args.seed + 1)) > 0.5).float()
    cfg = PurifyConfig(t_l_frac=args.t_l / args.T, t_s_frac=args.t_s / args.T, U=args.U, legacy_resample=legacy)
    t0 = time.perf_counter()
    with torch.no_grad():
        res = purify(x, None, den, sch, cfg, NoiseStream(list(range(args.batch))), mask=mask)
    return res.denoiser_calls, time.perf_counter() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--U", type=int, default=20)
    ap.add_argument("--t-l", type=int, default=200)
    ap.add_argument("--t-s", type=int, default=50)
    ap.add_argument("--T", type=int, default=1000)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)

    rows = []
    for name, legacy in (("single-call", False), ("multi-step", True)):
        calls, secs = run(args, legacy)
        want = expected_calls(args.t_l, args.t_s, args.U, legacy)
        rows.append((name, calls, want, secs))
        print(f"{name:12s} calls {calls:6d} (formula {want:6d})  {secs:7.2f}s")
    (_, c1, _, s1), (_, c2, _, s2) = rows
    print(f"call reduction {100 * (1 - c1 / c2):.1f}%  time reduction {100 * (1 - s1 / s2):.1f}%")


if __name__ == "__main__":
    main()
