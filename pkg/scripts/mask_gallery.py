"""Save a grid of test images with their attention masks at several thresholds.

    python scripts/mask_gallery.py --classifier runs/clf.ckpt --out masks.png
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from hetpure.attention import POOL_MODES, attention_mask
from hetpure.data import DatasetSpec, generate
from hetpure.io import load_model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classifier", required=True)
    ap.add_argument("--out", default="mask_gallery.png")
    ap.add_argument("--n", type=int, default=6)
    ap.add_argument("--taus", type=float, nargs="+", default=[0.5, 0.7, 0.8, 0.9])
    ap.add_argument("--pool", choices=POOL_MODES, default="sum_p")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    clf = load_model(args.classifier)
    x, y = generate(DatasetSpec(seed=args.seed))["test"]
    # alternate classes so both are shown
    idx = torch.cat([torch.nonzero(y == c).flatten()[: (args.n + 1) // 2] for c in (0, 1)])[: args.n]
    x = x[idx]
    masks = [attention_mask(clf, x, tau, args.pool) for tau in args.taus]

    cols = 1 + len(args.taus)
    fig, axes = plt.subplots(len(x), cols, figsize=(1.6 * cols, 1.6 * len(x)), squeeze=False)
    for i in range(len(x)):
        axes[i][0].imshow(x[i, 0].numpy(), cmap="gray", vmin=0, vmax=1)
        for j, m in enumerate(masks):
            axes[i][j + 1].imshow(x[i, 0].numpy(), cmap="gray", vmin=0, vmax=1)
            axes[i][j + 1].imshow(m[i].numpy(), cmap="Reds", alpha=0.45, vmin=0, vmax=1)
            if i == 0:
                axes[i][j + 1].set_title(f"tau={args.taus[j]}", fontsize=8)
    for ax in axes.flat:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    areas = ", ".join(f"{t}: {float(m.mean()):.3f}" for t, m in zip(args.taus, masks))
    print(f"wrote {args.out}; mean mask area {areas}")


if __name__ == "__main__":
    main()
