"""Independent check of the overfit smoke-test thresholds.

Trains the 8-frame / 64x64 / m=8 protocol for 2000 generator steps, then
measures the two quantities with plain numpy (no package metric code):

* final-epoch over first-epoch mean L1 reconstruction loss, recomputed from
  the logged per-step values grouped by epoch;
* masked-region PSNR per frame, 10*log10(1/MSE) over occluded pixels of all
  three channels in unit range, averaged over frames.

    python scripts/overfit_oracle.py [--lr 1e-3] [--batch 4] [--adv 0.0] [--steps 2000]
"""

import argparse
import math
import time
from collections import defaultdict

import numpy as np
import torch

from deoccl.dataset import LandmarkDetector, MaskSpec, SampleSource, SyntheticLandmarkProvider, make_sample, synthesize_hmd_mask
from deoccl.losses import LossWeights
from deoccl.network import NetworkConfig, generator_forward
from deoccl.synthetic import toy_face
from deoccl.training import TrainConfig, default_schedule, finetune_user, new_state, train_occluded

FULL_SCHEDULE_EPOCHS = 1300


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--adv", type=float, default=0.01)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    det = LandmarkDetector(SyntheticLandmarkProvider())
    samples = []
    for i in range(8):
        gt = toy_face(64, i)
        samples.append(make_sample(gt, synthesize_hmd_mask(det(gt), MaskSpec(), 64), -1.0, str(i)))
    per_epoch = math.ceil(8 / args.batch)
    scale = args.steps / (per_epoch * FULL_SCHEDULE_EPOCHS)
    cfg = TrainConfig(
        schedule=default_schedule(scale),
        batch_size=args.batch,
        learning_rate=args.lr,
        weights=LossWeights(lambda_adv=args.adv),
        seed=args.seed,
    )
    print("epochs per stage:", [s.epochs for s in cfg.schedule], "scale", round(scale, 4))
    t0 = time.perf_counter()
    state = new_state(NetworkConfig(image_size=64, base_filters=8), cfg)
    finetune_user(state, SampleSource(samples))
    train_occluded(state, SampleSource(samples))
    elapsed = time.perf_counter() - t0

    by_epoch = defaultdict(list)
    for row in state.history:
        by_epoch[row["epoch"]].append(row["rec"])
    first, last = by_epoch[min(by_epoch)], by_epoch[max(by_epoch)]
    ratio = float(np.mean(last) / np.mean(first))

    state.params.eval()
    with torch.no_grad():
        occ = torch.stack([s.occluded.torch() for s in samples])
        mask = torch.stack([s.mask.torch() for s in samples])
        rec = generator_forward(state.params, occ, "attention", mask=mask)[0].numpy().astype(np.float64)
    dbs = []
    for i, s in enumerate(samples):
        sel = s.mask.data[0] == 1
        a = (rec[i][:, sel] + 1) / 2
        b = (s.ground_truth.data[:, sel].astype(np.float64) + 1) / 2
        dbs.append(10 * np.log10(1.0 / np.mean((a - b) ** 2)))
    print(f"generator steps   {len(state.history)}")
    print(f"wall time         {elapsed:.0f} s")
    print(f"rec ratio         {ratio:.4f}  (threshold <= 0.2)")
    print(f"masked PSNR mean  {np.mean(dbs):.3f} dB  (threshold >= 22)")
    print(f"masked PSNR frames {np.round(dbs, 2).tolist()}")


if __name__ == "__main__":
    main()
