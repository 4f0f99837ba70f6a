"""Demo 1 — synthetic trajectories and SRNN pre-training.

Generates a small synthetic trajectory set (Algorithm 3 of the paper: chained
static / constant-velocity / constant-acceleration / sinusoidal segments),
trains the SRNN dynamical VAE on it for a few dozen epochs and compares its
one-step teacher-forced prediction error with the constant-position baseline.

    python demos/01_pretrain_srnn.py [--epochs 60] [--out /tmp/dvae_demo1]

A short run like this only shows the mechanics; the bundled checkpoint
(``src/dvae_umot/data/srnn_default.ckpt``) was trained on the paper-scale
12105/3052 split (see README).
"""

import argparse
import time
from pathlib import Path

from dvae_umot import pretrain, srnn, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--out", default="/tmp/dvae_demo1")
    args = ap.parse_args()
    out = Path(args.out)

    print("1. Generating 800 training and 200 validation trajectories (T = 60)...")
    stats = synth.gen_dataset(synth.TrajectoryConfig(seed=0), 800, 200, out / "data")
    print(f"   mean average speed {stats['average_speed']['mean']:.4f} per frame (normalised units)")
    train = synth.read_sequences(out / "data" / "train.txt")
    val = synth.read_sequences(out / "data" / "val.txt")

    print(f"2. Training the SRNN for up to {args.epochs} epochs (Adam, lr 1e-3, batch 256)...")
    t0 = time.perf_counter()

    def progress(row):
        if row["epoch"] % 10 == 0:
            print(f"   epoch {row['epoch']:4d}  train -ELBO/frame {row['train_loss']:8.3f}  "
                  f"val {row['val_loss']:8.3f}")

    res = pretrain.train(train, val, pretrain.TrainConfig(max_epochs=args.epochs), out_checkpoint=out / "m.ckpt",
                         progress=progress)
    print(f"   best epoch {res.best_epoch} after {time.perf_counter() - t0:.0f} s -> {out / 'm.ckpt'}")

    print("3. One-step teacher-forced validation RMSE (targets s_3..s_T):")
    params = srnn.load_checkpoint(out / "m.ckpt")
    print(f"   SRNN              {pretrain.one_step_rmse(params, val, burn_in=1):.4f}")
    print(f"   constant position {pretrain.constant_position_rmse(val, burn_in=1):.4f}")
    bundled = srnn.load_checkpoint(srnn.default_checkpoint_path())
    print(f"   bundled checkpoint {pretrain.one_step_rmse(bundled, val, burn_in=1):.4f}")


if __name__ == "__main__":
    main()
