"""Train a Transporter on the synthetic lung-like scene and score its keypoints.

The scene has an oscillating horizontal band, two vertical streaks and a
static display label. After training, keypoints on a held-out video are
scored against the ground-truth masks and tracks, with and without the
median-frame correction. One run takes a few minutes on one core.

    python3 demos/toy_training.py [--mode learned_sigma] [--epochs 20] [--out demo_toy]
"""

import argparse
from pathlib import Path

import numpy as np

from uskeypoints.cli import overlay, write_png
from uskeypoints.evaluation import frame_average_correct, keypoints_from_inputs, model_inputs, sp_sn
from uskeypoints.harness import generate, lung_scene, oracle_score
from uskeypoints.rtfpm import RTFPMConfig
from uskeypoints.training import TrainConfig, frame_features, train
from uskeypoints.transporter import TransporterConfig, checkpoint_load


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--mode", default="learned_sigma", choices=["none", "transport_weight", "learned_sigma"])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_toy")
    args = ap.parse_args()

    rt = RTFPMConfig(size=128)
    print("rendering and preprocessing 4 training videos ...")
    features = {}
    for i in range(4):
        frames = generate(lung_scene(64, 128, seed=i, phase=0.7 * i)).frames
        features[f"lung{i}"] = np.stack([frame_features(f, rt) for f in frames])

    cfg = TrainConfig(epochs=args.epochs, batch_size=4, pairs_train=64, pairs_val=8, source_stride=2,
                      seed=args.seed, rtfpm=rt,
                      model=TransporterConfig(image_size=128, k=10, width=16, feature_channels=16,
                                              attention_mode=args.mode))
    res = train(cfg, None, args.out, features=features)
    for m in res.metrics:
        print(f"epoch {m['epoch']:3d} {m['split']:5s} loss {m['loss']:.5f} lr {m['lr']:.6f}")

    model, _, _ = checkpoint_load(res.final_checkpoint)
    test = generate(lung_scene(64, 128, seed=100, phase=0.3))
    for name, frames in (("uncorrected", test.frames), ("corrected", frame_average_correct(test.frames))):
        det = keypoints_from_inputs(model, model_inputs(frames, rt), (128, 128))
        rep = sp_sn(list(det.pixels), test.masks, 8)
        err = oracle_score(test.tracks, list(det.pixels))
        print(f"{name:12s} SP {rep.sp:.3f}  SN {rep.sn:.3f}  tracking error {err:.2f} px")
        for t in (0, 6, 12, 18):
            write_png(Path(args.out) / f"{name}_{t:02d}.png", overlay(test.frames[t], det.pixels[t], det.sigma))
    print(f"overlays written to {args.out}")


if __name__ == "__main__":
    main()
