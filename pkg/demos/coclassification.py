"""Co-classify band-dominant and streak-dominant videos from pooled features.

Embeddings come from the FF-CNN of a checkpoint (or of an untrained model
when none is given), are reduced to 2-d with exact t-SNE, and classified by
kNN on repeated 70:30 splits.

    python3 demos/coclassification.py [--checkpoint final.t32] [--videos 30]
"""

import argparse

import numpy as np

from uskeypoints.evaluation import export_embeddings, knn_coclassify, model_inputs, tsne, write_tsne_csv
from uskeypoints.harness import dominant_scene, generate
from uskeypoints.rtfpm import RTFPMConfig
from uskeypoints.transporter import TransporterConfig, TransporterModel, checkpoint_load


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint")
    ap.add_argument("--videos", type=int, default=30)
    ap.add_argument("--csv", default="demo_tsne.csv")
    args = ap.parse_args()

    if args.checkpoint:
        model, _, _ = checkpoint_load(args.checkpoint)
    else:
        model = TransporterModel(TransporterConfig(image_size=128, k=10, width=16, feature_channels=16))
    rt = RTFPMConfig(size=model.config.image_size)
    inputs, labels = {}, {}
    for kind in ("band", "streak"):
        for i in range(args.videos):
            vid = f"{kind}{i:02d}"
            inputs[vid] = model_inputs(generate(dominant_scene(kind, 5, 128, seed=1000 + i)).frames, rt)
            labels[vid] = kind
    recs = export_embeddings(inputs, model, labels)
    X = np.stack([r.vector for r in recs]).astype(np.float64)
    res = tsne(X, seed=0)
    write_tsne_csv(args.csv, res.points, [r.label for r in recs])
    out = knn_coclassify(res.points, [r.label for r in recs], seed=0)
    print(f"{len(recs)} frames, t-SNE KL {res.kl_initial:.3f} -> {res.kl_final:.3f}")
    print(f"median over {len(out['trials'])} splits: accuracy {out['accuracy']:.3f}, "
          f"precision {out['precision']:.3f}, recall {out['recall']:.3f}, F1 {out['f1']:.3f}")
    print(f"t-SNE points written to {args.csv}")


if __name__ == "__main__":
    main()
