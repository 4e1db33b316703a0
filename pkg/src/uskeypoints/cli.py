"""Command-line entry point: ``uskeypoints <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
import zlib
from pathlib import Path
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3

log = logging.getLogger("uskeypoints")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -------------------------------------------------------------------- config
def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: List[str]) -> dict:
    """Set dotted keys, e.g. ``model.k=5`` or ``rtfpm.horizontal_band=[[60,120]]``."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(value)
    return config


def load_config(path: Optional[str], overrides: List[str]) -> dict:
    config = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {p} does not exist")
        try:
            config = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
    return apply_overrides(config, overrides)


def build(cls, config: dict, what: str):
    try:
        return cls.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def write_snapshot(out: Path, command: str, config: dict, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "config": config, "seed": args.seed, "workers": args.workers}
    (out / "resolved_config.json").write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, outputs: List[str]) -> None:
    (out / "manifest.json").write_text(json.dumps({"command": command, "outputs": sorted(outputs)},
                                                  indent=1) + "\n")


def cache_root(out: Path) -> Path:
    env = os.environ.get("UST_CACHE_DIR")
    return Path(env) if env else out / "cache"


# ------------------------------------------------------------------------ png
def write_png(path, rgb: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG writer."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    png = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
    png += chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")
    Path(path).write_bytes(png)


PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190]],
                   dtype=np.uint8)


def overlay(frame: np.ndarray, pixels: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Keypoints as filled circles with radius proportional to sigma."""
    h, w = frame.shape
    rgb = np.repeat((np.clip(frame, 0, 1) * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    yy, xx = np.mgrid[0:h, 0:w]
    for k, ((x, y), s) in enumerate(zip(pixels, sigma)):
        r = max(1.5, 0.5 * s * (w - 1) / 2.0)
        rgb[(xx - x) ** 2 + (yy - y) ** 2 <= r * r] = PALETTE[k % len(PALETTE)]
    return rgb


# ------------------------------------------------------------------- commands
def cmd_synth(args, config):
    from .harness import SceneSpec, generate, lung_scene, save_video

    n_videos = int(config.pop("n_videos", 1))
    label = config.pop("label", None)
    preset = config.pop("preset", None)
    if preset is None and not config:
        preset = "lung"
    if preset == "lung":
        try:
            base = lung_scene(**config).to_dict()
        except TypeError as exc:
            raise UsageError(f"invalid lung preset options: {exc}") from exc
    elif preset is None:
        base = dict(config)
    else:
        raise UsageError(f"unknown scene preset {preset!r}")
    if args.seed is not None:
        base["seed"] = args.seed
    spec0 = build(SceneSpec, base, "scene")
    args.resolved = {"scene": spec0.to_dict(), "n_videos": n_videos, "label": label}
    out = Path(args.out)
    outputs = []
    for v in range(n_videos):
        d = spec0.to_dict()
        d["seed"] = spec0.seed + v
        spec = SceneSpec.from_dict(d)
        vdir = out / (f"video_{v:03d}" if n_videos > 1 else "video_000")
        save_video(generate(spec), vdir, label)
        outputs.append(str(vdir.relative_to(out)))
    return outputs


def _train_config(config, args):
    from .training import TrainConfig

    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        config["epochs"] = args.epochs
    tc = build(TrainConfig, config, "train")
    args.resolved = tc.to_dict()
    return tc


def cmd_preprocess(args, config):
    from .training import preprocess_cache

    tc = _train_config(config, args)
    cdir = preprocess_cache(_data(args), tc.rtfpm, cache_root(Path(args.out)), args.workers, tc.input_mode)
    print(cdir)
    return [str(cdir)]


def cmd_train(args, config):
    from .training import train

    tc = _train_config(config, args)
    out = Path(args.out)
    res = train(tc, _data(args), out, cache_root(out), args.workers, resume=args.resume)
    last = [m for m in res.metrics if m["split"] == "train"][-1]
    print(f"final train loss {last['loss']:.6f}; checkpoint {res.final_checkpoint}")
    return ["metrics.jsonl", "best.t32", "final.t32", "last.t32"]


def _load_model(path):
    from .transporter import checkpoint_load

    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint {p} does not exist")
    model, _, manifest = checkpoint_load(p)
    return model, manifest


def _rtfpm_of(manifest):
    from .rtfpm import RTFPMConfig

    tc = manifest.get("train_config", {})
    return RTFPMConfig.from_dict(tc.get("rtfpm", {})), tc.get("input_mode", "fpm")


def _videos(args):
    from .training import discover_videos

    return discover_videos(_data(args))


def cmd_infer(args, config):
    from .evaluation import detect_keypoints
    from .pgm import read_video

    model, manifest = _load_model(args.checkpoint)
    rt, mode = _rtfpm_of(manifest)
    out = Path(args.out)
    outputs = []
    for vid, fdir in _videos(args).items():
        frames = read_video(fdir)
        det = detect_keypoints(frames, model, rt, correction=args.correction, input_mode=mode)
        (out / vid).mkdir(parents=True, exist_ok=True)
        (out / vid / "keypoints.jsonl").write_text(det.to_jsonl())
        outputs.append(f"{vid}/keypoints.jsonl")
        if args.png:
            for t, f in enumerate(frames):
                write_png(out / vid / f"overlay_{t:06d}.png", overlay(f, det.pixels[t], det.sigma))
    return outputs


def cmd_eval(args, config):
    from .evaluation import detect_keypoints, sp_sn
    from .harness import load_masks, load_tracks, oracle_score
    from .pgm import read_video

    model, manifest = _load_model(args.checkpoint)
    rt, mode = _rtfpm_of(manifest)
    out = Path(args.out)
    reports = {}
    for vid, fdir in _videos(args).items():
        vroot = fdir.parent if fdir.name == "frames" else fdir
        if not (vroot / "masks").is_dir():
            raise DataError(f"video {vid} has no masks/ directory")
        frames = read_video(fdir)
        masks = load_masks(vroot)
        det = detect_keypoints(frames, model, rt, correction=args.correction, input_mode=mode)
        rep = sp_sn(list(det.pixels), masks, args.radius).to_dict()
        if (vroot / "tracks.json").exists():
            tracks = load_tracks(vroot)
            if tracks.size:
                rep["tracking_error_px"] = oracle_score(tracks, list(det.pixels))
        rep["config"] = {"radius_px": args.radius, "correction": args.correction}
        reports[vid] = rep
    summary = {"videos": reports,
               "sp": float(np.mean([r["sp"] for r in reports.values()])),
               "sn": (float(np.mean([r["sn"] for r in reports.values() if r["sn"] is not None]))
                      if any(r["sn"] is not None for r in reports.values()) else None)}
    (out / "report.json").write_text(json.dumps(summary, indent=1) + "\n")
    sn = "n/a" if summary["sn"] is None else f"{summary['sn']:.3f}"
    print(f"SP {summary['sp']:.3f} SN {sn}")
    return ["report.json"]


def cmd_embed(args, config):
    from .evaluation import export_embeddings, model_inputs
    from .numerics import save_t32
    from .pgm import read_video

    model, manifest = _load_model(args.checkpoint)
    rt, mode = _rtfpm_of(manifest)
    videos = _videos(args)
    labels = {}
    inputs = {}
    for vid, fdir in videos.items():
        vroot = fdir.parent if fdir.name == "frames" else fdir
        meta = vroot / "scene.json"
        if meta.exists():
            labels[vid] = json.loads(meta.read_text()).get("label")
        inputs[vid] = model_inputs(read_video(fdir), rt, mode)
    recs = export_embeddings(inputs, model, labels)
    out = Path(args.out)
    save_t32(out / "embeddings.t32", np.stack([r.vector for r in recs]).astype(np.float32))
    (out / "labels.jsonl").write_text("".join(
        json.dumps({"video_id": r.video_id, "frame": r.frame, "label": r.label}) + "\n" for r in recs))
    return ["embeddings.t32", "labels.jsonl"]


def _read_labels(path: Path):
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_tsne(args, config):
    from .evaluation import tsne, write_tsne_csv
    from .numerics import load_t32

    src = Path(args.embeddings)
    if not (src / "embeddings.t32").exists():
        raise DataError(f"no embeddings.t32 in {src}")
    X = load_t32(src / "embeddings.t32").astype(np.float64)
    labels = [r["label"] for r in _read_labels(src / "labels.jsonl")]
    unknown = set(config) - {"perplexity", "iterations", "learning_rate"}
    if unknown:
        raise UsageError(f"unknown tsne config keys: {sorted(unknown)}")
    seed = 0 if args.seed is None else args.seed
    res = tsne(X, seed=seed, **config)
    out = Path(args.out)
    write_tsne_csv(out / "tsne.csv", res.points, labels)
    (out / "tsne.json").write_text(json.dumps({"kl_initial": res.kl_initial, "kl_final": res.kl_final}) + "\n")
    print(f"KL {res.kl_initial:.4f} -> {res.kl_final:.4f}")
    return ["tsne.csv", "tsne.json"]


def cmd_classify(args, config):
    from .evaluation import knn_coclassify

    src = Path(args.tsne)
    if not src.exists():
        raise DataError(f"{src} does not exist")
    rows = src.read_text().splitlines()[1:]
    pts = np.array([[float(v) for v in r.split(",")[:2]] for r in rows])
    labels = np.array([r.split(",", 2)[2] for r in rows])
    unknown = set(config) - {"ratio", "k_nn", "trials"}
    if unknown:
        raise UsageError(f"unknown classify config keys: {sorted(unknown)}")
    seed = 0 if args.seed is None else args.seed
    res = knn_coclassify(pts, labels, seed=seed, **config)
    (Path(args.out) / "classify.json").write_text(json.dumps(res, indent=1) + "\n")
    print(f"accuracy {res['accuracy']:.3f} f1 {res['f1']:.3f}")
    return ["classify.json"]


def cmd_gradcheck(args, config):
    from .gradsuite import run_suite

    unknown = set(config) - {"n_instances", "tol", "h"}
    if unknown:
        raise UsageError(f"unknown gradcheck config keys: {sorted(unknown)}")
    seed = 0 if args.seed is None else args.seed
    res = run_suite(seed=seed, **config)
    for r in res.results:
        status = "PASS" if r.passed(res.tol) else "FAIL"
        print(f"{status} {r.name:18s} max_rel_error={r.max_rel_error:.3e} "
              f"checked={r.n_checked} skipped_at_kinks={r.n_skipped}")
    print(f"{res.seconds:.1f} s")
    (Path(args.out) / "gradcheck.json").write_text(json.dumps(
        {"passed": res.passed, "seconds": res.seconds,
         "results": [{"name": r.name, "max_rel_error": r.max_rel_error, "n_checked": r.n_checked,
                      "n_skipped": r.n_skipped} for r in res.results]}, indent=1) + "\n")
    if not res.passed:
        raise GradcheckFailed()
    return ["gradcheck.json"]


class GradcheckFailed(Exception):
    pass


def _data(args) -> Path:
    if not args.data:
        raise UsageError("--data is required for this subcommand")
    p = Path(args.data)
    if not p.exists():
        raise DataError(f"data directory {p} does not exist")
    return p


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "embed": cmd_embed, "tsne": cmd_tsne, "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
}


def make_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=1, help="preprocessing worker processes")
    common.add_argument("--out", default="run", help="output run directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="uskeypoints", description="Unsupervised keypoints for grayscale video.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    sub.add_parser("synth", parents=[common], help="render synthetic videos with masks and tracks")
    p = sub.add_parser("preprocess", parents=[common], help="compute the feature-map cache")
    p.add_argument("--data")
    p = sub.add_parser("train", parents=[common], help="train a Transporter")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    for name in ("infer", "eval", "embed"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data")
        p.add_argument("--checkpoint", required=True)
        if name in ("infer", "eval"):
            p.add_argument("--correction", action="store_true", help="subtract the median frame first")
        if name == "infer":
            p.add_argument("--png", action="store_true", help="also write keypoint overlays")
        if name == "eval":
            p.add_argument("--radius", type=float, default=8.0)
    p = sub.add_parser("tsne", parents=[common], help="2-d t-SNE of exported embeddings")
    p.add_argument("--embeddings", required=True, help="directory written by 'embed'")
    p = sub.add_parser("classify", parents=[common], help="kNN co-classification of t-SNE points")
    p.add_argument("--tsne", required=True, help="tsne.csv written by 'tsne'")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    from .training import TrainingAborted
    from .numerics import NonFiniteError

    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(args.config, args.override)
        out = Path(args.out)
        write_snapshot(out, args.command, json.loads(json.dumps(config)), args)
        outputs = COMMANDS[args.command](args, config)
        if getattr(args, "resolved", None) is not None:
            write_snapshot(out, args.command, args.resolved, args)
        write_manifest(out, args.command, outputs)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except GradcheckFailed:
        return EXIT_NAN
    except (DataError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
