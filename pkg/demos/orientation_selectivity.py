"""Angle-band Radon enhancement on a band crossing a streak.

Prints how much of each enhanced image lands on the horizontal band and on
the vertical streak, and writes the three images as PGM files.

    python3 demos/orientation_selectivity.py [out_dir]
"""

import sys
from pathlib import Path

from uskeypoints.harness import cross_pattern, generate
from uskeypoints.pgm import write_pgm
from uskeypoints.rtfpm import HORIZONTAL_BAND, VERTICAL_BAND, enhance_orientation, radon


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    video = generate(cross_pattern(128))
    frame = video.frames[0]
    band = video.element_masks[0, 0] & ~video.element_masks[0, 1]
    streak = video.element_masks[0, 1] & ~video.element_masks[0, 0]
    sino = radon(frame)
    horiz = enhance_orientation(frame, HORIZONTAL_BAND, sino)
    vert = enhance_orientation(frame, VERTICAL_BAND, sino)
    print(f"{'':18s}{'band pixels':>14s}{'streak pixels':>15s}")
    for name, img in (("horizontal band", horiz), ("vertical band", vert)):
        print(f"{name:18s}{img[band].sum():14.1f}{img[streak].sum():15.1f}")
    print(f"selectivity: band {horiz[band].sum() / vert[band].sum():.2f}, "
          f"streak {vert[streak].sum() / horiz[streak].sum():.2f}")
    write_pgm(out / "frame.pgm", frame)
    write_pgm(out / "horizontal.pgm", horiz)
    write_pgm(out / "vertical.pgm", vert)
    print(f"images written to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_selectivity"))
