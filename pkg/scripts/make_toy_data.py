"""Write raw toy capture sessions: <out>/<subject>/<appearance>/frame_XXXX.png.

    python scripts/make_toy_data.py --out toy_raw --subjects 2 --appearances 3 --frames 40
"""

import argparse
from pathlib import Path

from deoccl.synthetic import write_toy_session


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="toy_raw")
    ap.add_argument("--subjects", type=int, default=2)
    ap.add_argument("--appearances", type=int, default=3)
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--size", type=int, default=96, help="raw frame size before crop/scale")
    args = ap.parse_args()
    for s in range(args.subjects):
        for a in range(args.appearances):
            d = write_toy_session(Path(args.out) / f"u{s}" / f"look{a}", args.frames, args.size, appearance=a, seed=s)
            print(d)


if __name__ == "__main__":
    main()
