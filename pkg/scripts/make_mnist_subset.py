"""Write the 5,000-digit MNIST sample shipped inside the mlxtend wheel as IDX files.

Usage: python scripts/make_mnist_subset.py [OUT_DIR] [--wheel PATH]

The sample is read either from an installed ``mlxtend`` or from a wheel file
(``pip download mlxtend --no-deps``); no network access to the MNIST mirrors
is needed.
"""
import argparse
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def _read_csv_bytes(wheel):
    if wheel is not None:
        with zipfile.ZipFile(wheel) as zf:
            return zf.read(CSV_MEMBER)
    import mlxtend.data.mnist as m  # noqa: PLC0415

    return Path(m.DATA_PATH).read_bytes()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", nargs="?", default="data")
    ap.add_argument("--wheel", default=None)
    args = ap.parse_args(argv)

    raw = gzip.decompress(_read_csv_bytes(args.wheel))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(pixels.tobytes())
    with gzip.GzipFile(out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(f"wrote {n} digits to {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
