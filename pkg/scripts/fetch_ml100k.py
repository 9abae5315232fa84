#!/usr/bin/env python3
"""Recreate MovieLens 100K ``u.data`` without access to grouplens.org.

The RecBole wheel on PyPI ships ``ml-100k.inter``, which is u.data with a
typed header line.  This script downloads that wheel with pip, strips the header and
writes ``data/ml-100k/u.data`` (user, item, rating, timestamp; tab separated).
If grouplens.org is reachable, downloading ml-100k.zip directly works too.

MovieLens data is distributed by GroupLens under its own usage licence;
the file is not committed to this repository.
"""

import argparse
import hashlib
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL = ("recbole", "1.2.1")
MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
SHA256 = "06416e597f82b7342361e41163890c81036900f418ad91315590814211dca490"


def download_wheel(name, version, dest):
    """Fetch the wheel through pip so the configured package index is used."""
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:",
                    "-d", str(dest), f"{name}=={version}"], check=True, stdout=subprocess.DEVNULL)
    return next(Path(dest).glob(f"{name}-{version}-*.whl"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "ml-100k" / "u.data"))
    ap.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = ap.parse_args(argv)

    if args.wheel:
        blob = Path(args.wheel).read_bytes()
    else:
        with tempfile.TemporaryDirectory() as tmp:
            blob = download_wheel(*WHEEL, tmp).read_bytes()
    text = zipfile.ZipFile(io.BytesIO(blob)).read(MEMBER).decode("utf-8")
    lines = text.splitlines()
    if not lines[0].startswith("user_id"):
        raise SystemExit("unexpected header in ml-100k.inter")
    body = ("\n".join(lines[1:]) + "\n").encode("utf-8")
    digest = hashlib.sha256(body).hexdigest()
    if digest != SHA256:
        print(f"warning: sha256 {digest} differs from the expected {SHA256}", file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(body)
    print(f"wrote {len(lines) - 1} ratings to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
