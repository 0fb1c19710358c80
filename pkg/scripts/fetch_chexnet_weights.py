"""Download the public CheXNet DenseNet-121 checkpoint and print its sha256.

Put the printed digest into ``model.weights_sha256`` of the run config to
pin the file.  Usage: python3 scripts/fetch_chexnet_weights.py [dest]
"""

import argparse
import hashlib
import shutil
import sys
import urllib.request
from pathlib import Path

URL = "https://github.com/arnoweng/CheXNet/raw/master/model.pth.tar"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("dest", nargs="?", default="weights/chexnet.pth.tar")
    p.add_argument("--url", default=URL)
    args = p.parse_args(argv)
    dest = Path(args.dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    try:
        with urllib.request.urlopen(args.url) as resp, open(tmp, "wb") as fh:
            shutil.copyfileobj(resp, fh)
    except OSError as exc:
        print(f"download failed: {exc}", file=sys.stderr)
        return 1
    tmp.replace(dest)
    h = hashlib.sha256(dest.read_bytes()).hexdigest()
    print(f"{dest}\nsha256 {h}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
