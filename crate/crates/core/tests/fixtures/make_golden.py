"""Writes golden.actv and its label and metadata files.

The fixture is produced with struct packing only, so it does not depend on
either implementation of the format. Rerunning it must reproduce the
checked-in bytes exactly.
"""

import json
import struct
from pathlib import Path

ROWS = [
    [1.0, -2.5, 0.0],
    [0.1, 3.4028234663852886e38, -0.0],
    [1.401298464324817e-45, -1e-3, 65504.0],
    [7.0, 0.5, -0.25],
]
LABELS = ["the", "new\nline", "back\\slash", "caf\u00e9"]
META = {"corpus": "fixture", "exporter_note": "kept on rewrite", "layer": 0, "model": "golden-test-vector"}


def escape(label):
    return label.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def main():
    here = Path(__file__).parent
    payload = b"ACTV" + struct.pack("<IIQQ", 1, 1, len(ROWS), len(ROWS[0]))
    for row in ROWS:
        for v in row:
            payload += struct.pack("<f", v)
    (here / "golden.actv").write_bytes(payload)
    (here / "golden.actv.labels").write_bytes("".join(escape(l) + "\n" for l in LABELS).encode("utf-8"))
    (here / "golden.actv.json").write_text(json.dumps(META, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
