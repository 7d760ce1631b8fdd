"""Offline embeddings for an anchor file using the WordLlama static model.

    python3 tools/embed_anchors.py data/zoo/fixture_anchors.jsonl data/zoo/fixture_embeddings.jsonl

Writes the same header + record layout as `tagcc embed`, including the text
fingerprint that `tagcc train --anchors` checks.
"""

import hashlib
import json
import struct
import sys

from wordllama import WordLlama

DIM = 256
PROVIDER = f"wordllama-l2-supercat-{DIM}"


def text_fingerprint(anchors):
    h = hashlib.sha256()
    for a in anchors:
        data = a["text"].encode("utf-8")
        h.update(struct.pack("<Q", a["row_id"]))
        h.update(struct.pack("<Q", len(data)))
        h.update(data)
    return h.hexdigest()


def main(anchor_path, out_path):
    with open(anchor_path) as f:
        lines = [json.loads(l) for l in f if l.strip()]
    anchors = lines[1:]
    model = WordLlama.load(dim=DIM, disable_download=True)
    vectors = model.embed([a["text"] for a in anchors])
    header = {"dim": DIM, "provider_id": PROVIDER, "n": len(anchors), "text_fingerprint": text_fingerprint(anchors)}
    with open(out_path, "w") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for a, v in zip(anchors, vectors):
            record = {"row_id": a["row_id"], "vector": [float(x) for x in v]}
            f.write(json.dumps(record, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:3])
