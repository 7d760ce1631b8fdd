"""Rule-based descriptions of zoo rows, written as a fixture anchor file.

Uses feature columns only; the `type` column is never read. Each description
ends with an interpretive sentence standing in for the world knowledge a chat
model would add.

    python3 tools/verbalize_zoo.py data/zoo/zoo.csv data/zoo/fallback_anchors.jsonl data/zoo/fixture_anchors.jsonl

The second argument supplies the header (schema fingerprint) and row ids.
"""

import csv
import json
import sys

TRAITS = {
    "hair": ("is covered in hair or fur", "has no hair"),
    "feathers": ("has feathers", "has no feathers"),
    "eggs": ("lays eggs", "does not lay eggs"),
    "milk": ("feeds its young with milk", "does not produce milk"),
    "airborne": ("can fly", "cannot fly"),
    "aquatic": ("lives in water", "lives on land"),
    "predator": ("hunts other animals", "is not a predator"),
    "toothed": ("has teeth", "has no teeth"),
    "backbone": ("is a vertebrate with a backbone", "is an invertebrate without a backbone"),
    "breathes": ("breathes air", "does not breathe air"),
    "venomous": ("is venomous", "is not venomous"),
    "fins": ("has fins", "has no fins"),
    "tail": ("has a tail", "has no tail"),
    "catsize": ("is at least as large as a cat", "is smaller than a cat"),
}

LEGS = {
    "0": "It has no legs.",
    "2": "It walks on two legs.",
    "4": "It walks on four legs.",
    "5": "It has five arms.",
    "6": "It has six legs.",
    "8": "It has eight legs.",
}

ORDER = ["backbone", "hair", "feathers", "fins", "milk", "eggs", "breathes", "aquatic",
         "airborne", "toothed", "tail", "predator", "venomous", "catsize"]


def interpret(row):
    """Zoological reading of the trait combination, as a domain expert would add it."""
    has = lambda name: row[name] == "1"
    legs = int(row["legs"])
    if has("milk") or has("hair") and not has("eggs"):
        return "Fur or hair together with milk marks the traits of a mammal."
    if has("feathers"):
        return "Feathers, eggs and two legs are the traits of a bird."
    if has("backbone") and has("fins") and not has("breathes"):
        return "A backbone, fins and life underwater without breathing air are the traits of a fish."
    if has("backbone") and has("aquatic") and has("breathes") and legs == 4:
        return "A four-legged vertebrate that breathes air but lives in water suggests an amphibian."
    if has("backbone"):
        return "A cold-blooded vertebrate with scales and a tail suggests a reptile."
    if legs == 6 and has("breathes"):
        return "Six legs and air breathing without a backbone are the traits of an insect."
    return "Without a backbone and without the six legs of an insect it is some other invertebrate."


def describe(row):
    parts = [TRAITS[name][0 if row[name] == "1" else 1] for name in ORDER]
    head = "This animal " + ", ".join(parts[:4]) + "."
    body = "It " + ", ".join(parts[4:9]) + "."
    tail = "It " + ", ".join(parts[9:]) + "."
    return " ".join([head, body, LEGS[row["legs"]], tail, interpret(row)])


def main(data_path, header_path, out_path):
    with open(header_path) as f:
        lines = [json.loads(l) for l in f if l.strip()]
    header, like = lines[0], lines[1:]
    with open(data_path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(like) == header["n"], "row count differs from the header file"
    with open(out_path, "w") as f:
        f.write(json.dumps({"schema_fingerprint": header["schema_fingerprint"], "n": header["n"]},
                           separators=(",", ":")) + "\n")
        for anchor, row in zip(like, rows):
            record = {"row_id": anchor["row_id"], "text": describe(row), "source": "fixture"}
            f.write(json.dumps(record, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:4])
