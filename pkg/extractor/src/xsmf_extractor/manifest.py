"""Item manifest: one row per item with its text and image path."""

import csv
from typing import NamedTuple

HEADER = ["item_id", "text", "image_path"]


class ManifestItem(NamedTuple):
    item_id: str
    text: str
    image_path: str


def load_manifest(path):
    """Read `item_id,text,image_path` rows (standard CSV quoting, so text
    may contain commas)."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise ValueError(f"{path}: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or not row[0]:
                raise ValueError(f"{path}:{lineno}: malformed row")
            out.append(ManifestItem(row[0], row[1], row[2]))
    return out


def write_manifest(path, items):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for it in items:
            writer.writerow([it.item_id, it.text, it.image_path])
