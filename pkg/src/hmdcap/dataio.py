"""Image and dataset file I/O.

Datasets on disk are a directory with ``manifest.json``, an ``images/``
tree of 8-bit binary PGM files (PNG when RGB is enabled), and
``labels.jsonl`` with one JSON record per sample in manifest order.
Nothing in these files depends on wall-clock time or absolute paths, so
two runs with the same seed produce byte-identical trees.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def write_pgm(path, image: np.ndarray):
    """8-bit binary (P5) PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError("PGM images must be 2-D grayscale")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def write_png(path, image: np.ndarray):
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path))


def write_image(path, image: np.ndarray):
    if str(path).endswith(".png"):
        write_png(path, image)
    else:
        write_pgm(path, image)


def read_image(path) -> np.ndarray:
    if str(path).endswith(".png"):
        return read_png(path)
    return read_pgm(path)


@dataclass
class DatasetManifest:
    """Index of a generated dataset; all paths are relative to its root."""

    kind: str
    config: dict
    samples: list = field(default_factory=list)
    subjects: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    basis_path: str | None = None
    root: str = "."

    @property
    def count(self) -> int:
        return len(self.samples)

    def path(self, rel) -> str:
        return os.path.join(self.root, rel)


def save_manifest(manifest: DatasetManifest, labels: list[dict]):
    """Write manifest.json and labels.jsonl under the manifest root."""
    if len(labels) != manifest.count:
        raise DataError("label count does not match sample count")
    for rec in manifest.samples:
        full = manifest.path(rec["image"])
        if not os.path.exists(full):
            raise DataError(f"manifest references missing file {full}")
    doc = {
        "kind": manifest.kind,
        "count": manifest.count,
        "basis": manifest.basis_path,
        "config": manifest.config,
        "subjects": manifest.subjects,
        "frames": manifest.frames,
        "samples": manifest.samples,
    }
    with open(os.path.join(manifest.root, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(manifest.root, "labels.jsonl"), "w") as f:
        for rec in labels:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def load_manifest(root) -> tuple[DatasetManifest, list[dict]]:
    mpath = os.path.join(root, "manifest.json")
    try:
        with open(mpath) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"no manifest.json under {root}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: {e}") from None
    manifest = DatasetManifest(
        kind=doc["kind"],
        config=doc["config"],
        samples=doc["samples"],
        subjects=doc.get("subjects", []),
        frames=doc.get("frames", []),
        basis_path=doc.get("basis"),
        root=str(root),
    )
    if manifest.count != doc["count"]:
        raise DataError(f"{mpath}: header count {doc['count']} != {manifest.count} samples")
    labels = []
    with open(os.path.join(root, "labels.jsonl")) as f:
        for line in f:
            if line.strip():
                labels.append(json.loads(line))
    if len(labels) != manifest.count:
        raise DataError(f"{root}: labels.jsonl has {len(labels)} records, expected {manifest.count}")
    return manifest, labels


def tree_bytes(root) -> dict[str, bytes]:
    """Every file under root keyed by relative path; for determinism checks."""
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in sorted(names):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            with open(full, "rb") as f:
                out[rel] = f.read()
    return out
