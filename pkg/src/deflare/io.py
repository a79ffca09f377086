"""File formats: 8-bit PNG images, dataset manifests, run logs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_image(path, img: np.ndarray) -> None:
    """Write a (3,H,W) or (H,W) array in [0,1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read a PNG into a float (3,H,W) array in [0,1]; grayscale is replicated."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=bool) * np.uint8(255))).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


class RunLog:
    """Newline-delimited JSON log; the single header line owns the timestamp."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        with open(self.path, "w") as fh:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")

    def write(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_log(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().strip().splitlines()
    header = json.loads(lines[0])["header"]
    return header, [json.loads(ln) for ln in lines[1:]]
