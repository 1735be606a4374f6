"""Run-directory plumbing: hashing, manifests, CSV/JSON/PNG writers.

Everything written here is deterministic for identical inputs except the
manifest timestamps, so whole run directories can be compared by hash.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .errors import ConfigError, ValidationError
from .pipeline import TRACE_COLUMNS

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_loss_history(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row.as_csv_values()) + "\n")


def write_embeddings_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("x,y,cluster,image_index\n")
        for x, y, cluster, idx in rows:
            fh.write(f"{x!r},{y!r},{cluster},{idx}\n")


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_image_png(path, img: np.ndarray):
    Image.fromarray(image_to_uint8(img), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Decode to (3, H, W) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def ingest_images(directory, min_count: int | None = None,
                  expected_hw: tuple[int, int] | None = None,
                  resize: bool = False):
    """Load every decodable image in lexicographic filename order.

    Returns (paths, images, hashes, notes). Undecodable files are skipped
    with a note; a resolution mismatch is an error unless `resize` is set,
    in which case images are scaled to the expected resolution.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"image directory not found: {directory}")
    paths, images, hashes, notes = [], [], [], []
    for p in sorted(directory.iterdir(), key=lambda q: q.name):
        if not p.is_file():
            continue
        try:
            img = load_image(p)
        except (UnidentifiedImageError, OSError, ValueError):
            notes.append(f"skipped undecodable file: {p.name}")
            continue
        if expected_hw is None:
            expected_hw = img.shape[1:]
        if img.shape[1:] != tuple(expected_hw):
            if not resize:
                raise ValidationError(
                    f"{p.name}: resolution {img.shape[1:]} != expected "
                    f"{tuple(expected_hw)} (pass --resize to scale inputs)"
                )
            with Image.open(p) as im:
                scaled = im.convert("RGB").resize(
                    (expected_hw[1], expected_hw[0]), Image.BILINEAR)
            img = np.asarray(scaled, dtype=np.float64).transpose(2, 0, 1) / 255.0
        paths.append(p)
        images.append(img)
        hashes.append(sha256_file(p))
    if min_count is not None and len(images) < min_count:
        raise ConfigError(
            f"need at least {min_count} images (clusters x neighbors), "
            f"found {len(images)} decodable in {directory}"
        )
    if not images:
        raise ConfigError(f"no decodable images in {directory}")
    return paths, images, hashes, notes


def utc_now() -> str:
    return dt.datetime.now(tz=dt.timezone.utc).isoformat()


def build_manifest(run_dir, command: str, config: dict, inputs: list,
                   outputs: list[str], started: str, notes=None) -> dict:
    """Manifest for a finished run; `outputs` are paths relative to run_dir."""
    run_dir = Path(run_dir)
    payload = json.dumps({"command": command, "config": config,
                          "inputs": inputs}, sort_keys=True)
    manifest = {
        "run_id": hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16],
        "command": command,
        "library_version": __version__,
        "started_utc": started,
        "finished_utc": utc_now(),
        "config": config,
        "inputs": inputs,
        "outputs": [],
        "notes": notes or [],
    }
    for rel in sorted(outputs):
        full = run_dir / rel
        if not full.is_file():
            raise ValidationError(f"manifest output missing on disk: {rel}")
        manifest["outputs"].append({"path": rel, "sha256": sha256_file(full)})
    write_json(run_dir / MANIFEST_NAME, manifest)
    return manifest


def verify_manifest(run_dir) -> dict:
    """Re-hash every referenced output; raises ValidationError on mismatch."""
    run_dir = Path(run_dir)
    manifest = read_json(run_dir / MANIFEST_NAME)
    for entry in manifest["outputs"]:
        full = run_dir / entry["path"]
        if not full.is_file():
            raise ValidationError(f"manifest references missing file: {entry['path']}")
        actual = sha256_file(full)
        if actual != entry["sha256"]:
            raise ValidationError(
                f"hash mismatch for {entry['path']}: manifest {entry['sha256'][:12]}…, "
                f"file {actual[:12]}…"
            )
    return manifest


def thread_cap(requested: int) -> int:
    """Respect the FEATVIS_THREADS environment cap."""
    cap = os.environ.get("FEATVIS_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ConfigError(f"FEATVIS_THREADS must be an integer, got {cap!r}")
    return max(1, requested)
