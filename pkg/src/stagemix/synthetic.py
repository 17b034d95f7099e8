"""Desk-scale synthetic re-identification dataset.

Each identity is defined by two spatially disjoint cues: a colored rectangle
in the upper third of the image and a striped patch in the lower third, each
with an identity-specific hue. Either cue alone suffices to identify, which
makes stage complementarity measurable against the emitted ground truth.
Two synthetic "cameras" apply distinct illumination/noise transforms.
"""

from __future__ import annotations

import colorsys
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import format_market_filename
from .errors import ConfigError


def _cue_regions(height: int, width: int) -> tuple[tuple[int, int, int, int],
                                                    tuple[int, int, int, int]]:
    upper = (round(0.07 * height), round(0.25 * width),
             round(0.26 * height), round(0.75 * width))
    lower = (round(0.67 * height), round(0.12 * width),
             round(0.92 * height), round(0.88 * width))
    return upper, lower


def _paint_upper(img: np.ndarray, region, color, jitter) -> None:
    y0, x0, y1, x1 = region
    dy, dx = jitter
    img[y0 + dy:y1 + dy, x0 + dx:x1 + dx, :] = color


def _paint_lower(img: np.ndarray, region, color, period: int, jitter) -> None:
    y0, x0, y1, x1 = region
    dy, dx = jitter
    for y in range(y0 + dy, y1 + dy):
        if ((y - y0 - dy) // period) % 2 == 0:
            img[y, x0 + dx:x1 + dx, :] = color
        else:
            img[y, x0 + dx:x1 + dx, :] = 0.1


def _camera_transform(img: np.ndarray, cam_id: int, rng: np.random.Generator) -> np.ndarray:
    if cam_id == 1:
        out = img + rng.normal(0.0, 0.02, img.shape)
    else:
        out = img * 0.65
        out[:, :, 2] = np.minimum(out[:, :, 2] + 0.05, 1.0)
        out = out + rng.normal(0.0, 0.04, img.shape)
    return np.clip(out, 0.0, 1.0)


def _render(pid: int, num_ids: int, cam_id: int, height: int, width: int,
            rng: np.random.Generator, with_cues: bool = True) -> np.ndarray:
    img = np.full((height, width, 3), rng.uniform(0.25, 0.75), dtype=np.float64)
    if with_cues:
        upper, lower = _cue_regions(height, width)
        hue_u = pid / num_ids
        hue_l = (pid + 0.5) / num_ids
        shade = float(rng.uniform(0.9, 1.0))
        color_u = np.array(colorsys.hsv_to_rgb(hue_u, 1.0, shade))
        color_l = np.array(colorsys.hsv_to_rgb(hue_l % 1.0, 1.0, shade))
        jitter = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
        _paint_upper(img, upper, color_u, jitter)
        jitter = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
        _paint_lower(img, lower, color_l, period=2 + pid % 3, jitter=jitter)
    return _camera_transform(img, cam_id, rng)


def _write_png(img: np.ndarray, path: Path) -> None:
    arr = (img * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def generate_synthetic_dataset(root: str | Path, num_ids: int = 20,
                               imgs_per_id: int = 8,
                               resolution: tuple[int, int] = (96, 32),
                               seed: int = 7,
                               queries_per_id: int = 2,
                               gallery_per_id: int = 2,
                               junk_images: int = 4) -> Path:
    """Write a Market-1501 style tree plus cues.json; returns the root path.

    Train images alternate between the two cameras; queries are all camera 1
    and gallery all camera 2, so every query has cross-camera true matches.
    A fixed seed yields a byte-identical tree.
    """
    if num_ids < 2:
        raise ConfigError(f"num_ids: must be >= 2, got {num_ids}")
    if imgs_per_id < 2:
        raise ConfigError(f"imgs_per_id: must be >= 2, got {imgs_per_id}")
    height, width = resolution
    root = Path(root)
    rng = np.random.default_rng(seed)
    dirs = {"train": root / "bounding_box_train",
            "query": root / "query",
            "gallery": root / "bounding_box_test"}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    frame = 0
    for pid in range(num_ids):
        for split, count, cams in (("train", imgs_per_id, None),
                                   ("query", queries_per_id, 1),
                                   ("gallery", gallery_per_id, 2)):
            for k in range(count):
                cam = cams if cams is not None else 1 + k % 2
                img = _render(pid, num_ids, cam, height, width, rng)
                name = format_market_filename(pid, cam, frame=frame, bbox=k)
                _write_png(img, dirs[split] / name)
                frame += 1
    for k in range(junk_images):
        img = _render(0, num_ids, 2, height, width, rng, with_cues=False)
        name = format_market_filename(-1, 2, frame=frame, bbox=k)
        _write_png(img, dirs["gallery"] / name)
        frame += 1

    upper, lower = _cue_regions(height, width)
    cues = {str(pid): {"upper": list(upper), "lower": list(lower)}
            for pid in range(num_ids)}
    with open(root / "cues.json", "w") as fh:
        json.dump({"resolution": [height, width], "jitter": 2, "cues": cues},
                  fh, indent=2, sort_keys=True)
    return root
