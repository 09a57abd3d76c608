"""Synthetic labeled corpora for desk-scale runs.

Each image is a noisy field whose class is fixed by a simple rule:

* ``brightness``: good images have mean luma above 128, bad ones below.
* ``hue``: good images are red-dominant, bad ones blue-dominant.

Vote histograms are drawn so good images average above 5 and bad ones below.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ilgnet.ava import RatingRecord, write_metadata
from ilgnet.imageio import encode_ppm

RULES = ("brightness", "hue")
LUMA = np.array([0.299, 0.587, 0.114])


def luma(image: np.ndarray) -> float:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    return float(np.tensordot(LUMA, img, axes=(0, 0)).mean())


def _image(rng, good: bool, rule: str, h: int, w: int) -> np.ndarray:
    if rule == "brightness":
        base = rng.uniform(160, 215) if good else rng.uniform(40, 95)
        tint = rng.uniform(-20, 20, size=3)
        img = base + tint[:, None, None] + rng.normal(0, 18, size=(3, h, w))
    else:
        hi, lo = rng.uniform(170, 230), rng.uniform(30, 90)
        rgb = np.array([hi, rng.uniform(60, 160), lo]) if good else np.array([lo, rng.uniform(60, 160), hi])
        img = rgb[:, None, None] + rng.normal(0, 18, size=(3, h, w))
    return np.clip(np.rint(img), 0, 255)


def _votes(rng, good: bool) -> tuple[int, ...]:
    center = rng.uniform(6.0, 8.0) if good else rng.uniform(2.5, 4.0)
    total = int(rng.integers(78, 550))
    scores = np.clip(np.rint(rng.normal(center, 1.2, size=total)), 1, 10).astype(int)
    counts = np.bincount(scores, minlength=11)[1:]
    mean = (counts * np.arange(1, 11)).sum() / total
    # pull a stray mean back to the right side of the threshold
    while (mean <= 5) if good else (mean >= 5):
        src = int(np.flatnonzero(counts)[0 if good else -1])
        dst = 9 if good else 0
        counts[src] -= 1
        counts[dst] += 1
        mean = (counts * np.arange(1, 11)).sum() / total
    return tuple(int(c) for c in counts)


def synth_dataset(n: int, seed: int, rule: str = "brightness", out_dir=None, size: tuple[int, int] = (48, 40)):
    """Generate ``n`` images (half good, in seeded random order).

    With ``out_dir`` set, writes ``<id>.ppm`` files and ``metadata.csv``
    there. Returns ``(records, images, labels)`` with images as float32
    arrays of shape (1, 3, H, W).
    """
    if n < 2 or n % 2:
        raise ValueError(f"n must be an even number >= 2, got {n}")
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; choose from {', '.join(RULES)}")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n // 2) + [0] * (n // 2))
    rng.shuffle(labels)
    h, w = size
    records, images = [], []
    width = max(4, len(str(n - 1)))
    for i, lab in enumerate(labels):
        image_id = f"img{i:0{width}d}"
        img = _image(rng, bool(lab), rule, h, w)
        records.append(RatingRecord(image_id, _votes(rng, bool(lab))))
        images.append(img[None].astype(np.float32))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r, img in zip(records, images):
            (out / f"{r.image_id}.ppm").write_bytes(encode_ppm(img))
        write_metadata(records, out / "metadata.csv")
    return records, images, labels.tolist()
