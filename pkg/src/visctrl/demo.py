"""Synthetic 64x64 inputs and ready-to-run configs.

``python -m visctrl.demo DIR`` writes source images with their masks plus one
config per command into ``DIR``.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from . import imageio as io

SIZE = 64


def _grid() -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


def backdrop(seed: int = 7) -> np.ndarray:
    """Smooth two-tone gradient with mild seeded texture."""
    yy, xx = _grid()
    rng = np.random.default_rng(seed)
    base = np.stack([0.25 + 0.4 * xx / SIZE, 0.35 + 0.3 * yy / SIZE, 0.55 - 0.2 * xx / SIZE], axis=2)
    return np.clip(base + 0.03 * rng.standard_normal(base.shape), 0.0, 1.0)


def disc_mask(cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid()
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def paint(img: np.ndarray, mask: np.ndarray, colour, stripes: bool = False) -> np.ndarray:
    out = img.copy()
    fill = np.broadcast_to(np.asarray(colour, dtype=np.float64), img.shape).copy()
    if stripes:
        yy, _ = _grid()
        fill[(yy // 4) % 2 == 0] *= 0.6
    out[mask] = fill[mask]
    return out


def reference_image() -> np.ndarray:
    return paint(backdrop(3), disc_mask(30, 34, 16), (0.9, 0.2, 0.15), stripes=True)


def target_image(shift: int = 0) -> tuple[np.ndarray, np.ndarray]:
    mask = disc_mask(32, 28 + shift, 14)
    return paint(backdrop(7), mask, (0.2, 0.3, 0.85)), mask


def write_demo(root) -> list[Path]:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    written = []

    def image(name, img):
        io.write_rgb(root / name, img)
        written.append(root / name)

    def mask(name, m):
        io.write_mask(root / name, m)
        written.append(root / name)

    image("reference.png", reference_image())
    image("reference2.png", paint(backdrop(5), disc_mask(34, 30, 15), (0.95, 0.7, 0.1)))
    tgt, m = target_image()
    image("target.png", tgt)
    mask("mask.png", m)
    for i in range(3):
        frame, fm = target_image(shift=2 * i)
        image(f"frames/{io.frame_name(i)}", frame)
        mask(f"masks/{io.frame_name(i)}", fm)

    configs = {
        "weights.cfg": "seed = 0\n",
        "edit.cfg": (
            "weights = weights.vtsr\nreference = reference.png\ntarget = target.png\nmask = mask.png\n"
            "reference_prompt = a red striped ball\ntarget_prompt = a red striped ball on the table\n"
        ),
        "edit_seq.cfg": (
            "weights = weights.vtsr\nframes_dir = frames\nmasks_dir = masks\n"
            "references = reference.png, reference2.png\n"
            "reference_prompts = a red striped ball | a yellow ball\n"
            "target_prompt = a ball rolling\nalpha = 0.7\n"
        ),
        "sweep.cfg": (
            "weights = weights.vtsr\ntarget = target.png\nreference = reference.png\nmask = mask.png\n"
            "reference_prompt = a red striped ball\ntarget_prompt = a ball\n"
            "s_values = 0, 2, 5\nl_values = 0, 2, 4\nt_values = 5\niterations = 2\n"
        ),
        "reconstruct.cfg": (
            "weights = weights.vtsr\nimage = target.png\nprompt = a ball\nsteps = 20\n"
            "omega = 1\ninvert_condition = conditional\n"
        ),
    }
    for name, text in configs.items():
        (root / name).write_text(text, encoding="utf-8")
        written.append(root / name)
    return written


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m visctrl.demo DIR")
    for p in write_demo(sys.argv[1]):
        print(p)
