"""Feature Gradual Sampling: multi-reference, multi-frame editing.

Each iteration draws one reference (uniformly, from a counter-based
generator keyed by the seed and the (frame, iteration) pair) whose cached
K/V drive the injection.  From iteration 2 on, the starting noise is blended
rather than replaced::

    z_T(n) = alpha * invert(Z*(n)) + (1 - alpha) * z_T(n-1)
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import denoiser as dn
from .attn_control import KVStore
from .editing import (
    CallCounter,
    EditConfig,
    Editor,
    EditResult,
    Mask,
    _finish,
    check_pair,
)
from .errors import ConfigError, DomainError, ShapeError
from .scheduler import StepGrid

MAX_REFERENCES = 3


@dataclass(frozen=True)
class ReferenceSet:
    images: tuple[np.ndarray, ...]
    prompts: tuple[str, ...]
    seed: int | None = None  # falls back to EditConfig.seed

    def __post_init__(self):
        if not 1 <= len(self.images) <= MAX_REFERENCES:
            raise ConfigError(f"need 1-{MAX_REFERENCES} reference images, got {len(self.images)}")
        if len(self.prompts) != len(self.images):
            raise ConfigError("one prompt per reference image")

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[np.ndarray, ...]
    masks: tuple[Mask, ...]
    prompt: str

    def __post_init__(self):
        if not self.frames:
            raise ShapeError("empty frame sequence")
        if len(self.masks) != len(self.frames):
            raise ShapeError(f"{len(self.frames)} frames but {len(self.masks)} masks")
        shape = self.frames[0].shape
        for i, (f, m) in enumerate(zip(self.frames, self.masks)):
            if f.shape != shape:
                raise ShapeError(f"frame {i} is {f.shape}, frame 0 is {shape}")
            if m.pixel.shape != shape[:2]:
                raise ShapeError(f"mask {i} is {m.pixel.shape}, frames are {shape[:2]}")


def sample_reference(count: int, seed: int, n: int, frame: int = 0) -> int:
    """Uniform reference index for iteration ``n`` (1-based) of ``frame``."""
    if n < 1:
        raise DomainError(f"iteration index must be >= 1, got {n}")
    if count == 1:
        return 0
    bitgen = np.random.Philox(key=seed, counter=[n, frame, 0, 0])
    return int(np.random.Generator(bitgen).integers(count))


def fgs_blend(F: np.ndarray, z_T_prev: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if F.shape != z_T_prev.shape:
        raise ShapeError(f"fgs blend: {F.shape} vs {z_T_prev.shape}")
    if alpha == 1.0:
        return F
    if alpha == 0.0:
        return z_T_prev
    return alpha * F + (1.0 - alpha) * z_T_prev


def fgs_update(editor: Editor, z_T_prev: np.ndarray, z_star: np.ndarray, c_t: dn.PromptEmbedding,
               alpha: float, grid: StepGrid, invert_condition: str) -> np.ndarray:
    F = editor.invert_latent(z_star, editor.inversion_condition(c_t, invert_condition), grid)
    return fgs_blend(F, z_T_prev, alpha)


@dataclass
class MultiviewResult:
    frames: list[EditResult]
    pair_rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    frame_bg_max: list[float] = field(default_factory=list)
    reference_counter: CallCounter | None = None

    def table(self) -> str:
        lines = ["frame_pair\tedited_mad\tbg_max_error"]
        for i, j, mad, bg in self.pair_rows:
            lines.append(f"{i}-{j}\t{mad:.10g}\t{bg:.10g}")
        lines.append("")
        lines.append("frame\tbg_max_error")
        for i, bg in enumerate(self.frame_bg_max):
            lines.append(f"{i}\t{bg:.10g}")
        return "\n".join(lines) + "\n"


def capture_references(refs: ReferenceSet, weights: dn.Weights, cfg: EditConfig,
                       editor: Editor) -> dict[tuple[int, int], KVStore]:
    """Capture K/V for every reference on every grid the run will use."""
    steps = {cfg.first_iteration_steps}
    if cfg.iterations > 1:
        steps.add(cfg.steps)
    stores = {}
    for r, (img, prompt) in enumerate(zip(refs.images, refs.prompts)):
        z_ref = dn.encode_image(img, weights)
        c_s = editor.embed(prompt)
        for T in sorted(steps):
            stores[(r, T)] = editor.capture_reference(z_ref, c_s, editor.grid(T), cfg)
    return stores


def _consistency(frames: FrameSequence, results: Sequence[EditResult]):
    from .metrics import bg_max_error

    bg = [bg_max_error(r.image, f, m) for r, f, m in zip(results, frames.frames, frames.masks)]
    rows = []
    for i in range(len(results) - 1):
        region = frames.masks[i].pixel | frames.masks[i + 1].pixel
        diff = np.abs(results[i].image - results[i + 1].image).mean(axis=2)
        mad = float(diff[region].mean()) if region.any() else 0.0
        rows.append((i, i + 1, mad, max(bg[i], bg[i + 1])))
    return rows, bg


def run_multiview(
    frames: FrameSequence,
    refs: ReferenceSet,
    cfg: EditConfig,
    weights: dn.Weights,
    jobs: int = 1,
    sampler: Callable[[int, int], int] | None = None,
) -> MultiviewResult:
    """Edit every frame against the reference set.

    ``sampler(frame, n)`` overrides the random reference choice.
    """
    for img in refs.images:
        check_pair(img, frames.frames[0], frames.masks[0])
    ref_editor = Editor.for_config(weights, cfg)
    stores = capture_references(refs, weights, cfg, ref_editor)
    seed = cfg.seed if refs.seed is None else refs.seed
    ref_latents = [dn.encode_image(img, weights) for img in refs.images]

    if sampler is None:
        def sampler(frame: int, n: int) -> int:
            key_frame = frame if cfg.sampler_per_frame else 0
            return sample_reference(len(refs), seed, n, key_frame)

    def edit_frame(i: int) -> EditResult:
        editor = Editor(weights, ref_editor.schedule)
        c_t = editor.embed(frames.prompt)
        img, mask = frames.frames[i], frames.masks[i]

        def store_for(n: int, grid: StepGrid):
            r = sampler(i, n)
            return r, stores[(r, grid.t_infer)]

        maps = {} if cfg.record_maps else None
        records = editor.edit_latent(
            dn.encode_image(img, weights), c_t, store_for, cfg, mask=mask, maps=maps,
            blend_fn=lambda F, prev: fgs_blend(F, prev, cfg.alpha),
        )
        z_ref = ref_latents[records[-1].reference]
        image, decoded, report = _finish(editor, records, img, mask, z_ref)
        return EditResult(image, decoded, records, report, editor.counter, maps or {})

    indices = range(len(frames.frames))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(edit_frame, indices))
    else:
        results = [edit_frame(i) for i in indices]
    rows, bg = _consistency(frames, results)
    return MultiviewResult(results, rows, bg, ref_editor.counter)
