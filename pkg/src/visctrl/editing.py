"""Iterative reference-guided editing loop.

One edit runs two branches over the same step grid:

* reference: encode, DDIM-invert, then a guided denoising pass whose
  conditional forward captures every block's self-attention K/V;
* target: ``Z*`` starts at the encoded target; each iteration inverts ``Z*``,
  denoises with the reference K/V substituted where the gate allows, and the
  result becomes the next ``Z*``.

The final latent is decoded and pasted over the source through the mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import denoiser as dn
from .attn_control import CAPTURE, INJECT, AttentionHooks, EditGate, KVStore
from .errors import ConfigError, ShapeError
from .metrics import MetricReport, bg_error, latent_mse, masked_latent_mse, ssim
from .scheduler import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T_TRAIN,
    NoiseSchedule,
    StepGrid,
    cfg_combine,
    ddim_denoise_step,
    ddim_invert_step,
    make_grid,
    make_schedule,
)

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"

DEFAULT_STEPS = 5
DEFAULT_OMEGA = 6.0
DEFAULT_ITERATIONS = 5


@dataclass(frozen=True)
class EditConfig:
    steps: int = DEFAULT_STEPS
    iterations: int = DEFAULT_ITERATIONS
    s_start: int = 1
    l_start: int = 1
    omega: float = DEFAULT_OMEGA
    alpha: float = 1.0
    seed: int = 0
    invert_condition: str = UNCONDITIONAL
    first_steps: int | None = None
    recompute_reference: bool = False
    latent_blend: bool = False
    record_maps: bool = False
    sampler_per_frame: bool = True
    t_train: int = DEFAULT_T_TRAIN
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.steps < 1 or self.iterations < 1:
            raise ConfigError("steps and iterations must be >= 1")
        if self.first_steps is not None and self.first_steps < 1:
            raise ConfigError("first_steps must be >= 1")
        if self.omega < 0:
            raise ConfigError("omega must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.invert_condition not in (CONDITIONAL, UNCONDITIONAL):
            raise ConfigError(f"invert_condition must be {CONDITIONAL!r} or {UNCONDITIONAL!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def gate(self) -> EditGate:
        return EditGate(self.s_start, self.l_start)

    @property
    def first_iteration_steps(self) -> int:
        return self.steps if self.first_steps is None else self.first_steps

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Mask:
    pixel: np.ndarray   # (H, W) bool
    latent: np.ndarray  # (h, w) bool

    @classmethod
    def from_pixels(cls, pixel_mask: np.ndarray, patch: int) -> "Mask":
        """Latent cell is subject if any pixel of its patch is."""
        pm = np.asarray(pixel_mask, dtype=bool)
        H, W = pm.shape
        if H % patch or W % patch:
            raise ShapeError(f"mask {H}x{W} is not a multiple of the patch size {patch}")
        lm = pm.reshape(H // patch, patch, W // patch, patch).any(axis=(1, 3))
        return cls(pm, lm)

    @classmethod
    def full(cls, h: int, w: int, patch: int) -> "Mask":
        return cls.from_pixels(np.ones((h * patch, w * patch), dtype=bool), patch)


def composite(edited: np.ndarray, source: np.ndarray, mask) -> np.ndarray:
    """``mask * edited + (1 - mask) * source`` for a binary mask, taken exactly."""
    pm = getattr(mask, "pixel", mask)
    edited = np.asarray(edited, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if edited.shape != source.shape or edited.shape[:2] != np.shape(pm):
        raise ShapeError(f"composite: {edited.shape}, {source.shape}, mask {np.shape(pm)}")
    return np.where(np.asarray(pm, dtype=bool)[..., None], edited, source)


@dataclass
class CallCounter:
    """Denoiser evaluations by purpose. ``capture`` calls are also ``cond`` calls."""

    invert: int = 0
    cond: int = 0
    uncond: int = 0
    capture: int = 0

    @property
    def total(self) -> int:
        return self.invert + self.cond + self.uncond


def budget(cfg: EditConfig, references: int = 1) -> CallCounter:
    """Exact call counts of a cached-reference edit.

    Every inversion costs one evaluation per step; every denoising pass costs
    a conditional and an unconditional evaluation per step.  With one
    reference and ``first_steps == steps`` this is ``2*T*(N+1)`` guided
    evaluations, ``T`` of which capture, plus ``T*(N+1)`` inversion calls.
    """
    T, N = cfg.steps, cfg.iterations
    T1 = cfg.first_iteration_steps
    grids = {T1, T} if N > 1 else {T1}
    ref_steps = references * sum(grids)
    tgt_steps = T1 + (N - 1) * T
    return CallCounter(
        invert=ref_steps + tgt_steps,
        cond=ref_steps + tgt_steps,
        uncond=ref_steps + tgt_steps,
        capture=ref_steps,
    )


@dataclass
class IterationRecord:
    n: int
    z_star: np.ndarray
    z_T: np.ndarray
    z0: np.ndarray
    inverted: np.ndarray  # fresh inversion of z_star (F in the blend rule)
    reference: int = 0
    latent_mse: float = 0.0
    ssim: float = 0.0
    bg_error: float = 0.0


@dataclass
class EditResult:
    image: np.ndarray
    decoded: np.ndarray
    iterations: list[IterationRecord]
    report: MetricReport
    counter: CallCounter
    maps: dict = field(default_factory=dict)

    def latent_dump(self) -> dict[str, np.ndarray]:
        out = {}
        for rec in self.iterations:
            out[f"iter{rec.n}.z_star"] = rec.z_star
            out[f"iter{rec.n}.F"] = rec.inverted
            out[f"iter{rec.n}.z_T"] = rec.z_T
            out[f"iter{rec.n}.z0"] = rec.z0
        return out


class Editor:
    """Binds weights and a noise schedule; counts every denoiser call."""

    def __init__(self, weights: dn.Weights, schedule: NoiseSchedule | None = None):
        self.weights = weights
        self.cfg = weights.cfg
        self.schedule = schedule or make_schedule()
        self.uncond = dn.unconditional_embedding(self.cfg)
        self.counter = CallCounter()

    @classmethod
    def for_config(cls, weights: dn.Weights, cfg: EditConfig) -> "Editor":
        return cls(weights, make_schedule(cfg.t_train, cfg.beta_start, cfg.beta_end))

    def grid(self, steps: int) -> StepGrid:
        return make_grid(steps, self.schedule.t_train)

    def embed(self, prompt: str) -> dn.PromptEmbedding:
        return dn.embed_prompt(prompt, self.cfg)

    def _eps(self, z, t_index, c, hooks=None):
        return dn.forward(z, t_index, c, self.weights, hooks=hooks, schedule=self.schedule)

    def inversion_condition(self, c: dn.PromptEmbedding, mode: str) -> dn.PromptEmbedding:
        return c if mode == CONDITIONAL else self.uncond

    def invert_latent(self, z0: np.ndarray, c: dn.PromptEmbedding, grid: StepGrid,
                      trajectory: list | None = None) -> np.ndarray:
        """DDIM-invert ``z0`` up the grid under condition ``c`` (no guidance)."""
        z = np.asarray(z0, dtype=np.float64)
        if z.shape[2:] != (self.cfg.latent_c,):
            raise ShapeError(f"latent {z.shape} does not have {self.cfg.latent_c} channels")
        ab = self.schedule
        if trajectory is not None:
            trajectory.append(z)
        for i in range(grid.t_infer):
            t, t_next = grid.indices[i], grid.indices[i + 1]
            eps = self._eps(z, t, c)
            self.counter.invert += 1
            z = ddim_invert_step(z, eps, ab[t], ab[t_next])
            if trajectory is not None:
                trajectory.append(z)
        return z

    def denoise(self, z_T: np.ndarray, c: dn.PromptEmbedding, grid: StepGrid, omega: float,
                hooks: AttentionHooks | None = None,
                blend: tuple[np.ndarray, list] | None = None) -> np.ndarray:
        """Guided DDIM denoising down the grid.

        ``hooks`` act on the conditional evaluation only; the unconditional
        one always runs unhooked.  ``blend=(latent_mask, trajectory)`` resets
        background cells to the inversion trajectory after every step.
        """
        z = np.asarray(z_T, dtype=np.float64)
        ab = self.schedule
        for i in range(grid.t_infer, 0, -1):
            t, t_prev = grid.indices[i], grid.indices[i - 1]
            if hooks is not None:
                hooks.step = i
            eps_c = self._eps(z, t, c, hooks)
            eps_u = self._eps(z, t, self.uncond)
            self.counter.cond += 1
            self.counter.uncond += 1
            if hooks is not None and hooks.mode == CAPTURE:
                self.counter.capture += 1
            z = ddim_denoise_step(z, cfg_combine(eps_c, eps_u, omega), ab[t], ab[t_prev])
            if blend is not None:
                latent_mask, traj = blend
                z = np.where(latent_mask[..., None], z, traj[i - 1])
        return z

    def capture_reference(self, z0_ref: np.ndarray, c_s: dn.PromptEmbedding, grid: StepGrid,
                          cfg: EditConfig) -> KVStore:
        """Invert and reconstruct the reference, recording its K/V per (step, block)."""
        z_T = self.invert_latent(z0_ref, self.inversion_condition(c_s, cfg.invert_condition), grid)
        store = KVStore()
        self.denoise(z_T, c_s, grid, cfg.omega, AttentionHooks(mode=CAPTURE, store=store))
        return store.freeze()

    def denoise_with_injection(self, z_T: np.ndarray, c_t: dn.PromptEmbedding, store: KVStore,
                               grid: StepGrid, cfg: EditConfig, iteration: int = 0,
                               maps: dict | None = None, blend=None) -> np.ndarray:
        hooks = AttentionHooks(mode=INJECT, gate=cfg.gate, store=store, iteration=iteration,
                               record_maps=maps is not None)
        if maps is not None:
            hooks.maps = maps
        return self.denoise(z_T, c_t, grid, cfg.omega, hooks, blend=blend)

    def reconstruct(self, z0: np.ndarray, c: dn.PromptEmbedding, cfg: EditConfig,
                    steps: int | None = None) -> np.ndarray:
        """Invert then denoise with no injection (the plain round trip)."""
        grid = self.grid(steps or cfg.steps)
        z_T = self.invert_latent(z0, self.inversion_condition(c, cfg.invert_condition), grid)
        return self.denoise(z_T, c, grid, cfg.omega)

    # -- the iterative loop ------------------------------------------------

    def edit_latent(
        self,
        z_target: np.ndarray,
        c_t: dn.PromptEmbedding,
        store_for: Callable[[int, StepGrid], tuple[int, KVStore]],
        cfg: EditConfig,
        mask: Mask | None = None,
        maps: dict | None = None,
        blend_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    ) -> list[IterationRecord]:
        """Run ``cfg.iterations`` invert/inject-denoise rounds from ``z_target``.

        ``store_for(n, grid)`` supplies the reference index and K/V store for
        iteration ``n``.  ``blend_fn(F, previous_z_T)``, when given, produces
        the starting noise from iteration 2 onward; without it the fresh
        inversion ``F`` is used directly.
        """
        cfg.gate.validate(cfg.steps, self.cfg.l_max)
        grid = self.grid(cfg.steps)
        first_grid = self.grid(cfg.first_iteration_steps)
        c_inv = self.inversion_condition(c_t, cfg.invert_condition)
        records: list[IterationRecord] = []
        z_star = np.asarray(z_target, dtype=np.float64)
        z_T_prev = None
        for n in range(1, cfg.iterations + 1):
            g = first_grid if n == 1 else grid
            ref_index, store = store_for(n, g)
            traj = [] if (cfg.latent_blend and mask is not None) else None
            F = self.invert_latent(z_star, c_inv, g, trajectory=traj)
            z_T = F if (blend_fn is None or z_T_prev is None) else blend_fn(F, z_T_prev)
            blend = (mask.latent, traj) if traj is not None else None
            z0 = self.denoise_with_injection(z_T, c_t, store, g, cfg, iteration=n, maps=maps, blend=blend)
            records.append(IterationRecord(n=n, z_star=z_star, z_T=z_T, z0=z0, inverted=F,
                                           reference=ref_index, latent_mse=latent_mse(z0, z_star)))
            z_T_prev = z_T
            z_star = z0
        return records


def _finish(editor: Editor, records: list[IterationRecord], target_img: np.ndarray, mask: Mask,
            z_ref: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, MetricReport]:
    w = editor.weights
    decoded = None
    for rec in records:
        decoded = dn.decode_latent(rec.z0, w)
        out = composite(decoded, target_img, mask)
        rec.ssim = ssim(out, target_img)
        rec.bg_error = bg_error(out, target_img, mask)
    final = composite(decoded, target_img, mask)
    report = MetricReport(
        ssim=records[-1].ssim,
        bg_error=records[-1].bg_error,
        latent_mse=records[-1].latent_mse,
        ssim_series=[r.ssim for r in records],
        bg_series=[r.bg_error for r in records],
        latent_mse_series=[r.latent_mse for r in records],
        subject_latent_distance=(
            masked_latent_mse(records[-1].z0, z_ref, mask.latent) if z_ref is not None else None
        ),
    )
    return final, decoded, report


def check_pair(ref_img: np.ndarray, tgt_img: np.ndarray, mask: Mask) -> None:
    if ref_img.shape != tgt_img.shape:
        raise ShapeError(f"reference {ref_img.shape} and target {tgt_img.shape} differ; resize the reference first")
    if mask.pixel.shape != tgt_img.shape[:2]:
        raise ShapeError(f"mask {mask.pixel.shape} does not match target {tgt_img.shape[:2]}")


def run_visctrl(
    ref_img: np.ndarray,
    tgt_img: np.ndarray,
    prompts: tuple[str, str],
    mask: Mask,
    cfg: EditConfig,
    weights: dn.Weights,
    editor: Editor | None = None,
) -> EditResult:
    """Edit ``tgt_img`` so the masked subject takes on the reference's features.

    ``prompts`` is ``(reference prompt, target prompt)``.
    """
    check_pair(ref_img, tgt_img, mask)
    editor = editor or Editor.for_config(weights, cfg)
    c_s, c_t = editor.embed(prompts[0]), editor.embed(prompts[1])
    z_ref = dn.encode_image(ref_img, weights)
    z_tgt = dn.encode_image(tgt_img, weights)

    cache: dict[int, KVStore] = {}

    def store_for(n: int, grid: StepGrid):
        if cfg.recompute_reference:
            return 0, editor.capture_reference(z_ref, c_s, grid, cfg)
        if grid.t_infer not in cache:
            cache[grid.t_infer] = editor.capture_reference(z_ref, c_s, grid, cfg)
        return 0, cache[grid.t_infer]

    maps = {} if cfg.record_maps else None
    records = editor.edit_latent(z_tgt, c_t, store_for, cfg, mask=mask, maps=maps)
    image, decoded, report = _finish(editor, records, tgt_img, mask, z_ref)
    return EditResult(image, decoded, records, report, editor.counter, maps or {})


def run_reconstruction(
    img: np.ndarray,
    prompt: str,
    cfg: EditConfig,
    weights: dn.Weights,
    mask: Mask | None = None,
    editor: Editor | None = None,
) -> EditResult:
    """``cfg.iterations`` plain invert/denoise rounds with no injection.

    This is what an edit degenerates to when the gate never opens.  Without a
    mask the whole decoded image is returned.
    """
    editor = editor or Editor.for_config(weights, cfg)
    wc = weights.cfg
    if img.shape != (wc.image_h, wc.image_w, 3):
        raise ShapeError(f"image {img.shape} does not match the codec's {(wc.image_h, wc.image_w, 3)}")
    mask = mask or Mask.full(wc.latent_h, wc.latent_w, wc.patch)
    c = editor.embed(prompt)
    z_star = dn.encode_image(img, weights)
    records = []
    for n in range(1, cfg.iterations + 1):
        steps = cfg.first_iteration_steps if n == 1 else cfg.steps
        grid = editor.grid(steps)
        F = editor.invert_latent(z_star, editor.inversion_condition(c, cfg.invert_condition), grid)
        z0 = editor.denoise(F, c, grid, cfg.omega)
        records.append(IterationRecord(n=n, z_star=z_star, z_T=F, z0=z0, inverted=F,
                                       latent_mse=latent_mse(z0, z_star)))
        z_star = z0
    image, decoded, report = _finish(editor, records, img, mask, None)
    return EditResult(image, decoded, records, report, editor.counter)
