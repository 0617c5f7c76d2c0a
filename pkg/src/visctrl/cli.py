"""``visctrl`` command-line front end.

Every command reads a flat ``key = value`` config, computes all outputs in
memory and only then writes them (each file atomically) into ``--out``.
Reports start with the resolved config so a run can be repeated from its
report alone.  Failures print one line ``error: code=<CODE> message=<text>``
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as cf
from . import denoiser as dn
from . import imageio as io
from . import tensorfile
from .attn_control import active_set, attention_map_files
from .config import BOOL, FLOAT, INT, INT_LIST, OPT_INT, PATH_LIST, PROMPT_LIST, STR, Key
from .editing import (
    CallCounter,
    EditConfig,
    EditResult,
    Mask,
    budget,
    run_reconstruction,
    run_visctrl,
)
from .errors import ConfigError, IOFailure, ShapeError, VisCtrlError
from .fgs import FrameSequence, ReferenceSet, run_multiview
from .metrics import latent_mse, ssim

EXIT_CODES = {
    "CONFIG_ERROR": 2,
    "INPUT_ERROR": 3,
    "SHAPE_ERROR": 4,
    "DOMAIN_ERROR": 5,
    "INJECTION_ERROR": 6,
    "FORMAT_ERROR": 7,
    "IO_ERROR": 8,
}
EXIT_INTERNAL = 1

_DEFAULT_EDIT = EditConfig()
_DEFAULT_NET = dn.DenoiserConfig()

# Knobs shared by every command that runs the diffusion loop.
_LOOP_KEYS = {
    "steps": Key(INT, _DEFAULT_EDIT.steps),
    "omega": Key(FLOAT, _DEFAULT_EDIT.omega),
    "invert_condition": Key(STR, _DEFAULT_EDIT.invert_condition),
    "first_steps": Key(OPT_INT, None),
    "t_train": Key(INT, _DEFAULT_EDIT.t_train),
    "beta_start": Key(FLOAT, _DEFAULT_EDIT.beta_start),
    "beta_end": Key(FLOAT, _DEFAULT_EDIT.beta_end),
}

_EDIT_KEYS = {
    **_LOOP_KEYS,
    "iterations": Key(INT, _DEFAULT_EDIT.iterations),
    "s_start": Key(INT, _DEFAULT_EDIT.s_start),
    "l_start": Key(INT, _DEFAULT_EDIT.l_start),
    "recompute_reference": Key(BOOL, False),
    "latent_blend": Key(BOOL, False),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "gen-weights": {
        "seed": Key(INT),
        "zero_denoiser": Key(BOOL, False),
        **{f.name: Key(INT, getattr(_DEFAULT_NET, f.name)) for f in fields(dn.DenoiserConfig) if f.name != "seed"},
    },
    "edit": {
        "weights": Key(STR, path=True),
        "reference": Key(STR, path=True),
        "target": Key(STR, path=True),
        "mask": Key(STR, path=True),
        "reference_prompt": Key(STR),
        "target_prompt": Key(STR),
        **_EDIT_KEYS,
    },
    "edit-seq": {
        "weights": Key(STR, path=True),
        "frames_dir": Key(STR, path=True),
        "masks_dir": Key(STR, path=True),
        "references": Key(PATH_LIST, path=True),
        "reference_prompts": Key(PROMPT_LIST, render=cf.render_prompts),
        "target_prompt": Key(STR),
        "alpha": Key(FLOAT, _DEFAULT_EDIT.alpha),
        "sampler_seed": Key(INT, _DEFAULT_EDIT.seed),
        "sampler_per_frame": Key(BOOL, True),
        **_EDIT_KEYS,
    },
    "sweep": {
        "weights": Key(STR, path=True),
        "mode": Key(STR, "edit"),
        "target": Key(STR, path=True),
        "reference": Key(STR, "", path=True),
        "mask": Key(STR, "", path=True),
        "reference_prompt": Key(STR, ""),
        "target_prompt": Key(STR),
        "s_values": Key(INT_LIST, [1]),
        "l_values": Key(INT_LIST, [1]),
        "t_values": Key(INT_LIST, [_DEFAULT_EDIT.steps]),
        **{k: v for k, v in _EDIT_KEYS.items() if k not in ("steps", "s_start", "l_start")},
    },
    "reconstruct": {
        "weights": Key(STR, path=True),
        "image": Key(STR, path=True),
        "prompt": Key(STR),
        "iterations": Key(INT, 1),
        **_LOOP_KEYS,
    },
}


class Outputs:
    """Files staged in memory, written only once the command has finished."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.files[name] = data

    def add_png(self, name: str, img: np.ndarray) -> None:
        self.add(name, io.png_bytes(io.quantize(img)))

    def commit(self, out_dir: Path) -> None:
        for name in sorted(self.files):
            path = out_dir / name
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise IOFailure(f"cannot create {path.parent}: {exc}") from exc
            tensorfile.atomic_write_bytes(path, self.files[name])


# -- helpers --------------------------------------------------------------


def _edit_config(rc: cf.RunConfig, **overrides) -> EditConfig:
    names = {f.name for f in fields(EditConfig)}
    values = {k: v for k, v in rc.values.items() if k in names}
    values.update(overrides)
    return EditConfig(**values)


def _weights_lines(w: dn.Weights) -> list[str]:
    lines = [f"weights.{f.name}={getattr(w.cfg, f.name)}" for f in fields(w.cfg)]
    lines.append(f"weights.sha256={dn.content_hash(w)}")
    return lines


def _counter_lines(counter: CallCounter, expected: CallCounter | None = None) -> list[str]:
    lines = [
        f"calls.invert={counter.invert}",
        f"calls.cond={counter.cond}",
        f"calls.uncond={counter.uncond}",
        f"calls.capture={counter.capture}",
        f"calls.total={counter.total}",
    ]
    if expected is not None:
        lines.append(f"calls.budget={expected.total}")
    return lines


def _report(lines: list[str]) -> str:
    return "\n".join(lines) + "\n"


def _load_target(path: Path, w: dn.Weights) -> np.ndarray:
    img = io.read_rgb(path)
    want = (w.cfg.image_h, w.cfg.image_w, 3)
    if img.shape != want:
        raise ShapeError(f"{path.name} is {img.shape[1]}x{img.shape[0]}, the codec needs {want[1]}x{want[0]}")
    return img


def _load_mask(path: Path, img: np.ndarray, w: dn.Weights) -> Mask:
    pm = io.read_mask(path)
    if pm.shape != img.shape[:2]:
        raise ShapeError(f"mask {path.name} is {pm.shape[1]}x{pm.shape[0]}, image is {img.shape[1]}x{img.shape[0]}")
    return Mask.from_pixels(pm, w.cfg.patch)


def _size(img: np.ndarray) -> tuple[int, int]:
    return (img.shape[1], img.shape[0])


def _latents(result: EditResult, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in result.latent_dump().items()}


# -- commands -------------------------------------------------------------


def cmd_gen_weights(rc: cf.RunConfig, args) -> tuple[Outputs, str]:
    net = {k: v for k, v in rc.values.items() if k != "zero_denoiser"}
    w = dn.init_weights(dn.DenoiserConfig(**net))
    if rc["zero_denoiser"]:
        w = w.zero_denoiser()
    out = Outputs()
    out.add("weights.vtsr", tensorfile.encode(dn.weights_to_tensors(w)))
    report = _report(rc.echo() + _weights_lines(w))
    out.add("report.txt", report)
    return out, report


def cmd_edit(rc: cf.RunConfig, args) -> tuple[Outputs, str]:
    w = dn.load_weights(rc.path("weights"))
    cfg = _edit_config(rc, record_maps=args.dump_attn)
    target = _load_target(rc.path("target"), w)
    reference = io.read_rgb(rc.path("reference"), size=_size(target))
    mask = _load_mask(rc.path("mask"), target, w)
    result = run_visctrl(reference, target, (rc["reference_prompt"], rc["target_prompt"]), mask, cfg, w)

    expected = None if cfg.recompute_reference else budget(cfg)
    report = _report(rc.echo() + _weights_lines(w) + _counter_lines(result.counter, expected)
                     + result.report.lines())
    out = Outputs()
    out.add_png("edited.png", result.image)
    out.add("report.txt", report)
    out.add("series.csv", result.report.csv())
    if args.dump_latents:
        out.add("latents.vtsr", tensorfile.encode(_latents(result)))
    if args.dump_attn:
        for name, data in attention_map_files(result.maps).items():
            out.add(f"attn/{name}", data)
    return out, report


def cmd_edit_seq(rc: cf.RunConfig, args) -> tuple[Outputs, str]:
    w = dn.load_weights(rc.path("weights"))
    cfg = _edit_config(rc, seed=rc["sampler_seed"], record_maps=args.dump_attn)
    frame_paths = io.list_frames(rc.path("frames_dir"))
    mask_paths = io.list_frames(rc.path("masks_dir"))
    if len(mask_paths) != len(frame_paths):
        raise ShapeError(f"{len(frame_paths)} frames but {len(mask_paths)} masks")
    frames = [_load_target(p, w) for p in frame_paths]
    masks = [_load_mask(p, f, w) for p, f in zip(mask_paths, frames)]
    refs = ReferenceSet(
        tuple(io.read_rgb(p, size=_size(frames[0])) for p in rc.paths("references")),
        tuple(rc["reference_prompts"]),
    )
    seq = FrameSequence(tuple(frames), tuple(masks), rc["target_prompt"])
    result = run_multiview(seq, refs, cfg, w, jobs=args.jobs)

    total = CallCounter(**vars(result.reference_counter))
    for r in result.frames:
        for k, v in vars(r.counter).items():
            setattr(total, k, getattr(total, k) + v)
    lines = rc.echo() + _weights_lines(w) + _counter_lines(total)
    out = Outputs()
    latents = {}
    for i, (path, r) in enumerate(zip(frame_paths, result.frames)):
        out.add_png(f"frames/{path.name}", r.image)
        lines += [f"frame{i}.{line}" for line in r.report.lines()]
        lines.append(f"frame{i}.references={','.join(str(rec.reference) for rec in r.iterations)}")
        latents.update(_latents(r, f"frame{i}."))
        if args.dump_attn:
            for name, data in attention_map_files(r.maps).items():
                out.add(f"attn/frame{i}/{name}", data)
    lines += [f"pair{i}-{j}.edited_mad={mad:.10g}" for i, j, mad, _ in result.pair_rows]
    report = _report(lines)
    out.add("report.txt", report)
    out.add("consistency.tsv", result.table())
    if args.dump_latents:
        out.add("latents.vtsr", tensorfile.encode(latents))
    return out, report


def cmd_sweep(rc: cf.RunConfig, args) -> tuple[Outputs, str]:
    w = dn.load_weights(rc.path("weights"))
    mode = rc["mode"]
    if mode not in ("edit", "reconstruct"):
        raise ConfigError(f"mode must be 'edit' or 'reconstruct', got {mode!r}")
    target = _load_target(rc.path("target"), w)
    mask = _load_mask(rc.path("mask"), target, w) if rc["mask"] else None
    if mode == "edit" and (not rc["reference"] or mask is None or not rc["reference_prompt"]):
        raise ConfigError("edit sweeps need 'reference', 'mask' and 'reference_prompt'")
    reference = io.read_rgb(rc.path("reference"), size=_size(target)) if mode == "edit" else None

    lines = rc.echo() + _weights_lines(w)
    index = []
    out = Outputs()
    for T in rc["t_values"]:
        base = run_reconstruction(target, rc["target_prompt"], _edit_config(rc, steps=T), w, mask=mask)
        name = f"recon_T{T}.png"
        out.add_png(name, base.image)
        index.append(f"S=- L=- T={T} -> {name}")
        lines.append(f"recon_T{T}.latent_mse={latent_mse(base.iterations[-1].z0, base.iterations[0].z_star):.10g}")
        lines.append(f"recon_T{T}.ssim={base.report.ssim:.10g}")
        if mode == "reconstruct":
            continue
        for S in rc["s_values"]:
            for L in rc["l_values"]:
                cell = f"S{S}_L{L}_T{T}"
                if S > T or L > w.cfg.l_max:
                    lines.append(f"cell_{cell}.skipped=out of range")
                    continue
                cfg = _edit_config(rc, steps=T, s_start=S, l_start=L)
                res = run_visctrl(reference, target, (rc["reference_prompt"], rc["target_prompt"]), mask, cfg, w)
                name = f"cell_{cell}.png"
                out.add_png(name, res.image)
                active = len(active_set(cfg.gate, T, w.cfg.l_max))
                index.append(f"S={S} L={L} T={T} -> {name}")
                lines.append(f"cell_{cell}.active_pairs={active}")
                lines += [f"cell_{cell}.{line}" for line in res.report.lines()[:3]]
    report = _report(lines)
    out.add("index.txt", _report(index))
    out.add("report.txt", report)
    return out, report


def cmd_reconstruct(rc: cf.RunConfig, args) -> tuple[Outputs, str]:
    w = dn.load_weights(rc.path("weights"))
    cfg = _edit_config(rc)
    image = _load_target(rc.path("image"), w)
    res = run_reconstruction(image, rc["prompt"], cfg, w)
    z_in = res.iterations[0].z_star
    report = _report(
        rc.echo() + _weights_lines(w) + _counter_lines(res.counter)
        + [
            f"latent_mse={latent_mse(res.iterations[-1].z0, z_in):.10g}",
            f"ssim={ssim(res.image, image):.10g}",
        ]
    )
    out = Outputs()
    out.add_png("reconstruction.png", res.image)
    out.add("report.txt", report)
    if args.dump_latents:
        out.add("latents.vtsr", tensorfile.encode(_latents(res)))
    return out, report


COMMANDS = {
    "gen-weights": cmd_gen_weights,
    "edit": cmd_edit,
    "edit-seq": cmd_edit_seq,
    "sweep": cmd_sweep,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visctrl", description="Reference-guided latent editing on a toy denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="key = value config file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="frames edited concurrently (edit-seq)")
        p.add_argument("--dump-latents", action="store_true", help="write per-iteration latents")
        p.add_argument("--dump-attn", action="store_true", help="write self-attention maps")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        rc = cf.load(args.config, SCHEMAS[args.command], args.command)
        outputs, report = COMMANDS[args.command](rc, args)
        outputs.commit(args.out)
    except VisCtrlError as exc:
        message = " ".join(str(exc).split())
        print(f"error: code={exc.code} message={message}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, EXIT_INTERNAL)
    sys.stdout.write(report)
    return 0


def main() -> None:
    sys.exit(run())
