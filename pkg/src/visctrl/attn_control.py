"""Self-attention K/V capture and injection.

Conventions used throughout the engine:

* denoising step ``t`` is the position on the inference grid, counted on the
  descending trajectory: the step that leaves grid point ``i`` has ``t = i``,
  so a T-step run visits ``t = T, T-1, ..., 1``;
* the denoiser hands hooks a 0-based block index ``layer`` in
  ``0..l_max-1``; the gate compares the 1-based layer number ``layer + 1``
  against ``L``.

With these, ``S = 0, L = 0`` injects everywhere and ``S = T, L = l_max``
injects nowhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConfigError, InjectionError, IOFailure

CAPTURE = "capture"
INJECT = "inject"
OFF = "off"


@dataclass(frozen=True)
class EditGate:
    s_start: int
    l_start: int

    def validate(self, steps: int, l_max: int) -> None:
        if not 0 <= self.s_start <= steps:
            raise ConfigError(f"S={self.s_start} outside [0, {steps}]")
        if not 0 <= self.l_start <= l_max:
            raise ConfigError(f"L={self.l_start} outside [0, {l_max}]")


def gate_active(gate: EditGate, t: int, l: int) -> bool:
    """Inject iff ``t > S and l > L`` (``l`` is the 1-based layer number)."""
    return t > gate.s_start and l > gate.l_start


def active_set(gate: EditGate, steps: int, l_max: int) -> set[tuple[int, int]]:
    return {
        (t, l)
        for t in range(1, steps + 1)
        for l in range(1, l_max + 1)
        if gate_active(gate, t, l)
    }


class KVStore:
    """Write-once map ``(t, layer) -> (K, V)`` of reference features."""

    def __init__(self):
        self._entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._frozen = False

    def put(self, t: int, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self._frozen:
            raise InjectionError("KV store is read-only")
        key = (t, layer)
        if key in self._entries:
            raise InjectionError(f"KV store already holds an entry for step {t}, layer {layer}")
        if k.shape[0] != v.shape[0]:
            raise InjectionError(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
        k = k.copy()
        v = v.copy()
        k.setflags(write=False)
        v.setflags(write=False)
        self._entries[key] = (k, v)

    def get(self, t: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._entries[(t, layer)]
        except KeyError:
            raise InjectionError(
                f"no reference K/V for step {t}, layer {layer}; "
                "reference and target step grids disagree"
            ) from None

    def freeze(self) -> "KVStore":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def keys(self):
        return sorted(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries


@dataclass
class AttentionHooks:
    """Per-run hook state handed to ``denoiser.forward``.

    Not thread-safe; each branch run gets its own instance.
    """

    mode: str = OFF
    gate: EditGate | None = None
    store: KVStore | None = None
    step: int = 0
    iteration: int = 0
    record_maps: bool = False
    maps: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (CAPTURE, INJECT, OFF):
            raise ConfigError(f"unknown hook mode {self.mode!r}")
        if self.mode != OFF and self.store is None:
            raise ConfigError(f"hook mode {self.mode!r} needs a KV store")
        if self.mode == INJECT and self.gate is None:
            raise ConfigError("inject mode needs an edit gate")

    def on_self_attention(self, layer: int, k: np.ndarray, v: np.ndarray):
        if self.mode == CAPTURE:
            self.store.put(self.step, layer, k, v)
            return k, v
        if self.mode == INJECT and gate_active(self.gate, self.step, layer + 1):
            k_s, v_s = self.store.get(self.step, layer)
            if k_s.shape != k.shape or v_s.shape != v.shape:
                raise InjectionError(
                    f"step {self.step}, layer {layer}: reference K/V {k_s.shape}/{v_s.shape} "
                    f"do not match target {k.shape}/{v.shape}"
                )
            return k_s, v_s
        return k, v

    def on_attention_map(self, layer: int, attn_map: np.ndarray) -> None:
        if self.record_maps:
            self.maps[(self.iteration, self.step, layer)] = attn_map.copy()


def map_to_gray(attn_map: np.ndarray) -> np.ndarray:
    """Scale by the map's max into 8-bit gray."""
    peak = attn_map.max()
    scaled = attn_map / peak if peak > 0 else np.zeros_like(attn_map)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def map_name(iteration: int, t: int, layer: int) -> str:
    return f"iter{iteration}_t{t}_l{layer}"


def attention_map_files(maps: dict) -> dict[str, bytes]:
    """Encode recorded maps: one gray PNG each, ``index.txt`` and raw ``attn_maps.vtsr``."""
    from .imageio import png_bytes

    files = {}
    index_lines = []
    raw = {}
    for key in sorted(maps):
        name = map_name(*key)
        files[f"{name}.png"] = png_bytes(map_to_gray(maps[key]))
        raw[name] = maps[key]
        index_lines.append(f"{name} -> {name}.png")
    files["attn_maps.vtsr"] = tensorfile.encode(raw)
    files["index.txt"] = ("\n".join(index_lines) + "\n").encode()
    return files


def dump_attention_maps(hooks: AttentionHooks, sink) -> list[Path]:
    """Write the hooks' recorded maps into directory ``sink``."""
    if not hooks.record_maps:
        raise ConfigError("attention-map recording was not enabled on these hooks")
    sink = Path(sink)
    try:
        sink.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {sink}: {exc}") from exc
    written = []
    for name, data in attention_map_files(hooks.maps).items():
        tensorfile.atomic_write_bytes(sink / name, data)
        written.append(sink / name)
    return written
