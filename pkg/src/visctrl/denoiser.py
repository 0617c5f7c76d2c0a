"""Toy conditional noise predictor plus its patch codec and prompt embedder.

The predictor is a stack of ``l_max`` identical blocks over the latent's
``h*w`` tokens::

    g = sqrt(alpha_bar[t])
    x = tokens @ W_in + g * time_embedding(t) @ W_time
    for each block:
        x = x + g * tanh(x @ W_ff1) @ W_ff2                     # residual feed-forward
        x = x + g * Attention(x Wq, hook(x Wk), hook(x Wv)) Wo  # self-attention
        x = x + g * Attention(x Uq, C Uk, C Uv) Uo              # cross-attention on the prompt
    eps = x @ W_out

Only the self-attention K/V pass through hooks.  The residual gate ``g``
fades every learned branch as noise takes over, as a trained predictor's
content- and prompt-dependence does; at ``t = 0`` it is exactly 1.

Weights are generated from numpy's PCG64 generator seeded with
``DenoiserConfig.seed``, drawn in the fixed order of :func:`weight_names`,
each matrix standard-normal scaled by ``1/sqrt(fan_in)`` and stored as
float32.  Two structural choices keep the DDIM ODE of this untrained model
well conditioned, the way a trained predictor's is:

* ``out_proj`` is the pseudo-inverse of ``in_proj``, so the residual stream
  carries ``z_t`` straight through to the prediction;
* sublayer output projections and ``time_proj`` get an extra gain of
  ``SUBLAYER_GAIN`` / ``TIME_GAIN``.

Without these (and the residual gate) the random predictor's Lipschitz
constant is amplified by the noise-level range and inversion round trips
diverge.

The codec encoder's first (up to) three columns are per-colour patch means;
the rest are seeded random directions orthogonalised against them, and the
decoder is the encoder's pseudo-inverse.  Images whose patches are flat
colours therefore round-trip exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensorfile
from .errors import ConfigError, FormatError, InjectionError, InputError, ShapeError
from .numerics import as_tensor3, attention, from_tokens, matmul, to_tokens
from .scheduler import NoiseSchedule, make_schedule

TIME_MAX_FREQ = 16.0
SUBLAYER_GAIN = 0.1
TIME_GAIN = 0.1
_GAINED = ("ff2", "self_o", "cross_o")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_h: int = 8
    latent_w: int = 8
    latent_c: int = 4
    d: int = 32
    l_max: int = 4
    prompt_dim: int = 32
    timestep_dim: int = 16
    patch: int = 8
    ff_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "seed":
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if self.l_max < 2:
            raise ConfigError("l_max must be >= 2 so the layer gate is exercisable")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def image_h(self) -> int:
        return self.latent_h * self.patch

    @property
    def image_w(self) -> int:
        return self.latent_w * self.patch

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_h, self.latent_w, self.latent_c)


def weight_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, int]]:
    d, c, p = cfg.d, cfg.latent_c, cfg.prompt_dim
    shapes = {
        "in_proj": (c, d),
        "time_proj": (cfg.timestep_dim, d),
    }
    for b in range(cfg.l_max):
        pre = f"block{b}."
        shapes[pre + "ff1"] = (d, cfg.ff_mult * d)
        shapes[pre + "ff2"] = (cfg.ff_mult * d, d)
        for name in ("q", "k", "v", "o"):
            shapes[pre + "self_" + name] = (d, d)
        shapes[pre + "cross_q"] = (d, d)
        shapes[pre + "cross_k"] = (p, d)
        shapes[pre + "cross_v"] = (p, d)
        shapes[pre + "cross_o"] = (d, d)
    shapes["out_proj"] = (d, c)
    ppc = cfg.patch * cfg.patch * 3
    shapes["encoder"] = (ppc, c)
    shapes["decoder"] = (c, ppc)
    return shapes


def weight_names(cfg: DenoiserConfig) -> list[str]:
    return list(weight_shapes(cfg))


CODEC_NAMES = ("encoder", "decoder")


@dataclass(frozen=True, eq=False)
class Weights:
    cfg: DenoiserConfig
    tensors: dict[str, np.ndarray]
    _f64: dict[str, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        shapes = weight_shapes(self.cfg)
        if set(self.tensors) != set(shapes):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise FormatError(f"weight set mismatch: missing {missing}, unexpected {extra}")
        cache = {}
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape or t.dtype != np.float32:
                raise FormatError(f"{name}: expected float32 {shape}, got {t.dtype} {t.shape}")
            if not np.isfinite(t).all():
                raise FormatError(f"{name}: non-finite entries")
            t.setflags(write=False)
            cache[name] = t.astype(np.float64)
        object.__setattr__(self, "_f64", cache)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._f64[name]

    def equal(self, other: "Weights") -> bool:
        """Bitwise equality of every tensor and of the config."""
        return self.cfg == other.cfg and all(
            self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors
        )

    def zero_denoiser(self) -> "Weights":
        """Same codec, all predictor weights zeroed (predicts eps = 0)."""
        tensors = {
            n: (t.copy() if n in CODEC_NAMES else np.zeros_like(t)) for n, t in self.tensors.items()
        }
        return Weights(self.cfg, tensors)


def _codec_matrices(cfg: DenoiserConfig, rng: np.random.Generator):
    p2 = cfg.patch * cfg.patch
    ppc = 3 * p2
    enc = np.zeros((ppc, cfg.latent_c))
    n_mean = min(3, cfg.latent_c)
    # patch vectors are flattened (py, px, channel)
    for ch in range(n_mean):
        enc[ch::3, ch] = 1.0 / p2
    target_norm = 1.0 / cfg.patch
    for j in range(n_mean, cfg.latent_c):
        col = rng.standard_normal(ppc)
        for i in range(j):
            basis = enc[:, i] / np.linalg.norm(enc[:, i])
            col -= (col @ basis) * basis
        enc[:, j] = col * (target_norm / np.linalg.norm(col))
    enc32 = enc.astype(np.float32)
    dec32 = np.linalg.pinv(enc32.astype(np.float64)).astype(np.float32)
    return enc32, dec32


def init_weights(cfg: DenoiserConfig) -> Weights:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        if name in CODEC_NAMES or name == "out_proj":
            continue
        gain = 1.0
        if name.endswith(_GAINED):
            gain = SUBLAYER_GAIN
        elif name == "time_proj":
            gain = TIME_GAIN
        tensors[name] = (rng.standard_normal(shape) * (gain / math.sqrt(shape[0]))).astype(np.float32)
    tensors["out_proj"] = np.linalg.pinv(tensors["in_proj"].astype(np.float64)).astype(np.float32)
    tensors["encoder"], tensors["decoder"] = _codec_matrices(cfg, rng)
    return Weights(cfg, tensors)


# --- prompt conditioning -------------------------------------------------


@dataclass(frozen=True)
class PromptEmbedding:
    text: str
    vectors: np.ndarray  # (tokens, prompt_dim)

    @property
    def tokens(self) -> int:
        return self.vectors.shape[0]


def token_seed(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed_prompt(prompt: str, cfg: DenoiserConfig) -> PromptEmbedding:
    """Whitespace-tokenise; each token gets a hash-seeded normal vector."""
    tokens = prompt.split()
    if not tokens:
        raise InputError("prompt is empty")
    vecs = np.stack(
        [np.random.Generator(np.random.PCG64(token_seed(tok))).standard_normal(cfg.prompt_dim) for tok in tokens]
    )
    vecs.setflags(write=False)
    return PromptEmbedding(prompt, vecs)


def unconditional_embedding(cfg: DenoiserConfig) -> PromptEmbedding:
    """The empty condition: one all-zero token, so cross-attention adds nothing."""
    vecs = np.zeros((1, cfg.prompt_dim))
    vecs.setflags(write=False)
    return PromptEmbedding("", vecs)


# --- codec ----------------------------------------------------------------


def encode_image(img: np.ndarray, w: Weights) -> np.ndarray:
    img = as_tensor3(img, "image")
    p = w.cfg.patch
    H, W, C = img.shape
    if C != 3:
        raise ShapeError(f"expected RGB image, got {C} channels")
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not a multiple of the patch size {p}")
    h, wd = H // p, W // p
    patches = img.reshape(h, p, wd, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * wd, p * p * 3)
    return from_tokens(matmul(patches, w["encoder"]), h, wd)


def decode_latent(z: np.ndarray, w: Weights) -> np.ndarray:
    z = as_tensor3(z, "latent")
    p = w.cfg.patch
    h, wd, c = z.shape
    if c != w.cfg.latent_c:
        raise ShapeError(f"latent has {c} channels, codec expects {w.cfg.latent_c}")
    patches = matmul(to_tokens(z), w["decoder"])
    img = patches.reshape(h, wd, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, wd * p, 3)
    return np.clip(img, 0.0, 1.0)


# --- noise predictor ------------------------------------------------------


_DEFAULT_SCHEDULE: NoiseSchedule | None = None


def default_schedule() -> NoiseSchedule:
    global _DEFAULT_SCHEDULE
    if _DEFAULT_SCHEDULE is None:
        _DEFAULT_SCHEDULE = make_schedule()
    return _DEFAULT_SCHEDULE


def timestep_embedding(t_index: int, t_train: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / t_train`` with geometric frequencies in [1, 16] rad."""
    s = t_index / t_train
    half = dim // 2
    out = np.zeros(dim)
    if half:
        freqs = np.exp(np.linspace(0.0, math.log(TIME_MAX_FREQ), half)) if half > 1 else np.ones(1)
        out[:half] = np.sin(s * freqs)
        out[half : 2 * half] = np.cos(s * freqs)
    return out


def forward(
    z_t: np.ndarray,
    t_index: int,
    c: PromptEmbedding,
    w: Weights,
    hooks=None,
    schedule: NoiseSchedule | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Predict the noise in ``z_t`` at training-grid timestep ``t_index``.

    ``hooks`` (an ``AttentionHooks``) sees every block's self-attention K/V
    exactly once, in block order. ``trace``, if a list, receives one dict of
    intermediates per block.
    """
    cfg = w.cfg
    schedule = schedule or default_schedule()
    t_train = schedule.t_train
    z_t = as_tensor3(z_t, "z_t")
    h, wd, ch = z_t.shape
    if ch != cfg.latent_c:
        raise ShapeError(f"latent has {ch} channels, model expects {cfg.latent_c}")
    if not 0 <= t_index <= t_train:
        raise ShapeError(f"timestep {t_index} outside the training grid [0, {t_train}]")
    if c.vectors.shape[1] != cfg.prompt_dim:
        raise ShapeError(f"prompt vectors have width {c.vectors.shape[1]}, expected {cfg.prompt_dim}")

    d = cfg.d
    g = math.sqrt(schedule[t_index])
    x = matmul(to_tokens(z_t), w["in_proj"])
    x = x + g * matmul(timestep_embedding(t_index, t_train, cfg.timestep_dim)[None, :], w["time_proj"])
    for b in range(cfg.l_max):
        pre = f"block{b}."
        rec = {"input": x} if trace is not None else None

        x = x + g * matmul(np.tanh(matmul(x, w[pre + "ff1"])), w[pre + "ff2"])

        q = matmul(x, w[pre + "self_q"])
        k = matmul(x, w[pre + "self_k"])
        v = matmul(x, w[pre + "self_v"])
        k_used, v_used = (k, v) if hooks is None else hooks.on_self_attention(b, k, v)
        if k_used.shape != k.shape or v_used.shape != v.shape:
            raise InjectionError(
                f"block {b}: hook returned K/V {k_used.shape}/{v_used.shape}, expected {k.shape}/{v.shape}"
            )
        attn_out, attn_map = attention(q, k_used, v_used, d)
        if hooks is not None:
            hooks.on_attention_map(b, attn_map)
        if rec is not None:
            rec.update(self_in=x, q=q, k=k, v=v, k_used=k_used, v_used=v_used,
                       attn_map=attn_map, self_out=attn_out)
        x = x + g * matmul(attn_out, w[pre + "self_o"])

        cq = matmul(x, w[pre + "cross_q"])
        ck = matmul(c.vectors, w[pre + "cross_k"])
        cv = matmul(c.vectors, w[pre + "cross_v"])
        cross_out, _ = attention(cq, ck, cv, d)
        if rec is not None:
            rec.update(cross_in=x, cross_q=cq, cross_k=ck, cross_v=cv, cross_out=cross_out)
        x = x + g * matmul(cross_out, w[pre + "cross_o"])
        if rec is not None:
            rec["output"] = x
            trace.append(rec)
    return from_tokens(matmul(x, w["out_proj"]), h, wd)


# --- persistence ----------------------------------------------------------

_META = "meta"


def _seed_chunks(seed: int) -> list[float]:
    return [float((seed >> (16 * i)) & 0xFFFF) for i in range(4)]


def weights_to_tensors(w: Weights) -> dict[str, np.ndarray]:
    cfg = w.cfg
    meta = [cfg.latent_h, cfg.latent_w, cfg.patch, cfg.ff_mult, *_seed_chunks(cfg.seed)]
    out = {_META: np.array(meta, dtype=np.float32)}
    out.update(w.tensors)
    return out


def weights_from_tensors(tensors: dict[str, np.ndarray]) -> Weights:
    try:
        meta = tensors[_META]
        lh, lw, patch, ff_mult = (int(x) for x in meta[:4])
        seed = sum(int(x) << (16 * i) for i, x in enumerate(meta[4:8]))
        in_proj = tensors["in_proj"]
        blocks = sum(1 for n in tensors if n.endswith(".ff1"))
        cfg = DenoiserConfig(
            latent_h=lh,
            latent_w=lw,
            latent_c=in_proj.shape[0],
            d=in_proj.shape[1],
            l_max=blocks,
            prompt_dim=tensors["block0.cross_k"].shape[0],
            timestep_dim=tensors["time_proj"].shape[0],
            patch=patch,
            ff_mult=ff_mult,
            seed=seed,
        )
    except (KeyError, IndexError, ValueError, ConfigError) as exc:
        raise FormatError(f"not a weights file: {exc}") from exc
    return Weights(cfg, {n: t for n, t in tensors.items() if n != _META})


def save_weights(w: Weights, path) -> None:
    tensorfile.save(path, weights_to_tensors(w))


def load_weights(path) -> Weights:
    return weights_from_tensors(tensorfile.load(path))


def content_hash(w: Weights) -> str:
    return hashlib.sha256(tensorfile.encode(weights_to_tensors(w))).hexdigest()
