"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``-s``) and the same lines are repeated in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from visctrl import cli
from visctrl import config as cf
from visctrl import denoiser as dn
from visctrl import imageio as io
from visctrl import tensorfile
from visctrl.attn_control import AttentionHooks, EditGate, KVStore, active_set, attention_map_files
from visctrl.demo import write_demo
from visctrl.editing import EditConfig, Editor, Mask, budget, run_reconstruction, run_visctrl
from visctrl.fgs import FrameSequence, ReferenceSet, run_multiview
from visctrl.metrics import bg_error, ssim
from visctrl.numerics import attention

from conftest import TINY, random_image, random_latent
from test_formats import GOLDEN, SCHEMA
from test_metrics import gradient_pair, ssim_oracle
from test_numerics import attention_oracle

RESULTS: dict[int, str] = {}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


EDIT_CFG = ("weights = weights.vtsr\nreference = reference.png\ntarget = target.png\nmask = mask.png\n"
            "reference_prompt = a red striped ball\ntarget_prompt = a blue ball\n")


@pytest.fixture
def demo(tmp_path, demo_weights):
    write_demo(tmp_path)
    (tmp_path / "weights.vtsr").write_bytes(demo_weights.read_bytes())
    return tmp_path


def _edit(root, out, extra="", flags=()):
    path = root / f"{out}.cfg"
    path.write_text(EDIT_CFG + extra)
    code = cli.run(["edit", "--config", str(path), "--out", str(root / out), *flags])
    assert code == 0
    return root / out


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_1_zero_denoiser_round_trip(weights):
    zw = weights.zero_denoiser()
    z0 = np.random.default_rng(0).standard_normal(weights.cfg.latent_shape)
    worst_mse, worst_time = 0.0, 0.0
    for T in (1, 5, 50):
        ed = Editor(zw)
        start = time.perf_counter()
        z = ed.reconstruct(z0, ed.embed("anything"), EditConfig(), steps=T)
        worst_time = max(worst_time, time.perf_counter() - start)
        worst_mse = max(worst_mse, float(np.mean((z - z0) ** 2)))
    verdict(1, "analytic DDIM invertibility", worst_mse < 1e-6 and worst_time < 1.0,
            f"max latent MSE {worst_mse:.3g} < 1e-6, max runtime {worst_time:.3f}s < 1s, T in 1/5/50")


def test_criterion_2_step_refinement():
    rows = []
    ok = True
    for seed in (0, 1, 2):
        w = dn.init_weights(dn.DenoiserConfig(seed=seed))
        z0 = np.random.default_rng(100 + seed).standard_normal(w.cfg.latent_shape)
        for cfg in (EditConfig(), EditConfig(omega=1.0, invert_condition="conditional")):
            ed = Editor(w)
            c = ed.embed("a photo of a red ball")
            mse = [float(np.mean((ed.reconstruct(z0, c, cfg, steps=T) - z0) ** 2)) for T in (5, 20, 50)]
            ok &= mse[2] < mse[1] < mse[0]
            rows.append("/".join(f"{m:.3g}" for m in mse))
    verdict(2, "step refinement MSE(50) < MSE(20) < MSE(5)", ok, "seeds 0-2, two guidance settings: " + "; ".join(rows))


def test_criterion_3_gate_identities(weights):
    cfgw = weights.cfg
    rng = np.random.default_rng(3)
    ref = rng.integers(0, 256, (cfgw.image_h, cfgw.image_w, 3)) / 255.0
    tgt = rng.integers(0, 256, (cfgw.image_h, cfgw.image_w, 3)) / 255.0
    pm = np.zeros((cfgw.image_h, cfgw.image_w), bool)
    pm[16:48, 8:40] = True
    mask = Mask.from_pixels(pm, cfgw.patch)

    vac = EditConfig(s_start=5, l_start=cfgw.l_max)
    edit = run_visctrl(ref, tgt, ("ref", "tgt"), mask, vac, weights)
    plain = run_reconstruction(tgt, "tgt", vac, weights, mask=mask)
    vacuous_ok = np.array_equal(edit.image, plain.image) and all(
        np.array_equal(a.z0, b.z0) for a, b in zip(edit.iterations, plain.iterations))

    full = EditConfig(s_start=0, l_start=0, iterations=1)
    self_edit = run_visctrl(tgt, tgt, ("same", "same"), mask, full, weights)
    self_plain = run_reconstruction(tgt, "same", full, weights, mask=mask)
    self_ok = np.array_equal(self_edit.iterations[0].z0, self_plain.iterations[0].z0)

    T, l_max = 5, 4
    gates = list(itertools.product(range(T + 1), range(l_max + 1)))
    sets = {g: active_set(EditGate(*g), T, l_max) for g in gates}
    mono_ok = all(sets[a] <= sets[b] for a, b in itertools.product(gates, gates) if b[0] <= a[0] and b[1] <= a[1])
    verdict(3, "gate identities", vacuous_ok and self_ok and mono_ok,
            f"vacuous gate bit-identical={vacuous_ok}, self-injection bit-identical={self_ok}, "
            f"monotone over {len(gates)}^2 gate pairs={mono_ok}")


def test_criterion_4_eq4_literal(demo):
    out = _edit(demo, "c4", flags=["--dump-latents"])
    lat = tensorfile.load(out / "latents.vtsr")
    n_iter = max(int(k.split(".")[0][4:]) for k in lat)
    ok = n_iter == 5 and all(
        lat[f"iter{n + 1}.z_star"].tobytes() == lat[f"iter{n}.z0"].tobytes() for n in range(1, n_iter))
    verdict(4, "Z*(n+1) equals Z0(n) bitwise", ok, f"{n_iter} iterations dumped")


def test_criterion_5_fgs_law(tiny_weights):
    pm = np.zeros((TINY.image_h, TINY.image_w), bool)
    pm[1:7, 2:6] = True
    mask = Mask.from_pixels(pm, TINY.patch)
    ref, tgt = random_image(TINY, 1), random_image(TINY, 2)
    worst = 0.0
    endpoints = True
    for alpha in (0.0, 0.3, 0.7, 1.0):
        cfg = EditConfig(steps=3, iterations=5, s_start=0, l_start=1, alpha=alpha)
        mv = run_multiview(FrameSequence((tgt,), (mask,), "t"), ReferenceSet((ref,), ("r",)), cfg, tiny_weights)
        its = mv.frames[0].iterations
        for prev, nxt in zip(its, its[1:]):
            step = np.linalg.norm(nxt.z_T - prev.z_T)
            target = alpha * np.linalg.norm(nxt.inverted - prev.z_T)
            if target > 0:
                worst = max(worst, abs(step - target) / target)
            else:
                worst = max(worst, step)
            if alpha == 0.0:
                endpoints &= np.array_equal(nxt.z_T, prev.z_T)
            if alpha == 1.0:
                endpoints &= np.array_equal(nxt.z_T, nxt.inverted)
        if alpha == 1.0:
            plain = run_visctrl(ref, tgt, ("r", "t"), mask, cfg, tiny_weights)
            collapse = io.png_bytes(io.quantize(plain.image)) == io.png_bytes(io.quantize(mv.frames[0].image))
            collapse &= np.array_equal(plain.image, mv.frames[0].image)
    ok = worst < 1e-6 and endpoints and collapse
    verdict(5, "FGS step-norm law", ok,
            f"max relative deviation {worst:.2g}, endpoints bit-exact={endpoints}, alpha=1 equals plain run={collapse}")


def test_criterion_6_attention(tiny_weights):
    rng = np.random.default_rng(6)
    worst, hull, perm = 0.0, True, True
    for _ in range(100):
        n, m, d, dv = (int(x) for x in rng.integers(1, 9, size=4))
        q, k, v = (rng.standard_normal(s) * 2 for s in ((n, d), (m, d), (m, dv)))
        out, amap = attention(q, k, v, d)
        ref_out, ref_map = attention_oracle(q.tolist(), k.tolist(), v.tolist(), d)
        worst = max(worst, float(np.abs(out - ref_out).max()), float(np.abs(amap - ref_map).max()))
        hull &= bool((out >= v.min(axis=0) - 1e-12).all() and (out <= v.max(axis=0) + 1e-12).all())
        p = rng.permutation(m)
        perm &= bool(np.allclose(attention(q, k[p], v[p], d)[0], out, rtol=0, atol=1e-12))

    store = KVStore()
    c = dn.embed_prompt("x", TINY)
    dn.forward(random_latent(TINY, 0), 300, c, tiny_weights, hooks=AttentionHooks(mode="capture", store=store, step=1))
    hooks = AttentionHooks(mode="inject", gate=EditGate(0, 0), store=store.freeze(), step=1, record_maps=True)
    dn.forward(random_latent(TINY, 1), 300, c, tiny_weights, hooks=hooks)
    raw = tensorfile.decode(attention_map_files(hooks.maps)["attn_maps.vtsr"])
    row_dev = max(float(np.abs(a.astype(np.float64).sum(axis=1) - 1).max()) for a in raw.values())
    ok = worst < 1e-9 and hull and perm and row_dev < 1e-6
    verdict(6, "attention correctness", ok,
            f"100 shapes, max oracle gap {worst:.2g}, convex hull={hull}, permutation invariant={perm}, "
            f"dumped row-sum deviation {row_dev:.2g}")


def test_criterion_7_background(demo):
    ok = True
    worst = 0.0
    for extra in ("", "s_start = 0\nl_start = 0\n", "s_start = 5\nl_start = 4\n", "latent_blend = true\n"):
        out = _edit(demo, f"c7_{len(extra)}", extra)
        edited = io.quantize(io.read_rgb(out / "edited.png"))
        src = io.quantize(io.read_rgb(demo / "target.png"))
        m = io.read_mask(demo / "mask.png")
        ok &= np.array_equal(edited[~m], src[~m])
        worst = max(worst, bg_error(io.dequantize(edited), io.dequantize(src), m))
    verdict(7, "background bitwise preserved", ok and worst == 0.0, f"4 gate settings, max BG-MAD {worst}")


def test_criterion_8_determinism_and_cache(demo):
    a = _files(_edit(demo, "c8a", flags=["--dump-latents"]))
    b = _files(_edit(demo, "c8b", flags=["--dump-latents"]))
    c = _files(_edit(demo, "c8c", "recompute_reference = true\n", flags=["--dump-latents"]))
    same = a == b
    cache = a["edited.png"] == c["edited.png"] and a["latents.vtsr"] == c["latents.vtsr"]
    verdict(8, "determinism and KV-cache soundness", same and cache,
            f"repeat run byte-identical={same}, cached vs recomputed byte-identical={cache}")


def test_criterion_9_budget(demo):
    start = time.perf_counter()
    out = _edit(demo, "c9")
    elapsed = time.perf_counter() - start
    rep = dict(line.split("=", 1) for line in (out / "report.txt").read_text().splitlines())
    cfg = EditConfig()
    T, N = cfg.steps, cfg.iterations
    b = budget(cfg)
    counts_ok = (
        int(rep["calls.cond"]) + int(rep["calls.uncond"]) == 2 * T * (N + 1)
        and int(rep["calls.capture"]) == T
        and int(rep["calls.invert"]) == T * (N + 1)
        and int(rep["calls.total"]) == b.total
    )
    shape_ok = rep["weights.latent_h"] == "8" and rep["weights.d"] == "32" and rep["weights.l_max"] == "4"
    ok = elapsed < 10.0 and counts_ok and shape_ok
    verdict(9, "desk-scale budget", ok,
            f"{elapsed:.2f}s < 10s, calls cond+uncond={int(rep['calls.cond']) + int(rep['calls.uncond'])} "
            f"capture={rep['calls.capture']} invert={rep['calls.invert']} total={rep['calls.total']}")


def test_criterion_10_ssim_and_formats(tmp_path):
    a, b = gradient_pair()
    self_gap = abs(ssim(a, a) - 1.0)
    oracle_gap = abs(ssim(a, b) - ssim_oracle(a, b))

    vtsr_ok = tensorfile.encode(tensorfile.decode(GOLDEN)) == GOLDEN

    arr = np.random.default_rng(10).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    io.write_rgb(tmp_path / "x.png", io.dequantize(arr))
    io.write_rgb(tmp_path / "y.png", io.read_rgb(tmp_path / "x.png"))
    png_ok = np.array_equal(io.quantize(io.read_rgb(tmp_path / "y.png")), arr) and \
        (tmp_path / "x.png").read_bytes() == (tmp_path / "y.png").read_bytes()

    text = "count = 3\nfirst = 4\nflag = true\nname = x # y\nprompts = p | q r\nratio = 0.25\nsteps = 5,20\n"
    cfg_ok = cf.dump(cf.parse_text(text, SCHEMA, "t", tmp_path).values, SCHEMA) == text

    ok = self_gap < 1e-9 and oracle_gap < 1e-9 and vtsr_ok and png_ok and cfg_ok
    verdict(10, "SSIM oracle and format round trips", ok,
            f"|ssim(x,x)-1|={self_gap:.2g}, oracle gap {oracle_gap:.2g}, VTSR={vtsr_ok}, PNG={png_ok}, config={cfg_ok}")
