"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line in the terminal summary."""
import csv
import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from wanseg import checkpoint
from wanseg.benchmark import ADAPT_MODES, BenchmarkConfig, run
from wanseg.cli import main
from wanseg.core import (
    EPS, Tensor, avg_pool2d, bce, concat_channels, conv2d, dense, global_avg_pool, grad_check, leaky_relu,
    max_pool2d, no_grad, relu, resize_bilinear, sigmoid, upsample_nearest,
)
from wanseg.data.raster import RasterTile, tile_potsdam, tile_standard
from wanseg.data.synth import SOURCE_DEFAULT, TARGET_DEFAULT, generate_split, to_patchset
from wanseg.engine import AdaptConfig, adapt, new_generator, train_source
from wanseg.losses import LossWeights, adv_loss, combined_loss, disc_loss, seg_loss, weak_label_loss
from wanseg.metrics import ConfusionCounts, confusion, f1_fraction, iou_fraction
from wanseg.models import LATENT_SPACE, OUTPUT_SPACE, DetectionHead, Discriminator, UNetGenerator


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


# --- 1. gradient suite --------------------------------------------------------

def _gradient_cases():
    rng = np.random.default_rng(11)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale)

    def p(y):
        # fixed random projection so every output entry reaches the scalar
        return (y * Tensor(np.random.default_rng(y.size).normal(size=y.shape))).sum()

    cases = []
    cases.append(("conv2d same", lambda x, k, b: p(conv2d(x, k, b)), [t(2, 3, 16, 16), t(4, 3, 3, 3, scale=0.3), t(4)]))
    cases.append(("conv2d stride 2", lambda x, k: p(conv2d(x, k, stride=2)), [t(2, 3, 16, 16), t(4, 3, 4, 4, scale=0.3)]))
    cases.append(("conv2d valid", lambda x, k: p(conv2d(x, k, padding="valid")), [t(1, 3, 16, 16), t(2, 3, 3, 3)]))
    distinct = Tensor(rng.permutation(2 * 3 * 16 * 16).reshape(2, 3, 16, 16) / 100.0)
    cases.append(("max_pool2d", lambda x: p(max_pool2d(x)), [distinct]))
    cases.append(("avg_pool2d", lambda x: p(avg_pool2d(x, 2)), [t(2, 3, 16, 16)]))
    cases.append(("global_avg_pool", lambda x: p(global_avg_pool(x)), [t(2, 3, 16, 16)]))
    cases.append(("resize_bilinear x2", lambda x: p(resize_bilinear(x, 2)), [t(1, 3, 8, 8)]))
    cases.append(("resize_bilinear x1/2", lambda x: p(resize_bilinear(x, 0.5)), [t(2, 3, 16, 16)]))
    cases.append(("upsample_nearest", lambda x: p(upsample_nearest(x, 2)), [t(1, 3, 8, 8)]))
    cases.append(("concat_channels", lambda a, b: p(concat_channels(a, b)), [t(2, 3, 8, 8), t(2, 2, 8, 8)]))
    cases.append(("dense", lambda x, w, b: p(dense(x, w, b)), [t(4, 5), t(5, 6), t(6)]))
    cases.append(("relu", lambda x: p(relu(x)), [t(2, 3, 16, 16)]))
    cases.append(("leaky_relu", lambda x: p(leaky_relu(x, 0.2)), [t(2, 3, 16, 16)]))
    cases.append(("sigmoid", lambda x: p(sigmoid(x)), [t(2, 3, 16, 16)]))
    labels = rng.uniform(size=(2, 1, 16, 16))
    cases.append(("bce", lambda q: bce(q, labels), [Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 16, 16)))]))
    cases.append(("add/sub/mul/div/reshape/mean", lambda a, b: p((a * b - a + b / 2.0).reshape(2, 3, 4, 4)) + a.mean(),
                  [t(2, 48), t(2, 48)]))

    # full objectives through small networks
    g = UNetGenerator(rng, base_width=1, dtype=np.float64)
    os_d = Discriminator(rng, OUTPUT_SPACE, width_factor=1 / 32, dtype=np.float64)
    lt_d = Discriminator(rng, LATENT_SPACE, in_channels=g.latent_channels, width_factor=1 / 32, dtype=np.float64)
    head = DetectionHead(rng, g.latent_channels, g.widths[0], width_factor=1 / 32, dtype=np.float64)
    xs = Tensor(rng.uniform(size=(2, 3, 16, 16)))
    xt = Tensor(rng.uniform(size=(2, 3, 16, 16)))
    mask = (rng.random((2, 1, 16, 16)) < 0.3).astype(float)
    weak = np.array([[1.0], [0.0]])
    # image gradients are covered by the op checks above; here the losses are checked
    # through the network parameters, plus one single-image pass to the input
    k_enc, k_dec, k_head = (g.params[n] for n in ("enc0.conv1.weight", "dec0.conv2.weight", "head.weight"))
    x1 = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    cases.append(("seg_loss", lambda x, k, h: seg_loss(g(x)[1], mask[:1]), [x1, k_enc, k_head]))
    cases.append(("disc_loss", lambda d, h: disc_loss(os_d(g(xs)[1]), os_d(g(xt)[1])),
                  [os_d.params["conv0.weight"], k_head]))
    cases.append(("adv_loss", lambda k, d: adv_loss(lt_d(g(xt)[0])), [k_enc, lt_d.params["conv4.weight"]]))
    cases.append(("weak_label_loss", lambda k, w: weak_label_loss(head(*g(xt)[::2]), weak),
                  [k_enc, head.params["conv0.weight"]]))

    def combined(k, j, h):
        _, seg_s, _ = g(xs)
        lat_t, seg_t, dec_t = g(xt)
        return combined_loss(seg_loss(seg_s, mask), weak_label_loss(head(lat_t, dec_t), weak),
                             adv_loss(os_d(seg_t)), LossWeights(0.1, 0.1))

    cases.append(("combined_loss", combined, [k_enc, k_dec, k_head]))
    return cases


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    errors = {name: grad_check(f, inputs) for name, f, inputs in _gradient_cases()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 120
    record("1 gradient suite", ok,
           f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {elapsed:.1f} s (< 120 s)")


# --- 2. loss oracles ----------------------------------------------------------

def _loop_bce(preds, labels):
    total = 0.0
    flat_p, flat_y = np.ravel(preds).tolist(), np.ravel(labels).tolist()
    for p, y in zip(flat_p, flat_y):
        p = min(max(p, EPS), 1 - EPS)
        total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total / len(flat_p)


def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(20):
        s, t_ = rng.uniform(size=(2, 1, 8, 8)), rng.uniform(size=(2, 1, 8, 8))
        m = rng.integers(0, 2, size=(2, 1, 8, 8))
        w = rng.uniform(size=(5, 1))
        y = rng.integers(0, 2, size=(5, 1))
        pairs = [
            (seg_loss(Tensor(s), m).item(), _loop_bce(s, m)),
            (disc_loss(Tensor(s), Tensor(t_)).item(), _loop_bce(s, np.ones(s.size)) + _loop_bce(t_, np.zeros(t_.size))),
            (adv_loss(Tensor(t_)).item(), _loop_bce(t_, np.ones(t_.size))),
            (weak_label_loss(Tensor(w), y).item(), _loop_bce(w, y)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    record("2 loss oracles", worst <= 1e-10, f"4 losses x 20 cases, max |diff| {worst:.1e} (<= 1e-10)")


# --- 3. shape contracts -------------------------------------------------------

def test_criterion_3_shapes():
    rng = np.random.default_rng(33)
    g = UNetGenerator(rng)
    with no_grad():
        latent, seg, _ = g(Tensor(np.zeros((1, 3, 256, 256), np.float32)))
        os_map = Discriminator(rng, OUTPUT_SPACE).score_map(seg)
        lt_map = Discriminator(rng, LATENT_SPACE).score_map(latent)
    got = (latent.shape[1:], seg.shape[1:], os_map.shape[2:], lt_map.shape[2:])
    want = ((512, 16, 16), (1, 256, 256), (8, 8), (16, 16))
    record("3 shape contracts", got == want, f"latent/seg/OS-D/LT-D = {got}")


# --- 4. degenerate weights ----------------------------------------------------

def test_criterion_4_degenerate_weights():
    size = 32
    src = to_patchset(generate_split(dataclasses.replace(SOURCE_DEFAULT, size=size), "train", 16))
    tgt = to_patchset(generate_split(dataclasses.replace(TARGET_DEFAULT, size=size), "train", 16)).without_masks()
    base = dict(base_width=2, aux_width_factor=0.0625, batch_size=4, seed=5)
    start = train_source(AdaptConfig(max_steps=3, **base), src)[0].state_dict()
    identical = True
    for steps in (1, 3, 6):
        ref = new_generator(AdaptConfig(**base))
        ref.load_state_dict(start)
        ref, _ = train_source(AdaptConfig(max_steps=steps, **base), src, ref)
        for mode in ADAPT_MODES:
            g = new_generator(AdaptConfig(**base))
            g.load_state_dict(start)
            cfg = AdaptConfig(mode=mode, max_steps=steps, lambda_adv=0.0, alpha_hd=0.0, **base)
            out = adapt(cfg, g, src, tgt).generator
            identical &= all(np.array_equal(out.params[k].data, ref.params[k].data) for k in ref.params)
    record("4 degenerate weights", identical,
           "adapt(lambda_adv=0, alpha_hd=0) == train_source bit for bit after 1, 3, 6 steps, all four modes")


# --- 5. synthetic benchmark ---------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    result = run(BenchmarkConfig(), log=print)
    print(result.table())
    return result


def test_criterion_5_budget(bench):
    cfg = BenchmarkConfig()
    ok = bench.seconds < 20 * 60 and cfg.total_steps() <= 2000 and cfg.train_count == 200
    record("5 budget", ok, f"{len(bench.seeds)} seeds in {bench.seconds / 60:.1f} min (< 20), "
                           f"{cfg.total_steps()} steps per chain (<= 2000), 64x64 patches")


def test_criterion_5a_domain_gap(bench):
    src, tgt = bench.median_source("baseline"), bench.median_target("baseline")
    record("5a domain gap", src >= 0.80 and src - tgt >= 0.15,
           f"baseline source IoU {src:.3f} (>= 0.80), target {tgt:.3f}, gap {src - tgt:.3f} (>= 0.15)")


def test_criterion_5b_adaptation_gains(bench):
    gains = {m: bench.median_gain(m) for m in ADAPT_MODES}
    record("5b adaptation gains", min(gains.values()) >= 0.05,
           ", ".join(f"{m} {g:+.3f}" for m, g in gains.items()) + " (each >= +0.05)")


def test_criterion_5c_weak_supervision(bench):
    parts, ok = [], True
    for wan, plain in (("os_wan", "osa"), ("lt_wan", "lta")):
        wins = bench.ordering_wins(wan, plain)
        med_ok = bench.median_target(wan) >= bench.median_target(plain)
        ok &= wins >= len(bench.seeds) - 1 and med_ok
        parts.append(f"{wan} {bench.median_target(wan):.3f} vs {plain} {bench.median_target(plain):.3f} "
                     f"({wins}/{len(bench.seeds)} seeds)")
    record("5c weak supervision", ok, "; ".join(parts))


def test_criterion_5d_retention(bench):
    ft = bench.median_drop("finetune")
    drops = {m: bench.median_drop(m) for m in ("os_wan", "lt_wan")}
    ok = all(d <= 0.10 and d < ft for d in drops.values())
    record("5d retention", ok, ", ".join(f"{m} drop {d:+.3f}" for m, d in drops.items())
           + f" (<= 0.10 and < finetune {ft:+.3f})")


def test_criterion_5e_upper_bound(bench):
    ft = bench.median_target("finetune")
    best = max(ADAPT_MODES, key=bench.median_target)
    record("5e upper bound", ft >= bench.median_target(best),
           f"finetune {ft:.3f} >= best adaptation {best} {bench.median_target(best):.3f}")


# --- 6. tiling ----------------------------------------------------------------

def test_criterion_6_tiling():
    rng = np.random.default_rng(66)
    small = RasterTile(rng.integers(0, 256, size=(1500, 1500, 3), dtype=np.uint8), tile_id="s")
    big = RasterTile(np.zeros((6000, 6000, 3), np.uint8), tile_id="p")
    std, pots = tile_standard(small), tile_potsdam(big)
    exact = True
    for patches, crop, tile_size in ((std, 500, 1500), (pots, 1500, 6000)):
        cover = np.zeros((tile_size // crop,) * 2, int)
        for p in patches:
            cover[p.crop_offset[0] // crop, p.crop_offset[1] // crop] += 1
        exact &= bool(np.all(cover == 4))
        for key in {p.crop_offset for p in patches}:
            quads = sorted(p.patch_offset for p in patches if p.crop_offset == key)
            exact &= quads == [(0, 0), (0, 256), (256, 0), (256, 256)]
    record("6 tiling", len(std) == 36 and len(pots) == 64 and exact,
           f"1500^2 -> {len(std)} patches (36), 6000^2 -> {len(pots)} (64), offsets partition exactly: {exact}")


# --- 7. metrics ---------------------------------------------------------------

def test_criterion_7_metric_identities():
    rng = np.random.default_rng(77)
    identity = all(
        f1_fraction(c) == 2 * iou_fraction(c) / (1 + iou_fraction(c))
        for c in (ConfusionCounts(*map(int, rng.integers(0, 10**6, size=4))) for _ in range(1000)))
    a = confusion(np.array([0.9, 0.2, 0.7]), np.array([1, 0, 0]))
    b = confusion(np.array([0.1, 0.6]), np.array([1, 1]))
    pooled = iou_fraction(a + b)
    hand = iou_fraction(ConfusionCounts(tp=1 + 1, fp=1 + 0, fn=0 + 1, tn=1 + 0))
    record("7 metric identities", identity and pooled == hand,
           f"f1 = 2 iou/(1+iou) exact on 1000 counts: {identity}; pooled IoU {pooled} == hand {hand}")


# --- 8. determinism -----------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    a = generate_split(TARGET_DEFAULT, "train", 8)
    b = generate_split(TARGET_DEFAULT, "train", 8)
    data_same = all(x.tobytes() == y.tobytes() and m.tobytes() == n.tobytes() for (x, m), (y, n) in zip(a, b))
    src = to_patchset(generate_split(SOURCE_DEFAULT, "train", 16))
    cfg = AdaptConfig(base_width=4, max_steps=10, batch_size=4, seed=8)
    trace_a = train_source(cfg, src)[1].trace()
    g, trace_b = train_source(cfg, src)
    traces_same = trace_a == trace_b.trace()
    checkpoint.save(tmp_path / "a.wck", g.state_dict())
    checkpoint.save(tmp_path / "b.wck", checkpoint.load(tmp_path / "a.wck"))
    ckpt_same = (tmp_path / "a.wck").read_bytes() == (tmp_path / "b.wck").read_bytes()
    record("8 determinism", data_same and traces_same and ckpt_same,
           f"data bit-identical {data_same}, 10-step traces identical {traces_same}, "
           f"checkpoint round trip byte-identical {ckpt_same}")


# --- 9. CLI end to end --------------------------------------------------------

def test_criterion_9_cli(tmp_path):
    codes = []
    codes.append(main(["synth", "--out", str(tmp_path / "data"), "--seed", "0", "--counts", "16,8,8"]))
    common = (f"base_width=2\naux_width_factor=0.0625\nbatch_size=4\nmax_steps=3\nseed=0\n"
              f"source_manifest={tmp_path}/data/source/manifest.csv\n"
              f"target_manifest={tmp_path}/data/target/manifest.csv\n")
    (tmp_path / "train.cfg").write_text("mode=source_only\n" + common)
    codes.append(main(["train", "--config", str(tmp_path / "train.cfg"), "--out", str(tmp_path / "runs/baseline")]))
    ckpts = {"baseline": tmp_path / "runs/baseline/checkpoint.wck"}
    for mode in ("lt_wan", "os_wan", "lta", "osa"):
        (tmp_path / f"{mode}.cfg").write_text(f"mode={mode}\n" + common)
        codes.append(main(["adapt", "--config", str(tmp_path / f"{mode}.cfg"), "--init", str(ckpts["baseline"]),
                           "--out", str(tmp_path / f"runs/{mode}")]))
        ckpts[mode] = tmp_path / f"runs/{mode}/checkpoint.wck"
    for name, ckpt in ckpts.items():
        for domain, split in (("target", "test"), ("source", "val")):
            codes.append(main(["eval", "--checkpoint", str(ckpt), "--split", split,
                               "--manifest", str(tmp_path / f"data/{domain}/manifest.csv"),
                               "--out", str(tmp_path / f"runs/{name}/report.csv")]))
    codes.append(main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "table.md")]))
    table = (tmp_path / "table.md").read_text()
    rows = [line.split("|")[2].strip() for line in table.splitlines() if line.startswith("| source → target")]
    want = ["baseline", "osa", "lta", "os_wan", "lt_wan"]
    record("9 CLI end to end", set(codes) == {0} and rows == want,
           f"{len(codes)} commands, exit codes {sorted(set(codes))}, table rows {rows}")
