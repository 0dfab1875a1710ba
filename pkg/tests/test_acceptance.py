"""Acceptance criteria 1-8, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the terminal summary under "acceptance criteria".
"""

import csv
import math
import time
import zlib
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from gradcases import kink_free_params, record_preactivations
from microsr import trainer as trainer_mod
from microsr.checkpoint import load_checkpoint, save_checkpoint
from microsr.cli import main as cli_main
from microsr.data import (
    ImagePair,
    apply_transform,
    augment,
    draw_outcome,
    extract_patches,
    generate_synthetic_dataset,
)
from microsr.inference import upscale
from microsr.losses import (
    LossWeights,
    RadBatch,
    gram_matrix,
    perceptual_loss,
    pixel_loss,
    rad_losses,
    texture_loss,
)
from microsr.metrics import psnr, ssim
from microsr.models import (
    DiscriminatorConfig,
    FeatureExtractor,
    FeatureExtractorConfig,
    GeneratorConfig,
    discriminator_forward,
    discriminator_param_shapes,
    generator_forward,
    generator_param_shapes,
)
from microsr.numerics import Tensor, no_grad, precision
from microsr.numerics import functional as F
from microsr.numerics.gradcheck import analytic_gradients, numerical_gradient, relative_error
from microsr.trainer import LOG_COLUMNS, TrainConfig, TrainSchedule, lr_at_epoch, train
from test_losses import brute_gram, brute_norm, brute_softplus, brute_tiny_conv, direct_rad, tiny_conv_extractor
from test_metrics import brute_psnr, brute_ssim
import test_numerics
from test_numerics import away_from_kinks

pytestmark = pytest.mark.acceptance

MARGIN = 0.1  # min |pre-activation| for a valid finite-difference point


@contextmanager
def criterion(record_property, number, title):
    """Record ``criterion N (title): PASS|FAIL detail`` for the terminal summary."""
    detail = {"msg": ""}
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {number} ({title}): FAIL {detail['msg']} [{type(exc).__name__}: {exc}]"
        print(line)
        record_property("acceptance", line)
        raise
    line = f"criterion {number} ({title}): PASS {detail['msg']}"
    print(line)
    record_property("acceptance", line)


# -- criterion 1 helpers ---------------------------------------------------------

CONV_CASES = [(3, 2, 1, 1), (2, 5, 1, 1), (3, 4, 2, 1), (4, 2, 1, 0)]


def op_cases(seeds):
    for name, (build, shapes) in sorted(test_numerics.TestOpGradients.CASES.items()):
        for seed in seeds:
            rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
            arrays = {k: away_from_kinks(rng, s) for k, s in shapes.items()}
            if name == "max_pool":
                arrays["a"] = rng.permutation(np.linspace(-3, 3, arrays["a"].size)).reshape(shapes["a"])
            yield f"{name}/{seed}", build, arrays
    for cin, cout, stride, pad in CONV_CASES:
        for seed in seeds:
            rng = np.random.default_rng([cin, cout, stride, pad, seed])
            arrays = {"x": rng.normal(size=(2, cin, 6, 5)), "k": rng.normal(size=(cout, cin, 3, 3)),
                      "b": rng.normal(size=cout)}
            yield (f"conv2d{(cin, cout, stride, pad)}/{seed}",
                   lambda t, s=stride, p=pad: F.sum(F.square(F.conv2d(t["x"], t["k"], t["b"], s, p))), arrays)


def network_case(kind, seed):
    """Kink-free toy generator or discriminator point; redrawn until the margin holds."""
    if kind == "generator":
        cfg = GeneratorConfig(num_rrdb=2, base_channels=8, growth_channels=4)
        shapes, key, shape, gain = generator_param_shapes(cfg), "lr", (1, 1, 8, 8), 0.3
        forward = lambda w, x: generator_forward(w, cfg, x)  # noqa: E731
    else:
        cfg = DiscriminatorConfig(input_size=32, channel_sequence=(4, 4, 8, 8), dense_units=8)
        shapes, key, shape, gain = discriminator_param_shapes(cfg), "img", (2, 1, 32, 32), 0.5
        forward = lambda w, x: discriminator_forward(w, cfg, x)  # noqa: E731

    def build(t):
        return F.sum(F.square(forward({k: v for k, v in t.items() if k != key}, t[key])))

    rng = np.random.default_rng([7, seed, len(kind)])
    for _ in range(20):
        arrays = {key: rng.random(shape), **kink_free_params(shapes, rng, gain)}
        with record_preactivations() as seen, precision(np.float64), no_grad():
            build({k: Tensor(v) for k, v in arrays.items()})
        if min(seen) >= MARGIN:
            return f"{kind}/{seed}", build, arrays
    raise RuntimeError(f"no kink-free point found for {kind} seed {seed}")


def both_precisions(build, arrays, max_coords=None, seed=0):
    """Worst per-input relative error of 32- and 64-bit analytic grads vs one f64 FD pass."""
    rng = np.random.default_rng(seed)
    g32 = analytic_gradients(build, arrays, np.float32)
    g64 = analytic_gradients(build, arrays, np.float64)
    worst32 = worst64 = 0.0
    for name, value in arrays.items():
        size = np.asarray(value).size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = numerical_gradient(build, arrays, name, 1e-3, coords)
        worst32 = max(worst32, relative_error(g32[name].reshape(-1)[coords], numeric))
        worst64 = max(worst64, relative_error(g64[name].reshape(-1)[coords], numeric))
    return worst32, worst64


def test_criterion_1_gradient_correctness(record_property):
    with criterion(record_property, 1, "gradient correctness") as verdict:
        start = time.perf_counter()
        cases = list(op_cases(range(5)))
        cases += [network_case("generator", s) for s in range(3)]
        cases += [network_case("discriminator", s) for s in range(5)]
        failures, worst = [], [0.0, 0.0]
        for name, build, arrays in cases:
            net = name.startswith(("generator", "discriminator"))
            e32, e64 = both_precisions(build, arrays, max_coords=8 if net else None,
                                       seed=zlib.crc32(name.encode()))
            worst = [max(worst[0], e32), max(worst[1], e64)]
            if not (e32 < 1e-3 and e64 < 1e-6):
                failures.append(f"{name}: {e32:.2e}/{e64:.2e}")
        elapsed = time.perf_counter() - start
        verdict["msg"] = (f"{len(cases)} cases, worst rel err 32-bit {worst[0]:.2e}, 64-bit {worst[1]:.2e}, "
                          f"{elapsed:.1f} s")
        assert len(cases) >= 100
        assert not failures, failures
        assert elapsed < 120


# -- criterion 2 -----------------------------------------------------------------

def test_criterion_2_loss_oracles(record_property):
    with criterion(record_property, 2, "loss-formula oracles") as verdict:
        worst = 0.0
        with precision(np.float64):
            for seed in range(10):
                rng = np.random.default_rng(seed)
                a, b = rng.normal(size=(1, 1, 8, 8)), rng.normal(size=(1, 1, 8, 8))
                for norm in ("l1", "l2"):
                    worst = max(worst, abs(pixel_loss(Tensor(a), Tensor(b), norm).item() - brute_norm(a, b, norm)))
                    kernel = rng.normal(size=(2, 1, 3, 3))
                    sa, sb = rng.random((1, 1, 4, 4)), rng.random((1, 1, 4, 4))
                    got = perceptual_loss(tiny_conv_extractor(kernel), Tensor(sa), Tensor(sb), norm).item()
                    want = brute_norm(brute_tiny_conv(sa, kernel), brute_tiny_conv(sb, kernel), norm)
                    worst = max(worst, abs(got - want))
                    ga, gb = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
                    identity = FeatureExtractor(FeatureExtractorConfig(truncation="input"))
                    got = texture_loss(identity, Tensor(ga), Tensor(gb), norm).item()
                    worst = max(worst, abs(got - brute_norm(brute_gram(ga), brute_gram(gb), norm)))
                feat = rng.normal(size=(1, 3, 4, 4))
                worst = max(worst, float(np.max(np.abs(gram_matrix(Tensor(feat)).data - brute_gram(feat)))))
                real, fake = rng.normal(size=4), rng.normal(size=4)
                lg, ld = rad_losses(RadBatch.from_logits(Tensor(real[:, None]), Tensor(fake[:, None])))
                mr, mf = real.mean(), fake.mean()
                want_g = np.mean([brute_softplus(r - mf) for r in real]) + np.mean([brute_softplus(mr - f) for f in fake])
                want_d = np.mean([brute_softplus(mf - r) for r in real]) + np.mean([brute_softplus(f - mr) for f in fake])
                worst = max(worst, abs(lg.item() - want_g), abs(ld.item() - want_d))

            worst_rel = 0.0
            rng = np.random.default_rng(99)
            for _ in range(200):
                real, fake = rng.uniform(-10, 10, rng.integers(1, 9)), rng.uniform(-10, 10, rng.integers(1, 9))
                lg, ld = rad_losses(RadBatch.from_logits(Tensor(real[:, None]), Tensor(fake[:, None])))
                dg, dd = direct_rad(real, fake)
                worst_rel = max(worst_rel, abs(lg.item() - dg) / abs(dg), abs(ld.item() - dd) / abs(dd))

            lg, ld = rad_losses(RadBatch.from_logits(Tensor([[1e4], [-1e4]]), Tensor([[-1e4], [1e4]])))
            huge_finite = math.isfinite(lg.item()) and math.isfinite(ld.item())
            lg, ld = rad_losses(RadBatch.from_logits(Tensor([[0.7], [0.7]]), Tensor([[0.7], [0.7]])))
            indiff = max(abs(lg.item() - 2 * math.log(2)), abs(ld.item() - 2 * math.log(2)))
        with precision(np.float32):
            lg, ld = rad_losses(RadBatch.from_logits(Tensor([[1e4]]), Tensor([[-1e4]])))
            huge_finite &= math.isfinite(lg.item()) and math.isfinite(ld.item())
        verdict["msg"] = (f"brute-force max abs diff {worst:.1e}, stable vs direct -log sigma rel {worst_rel:.1e}, "
                          f"|1e4| logits finite={huge_finite}, indifference err {indiff:.1e}")
        assert worst < 1e-6
        assert worst_rel < 1e-6
        assert huge_finite
        assert indiff <= 1e-9


# -- criterion 3 -----------------------------------------------------------------

def test_criterion_3_pipeline_arithmetic(record_property):
    with criterion(record_property, 3, "pipeline arithmetic") as verdict:
        rng = np.random.default_rng(3)
        lr = rng.random((512, 512)).astype(np.float32)
        pair = ImagePair(lr, np.kron(lr, np.ones((2, 2), np.float32)), "grid")
        patches = extract_patches(pair, 64, 0.5)
        incoherent = 0
        for p in patches:
            y, x = p.lr_origin
            ok = (np.array_equal(p.lr_patch, lr[y:y + 64, x:x + 64])
                  and np.array_equal(p.hr_patch, pair.hr[2 * y:2 * y + 128, 2 * x:2 * x + 128]))
            aug, _ = augment(p, rng)
            ok &= np.array_equal(aug.hr_patch, np.kron(aug.lr_patch, np.ones((2, 2), np.float32)))
            incoherent += not ok
        x = np.arange(16.0).reshape(4, 4)
        draw_rng = np.random.default_rng(0)
        same = sum(np.array_equal(apply_transform(x, draw_outcome(draw_rng)), x) for _ in range(100_000))
        rate = same / 100_000
        verdict["msg"] = f"{len(patches)} patch pairs, {incoherent} incoherent, identity rate {rate:.4f}"
        assert len(patches) == 225
        assert incoherent == 0
        assert abs(rate - 0.5625) <= 0.01


# -- criterion 4 -----------------------------------------------------------------

def test_criterion_4_schedule_exactness(record_property, tmp_path, monkeypatch):
    with criterion(record_property, 4, "schedule exactness") as verdict:
        schedule = TrainSchedule()
        exact = all(lr_at_epoch(schedule, e) == float(Fraction(1, 10_000) / 2 ** e) for e in range(50))
        exact &= [lr_at_epoch(schedule, e) for e in range(3)] == [1e-4, 5e-5, 2.5e-5]

        def forbidden(*args, **kwargs):
            raise AssertionError("discriminator or extractor touched in phase 1")

        cfg = GeneratorConfig(num_rrdb=1, base_channels=4, growth_channels=2, convs_per_dense_block=2,
                              dense_blocks_per_rrdb=1)
        bundle = TrainConfig(cfg, DiscriminatorConfig(input_size=16, channel_sequence=(4, 4), dense_units=4),
                             FeatureExtractorConfig(blocks=((4, 2), (8, 2), (8, 4))), LossWeights(), patch_size=8)
        with monkeypatch.context() as m:
            for name in ("discriminator_forward", "init_discriminator", "FeatureExtractor"):
                m.setattr(trainer_mod, name, forbidden)
            res = train(bundle, generate_synthetic_dataset(3, 16, 0.05, 2), TrainSchedule(2, 2, batch_size=4),
                        tmp_path / "run", phase1_only=True)
        phase1_clean = res.discriminator is None and load_checkpoint(tmp_path / "run" / "last.ckpt").discriminator is None

        res = train(bundle, generate_synthetic_dataset(3, 16, 0.05, 2), TrainSchedule(1, 1, batch_size=4),
                    tmp_path / "full")
        identical = True
        for name in ("init.ckpt", "phase1_epoch000.ckpt", "phase2_epoch000.ckpt"):
            src = tmp_path / "full" / name
            save_checkpoint(load_checkpoint(src), tmp_path / f"copy_{name}")
            identical &= src.read_bytes() == (tmp_path / f"copy_{name}").read_bytes()
        verdict["msg"] = f"lr exact={exact}, phase 1 discriminator-free={phase1_clean}, byte-identical={identical}"
        assert exact and phase1_clean and identical


# -- criteria 5 and 6 share one desk-scale run --------------------------------------

DESK_GENERATOR = GeneratorConfig(num_rrdb=2, base_channels=16, growth_channels=8)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """32 synthetic pairs, 2+2 epochs of the 2-RRDB/16-channel generator."""
    out = tmp_path_factory.mktemp("desk")
    dataset = generate_synthetic_dataset(32, 128, 0.05, 0)
    bundle = TrainConfig(
        DESK_GENERATOR,
        DiscriminatorConfig(input_size=128, channel_sequence=(8, 8, 16, 16, 32, 32, 64, 64), dense_units=64),
        FeatureExtractorConfig(blocks=((8, 2), (16, 2), (32, 4))),
        LossWeights(),
        patch_size=64,
    )
    after_phase1 = {}

    def snapshot(phase, epoch, params):
        if phase == 1:
            after_phase1.update({k: Tensor(v.data.copy()) for k, v in params.items()})

    start = time.perf_counter()
    result = train(bundle, dataset, TrainSchedule(2, 2, lr_initial=1e-3, batch_size=8, seed=0), out,
                   on_epoch=snapshot)
    return {"result": result, "elapsed": time.perf_counter() - start, "phase1_params": after_phase1, "out": out}


def test_criterion_5_desk_scale_training(record_property, desk_run):
    with criterion(record_property, 5, "desk-scale end-to-end") as verdict:
        res = desk_run["result"]
        phase1 = [h for h in res.val_history if h[0] == 1][-1]
        gain = phase1[2] - res.bicubic[0]
        p2 = [r for r in res.log if r["phase"] == 2]
        finite = bool(p2) and all(
            math.isfinite(r[k]) for r in p2 for k in ("pixel_loss", "perceptual_loss", "adv_loss_G", "adv_loss_D"))
        verdict["msg"] = (f"val PSNR after phase 1 {phase1[2]:.2f} dB vs bicubic {res.bicubic[0]:.2f} dB "
                          f"(+{gain:.2f} dB), phase 2 steps {len(p2)} finite={finite}, "
                          f"collapse={res.collapse_warning}, {desk_run['elapsed'] / 60:.1f} min")
        assert gain >= 1.0
        assert finite
        assert not res.collapse_warning
        assert desk_run["elapsed"] < 30 * 60


def test_criterion_6_inference_contract(record_property, desk_run):
    with criterion(record_property, 6, "inference contract") as verdict:
        params = desk_run["result"].generator
        rng = np.random.default_rng(6)
        shapes_ok = all(upscale(params, DESK_GENERATOR, rng.random((h, w)), tile=16, overlap=4).shape == (2 * h, 2 * w)
                        for h, w in [(1, 1), (7, 13), (33, 20), (17, 40)])
        lr = generate_synthetic_dataset(1, 200, 0.05, 60)[0].lr[:, :170]
        whole = upscale(params, DESK_GENERATOR, lr, tile=512, clamp=False)
        tiled = upscale(params, DESK_GENERATOR, lr, tile=96, overlap=16, clamp=False)
        diff = float(np.max(np.abs(whole - tiled)))
        big = generate_synthetic_dataset(1, 512, 0.05, 61)[0].lr
        start = time.perf_counter()
        out = upscale(params, DESK_GENERATOR, big)
        seconds = time.perf_counter() - start
        verdict["msg"] = (f"shapes ok={shapes_ok}, tiled vs untiled max diff {diff:.1e}, "
                          f"512x512 -> {out.shape[1]}x{out.shape[0]} in {seconds:.1f} s")
        assert shapes_ok
        assert diff < 1e-4
        assert out.shape == (1024, 1024) and seconds < 60


# -- criterion 7 -----------------------------------------------------------------

def test_criterion_7_metric_oracles(record_property):
    with criterion(record_property, 7, "metric oracles") as verdict:
        worst_psnr = worst_ssim = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = rng.random((32, 32))
            y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1) if seed % 2 else rng.random((32, 32))
            worst_psnr = max(worst_psnr, abs(psnr(x, y) - brute_psnr(x, y)))
            worst_ssim = max(worst_ssim, abs(ssim(x, y) - brute_ssim(x, y)))
        x = np.random.default_rng(70).random((32, 32))
        ident_psnr, ident_ssim = psnr(x, x), ssim(x, x)
        verdict["msg"] = (f"PSNR max diff {worst_psnr:.1e}, SSIM max diff {worst_ssim:.1e}, "
                          f"identical -> {ident_psnr} dB / SSIM {ident_ssim:.12f}")
        assert worst_psnr < 1e-6 and worst_ssim < 1e-6
        assert ident_psnr == math.inf and abs(ident_ssim - 1.0) < 1e-12


# -- criterion 8 -----------------------------------------------------------------

TOY_CONFIG = """\
num_rrdb = 1
base_channels = 4
growth_channels = 2
patch_size = 16
disc_channels = (4, 4, 8, 8)
disc_dense_units = 8
extractor_blocks = ((4, 2), (8, 2), (8, 4))
batch_size = 8
lr_initial = 1e-3
phase1_epochs = 1
phase2_epochs = 1
"""

# expected non-empty loss columns per phase; every other loss column must be blank
EXPECTED_COLUMNS = {
    "pixel-l2": {1: {"pixel_loss"}},
    "gan-l2": {1: {"pixel_loss"}, 2: {"pixel_loss", "perceptual_loss", "adv_loss_G", "adv_loss_D"}},
    "texture": {1: {"pixel_loss"}, 2: {"pixel_loss", "texture_loss"}},
}
LOSS_COLUMNS = ("pixel_loss", "perceptual_loss", "texture_loss", "adv_loss_G", "adv_loss_D")


def test_criterion_8_ablation_presets(record_property, tmp_path):
    with criterion(record_property, 8, "ablation presets") as verdict:
        assert cli_main(["prepare", "--synthetic", "4", "--size", "32", "--seed", "8",
                         "--out", str(tmp_path / "data")]) == 0
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG)
        problems, summary = [], []
        for preset, expected in EXPECTED_COLUMNS.items():
            run = tmp_path / preset
            rc = cli_main(["train", "--preset", preset, "--config", str(cfg), "--manifest",
                           str(tmp_path / "data" / "manifest.tsv"), "--out", str(run)])
            if rc != 0:
                problems.append(f"{preset}: exit {rc}")
                continue
            with open(run / "metrics.csv", newline="") as fh:
                reader = csv.DictReader(fh)
                header, rows = tuple(reader.fieldnames), list(reader)
            if header != LOG_COLUMNS:
                problems.append(f"{preset}: header {header}")
            phases = {int(r["phase"]) for r in rows}
            if phases != set(expected):
                problems.append(f"{preset}: phases {sorted(phases)}")
            for r in rows:
                active = {c for c in LOSS_COLUMNS if r[c] != ""}
                if active != expected[int(r["phase"])]:
                    problems.append(f"{preset}: phase {r['phase']} step {r['step']} active {sorted(active)}")
                    break
            summary.append(f"{preset} {len(rows)} rows")
        verdict["msg"] = ", ".join(summary)
        assert not problems, problems
