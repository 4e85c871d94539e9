"""Acceptance gate. Each ``test_criterion_NN_*`` checks one criterion at its tolerance;
the terminal summary prints one PASS/FAIL/SKIP line per criterion.
"""
import json
import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import write_pair_tree
from stainbridge.data import assign_splits, crop_patches, load_dataset, trim_margin
from stainbridge.data.dataset import HEMIT_SPLIT_COUNTS, MANIFEST_NAME, SplitManifest
from stainbridge.downstream import ProportionRecord, mae_ratio, otsu_threshold
from stainbridge.errors import DatasetValidationError
from stainbridge.generator import (
    DualBranchGenerator,
    FeatureMapFusion,
    GatingLayer,
    GeneratorConfig,
    ResidualBlock,
    ShiftedWindowMSA,
    SwinBlock,
    SwinStageOutput,
    compute_gating_map,
)
from stainbridge.metrics import ChannelMetrics, MetricsReport, pearson_r, psnr, ssim
from stainbridge.training import (
    DiscriminatorConfig,
    TrainConfig,
    Trainer,
    cgan_value,
    generator_adversarial,
    generator_objective,
    l1_loss,
    lr_schedule,
)

pytestmark = pytest.mark.acceptance


# 1 -----------------------------------------------------------------------------

def test_criterion_01_shape_range_contract():
    torch.manual_seed(0)
    model = DualBranchGenerator(GeneratorConfig()).eval()
    x = torch.rand(2, 3, 512, 512) * 2 - 1
    t = time.perf_counter()
    with torch.no_grad():
        y = model(x)
    elapsed = time.perf_counter() - t
    assert y.shape == (2, 3, 512, 512)
    assert y.min() >= -1 and y.max() <= 1
    assert elapsed < 30.0, f"forward took {elapsed:.1f}s"


# 2 -----------------------------------------------------------------------------

def _dense_attention_oracle(msa: ShiftedWindowMSA, x: torch.Tensor) -> torch.Tensor:
    """softmax(QK^T / sqrt(d) + B) V over every token, bias built by explicit loops."""
    attn = msa.attn
    h, c = attn.num_heads, attn.dim
    d = c // h
    x = x.double()[0]
    w_qkv, b_qkv = attn.qkv.weight.double(), attn.qkv.bias.double()
    qkv = x @ w_qkv.T + b_qkv
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    ws = attn.window_size
    n = ws * ws
    table = attn.relative_position_bias_table.double()
    bias = torch.zeros(h, n, n, dtype=torch.float64)
    for i in range(n):
        for j in range(n):
            dy = i // ws - j // ws + ws - 1
            dx = i % ws - j % ws + ws - 1
            bias[:, i, j] = table[dy * (2 * ws - 1) + dx]
    heads = []
    for m in range(h):
        qm, km, vm = (t[:, m * d:(m + 1) * d] for t in (q, k, v))
        logits = qm @ km.T / math.sqrt(d) + bias[m]
        heads.append(torch.softmax(logits, dim=-1) @ vm)
    out = torch.cat(heads, dim=-1)
    return (out @ attn.proj.weight.double().T + attn.proj.bias.double()).unsqueeze(0)


def test_criterion_02_window_attention_dense_oracle():
    torch.manual_seed(0)
    msa = ShiftedWindowMSA(dim=32, num_heads=4, window_size=8, shift_size=0)
    with torch.no_grad():
        msa.attn.relative_position_bias_table.normal_(0, 0.5)
    x = torch.randn(1, 64, 32)
    with torch.no_grad():
        got = msa(x, (8, 8)).double()
    want = _dense_attention_oracle(msa, x)
    err = (got - want).abs().max().item()
    assert err <= 1e-5, f"max abs error {err:.3g}"


# 3 -----------------------------------------------------------------------------

def test_criterion_03_fmf_locality():
    torch.manual_seed(0)
    fmf = FeatureMapFusion(swin_dim=24, cnn_channels=32, num_heads=4, top_k_fraction=0.25)
    f = torch.randn(2, 32, 16, 16)
    s = SwinStageOutput(torch.randn(2, 64, 24), (8, 8))
    with torch.no_grad():
        out, details = fmf(f, s, return_details=True)
    sel = details["selected"]
    assert sel.k == 64
    changed = torch.zeros(2, 256, dtype=torch.bool)
    changed.scatter_(1, sel.indices, True)
    flat_in, flat_out = f.reshape(2, 32, -1), out.reshape(2, 32, -1)
    for b in range(2):
        keep = ~changed[b]
        assert torch.equal(flat_in[b][:, keep], flat_out[b][:, keep])
        diff = (flat_in[b][:, changed[b]] - flat_out[b][:, changed[b]]).abs()
        assert diff.max().item() > 1e-6
        # every selected position is individually altered
        assert (diff.amax(dim=0) > 1e-6).all()


# 4 -----------------------------------------------------------------------------

def test_criterion_04_identity_cascades():
    torch.manual_seed(0)
    block = ResidualBlock(16, dropout=0.5).eval()
    for p in block.parameters():
        p.data.zero_()
    x = torch.randn(2, 16, 12, 12)
    with torch.no_grad():
        assert torch.equal(block(x), x)

    sb = SwinBlock(24, num_heads=3, window_size=4, shift_size=2)
    for lin in (sb.attn.attn.proj, sb.mlp.fc2):
        lin.weight.data.zero_()
        lin.bias.data.zero_()
    t = torch.randn(2, 64, 24)
    with torch.no_grad():
        assert torch.equal(sb(t, (8, 8)), t)

    gate = GatingLayer(16)
    gate.conv.weight.data.zero_()
    gate.conv.bias.data.zero_()
    with torch.no_grad():
        g = compute_gating_map(torch.randn(2, 16, 9, 9), gate)
    assert torch.equal(g, torch.full_like(g, 0.5))


# 5 -----------------------------------------------------------------------------

def test_criterion_05_loss_anchors():
    x = torch.randn(2, 3, 16, 16)
    assert l1_loss(x, x.clone()).item() == 0.0
    zeros = torch.zeros(2, 1, 30, 30, dtype=torch.float64)  # logit 0 <=> D = 0.5
    assert abs(cgan_value(zeros, zeros).item() - (-2 * math.log(2))) <= 1e-6
    torch.manual_seed(1)
    for _ in range(10):
        fake, real = torch.rand(2, 3, 16, 16) * 2 - 1, torch.rand(2, 3, 16, 16) * 2 - 1
        logits = torch.randn(2, 1, 6, 6)
        g_adv, l1 = generator_adversarial(logits), l1_loss(fake, real)
        lam = float(torch.rand(()) * 200)
        total = generator_objective(g_adv, l1, lam)
        assert abs(total.item() - (g_adv.item() + lam * l1.item())) <= 1e-6 * max(1.0, abs(total.item()))


# 6 -----------------------------------------------------------------------------

def test_criterion_06_gradient_flow():
    trainer = Trainer.create(GeneratorConfig(), TrainConfig(seed=0))
    hne = torch.rand(1, 3, 256, 256) * 2 - 1
    mihc = torch.rand(1, 3, 256, 256) * 2 - 1
    trainer.train_step(hne, mihc)
    total = nonzero = 0
    for name, p in trainer.generator.named_parameters():
        assert p.grad is not None, f"{name} received no gradient"
        total += p.numel()
        nonzero += int((p.grad != 0).sum())
    frac = nonzero / total
    assert frac >= 0.999, f"only {frac:.5f} of generator parameters have nonzero gradient"

    _toy_finite_difference_check()


def _toy_finite_difference_check():
    """10-parameter generator (3x3 colour matrix + shared bias) under the full objective."""
    torch.manual_seed(3)
    theta = torch.randn(10, dtype=torch.float64) * 0.5
    hne = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    mihc = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    disc = torch.nn.Conv2d(6, 1, 3).double()

    def objective(t):
        w, b = t[:9].view(3, 3, 1, 1), t[9].expand(3)
        fake = torch.tanh(F.conv2d(hne, w, b))
        logits = disc(torch.cat([hne, fake], 1))
        return generator_objective(generator_adversarial(logits), l1_loss(fake, mihc), 100.0)

    t = theta.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(objective(t), t)
    eps = 1e-6
    numeric = torch.zeros(10, dtype=torch.float64)
    with torch.no_grad():
        for i in range(10):
            e = torch.zeros(10, dtype=torch.float64)
            e[i] = eps
            numeric[i] = (objective(theta + e) - objective(theta - e)) / (2 * eps)
    rel = ((analytic - numeric).abs() / numeric.abs().clamp_min(1e-8)).max().item()
    assert rel <= 1e-3, f"max relative gradient error {rel:.3g}"


# 7 -----------------------------------------------------------------------------

OVERFIT_LR = 2e-4


@pytest.mark.slow
def test_criterion_07_overfit_smoke():
    # narrow generator and discriminator keep 200 CPU steps well inside the budget
    gen_cfg = GeneratorConfig.small()
    trainer = Trainer.create(gen_cfg, TrainConfig(initial_lr=OVERFIT_LR, lambda_l1=100.0, seed=0),
                             DiscriminatorConfig(base_width=16))
    g = torch.Generator().manual_seed(123)
    base = torch.rand(4, 3, 32, 32, generator=g)
    hne = F.interpolate(base, size=256, mode="bilinear", align_corners=False) * 2 - 1
    mihc = torch.tanh(2 * torch.stack([hne[:, 2] - hne[:, 0], hne[:, 1] * hne[:, 0], -hne[:, 1]], 1))
    t = time.perf_counter()
    losses = [trainer.train_step(hne, mihc).g_l1 for _ in range(200)]
    elapsed = time.perf_counter() - t
    ratio = losses[-1] / losses[0]
    print(f"overfit: L1 {losses[0]:.4f} -> {losses[-1]:.4f} (ratio {ratio:.3f}) in {elapsed:.0f}s")
    assert ratio <= 0.5
    assert elapsed < 15 * 60


# 8 -----------------------------------------------------------------------------

def test_criterion_08_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(50, cfg) == 3.0e-5
    assert lr_schedule(75, cfg) == 1.5e-5
    assert lr_schedule(100, cfg) == 0.0


# 9 -----------------------------------------------------------------------------

def test_criterion_09_metric_anchors(rng):
    x = rng.integers(0, 256, (64, 64)).astype(np.float64)
    assert abs(ssim(x, x) - 1.0) <= 1e-9
    const = ssim(np.full((32, 32), 100.0), np.full((32, 32), 150.0))
    assert abs(const - 0.9231) <= 1e-4
    y = rng.integers(0, 240, (64, 64)).astype(np.float64)
    assert abs(psnr(y, y + 16) - 24.05) <= 0.01
    assert abs(pearson_r(x, 255 - x) - (-1.0)) <= 1e-9

    rows = [("s0", ch, ChannelMetrics(v, 0.5, 30.0, 1.0))
            for ch, v in zip(("DAPI", "CD3", "panCK"), (0.815, 0.898, 0.913))]
    assert abs(MetricsReport(rows).averages["ssim"] - 0.875) <= 5e-4


# 10 ----------------------------------------------------------------------------

def _otsu_exact(values, bins):
    """Index of the interior edge maximizing between-class variance, in exact arithmetic."""
    vals = [Fraction(int(v)) for v in values]
    lo, hi = min(vals), max(vals)
    edges = [lo + (hi - lo) * i / bins for i in range(bins + 1)]
    hist = [0] * bins
    for v in vals:
        b = 0
        while b < bins - 1 and v > edges[b + 1]:  # right-closed bins
            b += 1
        hist[b] += 1
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(bins)]
    n = len(vals)
    best, best_t = None, None
    for t in range(1, bins):
        n0 = sum(hist[:t])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = sum(h * c for h, c in zip(hist[:t], centers[:t])) / n0
        mu1 = sum(h * c for h, c in zip(hist[t:], centers[t:])) / n1
        var = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t


def test_criterion_10_otsu_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        bins = int(rng.choice([8, 16, 32]))
        size = int(rng.integers(20, 200))
        modes = rng.integers(0, 256, 2)
        values = np.clip(np.concatenate([
            rng.normal(modes[0], rng.uniform(3, 30), size // 2),
            rng.normal(modes[1], rng.uniform(3, 30), size - size // 2),
        ]), 0, 255).round()
        if values.min() == values.max():
            continue
        t = _otsu_exact(values, bins)
        want = np.linspace(values.min(), values.max(), bins + 1)[t]
        got = otsu_threshold(values, bins)
        assert got == want, f"trial {trial}: {got} != {want} (edge {t})"


# 11 ----------------------------------------------------------------------------

def test_criterion_11_mae_ratio_anchor():
    recs = [ProportionRecord("a", "CD3", 0.4, 0.2, 10, 10),
            ProportionRecord("b", "CD3", 0.5, 0.6, 10, 10)]
    assert mae_ratio(recs).mae_ratio == pytest.approx(0.35, abs=1e-15)
    same = [ProportionRecord("a", "CD3", 0.4, 0.4, 10, 10),
            ProportionRecord("b", "CD3", 0.5, 0.5, 10, 10)]
    assert mae_ratio(same).mae_ratio == 0.0


# 12 ----------------------------------------------------------------------------

def test_criterion_12_tiling_anchor():
    img = np.zeros((2148, 2148, 3), dtype=np.uint8)
    trimmed = trim_margin(img, 50)
    assert trimmed.shape[:2] == (2048, 2048)
    patches = crop_patches(trimmed, 1024, 0.5)
    assert len(patches) == 9
    assert sorted({r for (r, _), _ in patches}) == [0, 512, 1024]
    assert sorted({c for (_, c), _ in patches}) == [0, 512, 1024]
    assert all(p.shape == (1024, 1024, 3) for _, p in patches)


# 13 ----------------------------------------------------------------------------

def test_criterion_13_dataset_validation(tmp_path):
    ids = write_pair_tree(tmp_path, HEMIT_SPLIT_COUNTS, size=(4, 4))
    all_ids = [s for split in ("train", "val", "test") for s in ids[split]]
    # roughly 18 patches per patient, patients never crossing a split
    patients = {sid: f"{sid.split('_')[0]}_p{int(sid.split('_')[1]) // 18}" for sid in all_ids}
    manifest = SplitManifest(train=ids["train"], val=ids["val"], test=ids["test"], patients=patients)
    manifest.write(tmp_path / MANIFEST_NAME)
    samples, found = load_dataset(tmp_path)
    assert len(samples) == 5292
    assert found.counts == (3717, 630, 945)
    splits_per_patient = {}
    for s in samples:
        splits_per_patient.setdefault(s.patient_id, set()).add(s.split)
    assert all(len(v) == 1 for v in splits_per_patient.values())

    leaked = dict(patients)
    leaked[ids["test"][0]] = patients[ids["train"][0]]
    SplitManifest(train=ids["train"], val=ids["val"], test=ids["test"], patients=leaked).write(
        tmp_path / MANIFEST_NAME)
    with pytest.raises(DatasetValidationError, match="leakage"):
        load_dataset(tmp_path)

    # generated splits stay patient-disjoint with the released proportions
    generated = assign_splits(patients, seed=0)
    generated.validate()
    assert sum(generated.counts) == 5292


# 14 ----------------------------------------------------------------------------

def test_criterion_14_full_scale_table(tmp_path):
    """Optional: set STAINBRIDGE_GENERATED_DIR and STAINBRIDGE_REFERENCE_DIR to the
    full-HEMIT test-split outputs of a 100-epoch run."""
    gen_dir = os.environ.get("STAINBRIDGE_GENERATED_DIR")
    ref_dir = os.environ.get("STAINBRIDGE_REFERENCE_DIR")
    if not (gen_dir and ref_dir):
        pytest.skip("full-scale outputs not provided (extended check, not part of the desk gate)")
    from stainbridge.cli import main

    assert main(["evaluate", gen_dir, ref_dir, "--out", str(tmp_path)]) == 0
    summary = json.loads((Path(tmp_path) / "metrics_summary.json").read_text())
    assert abs(summary["SSIM"]["Average"] - 0.875) <= 0.02
    psnr_avg = summary["PSNR (dB)"]["Average (channel mean)"]
    assert 29.89 - 0.5 <= psnr_avg <= 29.95 + 0.5
