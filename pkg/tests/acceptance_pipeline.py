"""Desk-scale end-to-end run shared by the acceptance tests.

``run_pipeline(workdir, seed)`` trains everything criteria 4 to 9 need, writes
each loss history as CSV under ``workdir`` and returns the measured numbers.
It can also be run directly: ``python3 tests/acceptance_pipeline.py OUTDIR``.
"""

import sys
import time
from pathlib import Path

import numpy as np

from tft.affine import TransformParams, layer_matrix
from tft.backbone import Backbone, accuracy, train_backbone
from tft.core import Tft, TftConfig, one_hot, style_weights
from tft.data import OnlineTuples, ThetaRanges, make_tuples, read_pgm, warp_image, write_pgm
from tft.pipelines import (InversionConfig, StyleConfig, TrainConfig, affine_displacement, evaluate_tft,
                           flow_field, internal_augment_finetune, invert_features, make_style_filters, mspe,
                           style_eval, train_style, train_tft)
from tft.render import write_history_csv

sys.path.insert(0, str(Path(__file__).resolve().parent))
from conftest import load_mnist  # noqa: E402

N_TRAIN = 2000
TFT_STEPS = 5000
STYLE_STEPS = 3000
SPATIAL = dict(n_branches=4, hidden=4, kernel=3, depth=2)
STYLE = dict(n_branches=4, hidden=8, kernel=3, depth=2)


def silhouettes(n, size, rng):
    """Shaded filled shapes on a dark background, standing in for object datasets."""
    ys, xs = np.indices((size, size), dtype=float)
    out = np.zeros((n, size, size))
    for i in range(n):
        cx, cy = rng.uniform(0.35, 0.65, size=2) * size
        a, b = rng.uniform(0.12, 0.3, size=2) * size
        phi = rng.uniform(0, np.pi)
        u = (xs - cx) * np.cos(phi) + (ys - cy) * np.sin(phi)
        v = -(xs - cx) * np.sin(phi) + (ys - cy) * np.cos(phi)
        p = 2.0 if i % 2 == 0 else 6.0  # ellipses and rounded boxes
        inside = (np.abs(u / a) ** p + np.abs(v / b) ** p) <= 1.0
        shade = 0.6 + 0.4 * (u / (2 * a) + 0.5)
        out[i] = np.clip(inside * shade, 0, 1)
    return out


def interior(points, want, H, W, margin):
    x, y = points.T
    keep = (x >= margin) & (x <= W - 1 - margin) & (y >= margin) & (y <= H - 1 - margin)
    return keep & (want[:, 0] >= 0) & (want[:, 0] <= W - 1) & (want[:, 1] >= 0) & (want[:, 1] <= H - 1)


def mean_epe(tft, params, H, W, spacing=4, margin=4):
    field = flow_field(tft, params, spacing, H, W)
    want = affine_displacement(field.starts, layer_matrix(params, H, W, tft.stride))
    keep = interior(field.starts, want, H, W, margin) & field.valid
    return float(np.mean(np.linalg.norm(field.ends[keep] - want[keep], axis=1))), int(keep.sum())


def run_pipeline(workdir, seed=0, log=print):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    r = {"timings": {}}
    x, y = load_mnist(seed=0)
    xtr, ytr = x[:N_TRAIN], y[:N_TRAIN]
    t0 = time.time()

    # criterion 4: backbone, then a tap-1 TFT on online tuples from the training grid
    bb, bb_hist = train_backbone(xtr, ytr, epochs=3, lr=1e-3, batch_size=32, seed=seed, log=log)
    write_history_csv(list(enumerate(bb_hist, start=1)), workdir / "backbone.csv")
    r["train_accuracy"] = accuracy(bb, xtr, ytr)
    r["timings"]["backbone"] = time.time() - t0
    log(f"backbone train accuracy {r['train_accuracy']:.4f}")

    f32 = np.float32
    held = make_tuples(bb, x[2000:2200], 256, ThetaRanges.mnist_grid(), np.random.default_rng(seed + 1), dtype=f32)
    h_ori = np.stack([t.f_ori[1] for t in held])
    h_theta = np.stack([t.f_theta[1] for t in held])
    h_params = [t.params for t in held]
    tft = Tft(TftConfig(channels=bb.tap_channels(1), **SPATIAL), tap=1, stride=1,
              rng=np.random.default_rng(seed), dtype=f32)
    r["heldout_loss_0"] = evaluate_tft(tft, h_ori, h_theta, h_params)
    t1 = time.time()
    source = OnlineTuples(bb, xtr, ThetaRanges.mnist_grid(), 1, f32)
    cfg = TrainConfig(steps=TFT_STEPS, batch_size=32, lr=1e-3, l2=1e-4, seed=seed, tap=1, log_every=100)
    _, tft_hist = train_tft(tft, source, cfg, log=log)
    write_history_csv(tft_hist, workdir / "tft.csv")
    r["timings"]["tft"] = time.time() - t1
    r["heldout_loss_final"] = evaluate_tft(tft, h_ori, h_theta, h_params)
    log(f"held-out feature loss {r['heldout_loss_0']:.6g} -> {r['heldout_loss_final']:.6g}")

    # criterion 5: inversion of 20 held-out digits at +-30 and 60 degrees
    inv = InversionConfig(iterations=300)
    digits = x[2200:2220]

    def inversion_error(theta):
        errs = []
        for img in digits:
            p = TransformParams(theta=theta)
            res = invert_features(bb, {1: tft}, img, p, inv)
            errs.append(mspe(res.image, warp_image(img, p)))
        return float(np.mean(errs))

    r["mspe_in_range"] = (inversion_error(30.0) + inversion_error(-30.0)) / 2
    r["mspe_60"] = inversion_error(60.0)
    log(f"inversion mSPE in range {r['mspe_in_range']:.6g}, at 60 degrees {r['mspe_60']:.6g}")

    # criterion 6: flow fields under translation (3, 0)
    shift = TransformParams(tx=3.0)
    r["epe_trained"], r["epe_points"] = mean_epe(tft, shift, 44, 44)
    zero = Tft(TftConfig(channels=bb.tap_channels(1), **SPATIAL), tap=1, stride=1, zero=True)
    r["epe_zero"], _ = mean_epe(zero, shift, 44, 44)
    log(f"flow endpoint error trained {r['epe_trained']:.4f}, zero-kernel {r['epe_zero']:.4f}")

    # criterion 7: 64x64 PGM inputs through the 44x44-trained TFT at identity
    pgm_dir = workdir / "pgm"
    pgm_dir.mkdir(exist_ok=True)
    for i, img in enumerate(silhouettes(8, 64, np.random.default_rng(seed + 2))):
        write_pgm(img, pgm_dir / f"obj{i}.pgm")
    objs = np.stack([read_pgm(p) for p in sorted(pgm_dir.glob("*.pgm"))])
    f = bb.taps(objs, 1)[1].data.astype(f32)
    out = tft(f, TransformParams()).data
    r["cross_size_shape"] = out.shape
    r["cross_size_rel"] = float(np.linalg.norm(out - f) / np.linalg.norm(f))
    log(f"64x64 identity relative L2 error {r['cross_size_rel']:.4f}")

    # criterion 8: style-conditioned TFT on tap-2 features with 4 synthetic filter styles
    srng = np.random.default_rng(seed + 3)
    feats = np.concatenate([bb.taps(xtr[i : i + 64], 2)[2].data for i in range(0, 256, 64)]).astype(f32)
    banks = make_style_filters(4, bb.tap_channels(2), srng)
    scfg = TftConfig(channels=bb.tap_channels(2), mode="style", n_styles=4, regressor_hidden=32, final_relu=False,
                     **STYLE)
    stft = Tft(scfg, tap=2, stride=2, rng=srng, dtype=f32)
    r["style_init"] = style_eval(stft, feats, banks)
    t2 = time.time()
    _, style_hist = train_style(stft, feats, banks, StyleConfig(STYLE_STEPS, 16, 1e-3, seed), log=log)
    write_history_csv(style_hist, workdir / "style.csv")
    r["timings"]["style"] = time.time() - t2
    r["style_final"] = style_eval(stft, feats, banks)
    w = [np.concatenate(style_weights(stft.regressor, one_hot(s, 4))) for s in range(4)]
    r["style_min_pair_dist"] = float(min(np.linalg.norm(w[a] - w[b]) for a in range(4) for b in range(a + 1, 4)))
    log(f"style losses {r['style_init']} -> {r['style_final']}")

    # criterion 9: internal augmentation through the frozen TFT, box ranges
    test_x, test_y = x[3000:4000], y[3000:4000]
    prng = np.random.default_rng(seed + 4)
    rotated = np.stack([warp_image(img, TransformParams(theta=float(prng.uniform(-30, 30)))) for img in test_x])
    r["clean_before"] = accuracy(bb, test_x, test_y)
    r["perturbed_before"] = accuracy(bb, rotated, test_y)
    tuned = Backbone.from_state_dict(bb.state_dict())
    t3 = time.time()
    _, aug_hist = internal_augment_finetune(tuned, tft, xtr, ytr, ThetaRanges.augment_box(), 2, lr=1e-4,
                                            batch_size=32, seed=seed, log=log)
    write_history_csv(list(enumerate(aug_hist, start=1)), workdir / "augment.csv")
    r["timings"]["augment"] = time.time() - t3
    r["clean_after"] = accuracy(tuned, test_x, test_y)
    r["perturbed_after"] = accuracy(tuned, rotated, test_y)
    log(f"clean {r['clean_before']:.4f} -> {r['clean_after']:.4f}, "
        f"rotated {r['perturbed_before']:.4f} -> {r['perturbed_after']:.4f}")
    r["timings"]["total"] = time.time() - t0
    return r


if __name__ == "__main__":
    sys.stdout.reconfigure(line_buffering=True)
    res = run_pipeline(sys.argv[1] if len(sys.argv) > 1 else "acceptance_run")
    for k, v in res.items():
        print(k, v)
