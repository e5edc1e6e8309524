"""Acceptance gate: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed
live even when output capture is on.  Set ``SPLICE_MFCN_SKIP_SLOW=1`` to
skip the toy-scale ordering experiment (about 10 minutes on one core).
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from splice_mfcn import cli, gradsuite
from splice_mfcn.config import RunConfig
from splice_mfcn.datagen import GenParams, generate_sample, sample_seed
from splice_mfcn.masks import (
    MANIPULATED_IS_BLACK,
    MANIPULATED_IS_WHITE,
    derive_edge_label,
    load_mask,
    save_mask,
)
from splice_mfcn.metrics import (
    DEFAULT_GRID,
    ConfusionCounts,
    confusion,
    f1,
    mcc,
    optimal_threshold_sweep,
)
from splice_mfcn.model import ModelConfig, build_model, load_checkpoint, save_checkpoint, to_input
from splice_mfcn.perturb import (
    ANNEX_K_CHROMA,
    ANNEX_K_LUMA,
    awgn_float,
    gaussian_kernel,
    measure_snr,
    quant_tables,
)
from splice_mfcn.postprocess import edge_enhanced_combine, hole_fill, softmax_to_map, threshold

from oracles import brute_sweep, flood_fill_oracle, naive_counts, naive_f1, naive_mcc

SKIP_SLOW = os.environ.get("SPLICE_MFCN_SKIP_SLOW", "") not in ("", "0")


def report(capsys, name, passed, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, detail


def corpus(n, root_seed, size=(64, 64)):
    pairs = [generate_sample(GenParams(size=size, seed=sample_seed(root_seed, i))) for i in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def train_cfg(steps, batch, heads="surface+edge", seed=0):
    return RunConfig({
        "seed": str(seed), "model.heads": heads, "train.steps": str(steps),
        "train.batch_size": str(batch), "optim.lr_multiplier": "100",
    })


# -- gradient suite ---------------------------------------------------------

def test_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seed=0, eps=1e-5)
    elapsed = time.perf_counter() - t0
    worst = {k: f"{e:.1e}" for k, (e, _) in results.items()}
    ok = all(e <= tol for e, tol in results.values()) and elapsed < 120
    report(capsys, "gradient-suite", ok, f"max rel err {worst}; {elapsed:.0f}s")


# -- overfit and loss identity (one shared training run) --------------------

@pytest.fixture(scope="module")
def overfit_run():
    images, masks = corpus(8, root_seed=0)
    cfg = train_cfg(steps=500, batch=8)
    log = []
    t0 = time.perf_counter()
    model = cli.train_model(cfg, images, masks, progress=lambda step, res: log.append(res))
    elapsed = time.perf_counter() - t0
    return model, images, masks, log, elapsed, cfg


def test_overfit(overfit_run, capsys):
    model, images, masks, _, elapsed, cfg = overfit_run
    edges = [derive_edge_label(m, cfg.get("train.edge_halfwidth")) for m in masks]
    out = model.forward(to_input(np.stack(images)), mode="inference")
    surf = [softmax_to_map(out["surface"][i:i + 1]) for i in range(8)]
    edge = [softmax_to_map(out["edge"][i:i + 1]) for i in range(8)]
    acc = float(np.mean([threshold(p, 0.5) == g for p, g in zip(surf, masks)]))
    pooled = ConfusionCounts(*np.sum([confusion(threshold(p, 0.5), g) for p, g in zip(edge, edges)], axis=0))
    edge_f1 = f1(pooled)
    swept = optimal_threshold_sweep(edge, edges, "f1", DEFAULT_GRID).mean
    lr = cfg.get("optim.lr") * cfg.get("optim.lr_multiplier")
    ok = acc >= 0.99 and edge_f1 >= 0.95 and elapsed < 600 and cfg.get("optim.lr_multiplier") <= 100
    report(capsys, "overfit", ok,
           f"surface acc {acc:.4f} (>=0.99), edge F1 {edge_f1:.4f} (>=0.95; per-image swept {swept:.4f}), "
           f"500 steps at lr {lr:g}, {elapsed:.0f}s")


def test_loss_identity(overfit_run, capsys):
    _, _, _, log, _, _ = overfit_run
    worst = max(abs(r["loss_total"] - (r["loss_surface"] + r["loss_edge"])) for r in log)
    report(capsys, "loss-identity", worst <= 1e-12 and len(log) == 500,
           f"max |total - (surface + edge)| = {worst:.1e} over {len(log)} steps")


# -- metric and sweep oracles -----------------------------------------------

def test_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        out = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        gt = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        counts = naive_counts(out, gt)
        c = confusion(out, gt)
        mismatches += tuple(c) != counts or f1(c) != naive_f1(*counts) or mcc(c) != naive_mcc(*counts)
    fx = ConfusionCounts(tp=1, fp=0, tn=2, fn=1)
    fix_ok = abs(f1(fx) - 2 / 3) <= 1e-12 and abs(mcc(fx) - 2 / math.sqrt(12)) <= 1e-12
    report(capsys, "metric-oracles", mismatches == 0 and fix_ok,
           f"{mismatches} mismatches on 1000 pairs; fixtures F1={f1(fx):.12f} MCC={mcc(fx):.12f}")


def test_sweep_optimality(capsys):
    rng = np.random.default_rng(77)
    bad = 0
    for i in range(100):
        # coarse values make ties between grid points common
        smap = np.round(rng.random((8, 8)) * 20) / 20
        gt = (rng.random((8, 8)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        metric = "f1" if i % 2 == 0 else "mcc"
        res = optimal_threshold_sweep([smap], [gt], metric, DEFAULT_GRID)
        arg, best = brute_sweep(smap, gt, DEFAULT_GRID, metric)
        bad += res.thresholds[0] != arg or res.scores[0] != best
    report(capsys, "sweep-optimality", bad == 0, f"{bad} disagreements on 100 maps")


def test_postprocess_oracles(capsys):
    rng = np.random.default_rng(99)
    fill_bad = 0
    for _ in range(10_000):
        m = (rng.random((16, 16)) < rng.uniform(0.1, 0.7)).astype(np.uint8)
        fill_bad += not np.array_equal(hole_fill(m), flood_fill_oracle(m))
    violations = 0
    for _ in range(2000):
        s, e = rng.random((16, 16)), rng.random((16, 16))
        ts, te = rng.random(), rng.random()
        out = edge_enhanced_combine(s, e, ts, te)
        violations += int((out.astype(bool) & ~threshold(s, ts).astype(bool)).sum())
    report(capsys, "postprocess-oracles", fill_bad == 0 and violations == 0,
           f"hole_fill mismatches {fill_bad}/10000; combine subset violations {violations}")


# -- toy-scale ordering (reported, not gated) -------------------------------

@pytest.mark.slow
@pytest.mark.skipif(SKIP_SLOW, reason="SPLICE_MFCN_SKIP_SLOW set")
def test_ordering_experiment(capsys):
    t0 = time.perf_counter()
    train_x, train_y = corpus(512, root_seed=1)
    test_x, test_y = corpus(64, root_seed=2)
    scores = {}
    for heads in ("surface", "surface+edge"):
        model = cli.train_model(train_cfg(steps=1000, batch=8, heads=heads), train_x, train_y)
        maps = [cli.predict_maps(model, im) for im in test_x]
        surf = [m["surface"] for m in maps]
        name = "SFCN" if heads == "surface" else "MFCN"
        scores[name] = optimal_threshold_sweep(surf, test_y, "f1", DEFAULT_GRID).mean
        if heads == "surface+edge":
            edge = [m["edge"] for m in maps]
            scores["Edge-enhanced MFCN"] = optimal_threshold_sweep(surf, test_y, "f1", DEFAULT_GRID,
                                                                   edge_maps=edge).mean
    elapsed = time.perf_counter() - t0
    holds = scores["Edge-enhanced MFCN"] >= scores["MFCN"] >= scores["SFCN"]
    detail = ", ".join(f"{k} F1 {v:.4f}" for k, v in scores.items())
    report(capsys, "ordering (soft)", elapsed < 1800,
           f"{detail}; ordering enhanced >= MFCN >= SFCN {'holds' if holds else 'does not hold'}; {elapsed:.0f}s")


# -- perturbation protocol --------------------------------------------------

def test_perturbation_protocol(capsys):
    rng = np.random.default_rng(5)
    yy, xx = np.mgrid[0:256, 0:256]
    img = np.clip(128 + 70 * np.sin(xx / 11.0)[..., None] * np.cos(yy / 17.0)[..., None]
                  + rng.normal(0, 12, (256, 256, 3)), 0, 255).astype(np.uint8)
    snr_err = {snr: abs(measure_snr(img, awgn_float(img, snr, seed=11)) - snr) for snr in (25, 20, 15)}
    kern_err = {s: abs(gaussian_kernel(s).sum() - 1.0) for s in (0.5, 1.0, 1.5, 2.0)}
    luma, chroma = quant_tables(50)
    tables_ok = np.array_equal(luma, ANNEX_K_LUMA) and np.array_equal(chroma, ANNEX_K_CHROMA)
    ok = max(snr_err.values()) <= 0.1 and max(kern_err.values()) <= 1e-12 and tables_ok
    report(capsys, "perturbation-protocol", ok,
           f"SNR errors dB {({k: round(v, 4) for k, v in snr_err.items()})}; "
           f"kernel sum errors max {max(kern_err.values()):.1e}; q50 tables equal Annex K: {tables_ok}")


# -- determinism and round trips --------------------------------------------

def _tree(root):
    root = Path(root)
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _cfg(path, **kv):
    path.write_text("".join(f"{k.replace('__', '.')}={v}\n" for k, v in kv.items()))
    return str(path)


def test_determinism_and_round_trips(tmp_path, capsys):
    cfgs = [
        ("gen", _cfg(tmp_path / "gen.cfg", out=tmp_path / "data", gen__n=4, seed=3)),
        ("train", _cfg(tmp_path / "train.cfg", out=tmp_path / "run", train__data=tmp_path / "data",
                       train__steps=10, train__batch_size=2, optim__lr_multiplier=100, seed=3)),
        ("infer", _cfg(tmp_path / "infer.cfg", out=tmp_path / "inf", infer__checkpoint=tmp_path / "run" / "model.ckpt",
                       infer__images=tmp_path / "data" / "images")),
        ("eval", _cfg(tmp_path / "eval.cfg", out=tmp_path / "ev", eval__gt=tmp_path / "data" / "masks",
                      eval__mfcn_maps=tmp_path / "inf" / "maps")),
    ]
    outdirs = {"gen": "data", "train": "run", "infer": "inf", "eval": "ev"}
    snapshots = []
    for _ in range(2):
        snap = {}
        for cmd, cfg in cfgs:
            assert cli.main([cmd, "--config", cfg]) == 0
            snap[cmd] = _tree(tmp_path / outdirs[cmd])
        snapshots.append(snap)
    rerun_ok = {cmd: snapshots[0][cmd] == snapshots[1][cmd] for cmd in outdirs}

    model = build_model(ModelConfig(), seed=4)
    x = to_input(corpus(2, root_seed=4)[0][0])
    before = model.forward(x, mode="inference")
    save_checkpoint(model, tmp_path / "m.ckpt")
    after = load_checkpoint(tmp_path / "m.ckpt").forward(x, mode="inference")
    ckpt_ok = all(np.array_equal(before[k], after[k]) for k in before)

    m = np.zeros((9, 11), np.uint8)
    m[2:6, 3:8] = 1
    save_mask(m, tmp_path / "black.png", MANIPULATED_IS_BLACK)
    save_mask(m, tmp_path / "white.png", MANIPULATED_IS_WHITE)
    raw = np.asarray(Image.open(tmp_path / "black.png"))
    mask_ok = (np.array_equal(load_mask(tmp_path / "black.png", MANIPULATED_IS_BLACK), m)
               and np.array_equal(load_mask(tmp_path / "white.png", MANIPULATED_IS_WHITE), m)
               and (raw[m == 1] == 0).all() and (raw[m == 0] == 255).all())
    ok = all(rerun_ok.values()) and ckpt_ok and mask_ok
    report(capsys, "determinism-round-trips", ok,
           f"byte-identical reruns {rerun_ok}; checkpoint forward bit-exact {ckpt_ok}; mask conventions {mask_ok}")

