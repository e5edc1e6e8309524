"""``splice-mfcn`` command-line entry point."""

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import gradsuite
from .config import load_config
from .datagen import GenParams, TextureStats, generate_corpus
from .masks import derive_edge_label, load_mask, median_freq_weights, save_mask
from .metrics import (
    EvalRow,
    aggregate_and_emit,
    confusion,
    f1,
    mcc,
    optimal_threshold_sweep,
)
from .model import ConfigError, build_model, load_checkpoint, save_checkpoint, to_input, train_step
from .perturb import add_awgn, gaussian_blur, jpeg_recompress
from .postprocess import (
    edge_enhanced_combine,
    load_prob_map,
    save_prob_map,
    softmax_to_map,
    threshold,
)
from .tensor import ShapeError

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
METHOD_SFCN = "SFCN"
METHOD_MFCN = "MFCN"
METHOD_ENHANCED = "Edge-enhanced MFCN"
METHOD_MAPS = "MAPS"
MAX_LR_MULTIPLIER = 100.0


def workers():
    env = os.environ.get("SPLICE_MFCN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pmap(fn, items):
    items = list(items)
    n = min(workers(), len(items)) or 1
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def _out_dir(cfg):
    out = cfg.require("out")
    os.makedirs(out, exist_ok=True)
    return out


def list_images(directory):
    files = sorted(
        f for f in os.listdir(directory)
        if os.path.splitext(f)[1].lower() in IMAGE_EXTS and not f.startswith(".")
    )
    return [(os.path.splitext(f)[0], os.path.join(directory, f)) for f in files]


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def load_corpus(directory, convention):
    img_dir = os.path.join(directory, "images")
    mask_dir = os.path.join(directory, "masks")
    for d in (img_dir, mask_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"corpus directory missing: {d}")
    ids, images, masks = [], [], []
    for sid, path in list_images(img_dir):
        mpath = os.path.join(mask_dir, sid + ".png")
        if not os.path.exists(mpath):
            raise FileNotFoundError(f"no mask for image {sid}: {mpath}")
        ids.append(sid)
        images.append(read_rgb(path))
        masks.append(load_mask(mpath, convention))
    if not ids:
        raise FileNotFoundError(f"no images in {img_dir}")
    return ids, images, masks


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(cfg):
    out = _out_dir(cfg)
    size = cfg.get("gen.size")
    params = GenParams(
        size=tuple(size),
        region=cfg.get("gen.region"),
        area_range=(cfg.get("gen.area_min"), cfg.get("gen.area_max")),
        host=TextureStats(cfg.get("gen.host_noise"), cfg.get("gen.host_corr")),
        donor=TextureStats(cfg.get("gen.donor_noise"), cfg.get("gen.donor_corr")),
        min_color_distance=cfg.get("gen.min_color_distance"),
        blend=cfg.get("gen.blend"),
        seed=cfg.get("seed"),
    ).validate()
    cfg.write(out)
    rows = generate_corpus(cfg.get("gen.n"), params, out, cfg.get("mask.convention"), workers=workers())
    print(f"wrote {len(rows)} samples to {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train_model(cfg, images, masks, log_path=None, progress=None):
    """Train per ``cfg`` on in-memory images/masks; returns the model."""
    mcfg = cfg.model_config()
    for img in images:
        if img.shape[:2] != tuple(mcfg.input_size):
            raise ShapeError(f"training image size {img.shape[:2]} != model.input_size {mcfg.input_size}")
    steps = cfg.require("train.steps")
    batch = cfg.require("train.batch_size")
    if batch < 1 or steps < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.steps >= 0")
    seed = cfg.get("seed")
    model = build_model(mcfg, seed)
    mfcn = "edge" in model.heads
    surf = np.stack(masks)
    edges = np.stack([derive_edge_label(m, cfg.get("train.edge_halfwidth")) for m in masks]) if mfcn else None
    w_s = median_freq_weights(surf)
    w_e = median_freq_weights(edges) if mfcn else (1.0, 1.0)
    x_all = to_input(np.stack(images))
    mult = cfg.get("optim.lr_multiplier")
    if not 0 < mult <= MAX_LR_MULTIPLIER:
        raise ConfigError(f"optim.lr_multiplier must be in (0, {MAX_LR_MULTIPLIER}], got {mult}")
    lr = cfg.get("optim.lr") * mult
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    log = open(log_path, "w", newline="") if log_path else None
    try:
        if log:
            wr = csv.writer(log, lineterminator="\n")
            wr.writerow(["step", "loss_total", "loss_surface", "loss_edge"])
        for step in range(1, steps + 1):
            while order.size < batch:
                order = np.concatenate([order, rng.permutation(len(images))])
            idx, order = np.sort(order[:batch]), order[batch:]
            res = train_step(
                model, x_all[idx], surf[idx], edges[idx] if mfcn else None, w_s, w_e,
                lr=lr, momentum=cfg.get("optim.momentum"), weight_decay=cfg.get("optim.weight_decay"),
            )
            if log:
                le = "" if res["loss_edge"] is None else repr(res["loss_edge"])
                wr.writerow([step, repr(res["loss_total"]), repr(res["loss_surface"]), le])
            if progress:
                progress(step, res)
    finally:
        if log:
            log.close()
    return model


def cmd_train(cfg):
    out = _out_dir(cfg)
    cfg.require("train.steps")
    cfg.require("train.batch_size")
    cfg.model_config()
    cfg.write(out)
    _, images, masks = load_corpus(cfg.path("train.data"), cfg.get("mask.convention"))
    model = train_model(cfg, images, masks, log_path=os.path.join(out, "train_log.csv"))
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    print(f"trained {model.step} steps; checkpoint {os.path.join(out, 'model.ckpt')}")


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def predict_maps(model, image):
    """Probability maps for one RGB image; pads to a multiple of 32 and crops back."""
    h, w = image.shape[:2]
    ph, pw = -h % 32, -w % 32
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge") if (ph or pw) else image
    logits = model.forward(to_input(padded), mode="inference")
    return {name: softmax_to_map(z)[:h, :w] for name, z in logits.items()}


def cmd_infer(cfg):
    out = _out_dir(cfg)
    model = load_checkpoint(cfg.path("infer.checkpoint"))
    items = list_images(cfg.path("infer.images"))
    if not items:
        raise FileNotFoundError(f"no images in {cfg.get('infer.images')}")
    cfg.write(out)
    ts, te = cfg.get("infer.t_surface"), cfg.get("infer.t_edge")
    conv = cfg.get("mask.convention")
    map_dir = os.path.join(out, "maps")
    mask_dir = os.path.join(out, "masks")
    os.makedirs(map_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    model.set_mode("inference")
    all_maps = _pmap(lambda item: predict_maps(model, read_rgb(item[1])), items)
    for (sid, _), maps in zip(items, all_maps):
        save_prob_map(maps["surface"], os.path.join(map_dir, f"{sid}_surface.png"))
        save_mask(threshold(maps["surface"], ts), os.path.join(mask_dir, f"{sid}_surface.png"), conv)
        if "edge" in maps:
            save_prob_map(maps["edge"], os.path.join(map_dir, f"{sid}_edge.png"))
            save_mask(edge_enhanced_combine(maps["surface"], maps["edge"], ts, te),
                      os.path.join(mask_dir, f"{sid}_enhanced.png"), conv)
    print(f"wrote maps for {len(items)} images to {out}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _find_map(directory, sid, suffix):
    for name in (f"{sid}_{suffix}.png", f"{sid}.png") if suffix == "surface" else (f"{sid}_{suffix}.png",):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no {suffix} map for image {sid} in {directory}")


def evaluate(surface_maps, gts, ids, cfg, edge_maps=None):
    """Sweep thresholds, then score F1 and MCC at the chosen thresholds."""
    metric = cfg.get("eval.metric")
    mode = cfg.get("eval.sweep_mode")
    grid = cfg.get("eval.grid")
    if edge_maps is None:
        per = _pmap(lambda i: optimal_threshold_sweep([surface_maps[i]], [gts[i]], metric, grid), range(len(ids))) \
            if mode == "per-image" else None
        sweep = optimal_threshold_sweep(surface_maps, gts, metric, grid, mode) if per is None else None
    else:
        per = _pmap(lambda i: optimal_threshold_sweep([surface_maps[i]], [gts[i]], metric, grid,
                                                      edge_maps=[edge_maps[i]]), range(len(ids))) \
            if mode == "per-image" else None
        sweep = optimal_threshold_sweep(surface_maps, gts, metric, grid, mode, edge_maps) if per is None else None
    thresholds = [p.thresholds[0] for p in per] if per is not None else sweep.thresholds
    rows = []
    for i, sid in enumerate(ids):
        t_s, t_e = thresholds[i]
        if t_e is None:
            out = threshold(surface_maps[i], t_s)
        else:
            out = edge_enhanced_combine(surface_maps[i], edge_maps[i], t_s, t_e)
        c = confusion(out, gts[i])
        rows.append(EvalRow(sid, t_s, t_e, f1(c), mcc(c)))
    return rows


def _method_inputs(cfg):
    methods = []
    if "eval.sfcn_maps" in cfg:
        methods.append((METHOD_SFCN, cfg.path("eval.sfcn_maps"), False))
    if "eval.mfcn_maps" in cfg:
        d = cfg.path("eval.mfcn_maps")
        methods.append((METHOD_MFCN, d, False))
        methods.append((METHOD_ENHANCED, d, True))
    if "eval.maps" in cfg:
        methods.append((METHOD_MAPS, cfg.path("eval.maps"), False))
    if not methods:
        raise ConfigError("eval needs at least one of eval.sfcn_maps, eval.mfcn_maps, eval.maps")
    return methods


def _slug(method):
    return method.lower().replace(" ", "_").replace("-", "_")


def cmd_eval(cfg):
    out = _out_dir(cfg)
    conv = cfg.get("mask.convention")
    gt_items = list_images(cfg.path("eval.gt"))
    if not gt_items:
        raise FileNotFoundError(f"no masks in {cfg.get('eval.gt')}")
    methods = _method_inputs(cfg)
    cfg.write(out)
    ids = [sid for sid, _ in gt_items]
    gts = [load_mask(p, conv) for _, p in gt_items]
    summary = []
    for method, directory, enhanced in methods:
        surf = [load_prob_map(_find_map(directory, sid, "surface"), conv) for sid in ids]
        edge = [load_prob_map(_find_map(directory, sid, "edge"), conv) for sid in ids] if enhanced else None
        for sid, s, g in zip(ids, surf, gts):
            if s.shape != g.shape:
                raise ShapeError(f"{method} map for {sid} is {s.shape}, ground truth is {g.shape}")
        rows = evaluate(surf, gts, ids, cfg, edge)
        report = aggregate_and_emit(rows, os.path.join(out, f"eval_{_slug(method)}.csv"),
                                    sweep_mode=cfg.get("eval.sweep_mode"))
        summary.append((method, report))
        print(f"{method}: mean F1 {report.mean_f1:.4f}  mean MCC {report.mean_mcc:.4f}")
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "sweep_mode", "metric", "n_images", "mean_f1", "mean_mcc"])
        for method, rep in summary:
            wr.writerow([method, rep.sweep_mode, cfg.get("eval.metric"), len(rep.rows),
                         repr(rep.mean_f1), repr(rep.mean_mcc)])


# ---------------------------------------------------------------------------
# perturb
# ---------------------------------------------------------------------------

PERTURB_META = (
    "snr_definition=10*log10(var(clean)/noise_var), variance over all channel values\n"
    "blur_kernel=sampled gaussian, radius ceil(3*sigma), normalized, symmetric border reflection\n"
    "jpeg=baseline, 4:2:0, Annex K tables with IJG quality scaling\n"
)


def _perturbations(cfg):
    kinds = cfg.get("perturb.kinds")
    table = []
    for kind in kinds:
        if kind == "jpeg":
            table.append(("jpeg", [(f"quality_{q}", lambda im, i, q=q: jpeg_recompress(im, q))
                                   for q in cfg.get("perturb.jpeg_qualities")]))
        elif kind == "blur":
            table.append(("blur", [(f"sigma_{s:g}", lambda im, i, s=s: gaussian_blur(im, s))
                                   for s in cfg.get("perturb.blur_sigmas")]))
        elif kind == "awgn":
            seed = cfg.get("seed")
            table.append(("awgn", [(f"snr_{d:g}dB", lambda im, i, d=d: add_awgn(im, d, seed * 1_000_003 + i))
                                   for d in cfg.get("perturb.snr_db")]))
        else:
            raise ConfigError(f"unknown perturbation kind {kind!r}")
    return table


def cmd_perturb(cfg):
    out = _out_dir(cfg)
    conv = cfg.get("mask.convention")
    items = list_images(cfg.path("perturb.images"))
    gt_dir = cfg.path("perturb.gt")
    ids = [sid for sid, _ in items]
    images = [read_rgb(p) for _, p in items]
    gts = [load_mask(os.path.join(gt_dir, sid + ".png"), conv) for sid in ids]
    models = []
    if "perturb.sfcn_checkpoint" in cfg:
        models.append((METHOD_SFCN, load_checkpoint(cfg.path("perturb.sfcn_checkpoint"))))
    if "perturb.mfcn_checkpoint" in cfg:
        models.append((METHOD_MFCN, load_checkpoint(cfg.path("perturb.mfcn_checkpoint"))))
    if not models:
        raise ConfigError("perturb needs perturb.sfcn_checkpoint and/or perturb.mfcn_checkpoint")
    table = _perturbations(cfg)
    cfg.write(out)
    with open(os.path.join(out, "perturb_meta.txt"), "w") as fh:
        fh.write(PERTURB_META)

    def scores(imgs):
        res = {}
        for method, model in models:
            maps = _pmap(lambda im: predict_maps(model, im), imgs)
            surf = [m["surface"] for m in maps]
            res[method] = np.mean([r.f1 for r in evaluate(surf, gts, ids, cfg)])
            if "edge" in maps[0]:
                edge = [m["edge"] for m in maps]
                res[METHOD_ENHANCED] = np.mean([r.f1 for r in evaluate(surf, gts, ids, cfg, edge)])
        return res

    original = scores(images)
    for kind, levels in table:
        cols = {"original": original}
        for label, fn in levels:
            cols[label] = scores([fn(im, i) for i, im in enumerate(images)])
        with open(os.path.join(out, f"{kind}.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["method"] + list(cols))
            for method in original:
                wr.writerow([method] + [repr(float(cols[c][method])) for c in cols])
        print(f"wrote {kind}.csv")


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(cfg):
    results = gradsuite.run_suite(seed=cfg.get("seed"), eps=cfg.get("gradcheck.eps"))
    ok = True
    lines = []
    for name, (err, tol) in results.items():
        passed = err <= tol
        ok &= passed
        lines.append(f"{name:<18} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if passed else 'FAIL'}")
    print("\n".join(lines))
    if "out" in cfg:
        out = _out_dir(cfg)
        cfg.write(out)
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0 if ok else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "gradcheck": cmd_gradcheck,
}


def _error(kind, exc):
    msg = " ".join(str(exc).split())
    print(f"splice-mfcn: error: {kind}: {msg}", file=sys.stderr)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="splice-mfcn", description="Splicing localization with SFCN/MFCN.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value config file (optional for gradcheck)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="override the config output directory")
    args = ap.parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "gradcheck":
            from .config import RunConfig
            cfg = RunConfig()
        else:
            raise ConfigError("--config is required")
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        if args.out is not None:
            cfg.set("out", args.out)
        rc = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _error("config", exc)
        return 2
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        _error("path", exc)
        return 3
    except ShapeError as exc:
        _error("shape", exc)
        return 4
    except (ValueError, OSError) as exc:
        _error("value", exc)
        return 5
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
