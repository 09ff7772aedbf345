"""Training orchestration, evaluation, and checkpointing.

The loop is functionally seeded: batch composition and per-sample
augmentation draw from generators keyed on (seed, iteration, sample id),
so a resumed run replays exactly the stream an uninterrupted run would
see. Checkpoints use a self-describing manifest + raw array payload that
round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_config
from .data import SampleRecord, augment, denormalize_image, generate_synthetic, load_voc_style
from .errors import CheckpointError, CheckpointVersionError, DataError, DivergenceError
from .losses import (LossReport, loss_affinity, loss_c2s, loss_cls, loss_s2c,
                     mask_confident_cls, mask_confident_seg, total_loss)
from .model import (ImageBatch, TwinBranchNet, extract_features, localization_seed,
                    object_prior, ofd_scale, segment, upsample_bilinear)
from .propagation import (AffinityHead, BackgroundScore, BgOrigin, PropagationKernel,
                          bsp_wrap, classification_segmap, fixed_bg_wrap)
from .pseudo import (IGNORE_INDEX, argmax_labels, downsample_labels_nearest,
                     export_label_png, filter_absent_classes, fuse_multiscale,
                     reliable_labels, seed_normalize)

CHECKPOINT_MAGIC = b"TWSG"
CHECKPOINT_VERSION = "1"

METRIC_FIELDS = ("iteration", "lr", "l_cls", "l_c2s", "l_s2c", "l_aff", "total")


def poly_lr(iteration: int, cfg: RunConfig) -> float:
    """lr0 * (1 - iter/total)^power."""
    frac = 1.0 - iteration / cfg.total_iterations
    return cfg.optimizer.lr0 * frac ** cfg.optimizer.poly_power


@dataclass
class StageFlags:
    c2s_on: bool
    s2c_on: bool
    bsp_on: bool


def stage_gate(iteration: int, cfg: RunConfig) -> StageFlags:
    sup = cfg.supervision
    return StageFlags(
        c2s_on=iteration >= sup.warmup_c2s,
        s2c_on=iteration >= sup.warmup_s2c and cfg.s2c_enabled,
        bsp_on=iteration >= sup.bsp_start and cfg.bsp_enabled,
    )


@dataclass
class ModelBundle:
    net: TwinBranchNet
    aff: AffinityHead

    def parameters(self):
        return list(self.net.parameters()) + list(self.aff.parameters())

    def train(self):
        self.net.train()
        self.aff.train()

    def eval(self):
        self.net.eval()
        self.aff.eval()


@dataclass
class TrainState:
    iteration: int
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    seed: int
    history: list = field(default_factory=list)


def build_bundle(cfg: RunConfig) -> ModelBundle:
    torch.manual_seed(cfg.seed)
    net = TwinBranchNet(cfg.model, cfg.data.synthetic.num_classes)
    aff = AffinityHead(cfg.model.attn_heads)
    return ModelBundle(net=net, aff=aff)


def init_state(cfg: RunConfig) -> TrainState:
    bundle = build_bundle(cfg)
    opt = torch.optim.AdamW(bundle.parameters(), lr=cfg.optimizer.lr0,
                            weight_decay=cfg.optimizer.weight_decay)
    return TrainState(iteration=0, bundle=bundle, optimizer=opt, seed=cfg.seed)


def load_split(cfg: RunConfig) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """(train, val) records per the data config."""
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.data.synthetic)
    root = Path(cfg.data.root)
    k = cfg.data.synthetic.num_classes
    if (root / "train").is_dir():
        train = load_voc_style(root / "train", k).records()
        val_dir = root / "val"
        val = load_voc_style(val_dir, k).records() if val_dir.is_dir() else train
        return train, val
    recs = load_voc_style(root, k).records()
    return recs, recs


def make_batch(records, cfg: RunConfig, iteration: int) -> ImageBatch:
    """Deterministic batch: indices and augmentations keyed on (seed, iteration)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11CE, iteration]))
    idx = rng.integers(0, len(records), size=cfg.batch_size)
    pixels, labels, ids = [], [], []
    for i in idx:
        rec = records[int(i)]
        if rec.labels.sum() == 0:
            raise DataError(f"training sample {rec.id!r} has no positive class label")
        arng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed, iteration, zlib.crc32(rec.id.encode())]))
        rec = augment(rec, arng, cfg.data)
        pixels.append(rec.image)
        labels.append(rec.labels)
        ids.append(rec.id)
    return ImageBatch(pixels=torch.stack(pixels), labels=torch.stack(labels), ids=ids)


def _forward_branches(bundle: ModelBundle, batch: ImageBatch, cfg: RunConfig,
                      kernel: PropagationKernel, flags: StageFlags):
    """Shared forward: image logits, normalized seed, S^s, S^c, attention."""
    h, w = batch.pixels.shape[-2:]
    feats = extract_features(batch, bundle.net.encoder)
    seed_raw = localization_seed(feats.levels[3], bundle.net.cls_head)
    logits_img = seed_raw.amax(dim=(-2, -1))
    seed_norm = seed_normalize(seed_raw)
    prior = object_prior(seed_norm)
    feats_seg = ofd_scale(feats, prior, cfg.model.detach_prior) if cfg.ofd_enabled else feats
    s_s = segment(feats_seg, bundle.net.decoder, bundle.net.seg_head, (h, w))
    # S^c only needs a graph while L_s2c is live; skipping it elsewhere
    # keeps the propagation forward cheap
    with torch.set_grad_enabled(torch.is_grad_enabled() and flags.s2c_on):
        seed_up = upsample_bilinear(seed_norm, (h, w))
        if flags.bsp_on:
            bg = BackgroundScore(map=s_s.probs[:, 0], origin=BgOrigin.SEG_BRANCH)
            s_hat = bsp_wrap(seed_up, bg)
        else:
            s_hat = fixed_bg_wrap(seed_up, cfg.fixed_bg)
        rgb = denormalize_image(batch.pixels)
        s_c = classification_segmap(s_hat, rgb, kernel)
    return logits_img, seed_norm, s_s, s_c, feats.attention


def train_step(batch: ImageBatch, state: TrainState, cfg: RunConfig,
               kernel: PropagationKernel | None = None) -> tuple[TrainState, LossReport]:
    if kernel is None:
        kernel = PropagationKernel.from_config(cfg.kernel)
    it = state.iteration
    flags = stage_gate(it, cfg)
    bundle = state.bundle
    bundle.train()

    logits_img, seed_norm, s_s, s_c, attention = _forward_branches(
        bundle, batch, cfg, kernel, flags)

    # pseudo labels and masks: detached, class-filtered at argmax time only
    y_c = argmax_labels(filter_absent_classes(s_c.probs.detach(), batch.labels))
    y_s = argmax_labels(filter_absent_classes(s_s.probs.detach(), batch.labels))
    m_c = mask_confident_cls(s_c.probs.detach(), cfg.supervision.sigma_c)
    m_s = mask_confident_seg(s_s.probs.detach(), y_s, cfg.supervision.sigma_s)

    l_cls = loss_cls(logits_img, batch.labels)
    l_c2s = loss_c2s(s_s, y_c, m_c)
    l_s2c = loss_s2c(s_c, y_s, m_s)

    s4 = cfg.model.strides[-1]
    hw4 = tuple(d // s4 for d in batch.pixels.shape[-2:])
    y_low = downsample_labels_nearest(reliable_labels(y_c, m_c), hw4)
    a = bundle.aff(attention)
    l_aff = loss_affinity(a, y_low)

    report = total_loss(l_cls, l_c2s, l_s2c, l_aff, cfg.supervision, it,
                        s2c_enabled=cfg.s2c_enabled)
    if not torch.isfinite(report.total):
        raise DivergenceError(
            f"non-finite loss at iteration {it}: cls={report.l_cls} "
            f"c2s={report.l_c2s} s2c={report.l_s2c} aff={report.l_aff}")

    lr = poly_lr(it, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    state.optimizer.step()

    state.iteration = it + 1
    state.history.append({"iteration": it, "lr": lr, **report.as_dict()})
    return state, report


@dataclass
class EvalReport:
    which: str
    miou: float
    per_class: list
    confusion: np.ndarray

    def lines(self) -> list[str]:
        out = [f"branch: {self.which}", f"miou: {self.miou:.4f}"]
        for k, v in enumerate(self.per_class):
            name = "background" if k == 0 else f"class_{k - 1}"
            out.append(f"iou[{name}]: " + ("n/a" if np.isnan(v) else f"{v:.4f}"))
        return out


def accumulate_confusion(pred, gt, cm: np.ndarray) -> np.ndarray:
    """cm[g][p] += pixel counts, skipping ignore ground truth."""
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    if isinstance(gt, torch.Tensor):
        gt = gt.detach().cpu().numpy()
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    n = cm.shape[0]
    if (pred == IGNORE_INDEX).any():
        raise ValueError("predictions must not contain the ignore value")
    keep = gt != IGNORE_INDEX
    p = pred[keep]
    g = gt[keep]
    if p.size and (p.min() < 0 or p.max() >= n):
        raise ValueError("prediction label out of range")
    if g.size and (g.min() < 0 or g.max() >= n):
        raise ValueError("ground-truth label out of range")
    cm += np.bincount(g * n + p, minlength=n * n).reshape(n, n).astype(cm.dtype)
    return cm


def miou(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN when a class never occurs) and their mean."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    mean = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return iou, mean


def evaluate(bundle: ModelBundle, records, cfg: RunConfig, which: str,
             iteration: int | None = None, export_dir=None) -> EvalReport:
    """Score one branch against ground-truth masks.

    SEED: normalized seed -> class filter -> background wrap (per stage) ->
    propagation -> argmax, single scale. SEG: multi-scale/flip fusion of the
    segmentation map -> argmax, no filtering.
    """
    if which not in ("seed", "seg"):
        raise ValueError(f"which must be 'seed' or 'seg', got {which!r}")
    if iteration is None:
        iteration = cfg.total_iterations
    flags = stage_gate(iteration, cfg)
    kernel = PropagationKernel.from_config(cfg.kernel)
    k = cfg.data.synthetic.num_classes
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    bundle.eval()
    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for rec in records:
            if rec.gt_mask is None:
                raise DataError(f"sample {rec.id!r} has no ground-truth mask")
            if which == "seg":
                def infer(img: torch.Tensor) -> torch.Tensor:
                    b = ImageBatch(pixels=img.unsqueeze(0),
                                   labels=rec.labels.unsqueeze(0), ids=[rec.id])
                    _, _, s_s, _, _ = _forward_branches(bundle, b, cfg, kernel, flags)
                    return s_s.probs[0]
                fused = fuse_multiscale(infer, rec.image, cfg.eval.scales, cfg.eval.flip)
                pred = argmax_labels(fused.probs)
            else:
                b = ImageBatch(pixels=rec.image.unsqueeze(0),
                               labels=rec.labels.unsqueeze(0), ids=[rec.id])
                h, w = rec.image.shape[-2:]
                feats = extract_features(b, bundle.net.encoder)
                seed_raw = localization_seed(feats.levels[3], bundle.net.cls_head)
                seed_norm = seed_normalize(seed_raw)
                filtered = filter_absent_classes(seed_norm, b.labels)
                seed_up = upsample_bilinear(filtered, (h, w))
                if flags.bsp_on:
                    prior = object_prior(seed_norm)
                    feats_seg = (ofd_scale(feats, prior, cfg.model.detach_prior)
                                 if cfg.ofd_enabled else feats)
                    s_s = segment(feats_seg, bundle.net.decoder, bundle.net.seg_head, (h, w))
                    s_hat = bsp_wrap(seed_up, BackgroundScore(
                        map=s_s.probs[:, 0], origin=BgOrigin.SEG_BRANCH))
                else:
                    s_hat = fixed_bg_wrap(seed_up, cfg.fixed_bg)
                rgb = denormalize_image(b.pixels)
                s_c = classification_segmap(s_hat, rgb, kernel)
                pred = argmax_labels(s_c.probs)[0]
            accumulate_confusion(pred, rec.gt_mask, cm)
            if export_dir is not None:
                export_label_png(pred, export_dir / f"{rec.id}.png")
    per_class, mean = miou(cm)
    return EvalReport(which=which, miou=mean, per_class=per_class.tolist(), confusion=cm)


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.bundle.net.state_dict().items():
        arrays[f"net.{name}"] = t.detach().cpu().numpy()
    for name, t in state.bundle.aff.state_dict().items():
        arrays[f"aff.{name}"] = t.detach().cpu().numpy()
    opt_state = state.optimizer.state_dict()["state"]
    for idx, entry in opt_state.items():
        for key, t in entry.items():
            arrays[f"opt.{idx}.{key}"] = (
                t.detach().cpu().numpy() if isinstance(t, torch.Tensor)
                else np.asarray(t, dtype=np.float64))
    return arrays


def checkpoint_save(state: TrainState, path) -> Path:
    path = Path(path)
    arrays = _state_arrays(state)
    manifest_arrays = []
    payload = bytearray()
    for name in sorted(arrays):
        # tobytes() emits C order for any layout; ascontiguousarray would
        # promote 0-dim scalars (AdamW step counters) to shape (1,)
        arr = arrays[name]
        raw = arr.tobytes()
        manifest_arrays.append({
            "dtype": arr.dtype.str, "name": name, "nbytes": len(raw),
            "offset": len(payload), "shape": list(arr.shape),
        })
        payload.extend(raw)
    manifest = {
        "arrays": manifest_arrays,
        "iteration": state.iteration,
        "seed": state.seed,
        "version": CHECKPOINT_VERSION,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    return path


def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (blob_len,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + blob_len:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(raw[12:12 + blob_len])
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(str(manifest.get("version")), CHECKPOINT_VERSION)
    payload = raw[12 + blob_len:]
    expected = max((a["offset"] + a["nbytes"] for a in manifest["arrays"]), default=0)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest expects {expected}")
    arrays = {}
    for a in manifest["arrays"]:
        buf = payload[a["offset"]:a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(buf, dtype=np.dtype(a["dtype"])).reshape(
            a["shape"]).copy()
    return manifest, arrays


def checkpoint_load(path, cfg: RunConfig) -> TrainState:
    manifest, arrays = _read_checkpoint(path)
    state = init_state(cfg)
    state.iteration = int(manifest["iteration"])
    state.seed = int(manifest["seed"])

    def take(prefix: str) -> dict[str, torch.Tensor]:
        return {name[len(prefix):]: torch.from_numpy(arr)
                for name, arr in arrays.items() if name.startswith(prefix)}

    try:
        state.bundle.net.load_state_dict(take("net."))
        state.bundle.aff.load_state_dict(take("aff."))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch: {exc}") from exc
    opt_entries: dict[int, dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        opt_entries.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    if opt_entries:
        sd = state.optimizer.state_dict()
        sd["state"] = opt_entries
        state.optimizer.load_state_dict(sd)
    return state


def _append_metrics(fh, entry: dict) -> None:
    fh.write(",".join(f"{entry[k]:.17g}" if isinstance(entry[k], float) else str(entry[k])
                      for k in METRIC_FIELDS) + "\n")
    fh.flush()


def train(cfg: RunConfig, out_dir, resume=None, quiet: bool = True) -> TrainState:
    """Run the full staged loop; writes metrics.csv, eval.csv, checkpoint.twsg."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    train_recs, val_recs = load_split(cfg)
    state = checkpoint_load(resume, cfg) if resume else init_state(cfg)
    kernel = PropagationKernel.from_config(cfg.kernel)

    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    fresh = state.iteration == 0
    with open(metrics_path, "w" if fresh else "a") as mf, \
         open(eval_path, "w" if fresh else "a") as ef:
        if fresh:
            mf.write(",".join(METRIC_FIELDS) + "\n")
            ef.write("iteration,branch,miou\n")
        while state.iteration < cfg.total_iterations:
            batch = make_batch(train_recs, cfg, state.iteration)
            state, report = train_step(batch, state, cfg, kernel)
            _append_metrics(mf, state.history[-1])
            it = state.iteration
            if it % cfg.eval.cadence == 0 or it == cfg.total_iterations:
                for which in ("seed", "seg"):
                    rep = evaluate(state.bundle, val_recs, cfg, which, iteration=it)
                    ef.write(f"{it},{which},{rep.miou:.17g}\n")
                    ef.flush()
                    if not quiet:
                        print(f"[{it}] {which} miou {rep.miou:.4f}")
    checkpoint_save(state, out / "checkpoint.twsg")
    return state
