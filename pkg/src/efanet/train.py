"""Training, evaluation, and prediction drivers used by the CLI."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataio, metrics, pipeline
from .checkpoint import save_checkpoint
from .config import RunConfig
from .engine import Adam, Tensor, no_grad, resize_bilinear_np
from .model import EFANet, total_loss
from .pipeline import AugConfig, SegSample


class NumericFailure(RuntimeError):
    """Raised when a NaN/Inf loss is detected; carries the last-good path."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def _round_to_32(x):
    return max(32, int(round(x / 32.0)) * 32)


def _batch_tensors(samples, dtype):
    image = np.stack([s.image for s in samples]).astype(dtype)
    mask = np.stack([s.mask for s in samples])
    edge = np.stack([s.edge for s in samples])
    return Tensor(image), mask, edge


def load_split(manifest_path, split, radius=1):
    records = dataio.read_manifest(manifest_path)
    wanted = [r for r in records if r[3] == split]
    return [pipeline.load_sample(r, radius) for r in wanted]


def train(cfg: RunConfig, log_fn=None):
    """Run the full training loop; returns the final checkpoint path.

    Per batch: pick one of the configured scale ratios, resize, augment,
    forward, loss, Adam step.  Loss lines go to <out_dir>/train_log.tsv.
    """
    out_dir = cfg.train.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if not cfg.train.manifest:
        raise ValueError("train: no dataset manifest configured")
    samples = load_split(cfg.train.manifest, "train",
                         cfg.aug.edge_dilation_radius)
    if not samples:
        raise ValueError(f"train: no 'train' records in {cfg.train.manifest}")
    for s in samples:
        h, w = s.mask.shape[-2:]
        if h != w:
            raise ValueError(f"train: sample {s.id} is not square ({h}x{w})")

    dtype = cfg.np_dtype()
    model = EFANet(cfg.model, seed=cfg.train.seed, dtype=dtype)
    model.train()
    opt = Adam(model.parameters(), lr=cfg.optim.lr, beta1=cfg.optim.beta1,
               beta2=cfg.optim.beta2, eps=cfg.optim.eps)

    rng = np.random.default_rng(cfg.train.seed)
    log_path = os.path.join(out_dir, "train_log.tsv")
    final_path = os.path.join(out_dir, "final.efac")
    last_ckpt = None
    step = 0
    start = time.time()
    ratios = cfg.aug.scale_ratios if cfg.train.multiscale else (1.0,)

    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tepoch\tseg1\tseg2\tseg3\tseg4\tedge\ttotal\n")
        for epoch in range(cfg.optim.epochs):
            if step >= cfg.optim.max_steps:
                break
            order = rng.permutation(len(samples))
            bs = cfg.optim.batch_size
            for lo in range(0, len(order) - bs + 1, bs):
                if step >= cfg.optim.max_steps:
                    break
                idx = order[lo:lo + bs]
                ratio = float(ratios[rng.integers(0, len(ratios))])
                size = _round_to_32(cfg.aug.target_size * ratio)
                batch = []
                for i in idx:
                    s = pipeline.rescale(samples[i], size=size,
                                         radius=cfg.aug.edge_dilation_radius)
                    batch.append(pipeline.augment(s, rng, cfg.aug))
                image, mask, edge = _batch_tensors(batch, dtype)
                out = model(image)
                loss = total_loss(out, mask, edge, cfg.model)
                seg_vals, edge_val, total_val = loss.values()
                if not np.isfinite(total_val):
                    raise NumericFailure(
                        f"non-finite loss at step {step}", last_ckpt)
                loss.total.backward()
                opt.step()
                step += 1
                line = (f"{step}\t{epoch}\t" +
                        "\t".join(f"{v:.6f}" for v in seg_vals) +
                        f"\t{edge_val:.6f}\t{total_val:.6f}")
                log.write(line + "\n")
                if log_fn is not None:
                    log_fn(step, epoch, total_val)
            opt.lr *= cfg.optim.lr_decay
            if (epoch + 1) % cfg.optim.checkpoint_interval == 0:
                path = os.path.join(out_dir, f"epoch{epoch + 1:04d}.efac")
                save_checkpoint(path, model, cfg, step=step)
                last_ckpt = path

    save_checkpoint(final_path, model, cfg, step=step)
    elapsed = time.time() - start
    return final_path, step, elapsed


def predict_probability(model, image, target_size, dtype=np.float32):
    """Sigmoid of the finest side output, resized back to the input size."""
    c, h, w = image.shape
    resized = np.clip(resize_bilinear_np(image, target_size, target_size,
                                         align_corners=False), 0.0, 1.0)
    with no_grad():
        out = model(Tensor(resized[None].astype(dtype)))
        logits = out.side_logits[0].data[0, 0]
    prob = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    if (h, w) != prob.shape:
        prob = np.clip(resize_bilinear_np(prob, h, w, align_corners=False),
                       0.0, 1.0)
    return prob


def evaluate(model, cfg: RunConfig, manifest_path, split="test",
             oracle_mode=False, workers=None):
    """Evaluate on one manifest split; returns (MetricReport, CurveSet)."""
    model.eval()
    records = dataio.read_manifest(manifest_path)
    wanted = [r for r in records if r[3] == split]
    if not wanted:
        raise ValueError(f"no '{split}' records in {manifest_path}")
    if workers is None:
        workers = int(os.environ.get("EFANET_THREADS", "1"))

    def run_one(record):
        sample = pipeline.load_sample(record, cfg.aug.edge_dilation_radius)
        if oracle_mode:
            prob = sample.mask[0].astype(np.float64)
        else:
            prob = predict_probability(model, sample.image,
                                       cfg.aug.target_size, cfg.np_dtype())
        rec = metrics.evaluate_pair(prob, sample.mask[0], sample.id,
                                    cfg.eval.threshold)
        return rec, (prob, sample.mask[0])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, wanted))
    else:
        results = [run_one(r) for r in wanted]

    report = metrics.MetricReport(records=[r for r, _ in results],
                                  threshold=cfg.eval.threshold)
    curves = metrics.pr_curves([pair for _, pair in results])
    return report, curves


def write_eval_outputs(out_dir, report, curves):
    os.makedirs(out_dir, exist_ok=True)
    metrics.write_report_tsv(os.path.join(out_dir, "report.tsv"), report)
    metrics.write_curves_tsv(os.path.join(out_dir, "curves.tsv"), curves)
    metrics.write_bucket_tsv(os.path.join(out_dir, "buckets.tsv"),
                             report.bucket_report())
