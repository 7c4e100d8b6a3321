"""Training loop, evaluation helpers and run configuration."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import numerics as nx
from .model import AvatarModel, ModelConfig
from .render import psnr, rasterize, ssim

BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    frames: tuple = (1, 4)        # inclusive range of input frames per iteration
    iterations: int = 2000
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    peak_lr: float = 1e-4
    warmup: int = 100
    clip: float = 0.1
    weight_decay: float = 0.01
    checkpoint_every: int = 500
    out_dir: str = "run"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.frames = tuple(self.frames)
        lo, hi = self.frames
        if not 1 <= lo <= hi <= 16:
            raise ValueError(f"frames-per-batch range {self.frames} must lie within [1, 16]")
        if self.iterations < 1 or self.warmup < 0 or self.checkpoint_every < 1:
            raise ValueError("iteration counts must be positive")

    def to_dict(self):
        d = asdict(self)
        d["frames"] = list(self.frames)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NumericalAbort(RuntimeError):
    pass


def compute_terms(model, fwd, target, weights):
    """Unweighted loss terms for one supervised view."""
    out = rasterize(fwd.posed, target.cam, background=BACKGROUND)
    terms = {
        "rgb": L.l_color(out.rgb, target.rgb),
        "mask": L.l_mask(out.alpha, target.mask),
        "per": L.l_perceptual(out.rgb, target.rgb),
        "dis": L.l_dis(fwd.posed.centers, fwd.posed.rotations, target.cam, target.mask)
        if weights.dis > 0 else nx.Tensor(0.0),
        "asap": L.l_asap(fwd.canonical.scales),
        "acap": L.l_acap(fwd.canonical.centers, model.anchors.positions, model.pairs),
    }
    return terms, out


def sample_batch(rng, train, frames):
    lo, hi = frames
    n = int(rng.integers(lo, hi + 1))
    inputs = rng.choice(len(train), size=min(n, len(train)), replace=False)
    target = int(rng.integers(len(train)))
    return inputs, target


def train(cfg, scene, log=print):
    """Train on ``scene``; writes loss CSV and checkpoints into ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    model = AvatarModel(cfg.model, scene.body, seed=cfg.seed)
    train_views = scene.split("train")
    if not train_views:
        raise ValueError("scene has no training views")
    rng = np.random.default_rng(cfg.seed)
    sched = nx.LrSchedule(cfg.peak_lr, cfg.warmup, cfg.iterations)
    store = model.store
    header = ["step", "lr"] + list(L.TERMS) + ["total", "grad_norm"]
    t0 = time.time()
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for step in range(cfg.iterations):
            inputs, target = sample_batch(rng, train_views, cfg.frames)
            images = np.stack([train_views[i].rgb for i in inputs])
            tgt = train_views[target]
            store.zero_grad()
            with nx.Tape() as tape:
                fwd = model.forward(images, tgt.pose, rng)
                terms, _ = compute_terms(model, fwd, tgt, cfg.weights)
                total = L.total_loss(terms, cfg.weights)
                values = {k: float(v.data) for k, v in terms.items()}
                if not np.isfinite(total.data):
                    dump = {"step": step, "terms": values, "inputs": inputs.tolist(), "target": target}
                    (out / "nan_dump.json").write_text(json.dumps(dump, indent=1))
                    bad = [k for k, v in values.items() if not np.isfinite(v)]
                    raise NumericalAbort(f"non-finite loss at step {step}; offending terms: {bad or ['total']}")
                tape.backward(total)
            gnorm = nx.clip_grad_norm(store, cfg.clip)
            lr = nx.cosine_lr(sched, step)
            nx.adamw_step(store, lr=lr, weight_decay=cfg.weight_decay)
            writer.writerow([step, repr(lr)] + [repr(values[k]) for k in L.TERMS]
                            + [repr(float(total.data)), repr(gnorm)])
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.iterations:
                model.save(out / "model.ckpt")
                fh.flush()
                log(f"step {step + 1}/{cfg.iterations} loss {float(total.data):.4f} "
                    f"({time.time() - t0:.0f}s)")
    return model


def render_view(model, images, sample, rng):
    fwd = model.forward(images, sample.pose, rng)
    return rasterize(fwd.posed, sample.cam, background=BACKGROUND), fwd


def evaluate(model, scene, split, input_idx, seed=0):
    """PSNR/SSIM of renders of every ``split`` view from the given training-view inputs."""
    train_views = scene.split("train")
    images = np.stack([train_views[i].rgb for i in input_idx])
    rows = []
    for s in scene.split(split):
        out, _ = render_view(model, images, s, np.random.default_rng(seed))
        rows.append({"view": s.name, "psnr": psnr(out.rgb.data, s.rgb), "ssim": ssim(out.rgb.data, s.rgb)})
    return rows


def mean_sigma(model, scene, input_idx, seed=0):
    train_views = scene.split("train")
    images = np.stack([train_views[i].rgb for i in input_idx])
    canon, _, _ = model.encode(images, np.random.default_rng(seed))
    return float(canon.scales.data.mean())
