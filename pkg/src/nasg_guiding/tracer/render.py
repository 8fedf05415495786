"""Progressive render loop: render 1 spp, collect, train, publish, accumulate."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..config import RunConfig
from ..guider import BlendSchedule, Guider, SampleBuffer, TrainingLog, blend_coefficient, make_model, stride_update
from .film import Accumulator, mape
from .integrator import GuideContext, TraceStats, trace_paths
from .scene import Scene

log = logging.getLogger(__name__)

CHUNK = 4096


def render_samples(scene: Scene, pixel, iteration, seed: int, guide: Optional[GuideContext] = None,
                   collect=None, threads: int = 1, max_depth: int = 16, rr_depth: int = 5, chunk: int = CHUNK):
    """Trace paths in fixed-size chunks (optionally on a thread pool) and merge in order."""
    pixel = np.asarray(pixel, dtype=np.int64)
    iteration = np.broadcast_to(np.asarray(iteration, dtype=np.int64), pixel.shape)
    b = np.broadcast_to(np.asarray(guide.b if guide else 0.0, dtype=np.float64), pixel.shape)
    starts = list(range(0, len(pixel), chunk))

    def work(s):
        sl = slice(s, s + chunk)
        g = None if guide is None else GuideContext(guide.guider, guide.snapshot, b[sl])
        c = None if collect is None else collect[sl]
        return trace_paths(scene, pixel[sl], iteration[sl], seed, g, c, max_depth, rr_depth)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    radiance = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 3))
    stats = TraceStats()
    for p in parts:
        stats.merge(p[2])
    recs = [p[1] for p in parts if p[1] is not None]
    records = {k: np.concatenate([r[k] for r in recs]) for k in recs[0]} if recs else None
    return radiance, records, stats


def collection_mask(width: int, height: int, stride: float, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen pixel per stride x stride tile."""
    mask = np.zeros(height * width, dtype=bool)
    if stride <= 1.0:
        mask[:] = True
        return mask
    nx, ny = math.ceil(width / stride), math.ceil(height / stride)
    tx, ty = np.meshgrid(np.arange(nx), np.arange(ny))
    x0 = np.floor(tx.ravel() * stride).astype(int)
    x1 = np.minimum(np.floor((tx.ravel() + 1) * stride).astype(int), width)
    y0 = np.floor(ty.ravel() * stride).astype(int)
    y1 = np.minimum(np.floor((ty.ravel() + 1) * stride).astype(int), height)
    x1 = np.maximum(x1, x0 + 1)
    y1 = np.maximum(y1, y0 + 1)
    px = x0 + np.floor(rng.random(len(x0)) * (x1 - x0)).astype(int)
    py = y0 + np.floor(rng.random(len(y0)) * (y1 - y0)).astype(int)
    mask[np.minimum(py, height - 1) * width + np.minimum(px, width - 1)] = True
    return mask


@dataclass
class RenderResult:
    image: np.ndarray
    accumulator: Accumulator
    rows: list = field(default_factory=list)  # convergence rows
    stats: TraceStats = field(default_factory=TraceStats)
    guider: Optional[Guider] = None
    training: Optional[TrainingLog] = None
    checkpoints: dict = field(default_factory=dict)


class ProgressiveRenderer:
    """Online-learning renderer; one call to :meth:`step` renders and trains one iteration."""

    def __init__(self, scene: Scene, config: RunConfig, reference=None, train_log_path=None):
        self.scene = scene
        self.config = config
        self.reference = reference
        cam = scene.camera
        self.acc = Accumulator(cam.height, cam.width, config.blend_interval, config.blend_steps, config.ramp)
        self.schedule = BlendSchedule(config.blend_interval, config.blend_steps, 0)
        self.guider = None
        self.buffer = SampleBuffer(config.capacity)
        self.stride = 1.0
        self.stats = TraceStats()
        self.rows = []
        self.training = None
        if config.guided:
            self.guider = Guider(
                make_model(config.model, config.components), (scene.bounds_min, scene.bounds_max),
                seed=config.seed, lr=config.lr, e=config.kl_blend, capacity=config.capacity,
                batch_size=config.batch_size, step_factor=config.step_factor,
            )
            self.training = TrainingLog(train_log_path)
        self.t0 = time.perf_counter()

    @property
    def iteration(self) -> int:
        return self.schedule.i

    def step(self, train: bool = True) -> np.ndarray:
        cfg = self.config
        cam = self.scene.camera
        i = self.schedule.i
        b = blend_coefficient(self.schedule)
        pixels = np.arange(cam.n_pixels)
        guide = None
        collect = None
        if self.guider is not None:
            guide = GuideContext(self.guider, self.guider.snapshot, b)
            if train:
                collect = collection_mask(cam.width, cam.height, self.stride,
                                          np.random.default_rng([cfg.seed, 2, i]))
        frame, records, stats = render_samples(
            self.scene, pixels, i, cfg.seed, guide, collect, cfg.threads, cfg.max_depth, cfg.rr_depth
        )
        self.stats.merge(stats)
        frame = frame.reshape(cam.height, cam.width, 3)
        self.acc.add_frame(frame, i)

        size, loss = 0, float("nan")
        if self.guider is not None and train:
            if records is not None:
                self.buffer.add(**records)
            collected = self.buffer.merge(np.random.default_rng([cfg.seed, 3, i]))
            self.stride = stride_update(self.stride, collected, cfg.capacity)
            size = len(self.buffer)
            tstats = self.guider.train_iteration(self.buffer, b, i)
            loss = tstats["loss"]
            self.buffer.clear()
            self.training.record(i, size, loss, b)

        err = mape(self.acc.image(), self.reference) if self.reference is not None else float("nan")
        self.rows.append((i, err, b, size, time.perf_counter() - self.t0))
        self.schedule.i += 1
        return frame

    def image(self) -> np.ndarray:
        return self.acc.image()


def run_progressive(scene: Scene, config: RunConfig, reference=None, train_log_path=None,
                    on_checkpoint=None) -> RenderResult:
    r = ProgressiveRenderer(scene, config, reference, train_log_path)
    checkpoints = {}
    for it in range(config.spp):
        r.step()
        if r.stats.nonfinite:
            log.warning("%d non-finite paths discarded so far", r.stats.nonfinite)
        n = it + 1
        if n in config.checkpoints:
            checkpoints[n] = r.image()
            if on_checkpoint is not None:
                on_checkpoint(n, checkpoints[n])
    return RenderResult(r.image(), r.acc, r.rows, r.stats, r.guider, r.training, checkpoints)


def render_reference(scene: Scene, spp: int, seed: int, threads: int = 1, batch: int = 64,
                     max_depth: int = 16, rr_depth: int = 5) -> np.ndarray:
    """Unguided equal-weight mean; ``batch`` iterations are traced per vectorized pass."""
    cam = scene.camera
    acc = Accumulator(cam.height, cam.width, ramp=False)
    n = cam.n_pixels
    for start in range(0, spp, batch):
        its = np.arange(start, min(spp, start + batch))
        pix = np.tile(np.arange(n), len(its))
        itv = np.repeat(its, n)
        vals, _, _ = render_samples(scene, pix, itv, seed, None, None, threads, max_depth, rr_depth, chunk=16384)
        acc.add_samples(pix, itv, vals)
    return acc.image()
