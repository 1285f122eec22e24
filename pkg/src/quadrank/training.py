"""End-to-end training loop: quadruple sampling, forward/backward over
the response model, hinge-loss gradients, Adadelta updates.

Each epoch draws one correspondence pair, samples a quadruple pool from
it, and iterates full batches (remainder dropped). All four patches of a
batch go through the model jointly, so batchnorm statistics cover the
4 x batch_size patch set. Fully deterministic for a given seed.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adadelta import AdadeltaState, NonFiniteGradient, adadelta_step
from .correspond import (
    ROTATION_INVARIANCE,
    SCALE_AUGMENTATION,
    TransformClass,
    WarpSpec,
    make_warp_pair,
    sample_epoch,
    sample_quadruples,
)
from .model import ResponseModel, build_model, save_model
from .ranking import batch_loss, hinge_grad

SOURCE_KINDS = ("warp-small", "warp-large", "aligned")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "linear"
    epochs: int = 200
    quads_per_pair: int = 2000
    batch_size: int = 256
    seed: int = 0
    source: str = "warp-small"
    heldout_quads: int = 1000
    checkpoint_every: int = 0
    checkpoint_path: Path | None = None
    invariance: TransformClass = ROTATION_INVARIANCE
    augmentation: TransformClass = SCALE_AUGMENTATION

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.quads_per_pair < 1 or self.batch_size < 1:
            raise ValueError("counts must be >= 1")
        if self.batch_size > self.quads_per_pair:
            raise ValueError("batch_size must not exceed quads_per_pair")
        if self.source not in SOURCE_KINDS:
            raise ValueError(f"unknown source {self.source!r}, expected one of {SOURCE_KINDS}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    misrank: float
    heldout_misrank: float
    seconds: float
    rng_digest: str


@dataclass
class TrainLog:
    initial_heldout_misrank: float = float("nan")
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, comment: str = "") -> str:
        """Deterministic CSV (wall time deliberately excluded)."""
        lines = []
        if comment:
            lines.append(f"# {comment}")
        lines.append(f"# initial_heldout_misrank={self.initial_heldout_misrank:.6f}")
        lines.append("epoch,mean_loss,misrank,heldout_misrank,rng_digest")
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.mean_loss:.6f},{r.misrank:.6f},{r.heldout_misrank:.6f},{r.rng_digest}"
            )
        return "\n".join(lines) + "\n"


def warp_sources(images: list[np.ndarray], kind: str) -> list:
    """One fresh-warp generator per base image."""
    stretch = {"warp-small": 1.1, "warp-large": 2.0}[kind]

    def generator(img):
        return lambda rng: make_warp_pair(img, WarpSpec.sample(rng, stretch))

    return [generator(img) for img in images]


def _rng_digest(rng: np.random.Generator) -> str:
    state = repr(rng.bit_generator.state).encode()
    return hashlib.sha256(state).hexdigest()[:16]


def _heldout_pool(sources, n: int, rng, invariance, augmentation) -> np.ndarray:
    """(4, n, 17, 17) monitoring quadruples drawn across random sources."""
    chunks = []
    remaining = n
    while remaining > 0:
        take = min(remaining, max(1, n // 4))
        idx = int(rng.integers(len(sources)))
        source = sources[idx]
        pair = source(rng) if callable(source) else source
        pool = sample_quadruples(pair, take, rng, invariance, augmentation)
        chunks.append(pool.patches)
        remaining -= take
    return np.concatenate(chunks, axis=1)


def heldout_misrank(model: ResponseModel, patches: np.ndarray) -> float:
    """Misrank fraction of a (4, n, 17, 17) quadruple set in eval mode."""
    n = patches.shape[1]
    h, _ = model.forward(patches.reshape(4 * n, 17, 17), train=False)
    h = h.reshape(4, n)
    _, frac = batch_loss(h[0], h[1], h[2], h[3])
    return frac


def train(config: TrainConfig, sources: list, progress=None):
    """Run the training loop; returns (model, TrainLog).

    `sources` holds CorrespondencePair objects and/or callables(rng)
    producing them (see warp_sources). `progress`, when given, is called
    with each EpochRecord as it completes.
    """
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    model_seed, train_seed, heldout_seed = ss.spawn(3)
    model = build_model(config.arch, seed=model_seed)
    rng = np.random.Generator(np.random.PCG64(train_seed))
    rng_held = np.random.Generator(np.random.PCG64(heldout_seed))

    log = TrainLog()
    if config.heldout_quads > 0:
        held = _heldout_pool(
            sources, config.heldout_quads, rng_held, config.invariance, config.augmentation
        )
        log.initial_heldout_misrank = heldout_misrank(model, held)
    else:
        held = None

    state = AdadeltaState.for_params(model.params())
    last_checkpoint: Path | None = None
    b = config.batch_size
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        _, pool = sample_epoch(
            sources, config.quads_per_pair, b, rng, config.invariance, config.augmentation
        )
        losses = []
        misranks = []
        for batch in pool.batches(b):
            x = batch.reshape(4 * b, 17, 17)
            h, caches = model.forward(x, train=True)
            h = h.reshape(4, b)
            loss_vec, (g1, g2, g3, g4) = hinge_grad(h[0], h[1], h[2], h[3])
            mean_loss, misrank = batch_loss(h[0], h[1], h[2], h[3])
            if not np.isfinite(mean_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}"
                    + (f"; last checkpoint: {last_checkpoint}" if last_checkpoint else "")
                )
            upstream = np.concatenate([g1, g2, g3, g4]) / b
            grads = model.backward(caches, upstream)
            try:
                adadelta_step(state, model.params(), grads)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(
                    f"{exc} (epoch {epoch})"
                    + (f"; last checkpoint: {last_checkpoint}" if last_checkpoint else "")
                ) from exc
            losses.append(mean_loss)
            misranks.append(misrank)

        record = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            misrank=float(np.mean(misranks)),
            heldout_misrank=heldout_misrank(model, held) if held is not None else float("nan"),
            seconds=time.perf_counter() - t0,
            rng_digest=_rng_digest(rng),
        )
        log.records.append(record)
        if progress is not None:
            progress(record)

        if (
            config.checkpoint_every > 0
            and config.checkpoint_path is not None
            and epoch % config.checkpoint_every == 0
        ):
            path = config.checkpoint_path.with_suffix(f".epoch{epoch:05d}.qrnk")
            save_model(model, path, optimizer_state=state)
            last_checkpoint = path

    return model, log
