"""Three-stage modular training.

Stage 1 trains encoder + decoder (and the reconstruction module when enabled).
Stage 2 loads and freezes them, inserts one hourglass and trains only it.
Stage 3 duplicates the trained hourglass, stacks the two copies and fine-tunes
every group end to end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, load_into
from .dataio import Volume
from .model import GROUP_ORDER, Model, NetworkConfig, build_model
from .preproc import gradient_channels, gradient_channels_np, nonzero_mask, normalize_volume
from .tensor import Tensor, masked_rmse, no_grad

log = logging.getLogger(__name__)


class StageDependencyError(RuntimeError):
    """A stage was started without the checkpoints it builds on."""


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    steps_per_stage: int = 500
    seed: int = 0


class Adam:
    """Adaptive-moment gradient descent over unfrozen parameters.

    Frozen parameters get neither moment state nor updates.
    """

    def __init__(self, params, config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            m, v = self.state.get(id(p), (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            g = p.grad
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * g * g
            self.state[id(p)] = (m, v)
            update = c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)
            p.data -= update.astype(p.data.dtype)


# ------------------------------------------------------------------- stages


@dataclass
class StageSpec:
    stage: int
    groups_present: tuple[str, ...]
    groups_trainable: tuple[str, ...]
    init_from: dict[str, tuple[ModelCheckpoint, str]] = field(default_factory=dict)

    @property
    def sbm_count(self) -> int:
        return sum(g.startswith("sbm") for g in self.groups_present)


def stage_spec(
    stage: int,
    rm_enabled: bool,
    stage1: ModelCheckpoint | None = None,
    stage2: ModelCheckpoint | None = None,
) -> StageSpec:
    """Groups, trainability and initialization for one stage of the protocol."""
    base = ("encoder", "decoder") + (("rm",) if rm_enabled else ())
    if stage == 1:
        return StageSpec(1, base, base)
    if stage1 is None:
        raise StageDependencyError(f"stage {stage} needs the stage-1 checkpoint")
    carried = {g: (stage1, g) for g in base}
    if stage == 2:
        return StageSpec(2, _ordered(base + ("sbm1",)), ("sbm1",), carried)
    if stage == 3:
        if stage2 is None:
            raise StageDependencyError("stage 3 needs the stage-2 checkpoint")
        init = dict(carried)
        init["sbm1"] = (stage2, "sbm1")
        init["sbm2"] = (stage2, "sbm1")
        groups = _ordered(base + ("sbm1", "sbm2"))
        return StageSpec(3, groups, groups, init)
    raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


def _ordered(groups) -> tuple[str, ...]:
    return tuple(g for g in GROUP_ORDER if g in groups)


# --------------------------------------------------------------------- data


@dataclass
class SliceData:
    """Stacked training slices, one row per axial slice with a nonempty mask."""

    t1: np.ndarray  # (N, 3, H, W)
    t2: np.ndarray  # (N, 3, H, W)
    mask: np.ndarray  # (N, 1, H, W)
    undersampled: np.ndarray | None = None  # (N, 1, H, W)

    def __len__(self) -> int:
        return self.t1.shape[0]

    def batch(self, idx) -> tuple:
        us = None if self.undersampled is None else self.undersampled[idx]
        return self.t1[idx], us, self.t2[idx], self.mask[idx]

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple]:
        """Endless stream of batches, reshuffled every epoch."""
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(self))
            for start in range(0, len(order) - batch_size + 1, batch_size):
                yield self.batch(np.sort(order[start : start + batch_size]))
            if len(order) < batch_size:
                yield self.batch(order)


def slices_from_volumes(t1: Volume, t2: Volume, undersampled: Volume | None = None) -> SliceData:
    """Normalize a subject and expand it into 3-channel slices with brain masks."""
    if t1.dims != t2.dims:
        raise ValueError(f"T1 {t1.dims} and T2 {t2.dims} differ in shape")
    t1n = normalize_volume(t1).voxels[:, None]
    t2n = normalize_volume(t2).voxels[:, None]
    mask = nonzero_mask(t2n)
    keep = mask.reshape(mask.shape[0], -1).any(axis=1)
    us = None
    if undersampled is not None:
        if undersampled.dims != t1.dims:
            raise ValueError(f"undersampled T2 {undersampled.dims} does not match T1 {t1.dims}")
        us = undersampled.voxels[:, None][keep]
    return SliceData(
        t1=gradient_channels_np(t1n[keep]),
        t2=gradient_channels_np(t2n[keep]),
        mask=mask[keep],
        undersampled=us,
    )


def concat_slices(parts: Sequence[SliceData]) -> SliceData:
    if not parts:
        raise ValueError("no training data")
    has_us = [p.undersampled is not None for p in parts]
    if any(has_us) and not all(has_us):
        raise ValueError("either every subject or none must carry an undersampled T2")
    return SliceData(
        t1=np.concatenate([p.t1 for p in parts]),
        t2=np.concatenate([p.t2 for p in parts]),
        mask=np.concatenate([p.mask for p in parts]),
        undersampled=np.concatenate([p.undersampled for p in parts]) if all(has_us) else None,
    )


# ----------------------------------------------------------------- training


def batch_loss(model: Model, batch) -> Tensor:
    """Mean masked RMSE between gradient-expanded prediction and 3-channel target."""
    t1, us, t2, mask = batch
    if not np.all(mask.reshape(mask.shape[0], -1).any(axis=1)):
        raise ValueError("batch contains a slice with an empty brain mask")
    pred = model(t1, us)
    return masked_rmse(gradient_channels(pred), t2, mask)


def train_step(model: Model, batch, optimizer: Adam, step: int = 0) -> float:
    loss = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergence(step, value)
    model.zero_grad()
    loss.backward()
    optimizer.step()
    return value


def build_stage_model(spec: StageSpec, network: NetworkConfig, seed: int) -> Model:
    config = network.replace(sbm_count=spec.sbm_count, rm_enabled="rm" in spec.groups_present)
    model = build_model(config, seed=seed)
    for group, (ckpt, source) in spec.init_from.items():
        load_into(model, ckpt, groups=[group], sources={group: source})
    model.set_trainable(spec.groups_trainable)
    return model


def train_stage(
    spec: StageSpec,
    opt: OptimizerConfig,
    data: SliceData,
    network: NetworkConfig = NetworkConfig(),
    steps: int | None = None,
    callback=None,
) -> tuple[ModelCheckpoint, list[float]]:
    """Run one stage; returns the checkpoint of all present groups and per-step losses."""
    if data is None or len(data) == 0:
        raise ValueError("empty training data stream")
    if ("rm" in spec.groups_present) != (data.undersampled is not None):
        raise ValueError("reconstruction module and undersampled T2 data must be used together")
    model = build_stage_model(spec, network, seed=opt.seed)
    optimizer = Adam(model.parameters(), opt)
    stream = data.batches(opt.batch_size, seed=opt.seed * 10 + spec.stage)
    steps = opt.steps_per_stage if steps is None else steps
    history = []
    for step in range(steps):
        history.append(train_step(model, next(stream), optimizer, step))
        if callback is not None:
            callback(spec.stage, step, history[-1])
        if step % 50 == 0:
            log.debug("stage %d step %d loss %.5f", spec.stage, step, history[-1])
    return ModelCheckpoint.from_model(model, stage=spec.stage, steps=steps), history


@dataclass
class PipelineResult:
    checkpoints: dict[int, ModelCheckpoint]
    histories: dict[int, list[float]]


def run_pipeline(
    data: SliceData,
    network: NetworkConfig = NetworkConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    steps: Sequence[int] | None = None,
    callback=None,
) -> PipelineResult:
    """Stages 1 -> 2 -> 3 with the per-stage step counts in ``steps``."""
    steps = list(steps) if steps is not None else [opt.steps_per_stage] * 3
    rm = data.undersampled is not None
    ckpts: dict[int, ModelCheckpoint] = {}
    hist: dict[int, list[float]] = {}
    for stage in (1, 2, 3):
        spec = stage_spec(stage, rm, ckpts.get(1), ckpts.get(2))
        ckpts[stage], hist[stage] = train_stage(spec, opt, data, network, steps=steps[stage - 1], callback=callback)
    return PipelineResult(ckpts, hist)


# ---------------------------------------------------------------- inference


def model_from_checkpoint(ckpt: ModelCheckpoint) -> Model:
    model = build_model(ckpt.config, seed=0)
    load_into(model, ckpt, groups=list(ckpt.config.groups))
    return model


def reconstruct_volume(
    model: Model,
    t1: Volume,
    undersampled: Volume | None = None,
    batch_size: int = 8,
    mask_background: bool = True,
) -> Volume:
    """Predict a normalized T2 volume slice by slice.

    Negative outputs clip to 0.  The loss never scores pixels outside the
    brain, so by default the prediction is zeroed wherever the input T1 is
    zero; pass ``mask_background=False`` to keep the raw network output there.
    """
    t1n = normalize_volume(t1).voxels
    feats = gradient_channels_np(t1n[:, None])
    us = None if undersampled is None else undersampled.voxels[:, None]
    out = np.empty(t1.dims, dtype=np.float32)
    with no_grad():
        for start in range(0, feats.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            pred = model(feats[sl], None if us is None else us[sl])
            out[sl] = pred.data[:, 0]
    np.clip(out, 0.0, None, out=out)
    if mask_background:
        out *= nonzero_mask(t1n)
    return Volume(out, modality="T2W")
