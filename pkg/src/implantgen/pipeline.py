"""Coarse-to-fine implant prediction.

A coarse network sees the whole defective skull at low resolution; its
upsampled output only serves to find the defect.  The box around the defect
(plus a margin) is cut from the full-resolution skull, centred in a fixed-size
zero canvas and handed to the fine network, whose output is pasted back.

In ``completion`` mode both networks predict the complete skull instead and
the implant is what the prediction adds to the input.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn import model as nnmodel
from .nn.model import Model, NetworkConfig, encoder_decoder
from .nn.train import TrainConfig, train
from .voxel import (BBox, Placement, VoxelGrid, binarize, bbox_xy, crop, downsample,
                    expand_margin, restore, upsample_spline2, zero_pad_center)

log = logging.getLogger(__name__)

MODES = ("direct", "completion")
STAGES = ("coarse", "fine", "completion")


class LocalizationError(RuntimeError):
    """The coarse prediction contains no defect to put a box around."""


@dataclass(frozen=True)
class PipelineConfig:
    coarse_dims: tuple[int, int, int] = (32, 32, 16)
    fine_canvas_dims: tuple[int, int, int] = (64, 64, 32)
    margin: int = 5
    z_extent: int = 32
    threshold: float = 0.5
    mode: str = "direct"
    z_policy: str = "centroid"
    fallback_whole_volume: bool = False

    def __post_init__(self):
        for name in ("coarse_dims", "fine_canvas_dims"):
            dims = tuple(int(d) for d in getattr(self, name))
            if len(dims) != 3 or min(dims) < 1:
                raise ValueError(f"{name} must be three positive integers")
            object.__setattr__(self, name, dims)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.margin < 0 or self.z_extent < 1:
            raise ValueError("margin must be >= 0 and z_extent >= 1")
        if self.z_extent > self.fine_canvas_dims[2]:
            raise ValueError("z window is longer than the fine canvas")
        if 2 * self.margin >= min(self.fine_canvas_dims[:2]):
            raise ValueError("margin leaves no room for the defect in the canvas")

    @classmethod
    def paper(cls, **kw) -> PipelineConfig:
        """Full-resolution settings for 512 x 512 x Z skulls."""
        return cls((128, 128, 64), (256, 256, 128), 20, 128, **kw)

    @classmethod
    def scaled(cls, s: float, **kw) -> PipelineConfig:
        p = cls.paper()
        return cls(tuple(max(1, round(d * s)) for d in p.coarse_dims),
                   tuple(max(1, round(d * s)) for d in p.fine_canvas_dims),
                   max(0, round(p.margin * s)), max(1, round(p.z_extent * s)), **kw)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> PipelineConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


# --- network ladders ----------------------------------------------------------


# Desk ladders keep the full-scale contrast: kernel 5 against kernel 3, and a
# fine network with under 1/100 of the coarse network's parameters.


def coarse_network(cfg: PipelineConfig, channels=(16, 32, 64), kernel: int = 5) -> NetworkConfig:
    return encoder_decoder(cfg.coarse_dims, channels, kernel)


def fine_network(cfg: PipelineConfig, channels=(2, 4, 8, 8), kernel: int = 3) -> NetworkConfig:
    return encoder_decoder(cfg.fine_canvas_dims, channels, kernel)


def paper_n1(cfg: PipelineConfig | None = None) -> NetworkConfig:
    """Kernel-5 ladder for the coarse network at full scale."""
    cfg = cfg or PipelineConfig.paper()
    return encoder_decoder(cfg.coarse_dims, (64, 128, 256, 384, 512), 5)


def paper_n2(cfg: PipelineConfig | None = None) -> NetworkConfig:
    """Kernel-3 ladder with far fewer feature maps for the fine network."""
    cfg = cfg or PipelineConfig.paper()
    return encoder_decoder(cfg.fine_canvas_dims, (16, 32, 64, 64, 64), 3)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs: pipeline geometry, both ladders, both schedules."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    n1: NetworkConfig | None = None
    n2: NetworkConfig | None = None
    # at 1e-3 the kernel-5 coarse ladder can fall into an all-zero output
    train_coarse: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500, lr=3e-4))
    train_fine: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500, lr=1e-3))

    def __post_init__(self):
        if self.n1 is None:
            object.__setattr__(self, "n1", coarse_network(self.pipeline))
        if self.n2 is None:
            object.__setattr__(self, "n2", fine_network(self.pipeline))
        if self.n1.input_dims != self.pipeline.coarse_dims:
            raise ValueError("coarse network input dims differ from coarse_dims")
        if self.n2.input_dims != self.pipeline.fine_canvas_dims:
            raise ValueError("fine network input dims differ from fine_canvas_dims")

    def to_json(self) -> dict:
        return {
            "pipeline": self.pipeline.to_json(),
            "n1": self.n1.to_json(),
            "n2": self.n2.to_json(),
            "train_coarse": self.train_coarse.to_json(),
            "train_fine": self.train_fine.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentConfig:
        pipeline = PipelineConfig.from_json(obj.get("pipeline", {}))
        return cls(
            pipeline,
            NetworkConfig.from_json(obj["n1"]) if "n1" in obj else None,
            NetworkConfig.from_json(obj["n2"]) if "n2" in obj else None,
            TrainConfig(**obj.get("train_coarse", {"steps": 1500, "lr": 3e-4})),
            TrainConfig(**obj.get("train_fine", {"steps": 1500, "lr": 1e-3})),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentConfig:
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- inference ----------------------------------------------------------------


def _check_model(model: Model, dims, what: str):
    if model.config.input_dims != tuple(dims):
        raise ValueError(f"{what} network expects {model.config.input_dims}, "
                         f"configuration says {tuple(dims)}")


def coarse_input(defective: VoxelGrid, cfg: PipelineConfig) -> np.ndarray:
    return downsample(defective, cfg.coarse_dims).data


def predict_coarse(n1: Model, defective: VoxelGrid, cfg: PipelineConfig) -> VoxelGrid:
    """Coarse implant probability at the defective skull's resolution.

    In completion mode the network predicts the whole skull at coarse scale;
    the implant estimate is the part of that prediction the input lacks.
    """
    _check_model(n1, cfg.coarse_dims, "coarse")
    x = coarse_input(defective, cfg)
    prob = nnmodel.predict(n1, x)
    if cfg.mode == "completion":
        prob = prob * (1 - x)
    coarse = VoxelGrid(prob, downsample(defective, cfg.coarse_dims).spacing, "prob")
    return _to_full_res(upsample_spline2(coarse, defective.dims), defective)


def _to_full_res(up: VoxelGrid, like: VoxelGrid) -> VoxelGrid:
    # resampling there and back can drift spacing by an ulp
    return VoxelGrid(up.data, like.spacing, up.kind)


def fit_to_canvas(b: BBox, canvas_dims) -> BBox:
    """Shrink any axis longer than the canvas, keeping the box centre."""
    lo, hi = list(b.lo), list(b.hi)
    for ax, c in enumerate(canvas_dims):
        extra = (hi[ax] - lo[ax]) - c
        if extra > 0:
            lo[ax] += extra // 2
            hi[ax] = lo[ax] + c
    return BBox(tuple(lo), tuple(hi))


def localize(coarse: VoxelGrid, cfg: PipelineConfig) -> BBox:
    """Box around the binarized coarse implant, widened by the x/y margin."""
    m = binarize(coarse, cfg.threshold)
    if m.count() == 0:
        if cfg.fallback_whole_volume:
            log.warning("coarse prediction is empty; falling back to a centred window")
            return fit_to_canvas(BBox.whole(coarse.dims), cfg.fine_canvas_dims)
        raise LocalizationError("localization failed: the coarse prediction is empty")
    b = expand_margin(bbox_xy(m, cfg.z_extent, cfg.z_policy), cfg.margin, coarse.dims)
    fitted = fit_to_canvas(b, cfg.fine_canvas_dims)
    if fitted != b:
        log.warning("box %s -> %s exceeds the fine canvas; shrunk to %s", b.lo, b.hi, fitted.shape)
    return fitted


def fine_input(defective: VoxelGrid, b: BBox, cfg: PipelineConfig
               ) -> tuple[VoxelGrid, Placement]:
    block = crop(defective, b)
    if any(s > c for s, c in zip(block.dims, cfg.fine_canvas_dims)):
        raise ValueError(f"crop {block.dims} exceeds the fine canvas {cfg.fine_canvas_dims}")
    return zero_pad_center(block, cfg.fine_canvas_dims, b, defective.dims)


def predict_fine(n2: Model, defective: VoxelGrid, b: BBox, cfg: PipelineConfig) -> VoxelGrid:
    """Fine network output, binarized and pasted back at full resolution.

    Everything outside ``b`` is zero.  In completion mode this is the
    completed skull inside the box, not yet the implant.
    """
    _check_model(n2, cfg.fine_canvas_dims, "fine")
    padded, placement = fine_input(defective, b, cfg)
    prob = VoxelGrid(nnmodel.predict(n2, padded.data), padded.spacing, "prob")
    return restore(binarize(prob, cfg.threshold), placement)


@dataclass(frozen=True, eq=False)
class Inference:
    coarse: VoxelGrid   # coarse implant probability, full resolution
    bbox: BBox
    fine: VoxelGrid     # raw fine-network mask, full resolution
    implant: VoxelGrid


def infer(n1: Model, n2: Model, defective: VoxelGrid, cfg: PipelineConfig) -> Inference:
    coarse = predict_coarse(n1, defective, cfg)
    b = localize(coarse, cfg)
    fine = predict_fine(n2, defective, b, cfg)
    # the implant may not overlap bone that is still there
    implant = fine.data.astype(bool) & ~defective.data.astype(bool)
    return Inference(coarse, b, fine, defective.with_data(implant.astype(np.uint8), "mask"))


def run_pipeline(n1: Model, n2: Model, defective: VoxelGrid, cfg: PipelineConfig) -> VoxelGrid:
    return infer(n1, n2, defective, cfg).implant


def coarse_implant_mask(coarse: VoxelGrid, cfg: PipelineConfig) -> VoxelGrid:
    return binarize(coarse, cfg.threshold)


# --- training -----------------------------------------------------------------


def _target(case, cfg: PipelineConfig, stage: str) -> VoxelGrid:
    if stage == "completion" or cfg.mode == "completion":
        return case.complete
    return case.implant


def output_prior(targets) -> float:
    """Mean foreground fraction of the targets, clipped to [0.1, 0.5]."""
    frac = float(np.mean([t.mean() for t in targets]))
    return float(np.clip(frac, 0.1, 0.5))


def init_model(config: NetworkConfig, seed: int, prior: float, dtype=np.float32) -> Model:
    """Seeded init; the output bias starts at the logit of the foreground fraction.

    Starting from sigmoid(0) = 0.5 everywhere, dice loss on small targets
    drives every output to zero before anything is learned.
    """
    model = Model.init(config, seed)
    last = max(i for i, w in enumerate(model.weights) if w is not None)
    model.biases[last][:] = np.log(prior / (1.0 - prior))
    model.meta["output_prior"] = prior
    return model.copy(dtype)


def coarse_pairs(cases, cfg: PipelineConfig, stage: str = "coarse"):
    return [(coarse_input(c.defective, cfg)[None], downsample(_target(c, cfg, stage),
                                                               cfg.coarse_dims).data)
            for c in cases]


def fine_pairs(n1: Model, cases, cfg: PipelineConfig):
    """Training pairs for the fine network, boxed by the coarse network's predictions.

    Boxes come from ``n1`` run on the defective skull only, exactly as at test
    time.  Cases whose coarse prediction is empty are skipped.
    """
    inputs = []
    for c in cases:
        try:
            b = localize(predict_coarse(n1, c.defective, cfg), cfg)
        except LocalizationError:
            log.warning("case %s: coarse network found no defect; skipped", c.id)
            continue
        padded, placement = fine_input(c.defective, b, cfg)
        inputs.append((c, padded, placement))
    pairs = []
    for c, padded, placement in inputs:
        target = crop(_target(c, cfg, "fine"), placement.source_bbox)
        target, _ = zero_pad_center(target, cfg.fine_canvas_dims)
        pairs.append((padded.data[None], target.data))
    return pairs


def train_stage(stage: str, cases, exp: ExperimentConfig, tc: TrainConfig | None = None,
                coarse_model: Model | None = None, on_step=None):
    """Train one network; returns ``(model, loss_curve)``.

    ``coarse`` and ``completion`` train at coarse resolution (``completion``
    always against complete skulls); ``fine`` needs the trained coarse model.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    cfg = exp.pipeline
    if stage == "completion":
        cfg = replace(cfg, mode="completion")
    if stage == "fine":
        if coarse_model is None:
            raise ValueError("the fine stage needs a trained coarse model")
        pairs = fine_pairs(coarse_model, cases, cfg)
        net, tc = exp.n2, tc or exp.train_fine
    else:
        pairs = coarse_pairs(cases, cfg, stage)
        net, tc = exp.n1, tc or exp.train_coarse
    if not pairs:
        if stage == "fine":
            raise LocalizationError("the coarse model found no defect in any training case")
        raise ValueError(f"no training pairs for the {stage} stage")
    model = init_model(net, tc.seed, output_prior([t for _, t in pairs]))
    model, curve = train(model, pairs, tc, on_step=on_step)
    model.meta.update(stage=stage, mode=cfg.mode, pipeline=cfg.to_json())
    return model, curve
