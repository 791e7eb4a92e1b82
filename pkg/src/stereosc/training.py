"""Five-step staged training with per-group learning rates and freezing.

Stage 1 trains the global path and fusion with the key-area input zeroed
(flow estimator frozen in the first phase).  Stage 2 trains the key-area
path alone on masked features.  Stage 3 trains fusion only.  Stage 4
fine-tunes the whole semantic codec.  Stage 5 trains the channel codec over
a noisy channel, then everything jointly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from stereosc.channel import ChannelConfig, ChannelKind
from stereosc.data import StereoPair
from stereosc.decoder import warp
from stereosc.encoder import Detector, OracleDetector, detect_2d
from stereosc.errors import DivergenceError, PreconditionError, StateError
from stereosc.metrics import psnr
from stereosc.losses import (DEFAULT_EPSILON, DEFAULT_LAMBDA, charbonnier,
                             hybrid_masked_charbonnier, masked_charbonnier, mse_loss)
from stereosc.model import PARAM_GROUPS, CodecConfig, FrameBatch, SemanticSystem, make_batch
from stereosc.pipeline import channel_transport
from stereosc.utils import derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stereosc-checkpoint"
CHECKPOINT_VERSION = 1

LOSSES = ("charbonnier", "masked_charbonnier", "hybrid", "hybrid_then_charbonnier", "mse")
MODES = ("global", "key", "semantic", "channel", "end_to_end")


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    lrs: dict  # trainable group -> learning rate
    loss: str
    mode: str

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"phase {self.name}: epochs must be >= 1")
        if self.loss not in LOSSES or self.mode not in MODES:
            raise ValueError(f"phase {self.name}: bad loss/mode {self.loss}/{self.mode}")
        for g, lr in self.lrs.items():
            if g not in PARAM_GROUPS or lr <= 0:
                raise ValueError(f"phase {self.name}: bad group/lr {g}={lr}")


@dataclass(frozen=True)
class StageSchedule:
    stage_id: int
    phases: tuple

    @property
    def epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def frozen_groups(self, phase: Phase) -> tuple:
        return tuple(g for g in PARAM_GROUPS if g not in phase.lrs)


_SEMANTIC_FINETUNE = {"global_tx": 1e-4, "global_rx": 1e-4, "key_tx": 2e-5, "key_rx": 2e-5,
                      "flow": 1.25e-5, "fusion": 2e-5}


def default_schedules(epochs_per_phase: Optional[int] = None) -> dict:
    """Learning rates and epoch counts of the reference schedule.

    ``epochs_per_phase`` overrides every phase length (desk-scale runs).
    """
    stages = {
        1: (Phase("1a", 2, {"global_tx": 2e-4, "global_rx": 2e-4, "fusion": 1e-4},
                  "charbonnier", "global"),
            Phase("1b", 10, {"global_tx": 2e-4, "global_rx": 2e-4, "flow": 2.5e-5,
                             "fusion": 1e-4}, "charbonnier", "global")),
        2: (Phase("2", 10, {"key_tx": 1e-4, "key_rx": 2e-4}, "masked_charbonnier", "key"),),
        3: (Phase("3", 6, {"fusion": 1e-4}, "hybrid", "semantic"),),
        4: (Phase("4", 10, dict(_SEMANTIC_FINETUNE), "hybrid_then_charbonnier", "semantic"),),
        5: (Phase("5a", 25, {"channel": 1e-4}, "mse", "channel"),
            Phase("5b", 20, {"channel": 1e-4, **_SEMANTIC_FINETUNE}, "charbonnier", "end_to_end")),
    }
    out = {}
    for sid, phases in stages.items():
        if epochs_per_phase is not None:
            phases = tuple(replace(p, epochs=epochs_per_phase) for p in phases)
        out[sid] = StageSchedule(sid, phases)
    return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epsilon: float = DEFAULT_EPSILON
    lam: float = DEFAULT_LAMBDA
    per_pixel: bool = False
    grad_clip: float = 10.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    hybrid_fraction: float = 0.7
    snr_range: tuple = (6.0, 18.0)
    train_channel: str = "awgn"
    lr_scale: float = 1.0
    seed: int = 0


# Few-step runs on tiny synthetic sets: smaller batches, scaled-up learning rates.
DESK_TRAIN = TrainConfig(batch_size=2, lr_scale=10.0)


@dataclass
class TrainState:
    system: SemanticSystem
    seed: int = 0
    completed: list = field(default_factory=list)
    history: list = field(default_factory=list)  # dicts: stage, phase, epoch, loss
    position: Optional[dict] = None  # in-progress stage: stage, phase, epoch, optimizer


@dataclass
class TrainFrame:
    pair: StereoPair
    boxes_left: object
    boxes_right: object


def prepare_frames(pairs: Sequence[StereoPair], detector: Optional[Detector] = None,
                   confidence_floor: float = 0.3) -> list:
    detector = detector or OracleDetector()
    frames = []
    for p in pairs:
        bl = detect_2d(p.left, detector, frame_id=p.frame_id, ground_truth=p.gt_left,
                       confidence_floor=confidence_floor)
        br = detect_2d(p.right, detector, frame_id=p.frame_id, ground_truth=p.gt_right,
                       confidence_floor=confidence_floor)
        frames.append(TrainFrame(p, bl, br))
    return frames


def _batch(frames: Sequence[TrainFrame], cfg: CodecConfig) -> FrameBatch:
    return make_batch([f.pair for f in frames], [f.boxes_left for f in frames],
                      [f.boxes_right for f in frames], cfg.n, cfg.m)


def _stack_views(batch: FrameBatch, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cat([batch.crop(a), batch.crop(b)], 0)


def phase_loss(system: SemanticSystem, batch: FrameBatch, phase: Phase, loss_name: str,
               tc: TrainConfig, channel: Optional[ChannelConfig] = None) -> torch.Tensor:
    """Loss of one batch for the given phase mode."""
    eps, per_pixel = tc.epsilon, tc.per_pixel
    target = _stack_views(batch, batch.left, batch.right)
    mask = _stack_views(batch, batch.mask_l, batch.mask_r)

    def image_loss(i_hat):
        if loss_name == "hybrid":
            return hybrid_masked_charbonnier(target, i_hat, mask, eps, tc.lam, per_pixel)
        return charbonnier(target, i_hat, eps, per_pixel)

    if phase.mode == "global":
        ext = system.global_tx["extractor"]
        f_l, f_r = ext(batch.left, batch.right)
        g_l = system.global_tx["left"](f_l, batch.left)
        g_r = system.global_tx["right"](f_r, batch.right)
        (fh_l, fh_r), _ = system.recover_global(g_l, g_r)
        i_l = system.fusion["left"](torch.zeros_like(fh_l), fh_l)
        i_r = system.fusion["right"](torch.zeros_like(fh_r), fh_r)
        return image_loss(_stack_views(batch, i_l, i_r))
    if phase.mode == "key":
        s_l, s_r = batch.left * batch.mask_l, batch.right * batch.mask_r
        k_l = system.key_tx["left"](s_l) * batch.sup_l[:, None]
        k_r = system.key_tx["right"](s_r) * batch.sup_r[:, None]
        sh_l, sh_r = system.recover_key(k_l, k_r, batch)
        return masked_charbonnier(_stack_views(batch, s_l, s_r), _stack_views(batch, sh_l, sh_r),
                                  mask, eps, per_pixel)
    if phase.mode == "semantic":
        streams = system.encode(batch)
        out = system.decode(streams["k_l"], streams["k_r"], streams["g_l"], streams["g_r"], batch)
        return image_loss(_stack_views(batch, out["i_l"], out["i_r"]))
    if phase.mode == "channel":
        with torch.no_grad():
            streams = system.encode(batch)
        k_l, k_r, g_l, g_r, _ = channel_transport(system, streams, batch, channel)
        sent = torch.cat([streams[k].reshape(-1) for k in ("k_l", "k_r", "g_l", "g_r")])
        got = torch.cat([x.reshape(-1) for x in (k_l, k_r, g_l, g_r)])
        return mse_loss(sent, got)
    streams = system.encode(batch)
    k_l, k_r, g_l, g_r, _ = channel_transport(system, streams, batch, channel)
    out = system.decode(k_l, k_r, g_l, g_r, batch)
    return image_loss(_stack_views(batch, out["i_l"], out["i_r"]))


def _set_trainable(system: SemanticSystem, trainable) -> None:
    for g in PARAM_GROUPS:
        mod = system.group(g)
        on = g in trainable
        mod.train(on)
        for p in mod.parameters():
            p.requires_grad_(on)


def _make_optimizer(system: SemanticSystem, phase: Phase, tc: TrainConfig) -> torch.optim.Adam:
    groups = [{"params": list(system.group(g).parameters()), "lr": lr * tc.lr_scale, "name": g}
              for g, lr in phase.lrs.items()]
    return torch.optim.Adam(groups, betas=tuple(tc.betas), eps=tc.adam_eps)


def _channel_for_step(tc: TrainConfig, *parts) -> ChannelConfig:
    gen = torch.Generator().manual_seed(derive_seed(*parts, "snr"))
    lo, hi = tc.snr_range
    snr = lo + (hi - lo) * float(torch.rand(1, generator=gen, dtype=torch.float64))
    return ChannelConfig(ChannelKind(tc.train_channel), snr, seed=derive_seed(*parts, "noise"))


def _dump_diagnostics(path: Optional[Path], info: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, default=str))


def run_stage(schedule: StageSchedule, state: TrainState, frames: Sequence[TrainFrame],
              tc: TrainConfig = TrainConfig(), *, checkpoint_path: Optional[Path] = None,
              max_epochs: Optional[int] = None, diagnostics_path: Optional[Path] = None) -> TrainState:
    """Run (or resume) one training stage in place and return ``state``.

    Args:
        schedule: Phases of this stage.
        state: Model and bookkeeping; resumed from ``state.position`` when it
            points into this stage.
        frames: Training frames with their detected boxes.
        tc: Optimiser/loss settings.
        checkpoint_path: Written after every epoch when given.
        max_epochs: Stop after this many epochs in this call (leaves the stage
            in progress; used to exercise resumption).
        diagnostics_path: Where to dump state on divergence.
    """
    sid = schedule.stage_id
    missing = [k for k in range(1, sid) if k not in state.completed]
    if missing:
        raise StateError(f"stage {sid} requires completed stages {missing}")
    if not frames:
        raise PreconditionError("no training frames")
    system = state.system
    cfg = system.cfg
    resume = state.position if state.position and state.position["stage"] == sid else None
    start_phase = resume["phase"] if resume else 0
    done_epochs = 0
    try:
        for pi in range(start_phase, len(schedule.phases)):
            phase = schedule.phases[pi]
            _set_trainable(system, phase.lrs)
            opt = _make_optimizer(system, phase, tc)
            start_epoch = 0
            if resume and pi == start_phase:
                start_epoch = resume["epoch"]
                if resume.get("optimizer") is not None:
                    opt.load_state_dict(resume["optimizer"])
            switch = max(1, round(tc.hybrid_fraction * phase.epochs))
            for epoch in range(start_epoch, phase.epochs):
                if max_epochs is not None and done_epochs >= max_epochs:
                    return state
                loss_name = phase.loss
                if loss_name == "hybrid_then_charbonnier":
                    loss_name = "hybrid" if epoch < switch else "charbonnier"
                perm = torch.randperm(len(frames), generator=torch.Generator().manual_seed(
                    derive_seed(state.seed, sid, phase.name, epoch, "perm"))).tolist()
                total, count = 0.0, 0
                for step in range(0, len(perm), tc.batch_size):
                    chunk = [frames[k] for k in perm[step:step + tc.batch_size]]
                    batch = _batch(chunk, cfg)
                    channel = None
                    if phase.mode in ("channel", "end_to_end"):
                        channel = _channel_for_step(tc, state.seed, sid, phase.name, epoch, step)
                    loss = phase_loss(system, batch, phase, loss_name, tc, channel)
                    if not torch.isfinite(loss):
                        _dump_diagnostics(diagnostics_path, {
                            "stage": sid, "phase": phase.name, "epoch": epoch, "step": step,
                            "loss": float(loss.detach()), "frames": list(batch.frame_ids),
                            "recent_history": state.history[-10:]})
                        raise DivergenceError(
                            f"non-finite loss at stage {sid} phase {phase.name} epoch {epoch} step {step}")
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    params = [p for grp in opt.param_groups for p in grp["params"]]
                    torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
                    opt.step()
                    total += float(loss.detach()) * batch.size
                    count += batch.size
                state.history.append({"stage": sid, "phase": phase.name, "epoch": epoch,
                                      "loss": total / count})
                logger.info("stage %d phase %s epoch %d loss %.6f", sid, phase.name, epoch,
                            total / count)
                done_epochs += 1
                nxt_phase, nxt_epoch = (pi, epoch + 1) if epoch + 1 < phase.epochs else (pi + 1, 0)
                state.position = {"stage": sid, "phase": nxt_phase, "epoch": nxt_epoch,
                                  "optimizer": opt.state_dict() if nxt_phase == pi else None}
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, state)
    finally:
        _set_trainable(system, PARAM_GROUPS)
        system.eval()
    state.position = None
    if sid not in state.completed:
        state.completed.append(sid)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state


@torch.no_grad()
def evaluate_psnr(system: SemanticSystem, frames: Sequence[TrainFrame],
                  channel: Optional[ChannelConfig] = None, *, batch_size: int = 8,
                  seed: int = 0) -> float:
    """Mean PSNR over both views of the clamped, cropped reconstructions."""
    channel = channel or ChannelConfig()
    system.eval()
    scores = []
    for start in range(0, len(frames), batch_size):
        batch = _batch(frames[start:start + batch_size], system.cfg)
        streams = system.encode(batch)
        k_l, k_r, g_l, g_r, _ = channel_transport(system, streams, batch, channel, seed)
        out = system.decode(k_l, k_r, g_l, g_r, batch)
        for view, ref in (("i_l", batch.left), ("i_r", batch.right)):
            rec = batch.crop(out[view].clamp(0, 1)).permute(0, 2, 3, 1).numpy()
            org = batch.crop(ref).permute(0, 2, 3, 1).numpy()
            scores.extend(psnr(a, b) for a, b in zip(org, rec))
    finite = [x for x in scores if math.isfinite(x)]
    return float(sum(finite) / len(finite)) if finite else math.inf


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "codec_config": state.system.cfg.to_dict(),
        "groups": {g: state.system.group(g).state_dict() for g in PARAM_GROUPS},
        "seed": state.seed,
        "completed": list(state.completed),
        "history": list(state.history),
        "position": state.position,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, expected: Optional[CodecConfig] = None) -> TrainState:
    """Load a checkpoint; with ``expected``, architecture mismatches raise ``StateError``."""
    raw = torch.load(Path(path), map_location="cpu", weights_only=False)
    if raw.get("format") != CHECKPOINT_FORMAT or raw.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = CodecConfig(**raw["codec_config"])
    if expected is not None:
        diff = {k: (v, getattr(expected, k)) for k, v in cfg.to_dict().items()
                if k != "seed" and getattr(expected, k) != v}
        if diff:
            raise StateError(f"checkpoint/config mismatch (checkpoint, config): {diff}")
    system = SemanticSystem(cfg)
    for g in PARAM_GROUPS:
        system.group(g).load_state_dict(raw["groups"][g])
    system.eval()
    return TrainState(system, raw["seed"], list(raw["completed"]), list(raw["history"]),
                      raw["position"])


# -- flow pre-training ------------------------------------------------------


def smooth_texture(batch: int, size: int, gen: torch.Generator, channels: int = 3) -> torch.Tensor:
    """Multi-scale smooth random texture in roughly ``[0, 1]``."""
    out = torch.zeros(batch, channels, size, size)
    for cell, amp in ((8, 0.5), (4, 0.3), (2, 0.2)):
        g = max(2, size // cell + 1)
        coarse = torch.rand(batch, channels, g, g, generator=gen)
        out += amp * torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear",
                                                     align_corners=True)
    return out


def shifted_pair(batch: int, size: int, shifts: torch.Tensor, gen: torch.Generator):
    """``(ref, supp)`` with ``supp`` the reference content moved by ``shifts`` (``(B, 2)``, dx, dy)."""
    margin = int(math.ceil(float(shifts.abs().max()))) + 2
    big = smooth_texture(batch, size + 2 * margin, gen)
    flow = (-shifts).view(batch, 2, 1, 1).expand(batch, 2, *big.shape[-2:]).contiguous()
    moved = warp(big, flow)
    sl = slice(margin, margin + size)
    return big[..., sl, sl], moved[..., sl, sl]


def train_flow_on_shifts(estimator: torch.nn.Module, steps: int = 1200, *, batch: int = 8,
                         size: int = 32, max_shift: float = 4.5, lr: float = 1e-3,
                         seed: int = 0) -> list:
    """Supervised pre-training on uniformly shifted textures (stand-in for loaded weights).

    Returns the per-step loss history (mean end-point error on the interior).
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, "flow-pretrain"))
    opt = torch.optim.Adam(estimator.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    border = int(math.ceil(max_shift)) + 1
    estimator.train()
    history = []
    for _ in range(steps):
        shifts = (torch.rand(batch, 2, generator=gen) * 2 - 1) * max_shift
        ref, supp = shifted_pair(batch, size, shifts, gen)
        pred = estimator.compute_flow(ref, supp)
        target = shifts.view(batch, 2, 1, 1)
        err = (pred - target)[..., border:-border, border:-border]
        loss = err.pow(2).sum(1).add(1e-12).sqrt().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    estimator.eval()
    return history
