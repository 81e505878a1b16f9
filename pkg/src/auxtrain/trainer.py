"""Training jobs: five methods (vanilla, ft, mtl, ts, and auxiliary-channel
ablation) across two tasks and two backbones, plus checkpoint evaluation.

One call to :func:`train` runs a full job into a run directory containing
``config.json`` (resolved config snapshot), ``log.jsonl`` (one record per
epoch), periodic ``ckpt_*.bin`` files, and ``best.bin``. Runs are
deterministic given the seed: sampling randomness derives from (seed, epoch),
so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import ablation, metrics, nets, objectives, synthgen
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

DETERMINISM_ENV = "AUXTRAIN_DETERMINISM"

TASKS = ("cpm", "ctt")
BACKBONES = ("cnn-c", "cnn-t")
METHODS = ("vanilla", "ft", "mtl", "ts", "ait")

# Desk-scale epoch budgets (full scale uses the reference budgets below).
DESK_EPOCHS = {("cpm", "cnn-c"): 60, ("cpm", "cnn-t"): 120, ("ctt", "cnn-c"): 60, ("ctt", "cnn-t"): 60}
FULL_EPOCHS = {("cpm", "cnn-c"): 300, ("cpm", "cnn-t"): 800, ("ctt", "cnn-c"): 300, ("ctt", "cnn-t"): 300}
AIT_EPOCH_FACTOR = 3  # the strength ladder needs several plateaus

# Desk-profile optimizer override: the reference learning rate (1e-5) needs
# reference-scale epoch counts; the desk profile trades it for wall-clock.
DESK_LR = 3e-4
DESK_AIT_PATIENCE = 4
DESK_CLIP_LEN = 12
DESK_BATCH_PAIRS = 4
DESK_BATCH_TUPLES = 8

EVAL_NOISE_SEED = 424243
VAL_STREAM = 911
EPOCH_STREAM = 500


class TrainerError(Exception):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass
class TrainRun:
    """One (task x backbone x method) training job."""

    task: str
    backbone: str
    method: str
    run_dir: Path
    seed: int = 0
    profile: str = "desk"
    optimizer: OptimizerConfig | None = None
    max_epochs: int | None = None
    mask_fraction: float = 1.0
    ait_step: float = ablation.DEFAULT_ALPHA_STEP
    ait_patience: int | None = None
    ait_min_rel_improve: float = ablation.DEFAULT_MIN_REL_IMPROVE
    lambda_seg: float = 1.0
    mmd_weight: float = 1.0
    pretrain_checkpoint: Path | None = None
    batch_size: int | None = None
    clip_len: int | None = None
    save_every: int = 0  # extra periodic checkpoints; 0 = level/final only

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise TrainerError(f"unknown task {self.task!r}")
        if self.backbone not in BACKBONES:
            raise TrainerError(f"unknown backbone {self.backbone!r}")
        if self.method not in METHODS:
            raise TrainerError(f"unknown method {self.method!r}")
        if self.profile not in ("desk", "full"):
            raise TrainerError(f"unknown profile {self.profile!r}")
        self.run_dir = Path(self.run_dir)


@dataclass
class ResolvedRun:
    run: TrainRun
    optimizer: OptimizerConfig
    max_epochs: int
    batch_size: int
    clip_len: int
    ait_patience: int
    with_mask_channel: bool

    def to_config_dict(self) -> dict:
        cfg = dataclasses.asdict(self.run)
        cfg["run_dir"] = str(self.run.run_dir)
        cfg["pretrain_checkpoint"] = (
            str(self.run.pretrain_checkpoint) if self.run.pretrain_checkpoint else None
        )
        cfg["resolved"] = {
            "optimizer": dataclasses.asdict(self.optimizer),
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "clip_len": self.clip_len,
            "ait_patience": self.ait_patience,
            "with_mask_channel": self.with_mask_channel,
        }
        return cfg


def resolve_run(run: TrainRun) -> ResolvedRun:
    desk = run.profile == "desk"
    base_epochs = (DESK_EPOCHS if desk else FULL_EPOCHS)[(run.task, run.backbone)]
    if run.max_epochs is not None:
        max_epochs = run.max_epochs
    else:
        max_epochs = base_epochs * AIT_EPOCH_FACTOR if run.method == "ait" else base_epochs
    optimizer = run.optimizer or (
        OptimizerConfig(lr=DESK_LR) if desk else OptimizerConfig()
    )
    patience = run.ait_patience if run.ait_patience is not None else (
        DESK_AIT_PATIENCE if desk else ablation.DEFAULT_PATIENCE
    )
    return ResolvedRun(
        run=run,
        optimizer=optimizer,
        max_epochs=max_epochs,
        batch_size=run.batch_size or (DESK_BATCH_PAIRS if run.task == "cpm" else DESK_BATCH_TUPLES),
        clip_len=run.clip_len or DESK_CLIP_LEN,
        ait_patience=patience,
        with_mask_channel=run.method == "ait",
    )


@dataclass
class SplitDataset:
    """Sequence pairs plus the 7:2:1 split over pair indices."""

    pairs: list[synthgen.SequencePair]
    split: dict[str, list[int]]

    @classmethod
    def from_dir(cls, path: str | Path) -> "SplitDataset":
        pairs = synthgen.load_dataset(path)
        manifest = synthgen.read_manifest(path)
        split = manifest.get("split") or synthgen.make_split(len(pairs))
        return cls(pairs=pairs, split=split)

    @classmethod
    def from_pairs(cls, pairs: Sequence[synthgen.SequencePair]) -> "SplitDataset":
        return cls(pairs=list(pairs), split=synthgen.make_split(len(pairs)))

    def subset(self, name: str) -> list[synthgen.SequencePair]:
        return [self.pairs[i] for i in self.split[name]]

    @property
    def image_size(self) -> int:
        return self.pairs[0].spec.image_size_px


def apply_determinism_mode() -> bool:
    """Honor the determinism env var: single-threaded, deterministic kernels."""
    if os.environ.get(DETERMINISM_ENV, "") not in ("", "0"):
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return True
    return False


def _torch_noise_source(gen: torch.Generator) -> Callable[[tuple[int, ...]], torch.Tensor]:
    return lambda shape: torch.randn(shape, generator=gen)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([EPOCH_STREAM, seed, epoch])


def _epoch_torch_gen(seed: int, epoch: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed * 1_000_003 + epoch)
    return gen


# ---------------------------------------------------------------------------
# Batch builders.


def _image_stack(frames: Sequence[synthgen.Frame]) -> np.ndarray:
    return np.stack([f.image for f in frames])[:, None, :, :]  # (T, 1, H, W)


def _mask_stack(frames: Sequence[synthgen.Frame]) -> np.ndarray:
    # Frames without labels carry all-zero placeholder masks.
    return np.stack([f.mask for f in frames]).astype(np.float32)  # (T, H, W)


def _cpm_inputs(
    pairs: Sequence[synthgen.SequencePair],
    alpha: float | None,
    noise: Callable | None,
) -> tuple[torch.Tensor, int]:
    """Angio-then-fluoro frame stacks for a batch of pairs: (B, T, C, H, W)."""
    images = []
    for pair in pairs:
        seq = np.concatenate([_image_stack(pair.angio), _image_stack(pair.fluoro)])
        images.append(seq)
    x = torch.from_numpy(np.stack(images)).float()
    if alpha is not None:
        if alpha >= 1.0:
            z = torch.zeros(x.shape[0], x.shape[1], *x.shape[-2:])
        else:
            masks = [
                np.concatenate([_mask_stack(p.angio), _mask_stack(p.fluoro)]) for p in pairs
            ]
            z = ablation.ablate(torch.from_numpy(np.stack(masks)), alpha, noise)
        x = ablation.attach(x, z.float())
    return x, len(pairs[0].angio)


def _cpm_mask_targets(pairs: Sequence[synthgen.SequencePair]) -> torch.Tensor:
    masks = [
        np.concatenate([_mask_stack(p.angio), _mask_stack(p.fluoro)]) for p in pairs
    ]
    return torch.from_numpy(np.stack(masks)).float()[:, :, None]  # (B, T, 1, H, W)


def _ctt_sequences(pairs: Sequence[synthgen.SequencePair]) -> list[list[synthgen.Frame]]:
    """Tracking trains and evaluates on both sides of every pair."""
    seqs: list[list[synthgen.Frame]] = []
    for pair in pairs:
        seqs.append(pair.angio)
        seqs.append(pair.fluoro)
    return seqs


def _ctt_unet_inputs(
    clips: Sequence[Sequence[synthgen.Frame]],
    heatmap_sigma: float,
    alpha: float | None,
    noise: Callable | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-frame (reference image, reference heatmap, current image) stacks
    plus target heatmaps. The clip's first frame is the reference."""
    batch = []
    targets = []
    size = clips[0][0].image.shape
    for clip in clips:
        ref = clip[0]
        ref_hm = nets.make_target_heatmap(ref.tip_xy, heatmap_sigma, size)
        chans = []
        tgts = []
        for f in clip:
            chans.append(np.stack([ref.image, ref_hm, f.image]))
            tgts.append(nets.make_target_heatmap(f.tip_xy, heatmap_sigma, size)[None])
        batch.append(np.stack(chans))
        targets.append(np.stack(tgts))
    x = torch.from_numpy(np.stack(batch)).float()
    y = torch.from_numpy(np.stack(targets)).float()
    if alpha is not None:
        if alpha >= 1.0:
            z = torch.zeros(x.shape[0], x.shape[1], *x.shape[-2:])
        else:
            masks = np.stack([np.stack([f.mask for f in clip]) for clip in clips])
            z = ablation.ablate(torch.from_numpy(masks).float(), alpha, noise)
        x = ablation.attach(x, z.float())
    return x, y


def _ctt_unet_mask_targets(clips: Sequence[Sequence[synthgen.Frame]]) -> torch.Tensor:
    masks = np.stack([np.stack([f.mask for f in clip]) for clip in clips])
    return torch.from_numpy(masks).float()[:, :, None]


def _tracker_crop(frame: synthgen.Frame, center: tuple[float, float], size: int,
                  with_mask: bool) -> np.ndarray:
    img = nets.crop_patch(frame.image, center, size)[None]
    if with_mask:
        mask = nets.crop_patch(frame.mask.astype(np.float32), center, size)[None]
        return np.concatenate([img, mask])
    return img


def _tracker_inputs(
    samples: Sequence[tuple[Sequence[synthgen.Frame], int, Sequence[int]]],
    cfg: nets.CttBackboneConfig,
    heatmap_sigma: float,
    alpha: float | None,
    noise: Callable | None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(templates, search, target heatmap) batches for (seq, search_idx,
    template_idxs) samples. Template crops center on ground-truth tips."""
    tmpl_imgs = []
    search_imgs = []
    targets = []
    tmpl_masks = []
    search_masks = []
    with_mask = alpha is not None
    read_masks = with_mask and alpha < 1.0
    for seq, search_idx, template_idxs in samples:
        search = seq[search_idx]
        tmpls = [
            nets.crop_patch(seq[j].image, seq[j].tip_xy, cfg.template_size_px)[None]
            for j in template_idxs
        ]
        tmpl_imgs.append(np.stack(tmpls))
        search_imgs.append(search.image[None])
        targets.append(
            nets.make_target_heatmap(search.tip_xy, heatmap_sigma, search.image.shape)[None]
        )
        if read_masks:
            tmpl_masks.append(
                np.stack(
                    [
                        nets.crop_patch(
                            seq[j].mask.astype(np.float32), seq[j].tip_xy, cfg.template_size_px
                        )
                        for j in template_idxs
                    ]
                )
            )
            search_masks.append(search.mask.astype(np.float32))

    templates = torch.from_numpy(np.stack(tmpl_imgs)).float()  # (B, K, 1, s, s)
    search = torch.from_numpy(np.stack(search_imgs)).float()  # (B, 1, H, W)
    y = torch.from_numpy(np.stack(targets)).float()
    if with_mask:
        if read_masks:
            zt = ablation.ablate(torch.from_numpy(np.stack(tmpl_masks)).float(), alpha, noise)
            zs = ablation.ablate(torch.from_numpy(np.stack(search_masks)).float(), alpha, noise)
        else:
            zt = torch.zeros(templates.shape[0], templates.shape[1], *templates.shape[-2:])
            zs = torch.zeros(search.shape[0], *search.shape[-2:])
        templates = ablation.attach(templates, zt.float())
        search = ablation.attach(search, zs.float())
    return templates, search, y


# ---------------------------------------------------------------------------
# Model construction and checkpoint mapping.


def build_model(
    task: str, backbone: str, image_size: int, with_mask_channel: bool, with_seg_head: bool
) -> torch.nn.Module:
    if task == "cpm":
        cfg = nets.desk_cpm_config(backbone, input_channels=1 + int(with_mask_channel))
        return nets.build_cpm_model(cfg, image_size, with_seg_head)
    if backbone == "cnn-c":
        cfg = nets.desk_ctt_config("cnn-c", with_mask_channel)
        cfg = dataclasses.replace(cfg, search_size_px=image_size)
        return nets.build_ctt_model(cfg, with_seg_head)
    cfg = nets.desk_ctt_config("cnn-t", with_mask_channel)
    cfg = dataclasses.replace(cfg, search_size_px=image_size)
    return nets.build_ctt_model(cfg, with_seg_head)


_HEAD_PREFIXES = ("task_head", "seg_head", "final_downsample")


def trunk_state_names(model: torch.nn.Module) -> set[str]:
    return {k for k in model.state_dict() if not k.startswith(_HEAD_PREFIXES)}


def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_model_arrays(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {
        k[len("model.") :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("model.")
    }
    model.load_state_dict(state)


def optimizer_arrays(
    optimizer: torch.optim.Optimizer, names: list[str]
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    params = optimizer.param_groups[0]["params"]
    for name, p in zip(names, params):
        state = optimizer.state.get(p)
        if not state:
            continue
        arrays[f"opt.{name}.exp_avg"] = state["exp_avg"].numpy()
        arrays[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
        steps[name] = float(state["step"])
    return arrays, steps


def load_optimizer_arrays(
    optimizer: torch.optim.Optimizer,
    names: list[str],
    arrays: dict[str, np.ndarray],
    steps: dict[str, float],
) -> None:
    params = optimizer.param_groups[0]["params"]
    for name, p in zip(names, params):
        if f"opt.{name}.exp_avg" not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()),
        }


def load_trunk_from_checkpoint(model: torch.nn.Module, ckpt: Checkpoint) -> set[str]:
    """Copy trunk parameters from a pretraining checkpoint; heads stay fresh."""
    wanted = trunk_state_names(model)
    found = {}
    for key, arr in ckpt.arrays.items():
        if not key.startswith("model."):
            continue
        name = key[len("model.") :]
        if name in wanted:
            found[name] = torch.from_numpy(arr.copy())
    missing = wanted - set(found)
    if missing:
        raise TrainerError(
            f"pretraining checkpoint lacks {len(missing)} trunk parameters, "
            f"e.g. {sorted(missing)[:3]}"
        )
    state = model.state_dict()
    state.update(found)
    model.load_state_dict(state)
    return set(found)


# ---------------------------------------------------------------------------
# Task adapters: per-epoch training and loss evaluation.


@dataclass
class _TaskContext:
    resolved: ResolvedRun
    dataset: SplitDataset
    train_pairs: list[synthgen.SequencePair]
    val_pairs: list[synthgen.SequencePair]
    model: torch.nn.Module
    teacher: torch.nn.Module | None
    triplet_cfg: objectives.TripletConfig = field(default_factory=objectives.TripletConfig)
    heatmap_sigma: float = nets.DEFAULT_TARGET_SIGMA_PX


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _cpm_loss(
    ctx: _TaskContext,
    pairs: Sequence[synthgen.SequencePair],
    alpha: float | None,
    noise: Callable | None,
    rng: np.random.Generator,
) -> torch.Tensor:
    run = ctx.resolved.run
    x, n_angio = _cpm_inputs(pairs, alpha, noise)
    if run.method == "ts":
        feats, branch = ctx.model.forward_with_branch_features(x, n_angio)
    else:
        feats = ctx.model(x, n_angio)
    triples = []
    for b, pair in enumerate(pairs):
        triples.extend(
            objectives.sample_triplets(
                pair, feats[b, :n_angio], feats[b, n_angio:], ctx.triplet_cfg, rng
            )
        )
    loss = objectives.mean_triplet_loss(triples, ctx.triplet_cfg.margin)
    if run.method == "mtl":
        seg_logits = ctx.model.forward_seg(x, n_angio)
        loss = objectives.mtl_loss(
            loss, objectives.seg_loss(seg_logits, _cpm_mask_targets(pairs)), run.lambda_seg
        )
    elif run.method == "ts":
        with torch.no_grad():
            _, t_branch = ctx.teacher.forward_with_branch_features(x[:, :, :1], n_angio)
        loss = loss + run.mmd_weight * objectives.mmd_loss(
            branch.flatten(0, 1), t_branch.flatten(0, 1)
        )
    return loss


def _ctt_unet_loss(
    ctx: _TaskContext,
    clips: Sequence[Sequence[synthgen.Frame]],
    alpha: float | None,
    noise: Callable | None,
    rng: np.random.Generator,
) -> torch.Tensor:
    run = ctx.resolved.run
    x, y = _ctt_unet_inputs(clips, ctx.heatmap_sigma, alpha, noise)
    if run.method == "ts":
        logits, branch = ctx.model.forward_with_branch_features(x)
        pred = torch.sigmoid(logits)
    else:
        pred = ctx.model(x)
    loss = objectives.l1_heatmap_loss(pred, y)
    if run.method == "mtl":
        seg_logits = ctx.model.forward_seg(x)
        loss = objectives.mtl_loss(
            loss, objectives.seg_loss(seg_logits, _ctt_unet_mask_targets(clips)), run.lambda_seg
        )
    elif run.method == "ts":
        with torch.no_grad():
            _, t_branch = ctx.teacher.forward_with_branch_features(x[:, :, :3])
        loss = loss + run.mmd_weight * objectives.mmd_loss(
            branch.flatten(0, 1), t_branch.flatten(0, 1)
        )
    return loss


def _ctt_tracker_loss(
    ctx: _TaskContext,
    samples: Sequence[tuple],
    alpha: float | None,
    noise: Callable | None,
    rng: np.random.Generator,
) -> torch.Tensor:
    run = ctx.resolved.run
    cfg = ctx.model.cfg
    templates, search, y = _tracker_inputs(samples, cfg, ctx.heatmap_sigma, alpha, noise)
    if run.method == "ts":
        logits, branch = ctx.model.forward_with_branch_features(templates, search)
        pred = torch.sigmoid(logits)
    else:
        pred = ctx.model(templates, search)
    loss = objectives.l1_heatmap_loss(pred, y)
    if run.method == "mtl":
        seg_logits = ctx.model.forward_seg(templates, search)
        masks = torch.stack(
            [torch.from_numpy(s[0][s[1]].mask.astype(np.float32)) for s in samples]
        )[:, None]
        loss = objectives.mtl_loss(loss, objectives.seg_loss(seg_logits, masks), run.lambda_seg)
    elif run.method == "ts":
        with torch.no_grad():
            _, t_branch = ctx.teacher.forward_with_branch_features(
                templates[:, :, :1], search[:, :1]
            )
        loss = loss + run.mmd_weight * objectives.mmd_loss(branch, t_branch)
    return loss


def _cpm_epoch_batches(ctx: _TaskContext, pairs: list, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(pairs)).tolist()
    return _chunks([pairs[i] for i in order], ctx.resolved.batch_size)


def _ctt_unet_epoch_batches(
    ctx: _TaskContext, pairs: list, rng: np.random.Generator, training: bool
) -> list[list]:
    """Random subclips of each sequence (full prefixes when validating)."""
    clip_len = ctx.resolved.clip_len
    clips = []
    for seq in _ctt_sequences(pairs):
        if training:
            start = int(rng.integers(0, max(1, len(seq) - clip_len + 1)))
        else:
            start = 0
        clips.append(seq[start : start + clip_len])
    if training:
        order = rng.permutation(len(clips)).tolist()
        clips = [clips[i] for i in order]
    return _chunks(clips, max(2, ctx.resolved.batch_size // 4))


def _ctt_tracker_epoch_batches(
    ctx: _TaskContext, pairs: list, rng: np.random.Generator
) -> list[list]:
    cfg = ctx.model.cfg
    samples = []
    for seq in _ctt_sequences(pairs):
        search_idx = int(rng.integers(1, len(seq)))
        k = int(rng.integers(1, cfg.max_templates + 1))
        # Extra templates come from frames before the search frame, mirroring
        # the tracker's causal template store at inference.
        template_idxs = [0] + [int(rng.integers(0, search_idx)) for _ in range(k - 1)]
        samples.append((seq, search_idx, template_idxs))
    order = rng.permutation(len(samples)).tolist()
    samples = [samples[i] for i in order]
    # All samples in a batch need the same template count.
    by_k: dict[int, list] = {}
    for s in samples:
        by_k.setdefault(len(s[2]), []).append(s)
    batches = []
    for group in by_k.values():
        batches.extend(_chunks(group, ctx.resolved.batch_size))
    return batches


def _epoch_loss_fn(ctx: _TaskContext) -> Callable:
    run = ctx.resolved.run
    if run.task == "cpm":
        return _cpm_loss
    if run.backbone == "cnn-c":
        return _ctt_unet_loss
    return _ctt_tracker_loss


def _epoch_batches(ctx: _TaskContext, pairs: list, rng: np.random.Generator, training: bool) -> list:
    run = ctx.resolved.run
    if run.task == "cpm":
        return _cpm_epoch_batches(ctx, pairs, rng)
    if run.backbone == "cnn-c":
        return _ctt_unet_epoch_batches(ctx, pairs, rng, training)
    return _ctt_tracker_epoch_batches(ctx, pairs, rng)


# ---------------------------------------------------------------------------
# The training loop.


def _save_run_checkpoint(
    path: Path,
    resolved: ResolvedRun,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None,
    param_names: list[str],
    epoch: int,
    state: ablation.AblationState | None,
    extra: dict | None = None,
) -> None:
    run = resolved.run
    arrays = model_arrays(model)
    opt_steps: dict[str, float] = {}
    if optimizer is not None:
        opt_arrays, opt_steps = optimizer_arrays(optimizer, param_names)
        arrays.update(opt_arrays)
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    header_extra = {
        "ablation_state": state.to_dict() if state else None,
        "optimizer_steps": opt_steps,
        "task": run.task,
        "backbone": run.backbone,
        "method": run.method,
        "with_mask_channel": resolved.with_mask_channel,
    }
    header_extra.update(extra or {})
    save_checkpoint(
        path,
        Checkpoint(
            variant=f"{run.task}/{run.backbone}",
            config=resolved.to_config_dict(),
            alpha=state.alpha if state else 0.0,
            epoch=epoch,
            seed=run.seed,
            arrays=arrays,
            extra=header_extra,
        ),
    )


def _dataset_masks_available(pairs: Sequence[synthgen.SequencePair]) -> bool:
    return all(
        f.mask_available for p in pairs for f in (*p.angio, *p.fluoro)
    )


def train(run: TrainRun, dataset: SplitDataset, resume_from: Path | None = None) -> Path:
    """Run one training job; returns the run directory.

    ``resume_from`` continues a checkpoint bit-exactly (same seed streams).
    """
    apply_determinism_mode()
    resolved = resolve_run(run)
    run_dir = run.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    train_pairs = dataset.subset("train")
    val_pairs = dataset.subset("val")
    if not train_pairs or not val_pairs:
        raise TrainerError("dataset split has empty train or val subsets")

    if run.method == "ait" and run.mask_fraction < 1.0:
        train_pairs = ablation.partial_mask(train_pairs, run.mask_fraction, run.seed)
    if run.method in ("ft", "mtl", "ts") and not _dataset_masks_available(train_pairs):
        raise TrainerError(f"method {run.method!r} requires catheter masks on every training frame")
    if run.method in ("ft", "ts") and run.pretrain_checkpoint is None:
        raise TrainerError(
            f"method {run.method!r} needs a segmentation pretraining checkpoint; "
            "run pretrain_segmentation first (the CLI can do this automatically)"
        )

    torch.manual_seed(run.seed)
    model = build_model(
        run.task, run.backbone, dataset.image_size, resolved.with_mask_channel,
        with_seg_head=run.method == "mtl",
    )
    teacher = None
    if run.method == "ft":
        load_trunk_from_checkpoint(model, load_checkpoint(run.pretrain_checkpoint))
    elif run.method == "ts":
        teacher = build_model(
            run.task, run.backbone, dataset.image_size, False, with_seg_head=True
        )
        load_model_arrays(teacher, load_checkpoint(run.pretrain_checkpoint).arrays)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    param_names = [n for n, _ in model.named_parameters()]
    optimizer = torch.optim.Adam(
        model.parameters(), lr=resolved.optimizer.lr, betas=resolved.optimizer.betas
    )

    state = ablation.AblationState(
        step=run.ait_step,
        patience=resolved.ait_patience,
        min_rel_improve=run.ait_min_rel_improve,
    ) if run.method == "ait" else None

    start_epoch = 0
    level_val_history: list[float] = []
    best_val = math.inf
    best_level = 0.0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_model_arrays(model, ckpt.arrays)
        load_optimizer_arrays(
            optimizer, param_names, ckpt.arrays, ckpt.extra.get("optimizer_steps", {})
        )
        start_epoch = ckpt.epoch + 1
        if ckpt.extra.get("ablation_state"):
            state = ablation.AblationState.from_dict(ckpt.extra["ablation_state"])
        level_val_history = list(ckpt.extra.get("level_val_history", []))
        best_val = ckpt.extra.get("best_val", math.inf)
        best_level = ckpt.extra.get("best_level", 0.0)

    ctx = _TaskContext(
        resolved=resolved,
        dataset=dataset,
        train_pairs=train_pairs,
        val_pairs=val_pairs,
        model=model,
        teacher=teacher,
    )
    loss_fn = _epoch_loss_fn(ctx)

    (run_dir / "config.json").write_text(json.dumps(resolved.to_config_dict(), indent=2))
    log_path = run_dir / "log.jsonl"
    log_mode = "a" if resume_from is not None else "w"

    with log_path.open(log_mode) as log:
        for epoch in range(start_epoch, resolved.max_epochs):
            alpha = state.alpha if state else None
            rng = _epoch_rng(run.seed, epoch)
            noise_gen = _epoch_torch_gen(run.seed, epoch)
            noise = _torch_noise_source(noise_gen)

            model.train()
            train_losses = []
            for batch in _epoch_batches(ctx, train_pairs, rng, training=True):
                optimizer.zero_grad()
                loss = loss_fn(ctx, batch, alpha, noise, rng)
                loss.backward()
                optimizer.step()
                train_losses.append(float(loss.detach()))

            model.eval()
            val_rng = np.random.default_rng([VAL_STREAM, run.seed])
            val_gen = _epoch_torch_gen(run.seed, -1)
            val_noise = _torch_noise_source(val_gen)
            val_losses = []
            with torch.no_grad():
                for batch in _epoch_batches(ctx, val_pairs, val_rng, training=False):
                    val_losses.append(
                        float(loss_fn(ctx, batch, alpha, val_noise, val_rng))
                    )
            train_loss = float(np.mean(train_losses))
            val_loss = float(np.mean(val_losses))

            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "alpha": alpha,
                "lr": resolved.optimizer.lr,
            }
            log.write(json.dumps(record) + "\n")
            log.flush()

            # best.bin tracks the lowest validation loss at the highest
            # ablation level reached so far (plain lowest-val for non-ait),
            # attributed to the level the epoch actually trained at.
            current_level = alpha if alpha is not None else 0.0
            if current_level > best_level:
                best_level = current_level
                best_val = math.inf
            if current_level == best_level and val_loss < best_val:
                best_val = val_loss
                _save_run_checkpoint(
                    run_dir / "best.bin", resolved, model, None, param_names, epoch, state,
                )

            level_val_history.append(val_loss)
            finished = False
            if state is not None:
                new_state = ablation.advance(state, level_val_history)
                if new_state.alpha > state.alpha:
                    _save_run_checkpoint(
                        run_dir / f"ckpt_alpha_{state.alpha:.1f}.bin",
                        resolved, model, optimizer, param_names, epoch, state,
                        extra={"level_val_history": level_val_history,
                               "best_val": best_val, "best_level": best_level},
                    )
                    level_val_history = []
                elif state.finished and ablation.plateaued(
                    level_val_history, state.patience, state.min_rel_improve
                ):
                    finished = True
                state = new_state

            is_last = finished or epoch == resolved.max_epochs - 1
            if is_last or (run.save_every and (epoch + 1) % run.save_every == 0):
                _save_run_checkpoint(
                    run_dir / f"ckpt_{epoch:04d}.bin",
                    resolved, model, optimizer, param_names, epoch, state,
                    extra={"level_val_history": level_val_history,
                           "best_val": best_val, "best_level": best_level},
                )
            if is_last:
                _save_run_checkpoint(
                    run_dir / "ckpt_final.bin",
                    resolved, model, optimizer, param_names, epoch, state,
                    extra={"level_val_history": level_val_history,
                           "best_val": best_val, "best_level": best_level},
                )
                break
    return run_dir


def pretrain_segmentation(
    task: str,
    backbone: str,
    dataset: SplitDataset,
    run_dir: str | Path,
    seed: int = 0,
    max_epochs: int | None = None,
    profile: str = "desk",
    lr: float | None = None,
) -> Path:
    """Train trunk plus segmentation head on catheter masks; returns the
    checkpoint path whose trunk is loadable into the task models."""
    apply_determinism_mode()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = dataset.subset("train")
    val_pairs = dataset.subset("val")
    if not _dataset_masks_available(train_pairs):
        raise TrainerError("segmentation pretraining requires masks")

    desk = profile == "desk"
    epochs = max_epochs or (DESK_EPOCHS if desk else FULL_EPOCHS)[(task, backbone)]
    lr = lr if lr is not None else (DESK_LR if desk else OptimizerConfig().lr)

    torch.manual_seed(seed)
    model = build_model(task, backbone, dataset.image_size, False, with_seg_head=True)
    head_params = [n for n, _ in model.named_parameters() if not n.startswith("task_head")]
    optimizer = torch.optim.Adam(
        [p for n, p in model.named_parameters() if not n.startswith("task_head")],
        lr=lr, betas=OptimizerConfig().betas,
    )

    run_shell = TrainRun(task=task, backbone=backbone, method="vanilla", run_dir=run_dir,
                         seed=seed, profile=profile)
    resolved = resolve_run(run_shell)
    sigma = nets.DEFAULT_TARGET_SIGMA_PX

    def seg_batch_loss(batch) -> torch.Tensor:
        if task == "cpm":
            x, n_angio = _cpm_inputs(batch, None, None)
            logits = model.forward_seg(x, n_angio)
            return objectives.seg_loss(logits, _cpm_mask_targets(batch))
        if backbone == "cnn-c":
            x, _ = _ctt_unet_inputs(batch, sigma, None, None)
            logits = model.forward_seg(x)
            return objectives.seg_loss(logits, _ctt_unet_mask_targets(batch))
        templates, search, _ = _tracker_inputs(batch, model.cfg, sigma, None, None)
        logits = model.forward_seg(templates, search)
        masks = torch.stack(
            [torch.from_numpy(s[0][s[1]].mask.astype(np.float32)) for s in batch]
        )[:, None]
        return objectives.seg_loss(logits, masks)

    ctx = _TaskContext(
        resolved=resolved, dataset=dataset, train_pairs=train_pairs, val_pairs=val_pairs,
        model=model, teacher=None,
    )

    log_path = run_dir / "log.jsonl"
    best_val = math.inf
    ckpt_path = run_dir / "seg_pretrain.bin"
    with log_path.open("w") as log:
        for epoch in range(epochs):
            rng = _epoch_rng(seed, epoch)
            model.train()
            train_losses = []
            for batch in _epoch_batches(ctx, train_pairs, rng, training=True):
                optimizer.zero_grad()
                loss = seg_batch_loss(batch)
                loss.backward()
                optimizer.step()
                train_losses.append(float(loss.detach()))
            model.eval()
            val_rng = np.random.default_rng([VAL_STREAM, seed])
            val_losses = []
            with torch.no_grad():
                for batch in _epoch_batches(ctx, val_pairs, val_rng, training=False):
                    val_losses.append(float(seg_batch_loss(batch)))
            val_loss = float(np.mean(val_losses))
            log.write(json.dumps({
                "epoch": epoch,
                "train_loss": float(np.mean(train_losses)),
                "val_loss": val_loss,
            }) + "\n")
            if val_loss < best_val:
                best_val = val_loss
                save_checkpoint(
                    ckpt_path,
                    Checkpoint(
                        variant=f"{task}/{backbone}/seg",
                        config={"task": task, "backbone": backbone, "seed": seed,
                                "profile": profile, "lr": lr, "max_epochs": epochs},
                        alpha=0.0,
                        epoch=epoch,
                        seed=seed,
                        arrays=model_arrays(model),
                        extra={"kind": "seg_pretrain", "head_params": head_params},
                    ),
                )
    return ckpt_path


def validation_dice(ckpt_path: str | Path, dataset: SplitDataset, split: str = "val") -> float:
    """Mean hard Dice of a segmentation pretraining checkpoint."""
    ckpt = load_checkpoint(ckpt_path)
    task, backbone = ckpt.config["task"], ckpt.config["backbone"]
    model = build_model(task, backbone, dataset.image_size, False, with_seg_head=True)
    load_model_arrays(model, ckpt.arrays)
    model.eval()
    sigma = nets.DEFAULT_TARGET_SIGMA_PX
    scores = []
    with torch.no_grad():
        for pair in dataset.subset(split):
            if task == "cpm":
                x, n_angio = _cpm_inputs([pair], None, None)
                logits = model.forward_seg(x, n_angio)
                scores.append(objectives.dice_score(logits, _cpm_mask_targets([pair])))
            elif backbone == "cnn-c":
                for seq in (pair.angio, pair.fluoro):
                    x, _ = _ctt_unet_inputs([seq], sigma, None, None)
                    logits = model.forward_seg(x)
                    scores.append(
                        objectives.dice_score(logits, _ctt_unet_mask_targets([seq]))
                    )
            else:
                for seq in (pair.angio, pair.fluoro):
                    samples = [(seq, len(seq) // 2, [0])]
                    templates, search, _ = _tracker_inputs(samples, model.cfg, sigma, None, None)
                    logits = model.forward_seg(templates, search)
                    mask = torch.from_numpy(seq[len(seq) // 2].mask.astype(np.float32))[None, None]
                    scores.append(objectives.dice_score(logits, mask))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Evaluation of trained checkpoints.


@dataclass
class EvalReport:
    task: str
    backbone: str
    method: str
    alpha: float
    per_case_errors: list[float]  # cpm: frames; ctt: mm
    records: list[dict]
    cpm: metrics.CpmResult | None = None
    ctt: metrics.CttResult | None = None


def load_model_for_eval(ckpt_path: str | Path, image_size: int) -> tuple[torch.nn.Module, Checkpoint]:
    ckpt = load_checkpoint(ckpt_path)
    task = ckpt.extra["task"]
    backbone = ckpt.extra["backbone"]
    model = build_model(
        task, backbone, image_size, ckpt.extra["with_mask_channel"],
        with_seg_head=ckpt.extra.get("method") == "mtl",
    )
    load_model_arrays(model, ckpt.arrays)
    model.eval()
    return model, ckpt


def evaluate_checkpoint(
    ckpt_path: str | Path,
    dataset: SplitDataset,
    split: str = "test",
    conf_floor: float | None = None,
) -> EvalReport:
    """Evaluate a trained checkpoint on a dataset split.

    The auxiliary channel follows the checkpoint's trained strength: clean
    masks at 0, noised masks in between, and an all-zero channel at 1 (where
    ground-truth masks are never read).
    """
    apply_determinism_mode()
    model, ckpt = load_model_for_eval(ckpt_path, dataset.image_size)
    task = ckpt.extra["task"]
    backbone = ckpt.extra["backbone"]
    alpha = ckpt.alpha if ckpt.extra["with_mask_channel"] else None

    gen = torch.Generator()
    gen.manual_seed(EVAL_NOISE_SEED)
    noise = _torch_noise_source(gen)

    report = EvalReport(
        task=task, backbone=backbone, method=ckpt.extra.get("method", "?"),
        alpha=ckpt.alpha, per_case_errors=[], records=[],
    )
    pairs = dataset.subset(split)
    with torch.no_grad():
        if task == "cpm":
            _evaluate_cpm(model, pairs, alpha, noise, report)
        elif backbone == "cnn-c":
            _evaluate_ctt_unet(model, pairs, alpha, noise, report,
                               conf_floor if conf_floor is not None else metrics.DEFAULT_CONF_FLOOR["cnn-c"])
        else:
            _evaluate_ctt_tracker(model, pairs, alpha, noise, report,
                                  conf_floor if conf_floor is not None else metrics.DEFAULT_CONF_FLOOR["cnn-t"])
    return report


def _evaluate_cpm(model, pairs, alpha, noise, report: EvalReport) -> None:
    result = metrics.CpmResult()
    for pair_idx, pair in enumerate(pairs):
        x, n_angio = _cpm_inputs([pair], alpha, noise)
        feats = model(x, n_angio)[0].numpy()
        angio_feats = feats[:n_angio]
        cycle = pair.spec.cycle_len_frames
        for i, fluoro_frame in enumerate(pair.fluoro):
            pred = metrics.cpm_match(angio_feats, feats[n_angio + i])
            gt = synthgen.gt_match_set(fluoro_frame, pair.angio)
            frames_d, pct = metrics.phase_distance(pred, gt, cycle)
            result.pred_indices.append(pred)
            result.dist_frames.append(frames_d)
            result.dist_pct.append(pct)
            report.per_case_errors.append(frames_d)
            report.records.append(
                {"pair": pair_idx, "fluoro_frame": i, "pred_angio": pred,
                 "dist_frames": frames_d, "dist_pct": pct}
            )
    report.cpm = result


def _evaluate_ctt_unet(model, pairs, alpha, noise, report: EvalReport, conf_floor: float) -> None:
    sigma = nets.DEFAULT_TARGET_SIGMA_PX
    preds: list[tuple[tuple[float, float], float]] = []
    gts: list[tuple[float, float]] = []
    spacing = pairs[0].spec.pixel_spacing_mm
    for pair_idx, pair in enumerate(pairs):
        for side, seq in (("angio", pair.angio), ("fluoro", pair.fluoro)):
            x, _ = _ctt_unet_inputs([seq], sigma, alpha, noise)
            heatmaps = model(x)[0, :, 0].numpy()
            for t in range(1, len(seq)):
                px, py, conf = nets.heatmap_to_coord(heatmaps[t])
                preds.append(((px, py), conf))
                gts.append(seq[t].tip_xy)
                d_mm = float(np.hypot(px - seq[t].tip_xy[0], py - seq[t].tip_xy[1])) * spacing
                report.per_case_errors.append(d_mm)
                report.records.append(
                    {"pair": pair_idx, "side": side, "frame": t,
                     "pred_xy": [px, py], "confidence": conf,
                     "gt_xy": list(seq[t].tip_xy), "dist_mm": d_mm}
                )
    report.ctt = metrics.ctt_evaluate(preds, gts, spacing, conf_floor=conf_floor)


def _evaluate_ctt_tracker(model, pairs, alpha, noise, report: EvalReport, conf_floor: float) -> None:
    cfg = model.cfg
    with_mask = alpha is not None
    read_masks = with_mask and alpha < 1.0
    preds: list[tuple[tuple[float, float], float]] = []
    gts: list[tuple[float, float]] = []
    spacing = pairs[0].spec.pixel_spacing_mm

    def frame_input(frame: synthgen.Frame) -> np.ndarray:
        if not with_mask:
            return frame.image[None]
        if read_masks:
            z = ablation.ablate(
                torch.from_numpy(frame.mask.astype(np.float32)), alpha, noise
            ).numpy()
        else:
            z = np.zeros_like(frame.image)
        return np.stack([frame.image, z.astype(np.float32)])

    for pair_idx, pair in enumerate(pairs):
        for side, seq in (("angio", pair.angio), ("fluoro", pair.fluoro)):
            first = frame_input(seq[0])
            store = nets.TemplateStore(
                initial=nets.crop_patch(first, seq[0].tip_xy, cfg.template_size_px),
                template_size_px=cfg.template_size_px,
                update_threshold=cfg.template_update_threshold,
            )
            for t in range(1, len(seq)):
                search_np = frame_input(seq[t])
                templates = torch.from_numpy(np.stack(store.templates)).float()[None]
                search = torch.from_numpy(search_np).float()[None]
                heatmap = model(templates, search)[0, 0].numpy()
                px, py, conf = nets.heatmap_to_coord(heatmap)
                preds.append(((px, py), conf))
                gts.append(seq[t].tip_xy)
                d_mm = float(np.hypot(px - seq[t].tip_xy[0], py - seq[t].tip_xy[1])) * spacing
                report.per_case_errors.append(d_mm)
                report.records.append(
                    {"pair": pair_idx, "side": side, "frame": t,
                     "pred_xy": [px, py], "confidence": conf,
                     "gt_xy": list(seq[t].tip_xy), "dist_mm": d_mm}
                )
                store = nets.update_templates(store, heatmap, search_np)
    report.ctt = metrics.ctt_evaluate(preds, gts, spacing, conf_floor=conf_floor)


# ---------------------------------------------------------------------------
# Run matrices (method comparisons, partial-mask sweeps).


@dataclass
class MatrixReport:
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2)


def run_matrix(runs: Sequence[TrainRun], dataset: SplitDataset) -> MatrixReport:
    """Execute runs sequentially; individual failures are recorded and the
    matrix continues."""
    report = MatrixReport()
    for run in runs:
        row = {
            "run_dir": str(run.run_dir),
            "task": run.task,
            "backbone": run.backbone,
            "method": run.method,
            "mask_fraction": run.mask_fraction,
            "seed": run.seed,
        }
        try:
            train(run, dataset)
            eval_report = evaluate_checkpoint(run.run_dir / "best.bin", dataset)
            row["status"] = "ok"
            row["mean_error"] = float(np.mean(eval_report.per_case_errors))
            if eval_report.cpm is not None:
                row["dist_frames"] = eval_report.cpm.mean_frames
                row["dist_pct"] = eval_report.cpm.mean_pct
            if eval_report.ctt is not None:
                row["precision_pct"] = eval_report.ctt.precision_pct
                row["recall_pct"] = eval_report.ctt.recall_pct
                row["dist_tp_mm"] = eval_report.ctt.dist_tp_mean
                row["dist_all_mm"] = eval_report.ctt.dist_all_mean
        except Exception as exc:  # noqa: BLE001 - matrix must keep going
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        report.rows.append(row)
    return report
