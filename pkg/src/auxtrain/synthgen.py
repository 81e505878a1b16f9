"""Deterministic synthetic X-ray sequence generator with dense labels.

Produces paired angiographic (contrast-enhanced) and fluoroscopic
(contrast-free) image sequences of a deforming catheter. Every frame carries
the exact catheter mask, the catheter tip coordinate, and the cardiac phase
fraction, so the generated data can stand in for manually labeled clinical
sequences. Generation is a pure function of a MotionSpec: the same spec always
yields bit-identical sequences.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

FORMAT_VERSION = 1

FPS_CHOICES = (7.5, 15.0, 30.0)
DEFAULT_IMAGE_SIZE = 128
DEFAULT_PIXEL_SPACING_MM = 0.2

# Tube profile of the rendered catheter (pixels at the 128 px desk scale).
CATHETER_SIGMA_PX = 1.6
MASK_RADIUS_PX = 2.5
VESSEL_SIGMA_PX = 2.4
TIP_BLOB_RADIUS_PX = 7.0

# Difficulty-dependent rendering constants.
CATHETER_DEPTH = {"easy": 0.35, "hard": 0.14}
NOISE_SIGMA = {"easy": 0.02, "hard": 0.05}
TIP_HIDDEN_FRACTION = {"easy": 0.2, "hard": 0.4}

# Stream tags keep the per-purpose RNG draws independent of each other.
_TAG_SPEC = 101
_TAG_GEOMETRY = 102
_TAG_PAIR = 103
_TAG_NOISE = 104
_TAG_TIP_HIDE = 105


class DatasetError(Exception):
    """Base class for on-disk dataset failures."""


class ManifestError(DatasetError):
    """The manifest is missing, unparseable, or structurally invalid."""


class ChecksumError(DatasetError):
    """A stored binary file does not match its recorded SHA-256."""


class VersionError(DatasetError):
    """The dataset was written with an incompatible format version."""


class _MaskReadCounter:
    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


_MASK_READS = _MaskReadCounter()


class MaskReadProbe:
    """Snapshot view over the global mask read counter."""

    def __init__(self, start: int) -> None:
        self._start = start

    @property
    def reads(self) -> int:
        return _MASK_READS.count - self._start


@contextmanager
def count_mask_reads() -> Iterator[MaskReadProbe]:
    """Count accesses to ``Frame.mask`` inside the block.

    Used to enforce contracts such as "this evaluation path never touches
    ground-truth masks".
    """
    yield MaskReadProbe(_MASK_READS.count)


@dataclass(frozen=True)
class MotionSpec:
    """Everything needed to regenerate a sequence pair deterministically."""

    rng_seed: int
    cardiac_period_s: float
    breathing_period_s: float
    breathing_amplitude_px: float
    deform_amplitude_px: float
    fps: float
    image_size_px: int = DEFAULT_IMAGE_SIZE
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM
    contrast_level: float = 0.7
    difficulty: str = "easy"

    def __post_init__(self) -> None:
        if self.cardiac_period_s <= 0 or self.breathing_period_s <= 0:
            raise ValueError("periods must be positive")
        if self.fps not in FPS_CHOICES:
            raise ValueError(f"fps must be one of {FPS_CHOICES}, got {self.fps}")
        if self.cardiac_period_s * self.fps < 4:
            raise ValueError("need at least 4 frames per cardiac cycle")
        if not 0.0 <= self.contrast_level <= 1.0:
            raise ValueError("contrast_level must lie in [0, 1]")
        if self.difficulty not in ("easy", "hard"):
            raise ValueError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")

    @property
    def cycle_len_frames(self) -> float:
        return self.cardiac_period_s * self.fps


@dataclass(eq=False)
class Frame:
    """One rendered frame with its labels.

    ``mask`` is exposed through a counting property so tests can assert that
    mask-free code paths really never read it; the raw array lives in
    ``mask_data``.
    """

    image: np.ndarray
    mask_data: np.ndarray = field(repr=False)
    tip_xy: tuple[float, float] = (0.0, 0.0)
    phase: float = 0.0
    mask_available: bool = True

    @property
    def mask(self) -> np.ndarray:
        _MASK_READS.count += 1
        return self.mask_data

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.mask_data, other.mask_data)
            and self.tip_xy == other.tip_xy
            and self.phase == other.phase
            and self.mask_available == other.mask_available
        )


@dataclass(eq=False)
class SequencePair:
    """Angio/fluoro sequence pair sharing one catheter geometry."""

    angio: list[Frame]
    fluoro: list[Frame]
    spec: MotionSpec
    phase_offset: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SequencePair):
            return NotImplemented
        return (
            self.angio == other.angio
            and self.fluoro == other.fluoro
            and self.spec == other.spec
            and self.phase_offset == other.phase_offset
        )


def circular_phase_distance(a: float, b: float) -> float:
    """Distance between two cycle fractions on the unit circle, in [0, 0.5]."""
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def sample_spec(seed: int, difficulty: str = "easy", image_size_px: int = DEFAULT_IMAGE_SIZE) -> MotionSpec:
    """Draw a deterministic desk-scale MotionSpec for the given seed."""
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    rng = np.random.default_rng([_TAG_SPEC, seed])
    fps = float(rng.choice(FPS_CHOICES))
    # Integer frames per cycle keeps ground-truth phase matches crisp.
    cycle_frames = int(rng.integers(8, 17))
    return MotionSpec(
        rng_seed=seed,
        cardiac_period_s=cycle_frames / fps,
        breathing_period_s=float(rng.uniform(2.5, 5.0)),
        breathing_amplitude_px=float(rng.uniform(2.0, 6.0)),
        deform_amplitude_px=float(rng.uniform(2.5, 5.0)),
        fps=fps,
        image_size_px=image_size_px,
        pixel_spacing_mm=DEFAULT_PIXEL_SPACING_MM,
        contrast_level=float(rng.uniform(0.5, 0.9)),
        difficulty=difficulty,
    )


@dataclass(frozen=True)
class _Geometry:
    ctrl_base: np.ndarray        # (n, 2) x/y control points of the resting catheter
    ctrl_params: np.ndarray      # (n,) chord-length spline parameter per control point
    deform_dirs: np.ndarray      # (n, 2) unit displacement direction per control point
    deform_lags: np.ndarray      # (n,) phase lag per control point, radians
    deform_ramp: np.ndarray      # (n,) amplitude ramp, small at entry / full at tip
    breath_dir: np.ndarray       # (2,) unit breathing translation direction
    bg_centers: np.ndarray       # (k, 2) background blob centers
    bg_sigmas: np.ndarray        # (k,)
    bg_depths: np.ndarray        # (k,)
    bg_base: float
    bg_slope: float
    vessel_branches: tuple[np.ndarray, ...]  # tip-relative polylines
    vessel_lags: tuple[np.ndarray, ...]      # per-point cardiac lags per branch


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    return v / n if n > 0 else np.array([0.0, 1.0])


def _geometry(spec: MotionSpec) -> _Geometry:
    rng = np.random.default_rng([_TAG_GEOMETRY, spec.rng_seed])
    size = float(spec.image_size_px)
    margin = spec.breathing_amplitude_px + spec.deform_amplitude_px + 3.0 * MASK_RADIUS_PX

    n_ctrl = int(rng.integers(6, 11))
    # Catheter enters at the top edge and meanders down toward mid-image.
    x = np.empty(n_ctrl)
    y = np.empty(n_ctrl)
    x[0] = rng.uniform(0.3 * size, 0.7 * size)
    y[0] = 0.0
    total_drop = rng.uniform(0.55, 0.75) * size
    for i in range(1, n_ctrl):
        y[i] = y[i - 1] + total_drop / (n_ctrl - 1)
        x[i] = np.clip(x[i - 1] + rng.uniform(-0.14, 0.14) * size, margin, size - margin)
    y = np.clip(y, 0.0, size - margin)
    ctrl = np.stack([x, y], axis=1)

    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(ctrl, axis=0).T))])
    params = chord / chord[-1]

    angles = rng.uniform(0.0, 2.0 * np.pi, n_ctrl)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    lags = rng.uniform(0.0, 2.0 * np.pi, n_ctrl)
    ramp = 0.3 + 0.7 * np.linspace(0.0, 1.0, n_ctrl)
    ramp[0] = 0.0  # entry point stays anchored at the edge

    breath_angle = rng.uniform(-0.35, 0.35)  # mostly vertical, diaphragm-like
    breath_dir = np.array([np.sin(breath_angle), np.cos(breath_angle)])

    k = 4
    bg_centers = rng.uniform(0.1 * size, 0.9 * size, (k, 2))
    bg_sigmas = rng.uniform(0.15 * size, 0.4 * size, k)
    bg_depths = rng.uniform(0.04, 0.16, k)
    bg_base = float(rng.uniform(0.72, 0.82))
    bg_slope = float(rng.uniform(-0.0006, 0.0006))

    # Vessel tree rooted at the catheter tip: a few wandering branches,
    # expressed tip-relative so they ride along with tip motion.
    branches = []
    branch_lags = []
    for _ in range(int(rng.integers(3, 6))):
        n_pts = int(rng.integers(6, 10))
        ang = rng.uniform(0.0, 2.0 * np.pi)
        step = rng.uniform(4.0, 8.0)
        pts = [np.zeros(2)]
        for _ in range(n_pts - 1):
            ang += rng.uniform(-0.5, 0.5)
            pts.append(pts[-1] + step * np.array([np.cos(ang), np.sin(ang)]))
        branches.append(np.array(pts))
        branch_lags.append(rng.uniform(0.0, 2.0 * np.pi, n_pts))

    return _Geometry(
        ctrl_base=ctrl,
        ctrl_params=params,
        deform_dirs=dirs,
        deform_lags=lags,
        deform_ramp=ramp,
        breath_dir=breath_dir,
        bg_centers=bg_centers,
        bg_sigmas=bg_sigmas,
        bg_depths=bg_depths,
        bg_base=bg_base,
        bg_slope=bg_slope,
        vessel_branches=tuple(branches),
        vessel_lags=tuple(branch_lags),
    )


def _pixel_grid(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _polyline_distance(points: np.ndarray, grid: np.ndarray, size: int) -> np.ndarray:
    """Distance from every pixel center to a densely sampled polyline."""
    tree = cKDTree(points)
    d, _ = tree.query(grid, k=1)
    return d.reshape(size, size)


def _densify(points: np.ndarray, per_segment: int = 6) -> np.ndarray:
    segs = []
    for a, b in zip(points[:-1], points[1:]):
        ts = np.linspace(0.0, 1.0, per_segment, endpoint=False)[:, None]
        segs.append(a + ts * (b - a))
    segs.append(points[-1:])
    return np.concatenate(segs, axis=0)


def render_frame(
    spec: MotionSpec,
    t: int,
    contrast_level: float,
    *,
    phase_offset: float = 0.0,
    breathing_phase: float = 0.0,
    tip_hidden_fraction: float | None = None,
) -> Frame:
    """Render frame ``t`` as a pure function of the spec and offsets.

    ``contrast_level`` > 0 draws the vessel tree (angiographic appearance) and
    may hide the tip under a contrast blob; 0 renders the fluoroscopic view.
    """
    if t < 0:
        raise ValueError("frame index must be nonnegative")
    geom = _geometry(spec)
    size = spec.image_size_px
    if tip_hidden_fraction is None:
        tip_hidden_fraction = TIP_HIDDEN_FRACTION[spec.difficulty]

    inc = 1.0 / (spec.cardiac_period_s * spec.fps)
    phase = (t * inc + phase_offset) % 1.0
    cardiac = 2.0 * np.pi * phase

    breath = spec.breathing_amplitude_px * np.sin(
        2.0 * np.pi * ((t / spec.fps) / spec.breathing_period_s + breathing_phase)
    )
    shift = breath * geom.breath_dir

    ctrl = (
        geom.ctrl_base
        + (
            spec.deform_amplitude_px
            * geom.deform_ramp
            * np.sin(cardiac + geom.deform_lags)
        )[:, None]
        * geom.deform_dirs
        + shift
    )
    spline = CubicSpline(geom.ctrl_params, ctrl, axis=0)
    u = np.linspace(0.0, 1.0, 512)
    path = spline(u)
    tip = path[-1]

    grid = _pixel_grid(size)
    d_cath = _polyline_distance(path, grid, size)

    xs = grid[:, 0].reshape(size, size)
    ys = grid[:, 1].reshape(size, size)
    bg = np.full((size, size), geom.bg_base)
    bg += geom.bg_slope * (ys - shift[1])
    for c, s, depth in zip(geom.bg_centers, geom.bg_sigmas, geom.bg_depths):
        cx, cy = c + shift
        bg -= depth * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * s * s))

    depth = CATHETER_DEPTH[spec.difficulty]
    image = bg - depth * np.exp(-(d_cath**2) / (2.0 * CATHETER_SIGMA_PX**2))

    if contrast_level > 0.0:
        # Distal 30% of the catheter is flooded by contrast, plus the
        # wandering branches anchored at the (moving, pulsating) tip.
        distal = path[int(0.7 * len(path)):]
        vessel_pts = [distal]
        for branch, lags in zip(geom.vessel_branches, geom.vessel_lags):
            sway = 1.5 * np.sin(cardiac + lags)[:, None] * np.array([1.0, 0.3])
            vessel_pts.append(_densify(branch + sway + tip))
        d_ves = _polyline_distance(np.concatenate(vessel_pts, axis=0), grid, size)
        image = image - 0.55 * contrast_level * np.exp(-(d_ves**2) / (2.0 * VESSEL_SIGMA_PX**2))

        hide_rng = np.random.default_rng([_TAG_TIP_HIDE, spec.rng_seed, t])
        if hide_rng.uniform() < tip_hidden_fraction:
            d_tip2 = (xs - tip[0]) ** 2 + (ys - tip[1]) ** 2
            blob = np.exp(-np.maximum(np.sqrt(d_tip2) - TIP_BLOB_RADIUS_PX, 0.0) ** 2 / 8.0)
            image = image - 0.55 * contrast_level * blob

    noise_rng = np.random.default_rng(
        [_TAG_NOISE, spec.rng_seed, t, 1 if contrast_level > 0 else 0]
    )
    image = image + NOISE_SIGMA[spec.difficulty] * noise_rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    mask = (d_cath <= MASK_RADIUS_PX).astype(np.uint8)
    return Frame(
        image=image,
        mask_data=mask,
        tip_xy=(float(tip[0]), float(tip[1])),
        phase=float(phase),
        mask_available=True,
    )


def generate_pair(spec: MotionSpec, n_frames: int) -> SequencePair:
    """Generate an angio/fluoro pair of ``n_frames`` frames each.

    The two sequences share the catheter geometry but breathe independently,
    and the fluoro stream starts at a random cardiac phase offset.
    """
    min_frames = int(np.ceil(spec.cycle_len_frames))
    if n_frames < min_frames:
        raise ValueError(
            f"n_frames={n_frames} is less than one cardiac cycle "
            f"({min_frames} frames); phase matching would be undefined"
        )
    rng = np.random.default_rng([_TAG_PAIR, spec.rng_seed])
    breathing_angio = float(rng.uniform())
    breathing_fluoro = float(rng.uniform())
    phase_offset = float(rng.uniform())

    angio = [
        render_frame(spec, t, spec.contrast_level, breathing_phase=breathing_angio)
        for t in range(n_frames)
    ]
    fluoro = [
        render_frame(spec, t, 0.0, phase_offset=phase_offset, breathing_phase=breathing_fluoro)
        for t in range(n_frames)
    ]
    return SequencePair(angio=angio, fluoro=fluoro, spec=spec, phase_offset=phase_offset)


def gt_match_set(fluoro_frame: Frame, angio: Sequence[Frame]) -> set[int]:
    """All angio indices whose phase is circularly nearest the fluoro frame's."""
    if not angio:
        raise ValueError("angio sequence must be non-empty")
    dists = np.array([circular_phase_distance(f.phase, fluoro_frame.phase) for f in angio])
    return set(np.flatnonzero(dists <= dists.min() + 1e-12).tolist())


# ---------------------------------------------------------------------------
# On-disk format: manifest.json plus per-sequence raw little-endian arrays.

LABEL_DTYPE = np.dtype([("phase", "<f8"), ("tip", "<f8", (2,)), ("mask_available", "u1")])


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _frames_to_arrays(frames: Sequence[Frame]) -> dict[str, np.ndarray]:
    images = np.stack([f.image for f in frames]).astype("<f4") if frames else np.zeros((0,), "<f4")
    masks = np.stack([f.mask_data for f in frames]).astype("u1") if frames else np.zeros((0,), "u1")
    labels = np.zeros(len(frames), dtype=LABEL_DTYPE)
    for i, f in enumerate(frames):
        labels[i] = (f.phase, f.tip_xy, 1 if f.mask_available else 0)
    return {"images": images, "masks": masks, "labels": labels}


def _arrays_to_frames(images: np.ndarray, masks: np.ndarray, labels: np.ndarray) -> list[Frame]:
    frames = []
    for i in range(len(labels)):
        rec = labels[i]
        frames.append(
            Frame(
                image=images[i],
                mask_data=masks[i],
                tip_xy=(float(rec["tip"][0]), float(rec["tip"][1])),
                phase=float(rec["phase"]),
                mask_available=bool(rec["mask_available"]),
            )
        )
    return frames


def save_dataset(
    pairs: Sequence[SequencePair],
    path: str | Path,
    split: dict[str, list[int]] | None = None,
) -> None:
    """Write pairs to ``path`` as manifest.json plus raw binary arrays."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, pair in enumerate(pairs):
        seq_dir = root / f"seq_{idx:05d}"
        seq_dir.mkdir(exist_ok=True)
        files: dict[str, dict] = {}
        for side in ("angio", "fluoro"):
            arrays = _frames_to_arrays(getattr(pair, side))
            for kind, arr in arrays.items():
                rel = f"seq_{idx:05d}/{side}.{kind}.bin"
                raw = arr.tobytes()
                (root / rel).write_bytes(raw)
                files[f"{side}.{kind}"] = {
                    "path": rel,
                    "sha256": _sha256(raw),
                    "dtype": "labels" if kind == "labels" else str(arr.dtype),
                    "shape": list(arr.shape),
                }
        entries.append(
            {
                "dir": f"seq_{idx:05d}",
                "spec": asdict(pair.spec),
                "phase_offset": pair.phase_offset,
                "n_frames": len(pair.angio),
                "files": files,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_pairs": len(entries),
        "split": split,
        "sequences": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_manifest(path: str | Path) -> dict:
    """Parse and structurally validate a dataset manifest."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ManifestError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest.json is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise ManifestError("manifest.json lacks a format_version field")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"dataset format version {manifest['format_version']} is not "
            f"supported (expected {FORMAT_VERSION})"
        )
    if "sequences" not in manifest or not isinstance(manifest["sequences"], list):
        raise ManifestError("manifest.json lacks a sequences list")
    return manifest


def load_dataset(path: str | Path) -> list[SequencePair]:
    """Load a dataset, verifying every file checksum. Lossless round-trip."""
    root = Path(path)
    manifest = read_manifest(root)
    pairs = []
    for entry in manifest["sequences"]:
        try:
            spec = MotionSpec(**entry["spec"])
            file_map = entry["files"]
            phase_offset = float(entry["phase_offset"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed sequence entry: {exc}") from exc
        sides = {}
        for side in ("angio", "fluoro"):
            arrays = {}
            for kind in ("images", "masks", "labels"):
                meta = file_map[f"{side}.{kind}"]
                raw = (root / meta["path"]).read_bytes()
                if _sha256(raw) != meta["sha256"]:
                    raise ChecksumError(f"checksum mismatch for {meta['path']}")
                dtype = LABEL_DTYPE if meta["dtype"] == "labels" else np.dtype(meta["dtype"])
                arrays[kind] = np.frombuffer(raw, dtype=dtype).reshape(meta["shape"]).copy()
            sides[side] = _arrays_to_frames(arrays["images"], arrays["masks"], arrays["labels"])
        pairs.append(
            SequencePair(angio=sides["angio"], fluoro=sides["fluoro"], spec=spec, phase_offset=phase_offset)
        )
    return pairs


def make_split(n_pairs: int) -> dict[str, list[int]]:
    """Deterministic 7:2:1 train/val/test split over sequence indices."""
    n_train = int(np.floor(0.7 * n_pairs))
    n_val = int(np.floor(0.2 * n_pairs))
    idx = list(range(n_pairs))
    return {
        "train": idx[:n_train],
        "val": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }
