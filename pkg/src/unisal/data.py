"""Dataset I/O, synthetic domain-shifted data, frame-rate assimilation, and
domain-pure batch scheduling.

On-disk layout, kept deliberately language-neutral:

    <root>/manifest.txt                 key=value: modality, fps, height, width
    <root>/<sample_id>/frames/00000.png       8-bit RGB
    <root>/<sample_id>/fixations/00000.txt    "row col" integer pairs, one per line
    <root>/<sample_id>/saliency/00000.png     16-bit grayscale, scaled so max = 65535

Frames and maps are bilinear-resized to the domain's input resolution at
load time; fixations are resized by mapping coordinates (never the raster),
so the maps stay binary and each source fixation lands on exactly one
target pixel.  Collisions merge and are counted on the sample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .metrics import bilinear_resize


# ------------------------------------------------------------------ file io

def write_frame(path, arr):
    """(3, h, w) float in [0, 1] -> 8-bit RGB PNG."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    img = np.round(a * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img).save(path)


def read_frame(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def write_map16(path, arr):
    """Nonnegative (h, w) map -> 16-bit grayscale PNG scaled so the peak is
    65535; an all-zero map stays all zero.  Returns the peak value, which a
    caller must keep if it wants the absolute scale back."""
    a = np.asarray(arr, dtype=np.float64)
    if (a < 0).any():
        raise ValueError("saliency maps must be nonnegative")
    peak = a.max()
    scaled = np.zeros_like(a) if peak == 0 else a / peak
    Image.fromarray(np.round(scaled * 65535.0).astype(np.uint16)).save(path)
    return float(peak)


def read_map16(path):
    """16-bit (or 8-bit) grayscale image -> float map in [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
        mode = "L"
    scale = 65535.0 if mode in ("I", "I;16", "I;16B", "I;16L") else 255.0
    return arr / scale


def write_fixation_file(path, coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    lines = [f"{r} {c}" for r, c in coords]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_fixation_file(path):
    coords = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'row col', got {line!r}")
        coords.append((int(parts[0]), int(parts[1])))
    return np.asarray(coords, dtype=np.int64).reshape(-1, 2)


def write_manifest(root, fields):
    lines = [f"{k}={fields[k]}" for k in ("modality", "fps", "height", "width")]
    (Path(root) / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(root):
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise ValueError(f"{root}: missing manifest.txt")
    fields = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: bad manifest line {line!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    for key in ("modality", "fps", "height", "width"):
        if key not in fields:
            raise ValueError(f"{path}: manifest missing {key!r}")
    return fields


# -------------------------------------------------------------- fixations

def map_fixation_coords(coords, src_hw, dst_hw):
    """Transfer fixation coordinates between resolutions by nearest pixel
    center.  Returns (unique mapped coords, collision count)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.shape[0] == 0:
        return coords, 0
    sh, sw = src_hw
    dh, dw = dst_hw
    r = np.clip(np.floor((coords[:, 0] + 0.5) * dh / sh), 0, dh - 1)
    c = np.clip(np.floor((coords[:, 1] + 0.5) * dw / sw), 0, dw - 1)
    mapped = np.stack([r, c], axis=1).astype(np.int64)
    uniq = np.unique(mapped, axis=0)
    return uniq, mapped.shape[0] - uniq.shape[0]


def fixation_map(coords, hw):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    m = np.zeros(hw, dtype=bool)
    if coords.shape[0]:
        if ((coords < 0).any() or (coords[:, 0] >= hw[0]).any()
                or (coords[:, 1] >= hw[1]).any()):
            raise ValueError(f"fixation outside the {hw} frame")
        m[coords[:, 0], coords[:, 1]] = True
    return m


# --------------------------------------------------------------- datasets

@dataclass
class Sample:
    sample_id: str
    domain: object
    frames: list
    fixations: list
    saliency: list
    fixation_collisions: int = 0


class Dataset:
    """Lazily loaded, eagerly indexed view of one on-disk dataset, resized
    to the domain's input resolution."""

    def __init__(self, root, domain):
        self.root = Path(root)
        self.domain = domain
        manifest = read_manifest(self.root)
        if manifest["modality"] != domain.modality:
            raise ValueError(f"{self.root}: dataset is {manifest['modality']}, "
                             f"domain {domain.name} is {domain.modality}")
        if domain.dynamic and int(manifest["fps"]) != domain.native_fps:
            raise ValueError(f"{self.root}: dataset fps {manifest['fps']} != "
                             f"domain {domain.name} fps {domain.native_fps}")
        self.native_hw = (int(manifest["height"]), int(manifest["width"]))

        self._index = []
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            frame_files = sorted((d / "frames").glob("*.png")) + \
                sorted((d / "frames").glob("*.pgm"))
            frame_files.sort(key=lambda p: p.name)
            if not frame_files:
                raise ValueError(f"{d}: no frame files")
            if not domain.dynamic and len(frame_files) != 1:
                raise ValueError(f"{d}: static sample has {len(frame_files)} "
                                 f"frames, expected exactly 1")
            entries = []
            for f in frame_files:
                fx = d / "fixations" / (f.stem + ".txt")
                if not fx.exists():
                    raise ValueError(f"frame {f}: missing fixation file {fx}")
                sal = d / "saliency" / (f.stem + ".png")
                if not sal.exists():
                    sal = d / "saliency" / (f.stem + ".pgm")
                if not sal.exists():
                    raise ValueError(f"frame {f}: missing saliency map "
                                     f"{d / 'saliency' / (f.stem + '.png')}")
                entries.append((f, fx, sal))
            with Image.open(entries[0][0]) as im:
                if im.size != (self.native_hw[1], self.native_hw[0]):
                    raise ValueError(f"{entries[0][0]}: size {im.size[::-1]} "
                                     f"does not match manifest {self.native_hw}")
            self._index.append((d.name, entries))
        if not self._index:
            raise ValueError(f"{self.root}: no sample directories")
        self._cache = {}

    @property
    def sample_ids(self):
        return [name for name, _ in self._index]

    def __len__(self):
        return len(self._index)

    def __getitem__(self, i):
        if i in self._cache:
            return self._cache[i]
        name, entries = self._index[i]
        hw = self.domain.input_resolution
        resize = hw != self.native_hw
        frames, fixes, sals = [], [], []
        collisions = 0
        for frame_path, fix_path, sal_path in entries:
            frame = read_frame(frame_path)
            sal = read_map16(sal_path)
            coords = read_fixation_file(fix_path)
            coords, merged = map_fixation_coords(coords, self.native_hw, hw)
            collisions += merged
            if resize:
                frame = np.stack([bilinear_resize(ch, hw) for ch in frame])
                sal = np.maximum(bilinear_resize(sal, hw), 0.0)
            frames.append(frame)
            sals.append(sal)
            fixes.append(fixation_map(coords, hw))
        sample = Sample(sample_id=name, domain=self.domain, frames=frames,
                        fixations=fixes, saliency=sals,
                        fixation_collisions=collisions)
        self._cache[i] = sample
        return sample


def load_dataset(root, domain):
    return Dataset(root, domain)


# ---------------------------------------------------- frame-rate handling

def assimilation_stride(native_fps, target_fps=6):
    if native_fps % target_fps != 0:
        raise ValueError(f"native fps {native_fps} is not divisible by "
                         f"target fps {target_fps}")
    return native_fps // target_fps


def assimilate_frame_rate(frames, native_fps, target_fps=6):
    """Subsample to the shared temporal rate: every stride-th frame,
    starting at the first."""
    stride = assimilation_stride(native_fps, target_fps)
    return list(frames[::stride])


def make_clips(sample, clip_length=12, rng_seed=0, target_fps=6):
    """Fixed-length clips over the assimilated frames of one dynamic
    sample: a seeded random start offset, then consecutive windows.
    Each clip is a tuple of native frame indices.  Too-short samples are
    discarded with a warning."""
    if not sample.domain.dynamic:
        raise ValueError(f"sample {sample.sample_id}: domain "
                         f"{sample.domain.name} is static, clips need frames")
    stride = assimilation_stride(sample.domain.native_fps, target_fps)
    idx = list(range(0, len(sample.frames), stride))
    if len(idx) < clip_length:
        warnings.warn(f"sample {sample.sample_id}: {len(idx)} assimilated "
                      f"frames < clip length {clip_length}, discarded")
        return []
    rng = np.random.default_rng(rng_seed)
    # phase jitter of at most one clip length, so coverage stays maximal
    span = min(clip_length, len(idx) - clip_length + 1)
    offset = int(rng.integers(0, span))
    n = (len(idx) - offset) // clip_length
    return [tuple(idx[offset + k * clip_length:
                      offset + (k + 1) * clip_length]) for k in range(n)]


# -------------------------------------------------------------- batching

@dataclass(frozen=True)
class BatchDesc:
    domain_name: str
    sample_indices: tuple


def schedule_epoch(datasets, batch_sizes, rng_seed=0):
    """Domain-pure batches covering every sample exactly once, the ragged
    tail kept, batch order shuffled across domains.  Deterministic per
    seed; datasets is a name -> dataset mapping."""
    rng = np.random.default_rng(rng_seed)
    batches = []
    for name in sorted(datasets):
        ds = datasets[name]
        size = batch_sizes[name]
        if size <= 0:
            raise ValueError(f"domain {name}: batch size must be positive")
        if len(ds) == 0:
            raise ValueError(f"domain {name}: empty dataset")
        perm = rng.permutation(len(ds))
        for k in range(0, len(perm), size):
            batches.append(BatchDesc(name, tuple(int(j)
                                                 for j in perm[k:k + size])))
    order = rng.permutation(len(batches))
    return [batches[int(j)] for j in order]


def stack_static_batch(samples):
    x = np.stack([s.frames[0] for s in samples])
    gt = np.stack([s.saliency[0] for s in samples])
    fix = np.stack([s.fixations[0] for s in samples])
    return x, gt, fix


def stack_clip_batch(samples, clips):
    """One clip (tuple of frame indices) per sample, all the same length;
    returns per-timestep stacks."""
    length = len(clips[0])
    xs, gts, fixes = [], [], []
    for t in range(length):
        xs.append(np.stack([s.frames[c[t]] for s, c in zip(samples, clips)]))
        gts.append(np.stack([s.saliency[c[t]] for s, c in zip(samples, clips)]))
        fixes.append(np.stack([s.fixations[c[t]]
                               for s, c in zip(samples, clips)]))
    return xs, gts, fixes


# ------------------------------------------------------- synthetic worlds

@dataclass
class SyntheticSpec:
    """One synthetic domain: colored blobs whose kind decides how salient
    they are, blended with a center-bias Gaussian and blurred to the
    domain's target sharpness.  Generation is a pure function of the
    spec."""

    root: object
    modality: str
    resolution: tuple
    n_samples: int
    seed: int = 0
    fps: int = 0
    n_frames: int = 1
    center_bias: float = 0.5
    blur_sigma: float = 1.0
    warm_weight: float = 1.0
    cool_weight: float = 1.0
    n_objects: int = 3
    n_fixations: int = 20


_WARM = np.array([0.85, 0.3, 0.15])
_COOL = np.array([0.15, 0.35, 0.85])


def center_gaussian(hw, sigma_frac=0.15):
    """Unit-mass isotropic Gaussian at the frame center."""
    h, w = hw
    sigma = sigma_frac * min(h, w)
    ys = np.arange(h)[:, None] - (h - 1) / 2.0
    xs = np.arange(w)[None, :] - (w - 1) / 2.0
    g = np.exp(-(ys ** 2 + xs ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _splat(hw, center, radius):
    ys = np.arange(hw[0])[:, None] - center[0]
    xs = np.arange(hw[1])[None, :] - center[1]
    return np.exp(-(ys ** 2 + xs ** 2) / (2.0 * radius * radius))


def _bounce(p, lo, hi):
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2.0 * span)
    return lo + (span - abs(q - span))


def generate_synthetic(spec: SyntheticSpec):
    """Write the dataset for one synthetic domain; returns its root."""
    root = Path(spec.root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = spec.resolution
    write_manifest(root, {"modality": spec.modality, "fps": spec.fps,
                          "height": h, "width": w})
    center = center_gaussian((h, w))
    dynamic = spec.modality == "dynamic"
    n_frames = spec.n_frames if dynamic else 1

    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, i])
        n = spec.n_objects
        radii = rng.uniform(min(h, w) / 10.0, min(h, w) / 5.0, n)
        pos = np.stack([rng.uniform(radii, h - 1 - radii),
                        rng.uniform(radii, w - 1 - radii)], axis=1) \
            if n else np.zeros((0, 2))
        jitter = rng.uniform(-0.08, 0.08, (n, 3))
        vel = rng.uniform(-2.5, 2.5, (n, 2))

        sdir = root / f"s{i:04d}"
        for sub in ("frames", "fixations", "saliency"):
            (sdir / sub).mkdir(parents=True, exist_ok=True)

        for t in range(n_frames):
            img = np.full((3, h, w), 0.12)
            obj = np.zeros((h, w))
            for b in range(n):
                blob = _splat((h, w), pos[b], radii[b])
                warm = b % 2 == 0
                color = np.clip((_WARM if warm else _COOL) + jitter[b], 0, 1)
                img += color[:, None, None] * blob
                weight = spec.warm_weight if warm else spec.cool_weight
                obj += weight * blob
            img = np.clip(img, 0.0, 1.0)

            if obj.sum() > 0:
                obj = obj / obj.sum()
            gt = (1.0 - spec.center_bias) * obj + spec.center_bias * center
            if spec.blur_sigma > 0:
                gt = ndimage.gaussian_filter(gt, spec.blur_sigma,
                                             mode="constant")
            gt = gt / gt.sum()

            flat = gt.ravel()
            picks = rng.choice(flat.size, size=spec.n_fixations,
                               replace=True, p=flat / flat.sum())
            coords = np.stack(np.divmod(picks, w), axis=1)

            stem = f"{t:05d}"
            write_frame(sdir / "frames" / f"{stem}.png", img)
            write_map16(sdir / "saliency" / f"{stem}.png", gt)
            write_fixation_file(sdir / "fixations" / f"{stem}.txt", coords)

            if dynamic and n:
                pos = pos + vel
                pos[:, 0] = [_bounce(p, r, h - 1 - r)
                             for p, r in zip(pos[:, 0], radii)]
                pos[:, 1] = [_bounce(p, r, w - 1 - r)
                             for p, r in zip(pos[:, 1], radii)]
    return root
