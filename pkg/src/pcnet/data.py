"""Data pipeline: preprocessing, augmentation, patch sampling, synthesis.

ImageRecords hold [1, H, W] (2D) or [1, D, H, W] (3D) float32 pixel
tensors in [0, 1] plus an optional binary uint8 mask of the same spatial
shape.  Sampling and synthesis are pure functions of (inputs, seed).
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import Tensor, ShapeError


class DataError(Exception):
    """Dataset content unusable for the requested operation."""


@dataclass
class ImageRecord:
    id: str
    pixels: Tensor
    mask: Tensor | None = None
    spacing: tuple = ()
    modality: str = "synthetic"

    def __post_init__(self):
        px = self.pixels.data
        if px.min() < 0 or px.max() > 1:
            raise DataError(f"record {self.id}: pixels outside [0, 1]")
        if not self.spacing:
            self.spacing = (0.80, 0.586, 0.586) if px.ndim == 4 else (1.0, 1.0)
        if self.mask is not None:
            if self.mask.dtype != np.uint8:
                raise DataError(f"record {self.id}: mask must be uint8")
            if self.mask.shape != px.shape:
                raise DataError(f"record {self.id}: mask shape {self.mask.shape} "
                                f"!= pixels {px.shape}")

    @property
    def spatial_shape(self):
        return self.pixels.shape[1:]


@dataclass
class Sample:
    patch: np.ndarray
    label: np.ndarray
    source_id: str
    corner: tuple


@dataclass
class SampleSet:
    patch_shape: tuple
    samples: list = field(default_factory=list)

    def append(self, patch, label, source_id, corner):
        if patch.shape[1:] != self.patch_shape:
            raise ShapeError(f"patch shape {patch.shape[1:]} != {self.patch_shape}")
        self.samples.append(Sample(patch, label, source_id, tuple(int(c) for c in corner)))

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def digest(self):
        """SHA-256 over patch bytes, label bytes and provenance."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(np.ascontiguousarray(s.patch).tobytes())
            h.update(np.ascontiguousarray(s.label).tobytes())
            h.update(s.source_id.encode())
            h.update(repr(s.corner).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# preprocessing


def _clip_histogram(hist, clip_limit, bins):
    # one-pass clip with uniform redistribution of the excess
    limit = max(clip_limit * hist.sum() / bins, 1.0)
    clipped = np.minimum(hist, limit)
    excess = hist.sum() - clipped.sum()
    return clipped + excess / bins


def clahe(image, tiles=(8, 8), clip_limit=2.0, bins=256):
    """Contrast-limited adaptive histogram equalization of a 2D image.

    image: Tensor [1,H,W] (or [H,W]) in [0,1]; internally quantized to
    `bins` levels; per-tile clipped-CDF mappings are blended bilinearly
    between tile centers.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    squeeze = arr.ndim == 3
    img = arr[0] if squeeze else arr
    if img.ndim != 2:
        raise ShapeError(f"clahe expects one 2D channel, got shape {arr.shape}")
    if img.min() < 0 or img.max() > 1:
        raise DataError("clahe input outside [0, 1]")
    ty, tx = tiles if not isinstance(tiles, int) else (tiles, tiles)
    h, w = img.shape
    if h < ty or w < tx:
        raise DataError(f"image {h}x{w} smaller than tile grid {ty}x{tx}")
    q = np.clip((img * (bins - 1)).round().astype(np.int64), 0, bins - 1)
    edges_y = [(i * h // ty, (i + 1) * h // ty) for i in range(ty)]
    edges_x = [(j * w // tx, (j + 1) * w // tx) for j in range(tx)]
    maps = np.empty((ty, tx, bins), dtype=np.float64)
    for i, (y0, y1) in enumerate(edges_y):
        for j, (x0, x1) in enumerate(edges_x):
            hist = np.bincount(q[y0:y1, x0:x1].reshape(-1),
                               minlength=bins).astype(np.float64)
            hist = _clip_histogram(hist, clip_limit, bins)
            maps[i, j] = np.cumsum(hist) / hist.sum()

    def axis_blend(coords, edges):
        centers = np.array([(s + e - 1) / 2.0 for s, e in edges])
        i1 = np.searchsorted(centers, coords)
        i0 = np.clip(i1 - 1, 0, len(edges) - 1)
        i1 = np.clip(i1, 0, len(edges) - 1)
        span = np.where(i1 > i0, centers[i1] - centers[i0], 1.0)
        wgt = np.clip((coords - centers[i0]) / span, 0.0, 1.0)
        return i0, i1, wgt

    iy0, iy1, wy = axis_blend(np.arange(h, dtype=np.float64), edges_y)
    ix0, ix1, wx = axis_blend(np.arange(w, dtype=np.float64), edges_x)
    wy = wy[:, None]
    wx = wx[None, :]
    out = ((1 - wy) * ((1 - wx) * maps[iy0[:, None], ix0[None, :], q]
                       + wx * maps[iy0[:, None], ix1[None, :], q])
           + wy * ((1 - wx) * maps[iy1[:, None], ix0[None, :], q]
                   + wx * maps[iy1[:, None], ix1[None, :], q]))
    out = out.astype(np.float32)
    return Tensor(out[None] if squeeze else out)


def gamma_adjust(image, gamma=1.2):
    """Power-law remap: out = in ** gamma for inputs in [0, 1]."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.min() < 0 or arr.max() > 1:
        raise DataError("gamma_adjust input outside [0, 1]")
    return Tensor(np.power(arr, gamma, dtype=arr.dtype))


def hu_normalize(volume):
    """Clip Hounsfield values to [0, 900] and map linearly onto [0, 1]."""
    arr = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    out = np.clip(arr, 0.0, 900.0) / 900.0
    return Tensor(out.astype(np.float32, copy=False))


# ---------------------------------------------------------------------------
# augmentation


def apply_dihedral(record, rot, flip):
    """rot: quarter-turns 0..3; flip: 0 none, 1 horizontal, 2 vertical."""

    def tf(a):
        out = np.rot90(a, k=rot, axes=(1, 2))
        if flip == 1:
            out = out[:, :, ::-1]
        elif flip == 2:
            out = out[:, ::-1, :]
        return np.ascontiguousarray(out)

    mask = None
    if record.mask is not None:
        mask = Tensor(tf(record.mask.data))
    return ImageRecord(record.id, Tensor(tf(record.pixels.data)), mask,
                       record.spacing, record.modality)


def augment(record, seed):
    """Random rotation (multiples of 90 degrees) plus horizontal/vertical
    flip, applied identically to pixels and mask."""
    if record.pixels.data.ndim != 3:
        raise DataError("augment supports 2D records only")
    rng = np.random.default_rng(seed)
    rot = int(rng.integers(4))
    flip = int(rng.integers(3))
    return apply_dihedral(record, rot, flip)


# ---------------------------------------------------------------------------
# patch sampling


def sample_patches_2d(records, count, patch=48, seed=0):
    """Uniformly random in-bounds patch corners across 2D records."""
    if not records:
        raise DataError("no records to sample from")
    for r in records:
        if any(l < patch for l in r.spatial_shape):
            raise DataError(f"record {r.id}: smaller than patch {patch}")
        if r.mask is None:
            raise DataError(f"record {r.id}: mask required for labelled patches")
    rng = np.random.default_rng(seed)
    out = SampleSet((patch, patch))
    for _ in range(count):
        r = records[int(rng.integers(len(records)))]
        h, w = r.spatial_shape
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        out.append(r.pixels.data[:, y:y + patch, x:x + patch],
                   r.mask.data[:, y:y + patch, x:x + patch],
                   r.id, (y, x))
    return out


def _window_clear_corners(mask, patch):
    """Boolean volume of corners whose patch window holds no foreground."""
    m = mask.astype(np.int64)
    s = m
    for ax in range(m.ndim):
        s = np.cumsum(s, axis=ax)
    s = np.pad(s, [(1, 0)] * m.ndim)
    out_shape = tuple(l - patch + 1 for l in m.shape)
    total = np.zeros(out_shape, dtype=np.int64)
    # inclusion-exclusion over the 2^rank corner offsets of the box sum
    for offs in np.ndindex(*(2,) * m.ndim):
        sl = tuple(slice(o * patch, o * patch + e) for o, e in zip(offs, out_shape))
        sign = (-1) ** (m.ndim - sum(offs))
        total += sign * s[sl]
    return total == 0


def sample_patches_3d(records, vessel_per_scan=105, background_per_scan=17,
                      patch=48, seed=0):
    """Stratified 3D sampling: vessel patches centered on foreground
    voxels (corner clamped in-bounds), background patches centered on
    voxels whose patch window contains no foreground."""
    if not records:
        raise DataError("no records to sample from")
    seeds = np.random.SeedSequence(seed).spawn(len(records))
    out = SampleSet((patch,) * 3)
    half = patch // 2
    for rec, ss in zip(records, seeds):
        sp = rec.spatial_shape
        if any(l < patch for l in sp):
            raise DataError(f"record {rec.id}: smaller than patch {patch}")
        if rec.mask is None:
            raise DataError(f"record {rec.id}: mask required")
        rng = np.random.default_rng(ss)
        mask = rec.mask.data[0]
        fg = np.argwhere(mask)
        if len(fg) == 0:
            raise DataError(f"record {rec.id}: zero foreground voxels, "
                            "cannot draw vessel patches")
        picks = rng.integers(len(fg), size=vessel_per_scan)
        for p in picks:
            corner = np.clip(fg[p] - half, 0, np.array(sp) - patch)
            _append_patch(out, rec, corner, patch)
        clear = _window_clear_corners(mask, patch)
        if not clear.any():
            raise DataError(f"record {rec.id}: no vessel-free {patch}^3 window "
                            "for background patches")
        # map voxel centers onto their clamped corner and keep those clear
        center_ok = clear[tuple(
            np.clip(np.arange(l) - half, 0, l - patch)[
                (None,) * ax + (slice(None),) + (None,) * (2 - ax)]
            for ax, l in enumerate(sp))]
        centers = np.argwhere(center_ok)
        picks = rng.integers(len(centers), size=background_per_scan)
        for p in picks:
            corner = np.clip(centers[p] - half, 0, np.array(sp) - patch)
            _append_patch(out, rec, corner, patch)
    return out


def _append_patch(out, rec, corner, patch):
    sl = (slice(None),) + tuple(slice(int(c), int(c) + patch) for c in corner)
    out.append(rec.pixels.data[sl], rec.mask.data[sl], rec.id, corner)


# ---------------------------------------------------------------------------
# synthetic tubular data


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _stamp_ball(mask, center, radius):
    rank = mask.ndim
    lo = [max(0, int(math.floor(center[a] - radius))) for a in range(rank)]
    hi = [min(mask.shape[a], int(math.ceil(center[a] + radius)) + 1)
          for a in range(rank)]
    if any(l >= h for l, h in zip(lo, hi)):
        return
    grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    region = tuple(slice(l, h) for l, h in zip(lo, hi))
    mask[region] |= d2 <= radius * radius


def _grow_tree(mask, rng, box_lo, box_hi, n_branches, width_range):
    """Rasterize one connected branching tube tree into mask (in place)."""
    rank = mask.ndim
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    span = hi - lo
    root = lo + rng.uniform(0.15, 0.85, rank) * span
    nodes = [root]  # candidate branch-off points on the existing tree
    for b in range(n_branches):
        start = nodes[int(rng.integers(len(nodes)))]
        d = _unit(rng.standard_normal(rank))
        radius = rng.uniform(width_range[0], width_range[1]) / 2.0
        length = rng.uniform(0.35, 0.85) * span.min() * (0.9 ** b)
        steps = max(int(length / 0.5), 4)
        p = start.astype(np.float64).copy()
        for _ in range(steps):
            _stamp_ball(mask, p, radius)
            d = _unit(d + rng.normal(0.0, 0.25, rank))
            nxt = p + d * 0.5
            # reflect off the growth box to stay inside
            for a in range(rank):
                if nxt[a] < lo[a] or nxt[a] > hi[a] - 1:
                    d[a] = -d[a]
                    nxt[a] = np.clip(nxt[a], lo[a], hi[a] - 1)
            p = nxt
            if rng.random() < 0.05:
                nodes.append(p.copy())
        nodes.append(p.copy())


def synth_vessels(rank, extent, n_branches=6, width_range=(1, 4),
                  noise_sigma=0.08, seed=0, n_trees=2, fg_target=None,
                  clear_margin=None, record_id=None):
    """Random branching tube phantoms with matched mask.

    2D: n_branches branches split over n_trees trees.  3D: branches are
    added until the foreground fraction reaches fg_target (default
    0.43%); growth is confined outside a clear margin so vessel-free
    background windows always exist.  Pixels are background texture plus
    a smoothed vessel intensity profile plus Gaussian noise; with
    noise_sigma = 0 thresholding at 0.5 recovers the mask exactly.
    """
    if rank not in (2, 3):
        raise ValueError("rank must be 2 or 3")
    shape = (extent,) * rank if isinstance(extent, int) else tuple(extent)
    if any(l < 64 for l in shape):
        raise DataError(f"extent {shape} below minimum 64")
    rng = np.random.default_rng(seed)
    mask = np.zeros(shape, dtype=bool)
    if clear_margin is None:
        clear_margin = 50 if rank == 3 else 0
    box_lo = (clear_margin,) * rank
    if any(h - l < 8 for l, h in zip(box_lo, shape)):
        raise DataError("clear margin leaves no room for vessel growth")

    if rank == 3:
        target = 0.0043 if fg_target is None else fg_target
        trees = 0
        while mask.mean() < target and trees < 64:
            per_tree_seed = rng.integers(2 ** 63)
            _grow_tree(mask, np.random.default_rng(per_tree_seed), box_lo, shape,
                       n_branches=max(2, n_branches // 2), width_range=width_range)
            trees += 1
        n_trees = trees
    else:
        n_trees = max(1, min(n_trees, n_branches))
        per_tree = [n_branches // n_trees] * n_trees
        for i in range(n_branches % n_trees):
            per_tree[i] += 1
        for nb in per_tree:
            per_tree_seed = rng.integers(2 ** 63)
            _grow_tree(mask, np.random.default_rng(per_tree_seed), box_lo, shape,
                       n_branches=nb, width_range=width_range)

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=8.0)
    trange = texture.max() - texture.min()
    texture = (texture - texture.min()) / (trange if trange > 0 else 1.0)
    background = 0.05 + 0.40 * texture

    blur = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0)
    peak = blur[mask].max() if mask.any() else 1.0
    profile = 0.55 + 0.40 * np.clip(blur / peak, 0.0, 1.0)

    pixels = np.where(mask, profile, background)
    if noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, noise_sigma, shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    rid = record_id if record_id else f"vessels-{rank}d-{seed}"
    rec = ImageRecord(rid, Tensor(pixels[None]),
                      Tensor(mask[None].astype(np.uint8)))
    rec.n_trees = n_trees
    return rec
