"""Scenes on disk, seeded synthetic crowds, and dataset splits.

Manifest (JSON)::

    {
      "version": 1,
      "scenes": [
        {"id": "s000",                 # unique, scenes are returned sorted by id
         "image": "images/s000.png",   # 8-bit grayscale PNG, relative to the manifest
         "annotations": [[row, col], ...],   # head centres in pixels, 0 <= row < H
         "roi": "roi/s000.png"}        # optional 1-bit PNG, same size as the image
      ]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .ground_truth import PointSet
from .patch_grid import GridSpec


class ManifestError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray
    points: PointSet
    id: str
    roi: np.ndarray | None = None
    # per grid cell regime index for synthetic scenes
    regimes: np.ndarray | None = None

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"scene {self.id}: image must be 2-D grayscale")
        if self.points.shape != self.image.shape:
            raise ValueError(f"scene {self.id}: annotation frame {self.points.shape} "
                             f"does not match image {self.image.shape}")
        if self.roi is not None and self.roi.shape != self.image.shape:
            raise ValueError(f"scene {self.id}: roi shape {self.roi.shape} does not match image")

    @property
    def count(self) -> int:
        return len(self.points)


# --- manifest I/O ------------------------------------------------------------

def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_dataset(manifest_path) -> list[Scene]:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"{manifest_path}: unreadable manifest ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("scenes"), list):
        raise ManifestError(f"{manifest_path}: expected an object with a 'scenes' list")
    root = manifest_path.parent
    scenes, seen = [], set()
    for i, rec in enumerate(doc["scenes"]):
        sid = rec.get("id") if isinstance(rec, dict) else None
        where = f"scene {sid!r}" if sid is not None else f"record #{i}"
        if not sid or not isinstance(sid, str):
            raise ManifestError(f"{where}: missing string 'id'")
        if sid in seen:
            raise ManifestError(f"{where}: duplicate id")
        seen.add(sid)
        if "image" not in rec:
            raise ManifestError(f"{where}: missing 'image'")
        img_path = root / rec["image"]
        if not img_path.exists():
            raise ManifestError(f"{where}: image not found: {img_path}")
        image = _read_png(img_path).astype(np.float64) / 255.0
        ann = np.asarray(rec.get("annotations", []), dtype=np.float64).reshape(-1, 2)
        try:
            points = PointSet(ann, *image.shape)
        except ValueError as e:
            raise ManifestError(f"{where}: {e}") from e
        roi = None
        if rec.get("roi"):
            roi_path = root / rec["roi"]
            if not roi_path.exists():
                raise ManifestError(f"{where}: roi not found: {roi_path}")
            roi = _read_png(roi_path) > 0
            if roi.shape != image.shape:
                raise ManifestError(f"{where}: roi shape {roi.shape} != image {image.shape}")
        regimes = rec.get("regimes")
        scenes.append(Scene(image, points, sid, roi,
                            None if regimes is None else np.asarray(regimes, dtype=int)))
    return sorted(scenes, key=lambda s: s.id)


def save_dataset(scenes: list[Scene], directory, name: str = "manifest.json") -> Path:
    """Write PNGs plus a manifest; images are quantised to 8 bits."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in sorted(scenes, key=lambda s: s.id):
        img = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(directory / "images" / f"{s.id}.png")
        rec = {"id": s.id, "image": f"images/{s.id}.png",
               "annotations": s.points.points.tolist(), "roi": None}
        if s.roi is not None:
            (directory / "roi").mkdir(exist_ok=True)
            Image.fromarray(s.roi.astype(bool)).save(directory / "roi" / f"{s.id}.png")
            rec["roi"] = f"roi/{s.id}.png"
        if s.regimes is not None:
            rec["regimes"] = s.regimes.tolist()
        records.append(rec)
    path = directory / name
    path.write_text(json.dumps({"version": 1, "scenes": records}, indent=1) + "\n")
    return path


# --- splits ------------------------------------------------------------------

def split_dataset(scenes: list, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    cuts = np.round(np.cumsum(fractions) * len(scenes)).astype(int)
    parts = np.split(order, cuts[:2])
    return tuple([scenes[i] for i in part] for part in parts)


def kfold_splits(scenes: list, k: int = 5, seed: int = 0):
    """``k`` (train, test) pairs; every scene is tested exactly once."""
    if not 2 <= k <= len(scenes):
        raise ValueError(f"need 2 <= k <= {len(scenes)}, got {k}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    folds = np.array_split(order, k)
    return [([scenes[i] for j, f in enumerate(folds) if j != fi for i in f],
             [scenes[i] for i in fold]) for fi, fold in enumerate(folds)]


# --- synthetic crowds --------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    """One crowd regime; densities are persons per pixel^2 of patch area."""

    name: str
    density_range: tuple[float, float]
    blob_radius_range: tuple[float, float]
    texture_amplitude: float
    empty_prob: float = 0.0
    texture_scale: float = 1.5
    blob_contrast: float = 0.45
    # torso below each head: brightness as a fraction of blob_contrast, centre
    # offset and spread in head radii
    body_contrast: float = 0.0
    body_offset: float = 3.0
    body_extent: float = 1.0
    # head-like blobs without a torso, per head-count unit of density
    distractor_density: float = 0.0


@dataclass
class SynthConfig:
    num_scenes: int = 90
    height: int = 120
    width: int = 120
    regimes: tuple[Regime, ...] = field(default_factory=lambda: THREE_REGIMES)
    grid: GridSpec = GridSpec()
    seed: int = 0
    background: float = 0.35

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("at least one regime is required")
        for r in self.regimes:
            if min(r.density_range) < 0 or r.density_range[0] > r.density_range[1]:
                raise ValueError(f"regime {r.name}: bad density range {r.density_range}")
            if min(r.blob_radius_range) <= 0:
                raise ValueError(f"regime {r.name}: blob radii must be > 0")
            if not 0 <= r.empty_prob <= 1:
                raise ValueError(f"regime {r.name}: empty_prob must lie in [0, 1]")
            fill = r.density_range[1] * np.pi * r.blob_radius_range[1] ** 2
            if fill > _MAX_FILL:
                raise ValueError(f"regime {r.name}: heads of radius {r.blob_radius_range[1]} at "
                                 f"density {r.density_range[1]} cover {fill:.0%} of a patch, "
                                 f"more than the {_MAX_FILL:.0%} capacity")


THREE_REGIMES = (
    Regime("sparse", (1.2e-3, 3.0e-3), (4.0, 5.0), texture_amplitude=0.25, empty_prob=0.3,
           texture_scale=3.0, body_contrast=0.6, distractor_density=6e-4),
    Regime("medium", (1.2e-2, 1.6e-2), (1.8, 2.2), texture_amplitude=0.12, texture_scale=1.5,
           body_contrast=0.4),
    Regime("dense", (5.0e-2, 6.5e-2), (0.8, 1.0), texture_amplitude=0.04, texture_scale=1.0),
)

# blobs may not cover more than this fraction of a patch
_MAX_FILL = 0.5


def _place(rng, n, h, w, min_dist, attempts=200):
    """Rejection sampling; the spacing relaxes when a Poisson draw overfills the patch."""
    pts = np.zeros((0, 2))
    while len(pts) < n:
        for _ in range(attempts):
            p = rng.uniform((0, 0), (h, w))
            if len(pts) == 0 or np.min(np.hypot(*(pts - p).T)) >= min_dist:
                pts = np.vstack([pts, p])
                break
        else:
            min_dist *= 0.9
    return pts


def _render_blobs(canvas, pts, radii, contrast):
    h, w = canvas.shape
    for (r, c), rad in zip(pts, radii):
        ext = int(np.ceil(3 * rad))
        r0, r1 = max(0, int(r) - ext), min(h, int(r) + ext + 2)
        c0, c1 = max(0, int(c) - ext), min(w, int(c) + ext + 2)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        canvas[r0:r1, c0:c1] += contrast * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * (rad / 1.5) ** 2))


def _render_bodies(canvas, pts, radii, contrast, offset, extent):
    h, w = canvas.shape
    for (r, c), rad in zip(pts, radii):
        cr, sr, sc = r + offset * rad, extent * rad, 0.8 * extent * rad
        r0, r1 = max(0, int(cr - 3 * sr)), min(h, int(cr + 3 * sr) + 2)
        c0, c1 = max(0, int(c - 3 * sc)), min(w, int(c + 3 * sc) + 2)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        canvas[r0:r1, c0:c1] += contrast * np.exp(-0.5 * (((rr - cr) / sr) ** 2 + ((cc - c) / sc) ** 2))


def generate_synthetic(cfg: SynthConfig) -> list[Scene]:
    """Scenes whose grid cells each follow one regime; exact head positions.

    Cells are rendered independently: a textured background at the regime's
    amplitude plus one bright Gaussian blob per head whose radius is drawn
    from the regime's range.
    """
    rng = np.random.default_rng(cfg.seed)
    slices = cfg.grid.cell_slices(cfg.height, cfg.width)
    scenes = []
    for si in range(cfg.num_scenes):
        image = np.full((cfg.height, cfg.width), cfg.background)
        all_pts, regimes = [], np.zeros((cfg.grid.rows, cfg.grid.cols), dtype=int)
        for (gr, gc), (rs, cs) in slices.items():
            ri = int(rng.integers(len(cfg.regimes)))
            reg = cfg.regimes[ri]
            h, w = rs.stop - rs.start, cs.stop - cs.start
            noise = gaussian_filter(rng.standard_normal((h, w)), reg.texture_scale)
            noise /= noise.std() + 1e-12
            cell = image[rs, cs]
            cell += reg.texture_amplitude * 0.5 * noise
            empty = rng.random() < reg.empty_prob
            dens = rng.uniform(*reg.density_range)
            n = 0 if empty else int(rng.poisson(dens * h * w))
            r_lo, r_hi = reg.blob_radius_range
            # a Poisson tail may not overfill the patch
            n = min(n, int(_MAX_FILL * h * w / (np.pi * r_hi ** 2)))
            # people keep roughly the spacing their density implies
            pts = _place(rng, n, h, w, min_dist=max(1.5 * r_lo, 0.6 / np.sqrt(max(dens, 1e-12))))
            radii = rng.uniform(r_lo, r_hi, size=n)
            if reg.body_contrast > 0:
                _render_bodies(cell, pts, radii, reg.body_contrast * reg.blob_contrast,
                               reg.body_offset, reg.body_extent)
            _render_blobs(cell, pts, radii, reg.blob_contrast)
            if reg.distractor_density > 0:
                nd = int(rng.poisson(reg.distractor_density * h * w))
                dpts = rng.uniform((0, 0), (h, w), size=(nd, 2))
                _render_blobs(cell, dpts, rng.uniform(r_lo, r_hi, size=nd), reg.blob_contrast)
            regimes[gr, gc] = ri
            all_pts.append(pts + (rs.start, cs.start))
        image = np.clip(image, 0.0, 1.0)
        image = np.round(image * 255.0) / 255.0
        pts = np.vstack(all_pts) if all_pts else np.zeros((0, 2))
        scenes.append(Scene(image, PointSet(pts, cfg.height, cfg.width), f"syn{si:04d}",
                            regimes=regimes))
    return scenes
