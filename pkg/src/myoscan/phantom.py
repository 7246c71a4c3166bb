"""Synthetic cardiac-like phantoms with lesions and surrogate FFR values.

A phantom is a CT-like volume (Hounsfield-style units) holding a truncated
ellipsoidal cup of "myocardium" around a bright blood pool, embedded in fat,
with a right-ventricle-like blood pool and wall, lung fields and a band of
chest-wall muscle that shares the myocardial intensity. Lesions are spheres of
hypo-enhancement plus extra texture, applied only to myocardial voxels.

Randomness is split into independent substreams (geometry, noise, lesions,
ffr) derived from one seed, so a phantom generated with lesions differs from
its lesion-free twin only inside the lesion spheres.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume_io import Volume, save_mask, save_volume


@dataclass(frozen=True)
class LesionSpec:
    center: tuple
    radius_mm: float
    contrast_delta: float
    texture_sigma: float
    severity: float


@dataclass
class PatientPhantom:
    id: str
    volume: Volume
    mask: np.ndarray
    lesions: List[LesionSpec]
    ffr: float

    @property
    def diseased(self):
        return bool(self.lesions)


@dataclass
class PhantomParams:
    """Generation parameters.

    Ranges are ``(low, high)`` pairs sampled uniformly per phantom. Lengths
    are in mm unless the name says otherwise.

    ``ffr_k`` and ``severity_range`` are chosen so that a single lesion of
    minimal severity already pushes the surrogate FFR below 0.78, while the
    lesion-free noise term never does, which makes ``ffr <= 0.78`` equivalent
    to "has at least one lesion".
    """

    dims: tuple = (96, 96, 48)
    spacing: tuple = (0.5, 0.5, 0.9)
    margin_voxels: int = 6
    outer_radius_mm: tuple = (10.0, 12.0)
    long_axis_mm: tuple = (15.0, 18.0)
    wall_mm: tuple = (3.5, 5.0)
    base_offset_mm: tuple = (0.0, 3.0)
    center_jitter_voxels: int = 3
    myocardium_hu: float = 110.0
    blood_hu: float = 350.0
    fat_hu: float = -100.0
    lung_hu: float = -800.0
    muscle_hu: float = 110.0
    noise_sigma: float = 20.0
    blur_sigma_voxels: float = 0.7
    bias_amplitude: float = 15.0
    lesion_probability: float = 0.5
    max_lesions: int = 2
    severity_range: tuple = (0.45, 1.0)
    lesion_radius_mm: tuple = (3.0, 5.0)
    contrast_delta: float = -300.0
    texture_ratio: float = 0.5
    ffr_k: float = 0.5
    ffr_noise_sigma: float = 0.07
    ffr_noise_cap: float = 0.2

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"spacing must be three positive values, got {self.spacing}")
        for name in ("outer_radius_mm", "long_axis_mm", "wall_mm", "base_offset_mm",
                     "severity_range", "lesion_radius_mm"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ParameterError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")
        if self.wall_mm[1] >= self.outer_radius_mm[0]:
            raise ParameterError("wall thickness must stay below the outer radius")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ParameterError("lesion_probability must lie in [0, 1]")
        if self.severity_range[0] <= 0 or self.severity_range[1] > 1:
            raise ParameterError("severity_range must lie within (0, 1]")
        if self.max_lesions < 1:
            raise ParameterError("max_lesions must be at least 1")
        if self.noise_sigma < 0 or self.texture_ratio < 0 or self.ffr_noise_sigma < 0:
            raise ParameterError("noise scales must be non-negative")
        if self.ffr_k <= 0 or self.margin_voxels < 0:
            raise ParameterError("ffr_k must be positive and margin_voxels non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    geometry, noise, lesions, ffr = ss.spawn(4)
    return {name: np.random.default_rng(s) for name, s in
            zip(("geometry", "noise", "lesions", "ffr"), (geometry, noise, lesions, ffr))}


def _grid_mm(dims, spacing):
    return [np.arange(n, dtype=np.float64)[tuple(slice(None) if a == i else None for a in range(3))] * s
            for i, (n, s) in enumerate(zip(dims, spacing))]


def _ellipsoid(coords, center, radii):
    return sum(((c - m) / r) ** 2 for c, m, r in zip(coords, center, radii)) <= 1.0


def _anatomy(params, rng):
    """Label map and myocardium mask for one geometry draw."""
    dims, sp = params.dims, params.spacing
    x, y, z = _grid_mm(dims, sp)
    u = lambda r: rng.uniform(*r)  # noqa: E731
    a = u(params.outer_radius_mm)
    c = u(params.long_axis_mm)
    t = u(params.wall_mm)
    base = u(params.base_offset_mm)
    jitter = rng.integers(-params.center_jitter_voxels, params.center_jitter_voxels + 1, size=2)
    cx = (dims[0] / 2 + jitter[0]) * sp[0]
    cy = (dims[1] / 2 + jitter[1]) * sp[1]
    # apex towards low z; the cup opens at the base plane
    span_z = dims[2] * sp[2]
    cz = 0.62 * span_z - base
    base_z = cz + base

    below_base = z <= base_z
    outer = _ellipsoid((x, y, z), (cx, cy, cz), (a, a, c)) & below_base
    inner = _ellipsoid((x, y, z), (cx, cy, cz), (a - t, a - t, c - 0.8 * t)) & below_base
    myo = outer & ~inner

    # right ventricle: crescent of blood wrapped around the septum, with a thin wall
    side = rng.choice([-1.0, 1.0])
    rv_c = (cx + side * (a + 0.2 * a), cy, cz + 0.2 * c)
    rv_radii = (0.9 * a, 1.3 * a, 0.8 * c)
    rv_outer = _ellipsoid((x, y, z), rv_c, tuple(r + 1.2 for r in rv_radii)) & below_base & ~outer
    rv_blood = _ellipsoid((x, y, z), rv_c, rv_radii) & below_base & ~outer
    rv_wall = rv_outer & ~rv_blood

    # lungs at the lateral volume faces, chest-wall muscle band at one y face
    lx = dims[0] * sp[0]
    lung = (x < 0.12 * lx) | (x > 0.88 * lx)
    ly = dims[1] * sp[1]
    muscle_side = rng.integers(2)
    band = (y > 0.9 * ly) if muscle_side else (y < 0.1 * ly)
    muscle = band & ~lung & (np.abs(z - cz) < 0.8 * span_z)

    labels = np.zeros(dims, dtype=np.uint8)  # 0 fat
    labels[np.broadcast_to(lung, dims)] = 1
    labels[np.broadcast_to(muscle, dims)] = 2
    labels[rv_wall] = 2
    labels[rv_blood] = 3
    labels[inner] = 3
    labels[myo] = 4
    geometry = dict(center_mm=(cx, cy, cz), outer_radius_mm=a, long_axis_mm=c, wall_mm=t)
    return labels, labels == 4, geometry


def _check_fit(mask, margin):
    if not mask.any():
        raise ParameterError("myocardium is empty for these geometry ranges")
    idx = np.nonzero(mask)
    for axis, n in enumerate(mask.shape):
        if idx[axis].min() < margin or idx[axis].max() > n - 1 - margin:
            raise ParameterError(
                f"myocardium does not fit in dims {mask.shape} with a {margin}-voxel margin (axis {axis})")


def _largest_component(mask):
    lab, n = ndimage.label(mask)  # default structure = 6-connectivity
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (1 + int(np.argmax(sizes)))


def _draw_lesions(params, rng, mask):
    """Lesion list drawn from the lesion substream (may be empty)."""
    lesions = []
    if rng.random() >= params.lesion_probability:
        return lesions
    count = int(rng.integers(1, params.max_lesions + 1))
    candidates = np.argwhere(mask)
    for _ in range(count):
        center = tuple(int(v) for v in candidates[rng.integers(len(candidates))])
        severity = float(rng.uniform(*params.severity_range))
        radius = float(rng.uniform(*params.lesion_radius_mm))
        delta = params.contrast_delta * severity
        lesions.append(LesionSpec(center, radius, delta, params.texture_ratio * abs(delta), severity))
    return lesions


def lesion_region(lesion: LesionSpec, mask, spacing):
    """Boolean mask of the voxels a lesion modifies (sphere intersected with ``mask``)."""
    coords = _grid_mm(mask.shape, spacing)
    center = [c * s for c, s in zip(lesion.center, spacing)]
    sphere = sum((g - m) ** 2 for g, m in zip(coords, center)) <= lesion.radius_mm ** 2
    return sphere & mask


def surrogate_ffr(total_severity, rng, params: PhantomParams):
    """``clamp(1 - k * severity - u)`` with ``u = min(|N(0, s)|, cap)``."""
    u = min(abs(rng.normal(0.0, params.ffr_noise_sigma)), params.ffr_noise_cap)
    return float(np.clip(1.0 - params.ffr_k * total_severity - u, 0.0, 1.0))


def generate_phantom(seed, params: Optional[PhantomParams] = None, phantom_id=None) -> PatientPhantom:
    """Generate one phantom; bit-identical for equal ``seed`` and ``params``."""
    params = params or PhantomParams()
    rngs = _streams(seed)
    labels, myo, _ = _anatomy(params, rngs["geometry"])
    myo = _largest_component(myo)
    labels[(labels == 4) & ~myo] = 0
    _check_fit(myo, params.margin_voxels)

    table = np.array([params.fat_hu, params.lung_hu, params.muscle_hu, params.blood_hu,
                      params.myocardium_hu], dtype=np.float64)
    img = table[labels]
    if params.blur_sigma_voxels > 0:
        sig = [params.blur_sigma_voxels * params.spacing[0] / s for s in params.spacing]
        img = ndimage.gaussian_filter(img, sig, mode="nearest")

    noise_rng = rngs["noise"]
    if params.bias_amplitude:
        x, y, z = _grid_mm(params.dims, params.spacing)
        k = noise_rng.uniform(0.02, 0.08, size=3)
        ph = noise_rng.uniform(0, 2 * np.pi, size=3)
        img = img + params.bias_amplitude * (np.cos(k[0] * x + ph[0]) * np.cos(k[1] * y + ph[1])
                                             * np.cos(k[2] * z + ph[2]))
    img = img + noise_rng.normal(0.0, params.noise_sigma, size=params.dims)

    lesions = _draw_lesions(params, rngs["lesions"], myo)
    for lesion in lesions:
        region = lesion_region(lesion, myo, params.spacing)
        texture = rngs["lesions"].normal(0.0, 1.0, size=int(region.sum()))
        img[region] += lesion.contrast_delta + lesion.texture_sigma * texture

    ffr = surrogate_ffr(sum(l.severity for l in lesions), rngs["ffr"], params)
    pid = phantom_id if phantom_id is not None else f"p{seed}"
    return PatientPhantom(pid, Volume(img.astype(np.float32), params.spacing), myo, lesions, ffr)


def label_from_ffr(ffr, cutoff=0.78):
    return int(ffr <= cutoff)


def write_phantoms(out_dir, seeds, params: PhantomParams, splits=None, ids=None, cutoff=0.78):
    """Generate phantoms into ``out_dir`` and return the manifest dict.

    The manifest is also written to ``out_dir/phantoms.json``; file paths in
    it are relative to ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, seed in enumerate(seeds):
        pid = ids[i] if ids is not None else f"p{i:04d}"
        ph = generate_phantom(seed, params, pid)
        vol_name, mask_name = f"{pid}.myov", f"{pid}.myom"
        save_volume(os.path.join(out_dir, vol_name), ph.volume)
        save_mask(os.path.join(out_dir, mask_name), ph.mask)
        records.append({
            "id": pid,
            "seed": int(seed),
            "volume": vol_name,
            "mask": mask_name,
            "ffr": round(ph.ffr, 12),
            "label": label_from_ffr(ph.ffr, cutoff),
            "n_lesions": len(ph.lesions),
            "split": splits[i] if splits is not None else "classify",
        })
    manifest = {"params": params_to_dict(params), "cutoff": cutoff, "patients": records}
    from .autodiff.serialize import atomic_write
    atomic_write(os.path.join(out_dir, "phantoms.json"),
                 json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest


def params_to_dict(params: PhantomParams):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(params).items()}


__all__ = [
    "LesionSpec",
    "ParameterError",
    "PatientPhantom",
    "PhantomParams",
    "generate_phantom",
    "label_from_ffr",
    "lesion_region",
    "params_to_dict",
    "surrogate_ffr",
    "write_phantoms",
]
