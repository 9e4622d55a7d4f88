"""Skull masks, artificial defects and synthetic datasets.

The phantoms are hollow ellipsoids: crude, but they have what the implant
networks need (a closed bony shell of roughly constant thickness whose
missing piece can be inferred from its surroundings).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nrrd
from .voxel import VoxelGrid, largest_component, threshold

SHAPES = ("sphere", "box", "cylinder")


class EmptySkullError(ValueError):
    pass


class EmptyDefectError(ValueError):
    pass


def extract_skull(ct: VoxelGrid, hu: int = 150, connectivity: int = 26) -> VoxelGrid:
    """Bone threshold followed by keeping the largest connected body.

    The head holder of the CT table survives the threshold too; it is assumed
    to be smaller than the skull.
    """
    bone = threshold(ct, hu)
    if bone.count() == 0:
        raise EmptySkullError(f"no voxel reaches {hu} HU")
    return largest_component(bone, connectivity)


# --- phantoms -------------------------------------------------------------


@dataclass(frozen=True)
class PhantomParams:
    radii: tuple[float, float, float] = (50.0, 56.0, 46.0)
    thickness: float = 8.0
    dims: tuple[int, int, int] = (128, 128, 128)
    seed: int | None = None
    jitter: float = 0.05
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.thickness < 1:
            raise ValueError("shell thickness must be at least one voxel")
        if min(self.radii) <= 0:
            raise ValueError("radii must be positive")
        if 2 * max(self.radii) >= min(self.dims):
            raise ValueError(f"ellipsoid with radii {self.radii} does not fit {self.dims}")
        if not 0 <= self.jitter <= 0.05:
            raise ValueError("radius jitter is limited to 5%")


def phantom_radii(params: PhantomParams) -> np.ndarray:
    """Radii after the seeded perturbation (none when ``seed`` is None)."""
    radii = np.asarray(params.radii, dtype=np.float64)
    if params.seed is not None and params.jitter > 0:
        rng = np.random.default_rng(params.seed)
        radii = radii * (1.0 + rng.uniform(-params.jitter, params.jitter, size=3))
        radii = np.minimum(radii, (np.asarray(params.dims) - 1) / 2.0)
    return radii


def normalized_radius(dims, radii, center=None) -> np.ndarray:
    """Ellipsoidal radius of every voxel centre (1.0 on the outer surface)."""
    if center is None:
        center = (np.asarray(dims) - 1) / 2.0
    axes = [((np.arange(n) - c) / r) ** 2 for n, c, r in zip(dims, center, radii)]
    return np.sqrt(axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :])


def synth_skull_phantom(params: PhantomParams) -> VoxelGrid:
    """Hollow ellipsoidal shell: foreground where ``1 - t / r_min <= rho <= 1``."""
    radii = phantom_radii(params)
    rho = normalized_radius(params.dims, radii)
    inner = 1.0 - params.thickness / radii.min()
    data = ((rho >= inner) & (rho <= 1.0)).astype(np.uint8)
    return VoxelGrid(data, params.spacing, "mask")


def synth_ct(skull: VoxelGrid, seed: int = 0, table_hu: int = 300,
             bone_hu: int = 1000) -> VoxelGrid:
    """Intensity volume around a skull mask, with a detached bar for the CT table."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = skull.dims
    ct = np.full(skull.dims, -1000, dtype=np.int16)
    ct[skull.data.astype(bool)] = bone_hu
    ct += rng.integers(-20, 21, size=skull.dims, dtype=np.int16)
    ys = np.flatnonzero(skull.data.any(axis=(0, 2)))
    if ys[0] >= 3:
        # thin plate below the head along y, separated by at least one voxel
        ct[nx // 4: 3 * nx // 4, : ys[0] - 1, nz // 4: 3 * nz // 4] = table_hu
    return VoxelGrid(ct, skull.spacing, "hu")


# --- defects --------------------------------------------------------------


@dataclass(frozen=True)
class DefectSpec:
    """A region removed from the skull.

    ``size`` is ``(radius,)`` for spheres, three half-extents for boxes and
    ``(radius, half_length)`` for cylinders, whose axis is ``axis``.
    """

    shape: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    seed: int = 0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown defect shape {self.shape!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.shape]
        if len(self.size) != expected or min(self.size) <= 0:
            raise ValueError(f"{self.shape} needs {expected} positive size values, got {self.size}")
        if np.linalg.norm(self.axis) == 0:
            raise ValueError("cylinder axis must be non-zero")

    def region(self, dims) -> np.ndarray:
        if not all(0 <= c <= n - 1 for c, n in zip(self.center, dims)):
            raise ValueError(f"defect centre {self.center} outside grid {tuple(dims)}")
        d = [np.arange(n, dtype=np.float64) - c for n, c in zip(dims, self.center)]
        dx, dy, dz = d[0][:, None, None], d[1][None, :, None], d[2][None, None, :]
        if self.shape == "sphere":
            return dx * dx + dy * dy + dz * dz <= self.size[0] ** 2
        if self.shape == "box":
            hx, hy, hz = self.size
            return (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (np.abs(dz) <= hz)
        a = np.asarray(self.axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        along = dx * a[0] + dy * a[1] + dz * a[2]
        radial2 = dx * dx + dy * dy + dz * dz - along * along
        return (radial2 <= self.size[0] ** 2) & (np.abs(along) <= self.size[1])

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> DefectSpec:
        return cls(obj["shape"], tuple(obj["center"]), tuple(obj["size"]),
                   obj.get("seed", 0), tuple(obj.get("axis", (0.0, 0.0, 1.0))))


@dataclass(frozen=True, eq=False)
class CaseTriple:
    defective: VoxelGrid
    implant: VoxelGrid
    complete: VoxelGrid
    id: str = "case"
    defect: DefectSpec | None = None

    def __post_init__(self):
        d, i, c = (g.data.astype(bool) for g in (self.defective, self.implant, self.complete))
        if not (d.shape == i.shape == c.shape):
            raise ValueError("case volumes differ in size")
        if (d & i).any():
            raise ValueError("defective skull and implant overlap")
        if not np.array_equal(d | i, c):
            raise ValueError("defective skull plus implant is not the complete skull")
        if not i.any():
            raise ValueError("implant is empty")


def inject_defect(complete: VoxelGrid, spec: DefectSpec, case_id: str = "case") -> CaseTriple:
    if complete.count() == 0:
        raise ValueError("cannot inject a defect into an empty skull")
    region = spec.region(complete.dims)
    bone = complete.data.astype(bool)
    implant = bone & region
    if not implant.any():
        raise EmptyDefectError(f"{spec.shape} defect at {spec.center} misses the skull")
    return CaseTriple(
        defective=complete.with_data((bone & ~region).astype(np.uint8)),
        implant=complete.with_data(implant.astype(np.uint8)),
        complete=complete,
        id=case_id,
        defect=spec,
    )


# --- datasets -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    dims: tuple[int, int, int] = (128, 128, 128)
    radii: tuple[float, float, float] = (50.0, 56.0, 46.0)
    thickness: float = 8.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # in-distribution: spheres on the top of the skull
    sphere_radius: tuple[float, float] = (12.0, 18.0)
    top_polar_deg: tuple[float, float] = (0.0, 30.0)
    # robustness set: other shapes, sizes and positions
    robust_shapes: tuple[str, ...] = ("box", "cylinder")
    box_half: tuple[float, float] = (6.0, 9.0)
    cylinder_radius: tuple[float, float] = (20.0, 24.0)
    side_polar_deg: tuple[float, float] = (60.0, 100.0)

    def __post_init__(self):
        if not self.robust_shapes or any(s not in SHAPES for s in self.robust_shapes):
            raise ValueError(f"bad robustness shape family {self.robust_shapes}")
        for name in ("sphere_radius", "top_polar_deg", "box_half", "cylinder_radius",
                     "side_polar_deg"):
            lo, hi = getattr(self, name)
            if lo > hi or (name.endswith(("radius", "half")) and lo <= 0):
                raise ValueError(f"empty or invalid range {name}={lo, hi}")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> DatasetConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


def _surface_point(center, radii, inner: float, polar: float, azimuth: float):
    """Point half-way through the shell in the given direction, plus the direction."""
    direction = np.array([np.sin(polar) * np.cos(azimuth),
                          np.sin(polar) * np.sin(azimuth),
                          np.cos(polar)])
    # ray from the centre hits normalised radius rho at t = rho / |direction / radii|
    scale = 1.0 / np.linalg.norm(direction / radii)
    rho_mid = (1.0 + inner) / 2.0
    return center + rho_mid * scale * direction, direction


def _draw_defect(rng: np.random.Generator, distribution: str, cfg: DatasetConfig,
                 center, radii, inner: float, seed: int) -> DefectSpec:
    if distribution == "in_distribution":
        polar = np.deg2rad(rng.uniform(*cfg.top_polar_deg))
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        point, _ = _surface_point(center, radii, inner, polar, azimuth)
        radius = rng.uniform(*cfg.sphere_radius)
        return DefectSpec("sphere", tuple(point), (radius,), seed)
    if distribution == "robustness":
        shape = cfg.robust_shapes[rng.integers(len(cfg.robust_shapes))]
        polar = np.deg2rad(rng.uniform(*cfg.side_polar_deg))
        # lateral (left/right) or posterior
        azimuth = np.deg2rad(rng.choice([0.0, 180.0, 270.0]) + rng.uniform(-30.0, 30.0))
        point, direction = _surface_point(center, radii, inner, polar, azimuth)
        if shape == "box":
            size = tuple(rng.uniform(*cfg.box_half, size=3))
            return DefectSpec("box", tuple(point), size, seed)
        radius = rng.uniform(*cfg.cylinder_radius)
        half_length = cfg.thickness
        return DefectSpec("cylinder", tuple(point), (radius, half_length), seed,
                          tuple(direction))
    raise ValueError(f"unknown distribution {distribution!r}")


def case_seed(seed: int, index: int) -> int:
    """Per-case seed; generation order and parallelism never change a case."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_case(index: int, distribution: str, cfg: DatasetConfig, seed: int) -> CaseTriple:
    cs = case_seed(seed, index)
    rng = np.random.default_rng(cs)
    params = PhantomParams(cfg.radii, cfg.thickness, cfg.dims, seed=cs, spacing=cfg.spacing)
    complete = synth_skull_phantom(params)
    radii = phantom_radii(params)
    inner = 1.0 - cfg.thickness / radii.min()
    center = (np.asarray(cfg.dims) - 1) / 2.0
    spec = _draw_defect(rng, distribution, cfg, center, radii, inner, cs)
    prefix = "id" if distribution == "in_distribution" else "ood"
    return inject_defect(complete, spec, f"{prefix}{index:03d}")


def make_dataset(n: int, distribution: str = "in_distribution",
                 config: DatasetConfig | None = None, seed: int = 0,
                 start: int = 0) -> list[CaseTriple]:
    """``n`` cases, each a pure function of ``(index, distribution, config, seed)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    cfg = config or DatasetConfig()
    return [make_case(i, distribution, cfg, seed) for i in range(start, start + n)]


# --- on-disk layout ---------------------------------------------------------


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_case(root: str | os.PathLike, case: CaseTriple, extra: dict | None = None) -> Path:
    d = Path(root) / case.id
    d.mkdir(parents=True, exist_ok=True)
    nrrd.save(d / "complete.nrrd", case.complete)
    nrrd.save(d / "defective.nrrd", case.defective)
    nrrd.save(d / "implant.nrrd", case.implant)
    info = {"id": case.id, "defect": case.defect.to_json() if case.defect else None,
            "implant_voxels": case.implant.count()}
    info.update(extra or {})
    (d / "case.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return d


def read_case(case_dir: str | os.PathLike) -> CaseTriple:
    d = Path(case_dir)
    defect = None
    if (d / "case.json").exists():
        info = json.loads((d / "case.json").read_text())
        if info.get("defect"):
            defect = DefectSpec.from_json(info["defect"])
    return CaseTriple(nrrd.load(d / "defective.nrrd"), nrrd.load(d / "implant.nrrd"),
                      nrrd.load(d / "complete.nrrd"), d.name, defect)


def write_dataset(root: str | os.PathLike, cases, split: str, distribution: str,
                  cfg: DatasetConfig, seed: int, run: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        write_case(root, case, {"distribution": distribution, "split": split, "seed": seed})
    manifest = {
        "cases": [case.id for case in cases],
        "split": split,
        "distribution": distribution,
        "seed": seed,
        "config": cfg.to_json(),
        "config_hash": config_hash(cfg.to_json()),
    }
    if run:
        manifest["run"] = run
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(root: str | os.PathLike) -> list[CaseTriple]:
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.exists():
        ids = json.loads(manifest.read_text())["cases"]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "defective.nrrd").exists())
    return [read_case(root / i) for i in ids]
