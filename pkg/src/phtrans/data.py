"""Synthetic volumetric datasets and the on-disk volume format.

Volumes are soft-intensity ellipsoids (one per foreground class) over a
noisy background; labels are the generating ellipsoid masks. Files carry a
small text header followed by raw little-endian float32 voxels, so no
medical-imaging reader is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "PHTVOL 1"
_HEADER_END = "DATA"


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    cases: int
    patch_size: tuple[int, int, int]
    num_classes: int
    noise: float = 0.05
    min_voxels: int = 8
    max_tries: int = 25
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class Case:
    case_id: str
    image: np.ndarray  # (C, D, H, W) float32
    labels: np.ndarray  # (D, H, W) int64
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def _ellipsoid(rng: np.random.Generator, patch) -> tuple[np.ndarray, np.ndarray]:
    """Random ellipsoid: boolean mask plus normalized squared radius."""
    d, h, w = patch
    center = [rng.uniform(0.25 * e, 0.75 * e) for e in patch]
    semi = [rng.uniform(max(2.0, 0.12 * e), 0.3 * e) for e in patch]
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    r2 = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    return r2 <= 1.0, r2


def generate_case(rng: np.random.Generator, spec: SyntheticSpec, case_id: str) -> Case:
    image = rng.normal(0.0, spec.noise, size=spec.patch_size).astype(np.float32)
    labels = np.zeros(spec.patch_size, dtype=np.int64)
    for cls in range(1, spec.num_classes):
        amplitude = 0.5 + 0.5 * cls / max(1, spec.num_classes - 1)
        for _ in range(spec.max_tries):
            mask, r2 = _ellipsoid(rng, spec.patch_size)
            if int(mask.sum()) >= spec.min_voxels:
                image[mask] += (amplitude * np.exp(-1.5 * r2[mask])).astype(np.float32)
                labels[mask] = cls
                break
    # later classes may overwrite earlier ones; re-place classes that vanished
    for _ in range(spec.max_tries):
        missing = [
            c for c in range(1, spec.num_classes)
            if int((labels == c).sum()) < spec.min_voxels
        ]
        if not missing:
            break
        for cls in missing:
            mask, r2 = _ellipsoid(rng, spec.patch_size)
            if int(mask.sum()) >= spec.min_voxels:
                amplitude = 0.5 + 0.5 * cls / max(1, spec.num_classes - 1)
                image[mask] += (amplitude * np.exp(-1.5 * r2[mask])).astype(np.float32)
                labels[mask] = cls
    return Case(
        case_id=case_id,
        image=image[None],  # single input channel
        labels=labels,
        spacing=spec.spacing,
    )


def generate_synthetic(seed: int, spec: SyntheticSpec) -> list[Case]:
    """Deterministic per seed: the full dataset is a pure function of
    (seed, spec)."""
    rng = np.random.default_rng(seed)
    return [generate_case(rng, spec, f"case_{i:03d}") for i in range(spec.cases)]


# ---------------------------------------------------------------------------
# volume files


def save_volume(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), kind: str = "image"):
    if kind not in ("image", "labels"):
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    arr = np.asarray(array, dtype=np.float32)
    header = "\n".join(
        [
            MAGIC,
            f"kind {kind}",
            "dims " + " ".join(str(int(e)) for e in arr.shape),
            "dtype f32le",
            "spacing " + " ".join(repr(float(s)) for s in spacing),
            _HEADER_END,
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(arr.astype("<f4").tobytes())


def load_volume(path) -> tuple[np.ndarray, tuple, str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(_HEADER_END.encode("ascii"))
    if end < 0 or not raw.startswith(MAGIC.encode("ascii")):
        raise VolumeFormatError(f"{path}: not a volume file")
    header = raw[:end].decode("ascii").strip().splitlines()
    fields = dict(line.split(None, 1) for line in header[1:])
    if fields.get("dtype") != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {fields.get('dtype')}")
    dims = tuple(int(t) for t in fields["dims"].split())
    spacing = tuple(float(t) for t in fields["spacing"].split())
    kind = fields["kind"]
    payload = raw[end + len(_HEADER_END) + 1 :]
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.copy(), spacing, kind


def save_dataset(directory, cases: list[Case], extra_meta: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_volume(directory / f"{case.case_id}.img.vol", case.image, case.spacing, "image")
        save_volume(
            directory / f"{case.case_id}.lbl.vol",
            case.labels.astype(np.float32),
            case.spacing,
            "labels",
        )
    meta = {"cases": [c.case_id for c in cases]}
    if extra_meta:
        meta.update(extra_meta)
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2))


def load_dataset(directory) -> list[Case]:
    directory = Path(directory)
    img_files = sorted(directory.glob("*.img.vol"))
    if not img_files:
        raise VolumeFormatError(f"no *.img.vol files under {directory}")
    cases = []
    for img_path in img_files:
        case_id = img_path.name[: -len(".img.vol")]
        image, spacing, kind = load_volume(img_path)
        if kind != "image":
            raise VolumeFormatError(f"{img_path}: expected an image volume")
        lbl_path = directory / f"{case_id}.lbl.vol"
        labels, _, lkind = load_volume(lbl_path)
        if lkind != "labels":
            raise VolumeFormatError(f"{lbl_path}: expected a labels volume")
        cases.append(
            Case(
                case_id=case_id,
                image=image.astype(np.float32),
                labels=np.rint(labels).astype(np.int64),
                spacing=spacing,
            )
        )
    return cases
