"""Reading and writing volumes, masks and case directories.

Two on-disk formats:

* NIfTI-1 (``.nii.gz``) via nibabel, with spacing/origin in the affine.
* A raw fallback: ``<name>.raw`` holding the little-endian grid and
  ``<name>.json`` holding shape, dtype, spacing, origin and kind. Round trips
  are bit-exact.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .volumes import Mask, Volume, WeightMask

try:
    import nibabel as nib
except ImportError:  # pragma: no cover - exercised only without nibabel
    nib = None


RAW_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1"}


def _kind(vol) -> str:
    if isinstance(vol, Mask):
        return "mask"
    if isinstance(vol, WeightMask):
        return "weight"
    return "volume"


def _build(kind, data, spacing, origin):
    if kind == "mask":
        return Mask(data.astype(np.uint8), spacing, origin)
    if kind == "weight":
        return WeightMask(data, spacing, origin)
    return Volume(data, spacing, origin)


def save_raw(vol: Volume, path) -> Path:
    """Write ``vol`` to ``path`` (.raw) plus a JSON sidecar; returns the .raw path.

    float32 is the default grid type. float64 and uint8 grids keep their own
    type so the round trip stays bit-exact.
    """
    path = Path(path).with_suffix(".raw")
    dtype_name = str(vol.data.dtype)
    if dtype_name not in RAW_DTYPES:
        dtype_name = "float32"
    arr = np.ascontiguousarray(vol.data, dtype=RAW_DTYPES[dtype_name])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes(order="C"))
    meta = {
        "shape": list(vol.shape),
        "dtype": dtype_name,
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "kind": _kind(vol),
        "order": "C",
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_raw(path):
    path = Path(path).with_suffix(".raw")
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=RAW_DTYPES[meta["dtype"]])
    arr = arr.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]), copy=True)
    return _build(meta.get("kind", "volume"), arr, tuple(meta["spacing"]), tuple(meta["origin"]))


def save_nifti(vol: Volume, path) -> Path:
    if nib is None:
        raise InvalidArgumentError("nibabel is not installed; use the raw format")
    path = Path(path)
    if not str(path).endswith((".nii", ".nii.gz")):
        path = path.with_name(path.name + ".nii.gz")
    affine = np.diag(list(vol.spacing) + [1.0])
    affine[:3, 3] = vol.origin
    img = nib.Nifti1Image(np.asarray(vol.data), affine)
    img.header.set_zooms(vol.spacing)
    img.header["descrip"] = _kind(vol).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


def load_nifti(path, kind=None):
    if nib is None:
        raise InvalidArgumentError("nibabel is not installed; use the raw format")
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in img.affine[:3, 3])
    if kind is None:
        descrip = bytes(img.header["descrip"]).split(b"\x00")[0].decode(errors="ignore")
        kind = descrip if descrip in ("mask", "weight", "volume") else "volume"
    return _build(kind, np.array(data), spacing, origin)


def save_volume(vol: Volume, stem, fmt: str = "nifti") -> Path:
    """Save to ``stem`` + the format's extension and return the written path."""
    stem = Path(stem)
    if fmt == "nifti":
        return save_nifti(vol, stem.with_name(stem.name + ".nii.gz"))
    if fmt == "raw":
        return save_raw(vol, stem.with_name(stem.name + ".raw"))
    raise InvalidArgumentError(f"unknown volume format {fmt!r}")


def load_volume(path, kind=None):
    path = Path(path)
    name = path.name
    if name.endswith(".raw") or name.endswith(".json"):
        return load_raw(path)
    if name.endswith((".nii", ".nii.gz")):
        return load_nifti(path, kind)
    raise InvalidArgumentError(f"unrecognised volume file {path}")


def checksum_array(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def checksum_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# case directories


@dataclass
class Case:
    """One subject: an image, an optional label, and its tags."""

    case_id: str
    image: Volume
    mask: Mask | None = None
    center: str = "A"
    modality: str = "target"
    meta: dict = field(default_factory=dict)


MANIFEST = "cases.json"


def write_cases(cases, directory, fmt: str = "nifti", with_masks: bool = True, extra=None) -> Path:
    """Write a case directory: ``images/``, optionally ``labels/``, and ``cases.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        img = save_volume(case.image, directory / "images" / case.case_id, fmt)
        entry = {
            "case_id": case.case_id,
            "center": case.center,
            "modality": case.modality,
            "image": str(img.relative_to(directory)),
            "image_sha256": checksum_array(case.image.data),
            "mask": None,
            "meta": case.meta,
        }
        if with_masks and case.mask is not None:
            m = save_volume(case.mask, directory / "labels" / case.case_id, fmt)
            entry["mask"] = str(m.relative_to(directory))
        entries.append(entry)
    manifest = {"format": fmt, "cases": entries}
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return path


def read_cases(directory, with_masks: bool = True) -> list[Case]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    cases = []
    for e in manifest["cases"]:
        image = load_volume(directory / e["image"], kind="volume")
        mask = None
        if with_masks and e.get("mask"):
            mask = load_volume(directory / e["mask"], kind="mask")
        cases.append(
            Case(e["case_id"], image, mask, e.get("center", "A"), e.get("modality", "target"), e.get("meta", {}))
        )
    return cases


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        from dataclasses import asdict

        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_json_default))
    return path
