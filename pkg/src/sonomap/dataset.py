"""Scan datasets on disk: PGM images plus a canonical JSON manifest.

Manifests are written with sorted keys, two-space indentation, and floats
at 9 significant digits; writing a parsed canonical manifest reproduces it
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FileFormatError
from .geometry import Pose, ProbeGeometry
from .image import ImageGray, read_pgm


@dataclass(frozen=True)
class DatasetEntry:
    file: str
    pose: Pose
    split: str
    class_index: int


@dataclass
class ScanDataset:
    geometry: ProbeGeometry
    entries: list
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for e in self.entries:
            if e.split not in ("train", "val", "test"):
                raise ContractError(f"unknown split tag {e.split!r}")
            if e.class_index in seen:
                raise ContractError(f"duplicate class index {e.class_index}")
            seen.add(e.class_index)

    def load_image(self, entry: DatasetEntry) -> ImageGray:
        img = read_pgm(self.root / entry.file)
        if img.width != self.geometry.image_w or img.height != self.geometry.image_h:
            raise FileFormatError(
                f"{entry.file}: image is {img.width}x{img.height}, "
                f"manifest says {self.geometry.image_w}x{self.geometry.image_h}"
            )
        return img

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]


def _fmt(value, indent: int) -> str:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = ",\n".join(
            f'{pad}  "{k}": {_fmt(value[k], indent + 1)}' for k in sorted(value)
        )
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = ",\n".join(f"{pad}  {_fmt(v, indent + 1)}" for v in value)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    raise ContractError(f"cannot serialize {type(value).__name__}")


def canonical_json(obj) -> str:
    return _fmt(obj, 0) + "\n"


def _geometry_to_obj(g: ProbeGeometry) -> dict:
    obj = {
        "kind": g.kind,
        "width_mm": float(g.width_mm),
        "depth_mm": float(g.depth_mm),
        "image_w": g.image_w,
        "image_h": g.image_h,
    }
    if g.kind == "convex":
        obj["apex_offset_mm"] = float(g.apex_offset_mm)
    return obj


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise FileFormatError(f"manifest {where} is missing field {key!r}")
    return obj[key]


def manifest_to_obj(ds: ScanDataset) -> dict:
    return {
        "geometry": _geometry_to_obj(ds.geometry),
        "entries": [
            {
                "file": e.file,
                "position_mm": [float(x) for x in e.pose.position],
                "euler_zyx_rad": [float(x) for x in e.pose.euler_zyx],
                "split": e.split,
                "class": e.class_index,
            }
            for e in ds.entries
        ],
    }


def write_manifest(ds: ScanDataset, path) -> None:
    Path(path).write_text(canonical_json(manifest_to_obj(ds)), encoding="utf-8")


def read_manifest(path) -> ScanDataset:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"manifest is not valid JSON: {e}") from None
    gobj = _require(obj, "geometry", "root")
    kind = _require(gobj, "kind", "geometry")
    geom = ProbeGeometry(
        kind=kind,
        width_mm=_require(gobj, "width_mm", "geometry"),
        depth_mm=_require(gobj, "depth_mm", "geometry"),
        image_w=_require(gobj, "image_w", "geometry"),
        image_h=_require(gobj, "image_h", "geometry"),
        apex_offset_mm=gobj.get("apex_offset_mm", 0.0),
    )
    entries = []
    for i, eobj in enumerate(_require(obj, "entries", "root")):
        where = f"entries[{i}]"
        entries.append(
            DatasetEntry(
                file=_require(eobj, "file", where),
                pose=Pose(_require(eobj, "position_mm", where),
                          _require(eobj, "euler_zyx_rad", where)),
                split=_require(eobj, "split", where),
                class_index=int(_require(eobj, "class", where)),
            )
        )
    try:
        return ScanDataset(geometry=geom, entries=entries, root=path.parent)
    except ContractError as e:
        raise FileFormatError(str(e)) from None
