"""Volumes, label maps, class tables and their on-disk formats.

Two containers are supported:

* single-file NIfTI-1 (``.nii``) with datatypes uint8 (2), int16 (4) and
  float32 (16).  Header fields other than dims/datatype are carried through
  untouched but not interpreted.
* ``.vol``: one JSON header line followed by a little-endian C-order payload.

Label maps are written as external label IDs and mapped back to contiguous
class indices through a class table when read.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

ROLES = ("background", "structure", "hippocampus_left", "hippocampus_right")


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file."""


class CompatibilityError(ValueError):
    """Shapes, class tables or models do not fit together."""


@dataclass(frozen=True)
class ClassEntry:
    index: int
    label_id: int
    name: str
    role: str = "structure"


class ClassTable:
    """Contiguous internal index -> external label ID, name and role."""

    def __init__(self, entries: Sequence[ClassEntry]):
        entries = sorted(entries, key=lambda e: e.index)
        if [e.index for e in entries] != list(range(len(entries))):
            raise ValueError("class table indices must be contiguous from 0")
        if len(entries) < 2:
            raise ValueError("class table needs at least two classes")
        if len({e.label_id for e in entries}) != len(entries):
            raise ValueError("duplicate label IDs in class table")
        for e in entries:
            if e.role not in ROLES:
                raise ValueError(f"unknown role {e.role!r}")
        if entries[0].role != "background":
            raise ValueError("index 0 must be the background class")
        self.entries = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassTable) and self.entries == other.entries

    @property
    def label_ids(self) -> np.ndarray:
        return np.array([e.label_id for e in self.entries], dtype=np.int64)

    def indices_with_role(self, role: str) -> List[int]:
        return [e.index for e in self.entries if e.role == role]

    def to_label_ids(self, indices: np.ndarray) -> np.ndarray:
        return self.label_ids[indices]

    def to_indices(self, label_ids: np.ndarray) -> np.ndarray:
        ids = self.label_ids
        order = np.argsort(ids)
        pos = np.searchsorted(ids[order], label_ids)
        pos = np.clip(pos, 0, len(ids) - 1)
        found = ids[order][pos] == label_ids
        if not np.all(found):
            bad = np.unique(np.asarray(label_ids)[~found])[:10]
            raise ValueError(f"label IDs not in class table: {bad.tolist()}")
        return order[pos]

    def to_json(self) -> list:
        return [dict(index=e.index, label_id=e.label_id, name=e.name, role=e.role) for e in self.entries]

    @classmethod
    def from_json(cls, items: list) -> "ClassTable":
        return cls([ClassEntry(int(d["index"]), int(d["label_id"]), str(d["name"]), d.get("role", "structure"))
                    for d in items])

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "ClassTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def generic(cls, n_classes: int, hippocampus: Optional[Sequence[int]] = None) -> "ClassTable":
        """Indices double as label IDs; ``hippocampus`` names the (left, right) indices."""
        roles = {}
        if hippocampus is not None:
            roles = {hippocampus[0]: "hippocampus_left", hippocampus[1]: "hippocampus_right"}
        return cls([ClassEntry(i, i, "background" if i == 0 else f"class_{i}",
                               "background" if i == 0 else roles.get(i, "structure"))
                    for i in range(n_classes)])


@dataclass
class Volume:
    data: np.ndarray
    orientation: str = ""
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")

    @property
    def dims(self):
        return self.data.shape

    @property
    def value_range(self):
        return float(self.data.min()), float(self.data.max())


@dataclass
class LabelMap:
    indices: np.ndarray
    class_table: ClassTable
    orientation: str = ""
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {self.indices.shape}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= len(self.class_table)):
            raise ValueError("label map index outside the class table")
        self.indices = self.indices.astype(np.int16 if len(self.class_table) < 32767 else np.int32)

    @property
    def dims(self):
        return self.indices.shape

    def label_ids(self) -> np.ndarray:
        return self.class_table.to_label_ids(self.indices)


# -- NIfTI-1 ------------------------------------------------------------------

NIFTI_HEADER = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)), ("intent_name", "S16"), ("magic", "S4"),
]).newbyteorder("<")
assert NIFTI_HEADER.itemsize == 348

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}


def _default_nifti_header(dims) -> np.ndarray:
    h = np.zeros((), dtype=NIFTI_HEADER)
    h["sizeof_hdr"] = 348
    h["regular"] = b"r"
    h["pixdim"] = [1, 1, 1, 1, 0, 0, 0, 0]
    h["xyzt_units"] = 2  # mm
    h["sform_code"] = 1
    h["srow_x"] = [1, 0, 0, 0]
    h["srow_y"] = [0, 1, 0, 0]
    h["srow_z"] = [0, 0, 1, 0]
    h["magic"] = b"n+1"
    return h


def read_nifti(path: str):
    """Return (array in file axis order, header record) for a ``.nii`` file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    hdr = np.frombuffer(raw[:348], dtype=NIFTI_HEADER)[0].copy()
    if hdr["sizeof_hdr"] != 348:
        swapped = np.frombuffer(raw[:348], dtype=NIFTI_HEADER.newbyteorder(">"))[0]
        if swapped["sizeof_hdr"] != 348:
            raise VolumeFormatError(f"{path}: not a NIfTI-1 header")
        hdr = swapped.astype(NIFTI_HEADER)
        big_endian = True
    else:
        big_endian = False
    if hdr["magic"] != b"n+1":
        raise VolumeFormatError(f"{path}: bad magic {bytes(hdr['magic'])!r} (expected single-file 'n+1')")
    code = int(hdr["datatype"])
    if code not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {code}")
    ndim = int(hdr["dim"][0])
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    if ndim < 3 or any(d < 1 for d in dims) or any(int(d) > 1 for d in hdr["dim"][4:ndim + 1]):
        raise VolumeFormatError(f"{path}: expected a 3D image, dim = {hdr['dim'].tolist()}")
    dt = NIFTI_DTYPES[code]
    if big_endian:
        dt = dt.newbyteorder(">")
    offset = int(hdr["vox_offset"])
    n = int(np.prod(dims))
    payload = raw[offset:offset + n * dt.itemsize]
    if offset < 348 or len(payload) != n * dt.itemsize:
        raise VolumeFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    return arr, hdr


def write_nifti(path: str, arr: np.ndarray, code: int, header: Optional[np.ndarray] = None) -> None:
    hdr = _default_nifti_header(arr.shape) if header is None else header.copy()
    dt = NIFTI_DTYPES[code]
    hdr["dim"] = [3, *arr.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = dt.itemsize * 8
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 0
    hdr["scl_inter"] = 0
    hdr["magic"] = b"n+1"
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * 4)
        fh.write(np.asarray(arr, dtype=dt).tobytes(order="F"))


# -- raw .vol container ---------------------------------------------------------

VOL_DTYPES = ("float32", "int16", "uint8", "int32")


def read_vol(path: str):
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except ValueError:
        raise VolumeFormatError(f"{path}: bad .vol header line") from None
    if not isinstance(header, dict) or "dims" not in header or "dtype" not in header:
        raise VolumeFormatError(f"{path}: bad magic / header")
    if header["dtype"] not in VOL_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if header.get("order", "C") != "C":
        raise VolumeFormatError(f"{path}: only C order is supported")
    dims = tuple(int(d) for d in header["dims"])
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    n = int(np.prod(dims))
    if len(payload) != n * dt.itemsize:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {n * dt.itemsize} bytes)")
    return np.frombuffer(payload, dtype=dt).reshape(dims), header


def write_vol(path: str, arr: np.ndarray, dtype: str, orientation: str = "", kind: str = "volume") -> None:
    header = {"dims": list(arr.shape), "dtype": dtype, "order": "C", "orientation": orientation, "kind": kind}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


# -- public entry points ----------------------------------------------------------

def _kind(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".nii", ".vol"):
        raise VolumeFormatError(f"{path}: unsupported extension {ext!r} (use .nii or .vol)")
    return ext


def read_volume(path: str) -> Volume:
    if _kind(path) == ".nii":
        arr, hdr = read_nifti(path)
        data = arr.astype(np.float32)
        slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
        if slope != 0 and (slope != 1 or inter != 0):
            data = data * np.float32(slope) + np.float32(inter)
        return Volume(data, meta={"nifti_header": hdr, "format": ".nii"})
    arr, header = read_vol(path)
    return Volume(arr.astype(np.float32), orientation=header.get("orientation", ""), meta={"format": ".vol"})


def read_labelmap(path: str, class_table: ClassTable) -> LabelMap:
    if _kind(path) == ".nii":
        arr, hdr = read_nifti(path)
        meta = {"nifti_header": hdr, "format": ".nii"}
        orientation = ""
    else:
        arr, header = read_vol(path)
        meta = {"format": ".vol"}
        orientation = header.get("orientation", "")
    if arr.dtype.kind == "f" and not np.array_equal(arr, np.round(arr)):
        raise VolumeFormatError(f"{path}: non-integer label values")
    return LabelMap(class_table.to_indices(arr.astype(np.int64)), class_table, orientation, meta)


def write_volume(path: str, obj: Union[Volume, LabelMap]) -> None:
    """Volumes are stored as float32; label maps as int16 external label IDs."""
    ext = _kind(path)
    header = obj.meta.get("nifti_header")
    if isinstance(obj, LabelMap):
        ids = obj.label_ids()
        if ids.size and (ids.min() < -32768 or ids.max() > 32767):
            raise VolumeFormatError("label IDs do not fit int16")
        if ext == ".nii":
            write_nifti(path, ids.astype(np.int16), 4, header)
        else:
            write_vol(path, ids.astype(np.int16), "int16", obj.orientation, kind="labels")
        return
    if ext == ".nii":
        write_nifti(path, obj.data.astype(np.float32), 16, header)
    else:
        write_vol(path, obj.data.astype(np.float32), "float32", obj.orientation)
