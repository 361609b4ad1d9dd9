"""Byte-stable file interchange.

Arrays are NPY version 1.0, little-endian, C order: instance ids as ``<u4``
and dense maps as ``<f4``.  An instance map is a pair ``<stem>.npy`` +
``<stem>.json``, the sidecar mapping ``{"id": class_code}``.
"""

from __future__ import annotations

import ast
import csv
import json
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Union

import numpy as np

from .core import CLASS_NAMES, InstanceMap
from .synth import Detection, HoverOutput
from .core import ClassGroup

MAGIC = b"\x93NUMPY"
ALIGN = 64
IDS_DTYPE = "<u4"
DENSE_DTYPE = "<f4"

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A file does not follow the expected interchange format."""


def npy_header(descr: str, shape: Sequence[int]) -> bytes:
    shape = tuple(int(s) for s in shape)
    shape_txt = f"({shape[0]},)" if len(shape) == 1 else "(" + ", ".join(map(str, shape)) + ")"
    text = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}"
    # magic (6) + version (2) + length (2) + text + padding + '\n' is a multiple of 64
    total = 10 + len(text) + 1
    pad = (-total) % ALIGN
    text = text + " " * pad + "\n"
    return MAGIC + bytes([1, 0]) + len(text).to_bytes(2, "little") + text.encode("latin1")


def write_array(path: PathLike, arr: np.ndarray, dtype: str = None) -> None:
    """Write ``arr`` as NPY v1.0. Integer arrays default to ``<u4``, others to ``<f4``."""
    arr = np.asarray(arr)
    if dtype is None:
        dtype = IDS_DTYPE if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else DENSE_DTYPE
    if dtype == IDS_DTYPE and arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
        raise FormatError("instance ids must fit in uint32")
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
    with open(path, "wb") as fh:
        fh.write(npy_header(dtype, data.shape))
        fh.write(data.tobytes(order="C"))


def read_array(path: PathLike) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:6] != MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic {raw[:6]!r})")
    if raw[6:8] != bytes([1, 0]):
        raise FormatError(f"{path}: unsupported NPY version {raw[6]}.{raw[7]}, expected 1.0")
    hlen = int.from_bytes(raw[8:10], "little")
    try:
        header = ast.literal_eval(raw[10 : 10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unreadable NPY header") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: malformed NPY header {header!r}")
    if header["descr"] not in (IDS_DTYPE, DENSE_DTYPE):
        raise FormatError(f"{path}: dtype {header['descr']!r} not allowed, expected {IDS_DTYPE} or {DENSE_DTYPE}")
    if header["fortran_order"]:
        raise FormatError(f"{path}: Fortran-ordered arrays are not supported")
    shape = tuple(header["shape"])
    dtype = np.dtype(header["descr"])
    payload = raw[10 + hlen :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _dump_json(path: PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_instance_map(stem: PathLike, m: InstanceMap) -> None:
    stem = Path(stem)
    write_array(stem.with_suffix(".npy"), m.ids, IDS_DTYPE)
    _dump_json(stem.with_suffix(".json"), {str(k): v for k, v in sorted(m.classes.items())})


def read_instance_map(stem: PathLike) -> InstanceMap:
    stem = Path(stem)
    npy, side = stem.with_suffix(".npy"), stem.with_suffix(".json")
    for p in (npy, side):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
    ids = read_array(npy)
    if ids.dtype != np.dtype(IDS_DTYPE) or ids.ndim != 2:
        raise FormatError(f"{npy}: instance map must be a 2-D {IDS_DTYPE} array")
    try:
        classes = {int(k): int(v) for k, v in json.loads(side.read_text()).items()}
    except (ValueError, AttributeError) as exc:
        raise FormatError(f"{side}: sidecar must map instance ids to class codes") from exc
    try:
        return InstanceMap(ids.astype(np.int64), classes)
    except ValueError as exc:
        raise FormatError(f"{stem}: {exc}") from exc


def write_hover(directory: PathLike, out: HoverOutput) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_array(d / "np.npy", out.np_prob, DENSE_DTYPE)
    write_array(d / "hv.npy", out.hv, DENSE_DTYPE)
    write_array(d / "tp.npy", out.tp, DENSE_DTYPE)
    _dump_json(d / "meta.json", {"group": out.group.name})


def read_hover(directory: PathLike) -> HoverOutput:
    d = Path(directory)
    meta = d / "meta.json"
    if not meta.exists():
        raise FileNotFoundError(f"missing input file: {meta}")
    group = ClassGroup[json.loads(meta.read_text())["group"]]
    arrays = []
    for name in ("np", "hv", "tp"):
        p = d / f"{name}.npy"
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
        arrays.append(read_array(p))
    try:
        return HoverOutput(*arrays, group=group)
    except ValueError as exc:
        raise FormatError(f"{d}: {exc}") from exc


def write_detections(stem: PathLike, dets: Sequence[Detection]) -> None:
    """Boxes/classes/scores to ``<stem>.json``, masks stacked to ``<stem>.npy`` (N, 16, 16)."""
    stem = Path(stem)
    records = [{"box": list(d.box), "class": d.class_id, "score": d.score} for d in dets]
    _dump_json(stem.with_suffix(".json"), records)
    masks = np.stack([d.mask for d in dets]) if dets else np.zeros((0, 16, 16))
    write_array(stem.with_suffix(".npy"), masks, DENSE_DTYPE)


def read_detections(stem: PathLike) -> List[Detection]:
    stem = Path(stem)
    for p in (stem.with_suffix(".json"), stem.with_suffix(".npy")):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
    records = json.loads(stem.with_suffix(".json").read_text())
    masks = read_array(stem.with_suffix(".npy"))
    if masks.shape[0] != len(records):
        raise FormatError(f"{stem}: {len(records)} detections but {masks.shape[0]} masks")
    return [Detection(tuple(r["box"]), r["class"], r["score"], masks[i]) for i, r in enumerate(records)]


COMPOSITION_COLUMNS = ["image_id"] + list(CLASS_NAMES)


def write_composition_csv(path: PathLike, rows: Iterable) -> None:
    """``rows`` are ``(image_id, counts[6])`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPOSITION_COLUMNS)
        for image_id, counts in rows:
            w.writerow([image_id] + [int(c) for c in counts])


def write_report(stem: PathLike, report) -> None:
    stem = Path(stem)
    _dump_json(stem.with_suffix(".json"), report.to_dict())
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report.csv_header())
        w.writerow(["" if v is None else repr(float(v)) for v in report.csv_row()])


def write_json(path: PathLike, obj) -> None:
    _dump_json(path, obj)


def read_json(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    return json.loads(path.read_text())
