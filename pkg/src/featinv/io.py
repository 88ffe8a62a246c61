"""On-disk formats: tensor blobs, weight archives, PNG images, JSON/CSV helpers.

Tensor blob layout (all little-endian)::

    b"FINVBLOB"            8-byte magic
    uint32                 header length in bytes
    header                 UTF-8 JSON: {"shape": [...], "dtype": "<f4", "meta": {...}}
    payload                raw C-order array data

Archives are zip files with fixed member timestamps so identical content
gives identical bytes.
"""

import hashlib
import io as _io
import json
import os
import struct
import zipfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError

BLOB_MAGIC = b"FINVBLOB"
ARCHIVE_VERSION = 1
_ZIP_EPOCH = (2020, 1, 1, 0, 0, 0)


def _as_numpy(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(t)


def blob_bytes(array, meta=None):
    arr = _as_numpy(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    arr = arr.astype(dt, copy=False)
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": dt.str, "meta": meta or {}}, sort_keys=True
    ).encode()
    return BLOB_MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes(order="C")


def blob_from_bytes(data):
    if data[:8] != BLOB_MAGIC:
        raise InputError("not a featinv tensor blob (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    arr = np.frombuffer(data[12 + hlen :], dtype=np.dtype(header["dtype"]))
    arr = arr.reshape(header["shape"]).astype(arr.dtype.newbyteorder("="))
    return arr, header.get("meta", {})


def save_blob(path, array, meta=None):
    Path(path).write_bytes(blob_bytes(array, meta))


def load_blob(path):
    return blob_from_bytes(Path(path).read_bytes())


def _zip_write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, kind, tensors, meta):
    """Write ``tensors`` (name -> array) plus JSON ``meta`` into one zip."""
    header = {"format": "featinv-archive", "version": ARCHIVE_VERSION, "kind": kind}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "format.json", json.dumps(header, sort_keys=True))
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(tensors):
            _zip_write(zf, f"tensors/{name}.bin", blob_bytes(tensors[name]))


def load_archive(path, kind=None):
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("format.json"))
        if header.get("format") != "featinv-archive":
            raise InputError(f"{path}: not a featinv archive")
        if header["version"] > ARCHIVE_VERSION:
            raise InputError(f"{path}: archive version {header['version']} is newer than supported")
        if kind is not None and header["kind"] != kind:
            raise InputError(f"{path}: expected a {kind!r} archive, found {header['kind']!r}")
        meta = json.loads(zf.read("meta.json"))
        tensors = {}
        for name in zf.namelist():
            if name.startswith("tensors/"):
                arr, _ = blob_from_bytes(zf.read(name))
                tensors[name[len("tensors/") : -len(".bin")]] = arr
    return meta, tensors


def state_dict_arrays(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, arrays):
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
    return module


def to_uint8(img):
    """(C, H, W) float image in [0, 1] -> (H, W, C) uint8."""
    arr = _as_numpy(img).astype(np.float64)
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    return arr


def save_png(path, img):
    buf = _io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())


def load_png(path):
    """PNG -> (C, H, W) float32 in [0, 1]."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).copy()


def load_png_dir(directory):
    """Sorted ``(ids, images)`` for every PNG in ``directory``."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise InputError(f"no PNG images found in {directory}")
    return [p.stem for p in paths], np.stack([load_png(p) for p in paths])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tensor(t):
    arr = _as_numpy(t)
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode() + arr.dtype.str.encode()).hexdigest()


def fsync_dir(path):
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)
