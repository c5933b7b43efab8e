"""Model, dataset and run-record files.

Models and datasets are a JSON manifest plus a raw blob of little-endian
float32 values (row-major).  The model manifest lists the layers in order;
every parameter tensor records its shape, byte offset and byte length in
the blob.  Run records are JSON lines: one header, then one line per point.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import net as N
from .errors import ConfigError

MODEL_FORMAT = "lrattack-model"
DATASET_FORMAT = "lrattack-dataset"
VERSION = 1
F32 = np.dtype("<f4")

_HYPER = {
    "Conv2d": ("stride", "padding"),
    "ReLU": ("negative_slope",),
    "MaxPool2d": ("window", "stride"),
    "AvgPool2d": ("window", "stride"),
    "BatchNorm": ("eps",),
    "ResidualAdd": ("source",),
    "InputNormalize": ("subtract_mean", "divisor"),
}


def _blob_path(manifest_path, name):
    return Path(manifest_path).parent / name


# --------------------------------------------------------------------------
# models


def save_model(net, path, blob_name=None):
    """Write ``path`` (manifest) and its parameter blob next to it."""
    path = Path(path)
    blob_name = blob_name or path.with_suffix(".bin").name
    chunks = []
    offset = 0
    layers = []
    for layer in net.layers:
        kind = type(layer).__name__
        entry = {"type": kind}
        for h in _HYPER.get(kind, ()):
            entry[h] = getattr(layer, h)
        params = {}
        for name in N._ARRAY_FIELDS.get(type(layer), ()):
            arr = np.ascontiguousarray(getattr(layer, name), dtype=F32)
            raw = arr.tobytes()
            params[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        if params:
            entry["params"] = params
        layers.append(entry)
    manifest = {
        "format": MODEL_FORMAT,
        "version": VERSION,
        "dtype": "float32-le",
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "blob": blob_name,
        "blob_bytes": offset,
        "layers": layers,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    _blob_path(path, blob_name).write_bytes(b"".join(chunks))
    return path


def _read_manifest(path, fmt):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} col {e.colno}: {e.msg}") from e
    if manifest.get("format") != fmt:
        raise ConfigError(f"{path}: expected format {fmt!r}, found {manifest.get('format')!r}")
    if manifest.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported version {manifest.get('version')}")
    return manifest


def load_model(path, dtype=np.float32):
    path = Path(path)
    manifest = _read_manifest(path, MODEL_FORMAT)
    blob = _blob_path(path, manifest["blob"]).read_bytes()
    if len(blob) != manifest.get("blob_bytes", len(blob)):
        raise ConfigError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        kind = entry.get("type")
        cls = N.LAYER_TYPES.get(kind)
        if cls is None:
            raise ConfigError(f"{path}: layer {i}: unknown type {kind!r}")
        kwargs = {h: entry[h] for h in _HYPER.get(kind, ()) if h in entry}
        for name, spec in entry.get("params", {}).items():
            start, length = spec["offset"], spec["length"]
            count = int(np.prod(spec["shape"]))
            if length != 4 * count or start < 0 or start + length > len(blob):
                raise ConfigError(f"{path}: layer {i} param {name}: bad blob range "
                                  f"offset={start} length={length}")
            kwargs[name] = np.frombuffer(blob, dtype=F32, count=count, offset=start).reshape(spec["shape"])
        try:
            layers.append(cls(**kwargs))
        except TypeError as e:
            raise ConfigError(f"{path}: layer {i} ({kind}): {e}") from e
    net = N.Network(layers, manifest["input_shape"], dtype)
    if net.num_classes != manifest.get("num_classes", net.num_classes):
        raise ConfigError(f"{path}: network has {net.num_classes} outputs, manifest says {manifest['num_classes']}")
    return net


def model_digest(path):
    """SHA-256 over the manifest and blob bytes."""
    path = Path(path)
    manifest = _read_manifest(path, MODEL_FORMAT)
    h = hashlib.sha256(path.read_bytes())
    h.update(_blob_path(path, manifest["blob"]).read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (n, *shape) float32 in [0, 1]
    labels: np.ndarray  # (n,) uint8
    split: str = "test"

    def __len__(self):
        return len(self.labels)

    def validate(self, num_classes=None):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError("image and label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            bad = int(np.flatnonzero((self.images.reshape(len(self), -1) < 0).any(1)
                                     | (self.images.reshape(len(self), -1) > 1).any(1))[0])
            raise ConfigError(f"image {bad} has entries outside [0, 1]")
        if num_classes is not None and self.labels.size and int(self.labels.max()) >= num_classes:
            bad = int(np.flatnonzero(self.labels >= num_classes)[0])
            raise ConfigError(f"label of point {bad} is {self.labels[bad]}, model has {num_classes} classes")


def save_dataset(ds, path):
    path = Path(path)
    stem = path.with_suffix("").name
    img_name, lab_name = f"{stem}.images.bin", f"{stem}.labels.bin"
    manifest = {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "split": ds.split,
        "count": int(len(ds)),
        "shape": list(ds.images.shape[1:]),
        "images": img_name,
        "images_dtype": "float32-le",
        "labels": lab_name,
        "labels_dtype": "uint8",
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    _blob_path(path, img_name).write_bytes(np.ascontiguousarray(ds.images, dtype=F32).tobytes())
    _blob_path(path, lab_name).write_bytes(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
    return path


def load_dataset(path):
    path = Path(path)
    manifest = _read_manifest(path, DATASET_FORMAT)
    n, shape = int(manifest["count"]), tuple(manifest["shape"])
    raw = _blob_path(path, manifest["images"]).read_bytes()
    expect = 4 * n * int(np.prod(shape))
    if len(raw) != expect:
        raise ConfigError(f"{path}: image blob has {len(raw)} bytes, expected {expect}")
    images = np.frombuffer(raw, dtype=F32).reshape((n,) + shape)
    labels = np.frombuffer(_blob_path(path, manifest["labels"]).read_bytes(), dtype=np.uint8)
    if labels.size != n:
        raise ConfigError(f"{path}: label blob has {labels.size} entries, expected {n}")
    ds = Dataset(images, labels, manifest.get("split", "test"))
    ds.validate()
    return ds


# --------------------------------------------------------------------------
# run records


@dataclass
class PointRecord:
    index: int
    label: int
    pred: int
    norm: float  # 0 if misclassified, inf if no adversarial was found
    regions: int = 0
    cache_hits: int = 0
    pruned: int = 0
    seed: int = 0
    exact: Optional[float] = None

    def to_json(self):
        d = {"type": "point"}
        d.update({k: _enc(v) for k, v in asdict(self).items() if v is not None})
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        fields = {k: _dec(v) for k, v in d.items() if k != "type"}
        return cls(**fields)


@dataclass
class RunHeader:
    config: dict
    model_digest: str
    indices: list = field(default_factory=list)
    command: str = "attack"

    def to_json(self):
        d = {"type": "header", "version": VERSION}
        d.update(asdict(self))
        return json.dumps(d, sort_keys=True)


def _enc(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _dec(v):
    return math.inf if v == "inf" else v


def read_records(path):
    """Parse a record file into ``(header or None, [PointRecord, ...])``."""
    header, points = None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{lineno}: {e.msg}") from e
        kind = d.get("type")
        if kind == "header":
            header = RunHeader(d["config"], d["model_digest"], d.get("indices", []), d.get("command", "attack"))
        elif kind == "point":
            try:
                points.append(PointRecord.from_dict(d))
            except TypeError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from e
        else:
            raise ConfigError(f"{path}:{lineno}: unknown record type {kind!r}")
    return header, points
