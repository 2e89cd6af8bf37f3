"""Dataset ingestion and the model container format.

IDX files (MNIST, fashion-MNIST) are read bit-exactly; ``.gz`` files are
decompressed transparently.  Models are written as a *container*::

    offset  size  content
    0       8     magic  b"CGTNMODL"
    8       4     format version, uint32 little-endian (currently 1)
    12      8     header length H, uint64 little-endian
    20      H     header, UTF-8 JSON
    20+H    P     payload: float64 little-endian arrays, back to back

The header lists every array (name, shape, element offset) in payload
order, the payload size ``P`` and its SHA-256.  See README.md for the field
list.
"""

import gzip
import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ArgumentError, CorruptionError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTAINER_MAGIC = b"CGTNMODL"
CONTAINER_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass
class Dataset:
    """Byte images ``(n, H, W)`` with integer labels in ``[0, n_labels)``."""

    images: np.ndarray
    labels: np.ndarray
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 2:
            self.images = self.images[:, None, :]
        if self.images.ndim != 3:
            raise ShapeError(f"images must be (n, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ShapeError("negative label")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _open(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def read_idx_array(path, expected_magic=None) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array."""
    raw = _open(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", 0)
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}", 2)
    ndim = magic & 0xFF
    if ndim < 1:
        raise FormatError(f"{path}: IDX file declares no dimensions", 3)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < count:
        raise FormatError(f"{path}: truncated data, {len(raw) - head} of {count} bytes", len(raw))
    if len(raw) - head > count:
        raise FormatError(f"{path}: {len(raw) - head - count} trailing bytes", head + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims).copy()


def read_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image file (``0x00000803``) and its label file (``0x00000801``)."""
    images = read_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx_array(labels_path, IDX_LABELS_MAGIC)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: label file must be one-dimensional", 3)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"record count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 4
        )
    return Dataset(images, labels)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (used for fixtures and exports)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ArgumentError("IDX export supports uint8 arrays only")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


SYNTH_KINDS = ("two_gaussian_stripes", "parity_patterns")


def synth_dataset(kind: str, n: int, seed: int = 0, shape=None) -> Dataset:
    """Small deterministic datasets for tests and demos.

    ``two_gaussian_stripes``
        ``shape`` defaults to (2, 4).  Class 0 has a bright top half and a dark
        bottom half, class 1 the reverse; pixel noise is a normal with
        sigma 25 clipped at two sigma, which leaves the classes linearly
        separable by a margin.
    ``parity_patterns``
        ``shape`` defaults to (1, 4).  Binary pixels (0 or 255); the label is
        the parity of the number of lit pixels.  Every block of ``2**N``
        consecutive samples enumerates all patterns once.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "two_gaussian_stripes":
        h, w = shape or (2, 4)
        if h < 2:
            raise ArgumentError("stripes need at least two rows")
        labels = rng.permutation(np.arange(n) % 2)
        top = np.zeros((h, w), dtype=bool)
        top[: h // 2] = True
        base = np.where(top[None], 200.0, 55.0).repeat(n, axis=0)
        base[labels == 1] = 255.0 - base[labels == 1]
        noise = np.clip(rng.normal(0.0, 25.0, size=base.shape), -50.0, 50.0)
        images = np.clip(np.rint(base + noise), 0, 255).astype(np.uint8)
        return Dataset(images, labels, ["top", "bottom"])
    if kind == "parity_patterns":
        h, w = shape or (1, 4)
        sites = h * w
        if sites > 16:
            raise ArgumentError("parity patterns support at most 16 pixels")
        n_pat = 2**sites
        order = np.concatenate([rng.permutation(n_pat) for _ in range(-(-n // n_pat))])[:n]
        bits = (order[:, None] >> np.arange(sites)[::-1]) & 1
        images = (bits * 255).astype(np.uint8).reshape(n, h, w)
        return Dataset(images, bits.sum(axis=1) % 2, ["even", "odd"])
    raise ArgumentError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTH_KINDS}")


# --- containers ------------------------------------------------------------


@dataclass
class ModelContainer:
    kind: str
    meta: dict = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def encode(container: ModelContainer) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in container.arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "format_version": CONTAINER_VERSION,
        "kind": container.kind,
        "arrays": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": _clean(container.meta),
    }
    text = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    return _PREAMBLE.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(text)) + text + payload


def atomic_write(path, data: bytes):
    """Write to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(container: ModelContainer, path):
    atomic_write(path, encode(container))


def _read_header(fh, path):
    pre = fh.read(_PREAMBLE.size)
    if len(pre) < _PREAMBLE.size:
        raise CorruptionError(f"{path}: truncated preamble", len(pre))
    magic, version, hlen = _PREAMBLE.unpack(pre)
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a model container (magic {magic!r})", 0)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unknown container version {version}", 8)
    text = fh.read(hlen)
    if len(text) < hlen:
        raise CorruptionError(f"{path}: truncated header", _PREAMBLE.size + len(text))
    try:
        header = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})", _PREAMBLE.size) from exc
    if header.get("format_version") != version:
        raise CorruptionError(f"{path}: header version disagrees with preamble", _PREAMBLE.size)
    return header


def load_header(path) -> dict:
    """Header of a container without reading the payload."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load(path) -> ModelContainer:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        start = fh.tell()
        payload = fh.read()
    want = int(header["payload_bytes"])
    if len(payload) != want:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, header declares {want}",
                              start + min(len(payload), want))
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptionError(f"{path}: payload checksum mismatch", start)
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arr = flat[e["offset"]: e["offset"] + size]
        if arr.size != size:
            raise CorruptionError(f"{path}: array {e['name']} overruns the payload", start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return ModelContainer(header["kind"], header.get("meta", {}), arrays)


# --- model (de)serialization ---------------------------------------------


def _tree_parts(tree, meta, arrays, prefix="tree"):
    layers = []
    for l, layer in enumerate(tree.layers):
        for i, iso in enumerate(layer.isometries):
            arrays[f"{prefix}.L{l}.U{i}"] = iso.tensor
            arrays[f"{prefix}.L{l}.S{i}"] = iso.spectrum
        layers.append({
            "n_isometries": len(layer.isometries),
            "passthrough_dim": layer.passthrough_dim,
            "truncation_errors": [iso.truncation_error for iso in layer.isometries],
        })
    meta[prefix] = {
        "in_dims": list(tree.in_dims),
        "cutoffs": list(tree.cutoffs),
        "local_map": tree.local_map,
        "scale_mode": tree.scale_mode,
        "mu": tree.mu,
        "stats": tree.stats,
        "layers": layers,
        "bond_profile": tree.bond_profile,
    }


def _tree_from(meta, arrays, prefix="tree"):
    from .tree_builder import Isometry, TreeLayer, TreeNetwork

    m = meta[prefix]
    layers = []
    for l, lm in enumerate(m["layers"]):
        isos = [
            Isometry(arrays[f"{prefix}.L{l}.U{i}"], float(lm["truncation_errors"][i]),
                     arrays[f"{prefix}.L{l}.S{i}"])
            for i in range(lm["n_isometries"])
        ]
        layers.append(TreeLayer(isos, lm["passthrough_dim"]))
    return TreeNetwork(layers, tuple(m["in_dims"]), list(m["cutoffs"]), m["local_map"],
                       m["scale_mode"], float(m["mu"]), m.get("stats", {}))


def _mps_parts(w, meta, arrays, prefix):
    for k, t in enumerate(w.tensors):
        arrays[f"{prefix}.A{k}"] = t
    meta[prefix] = {"n_sites": len(w), "label_site": w.label_site,
                    "site_dims": list(w.site_dims), "bond_dims": list(w.bond_dims)}


def _mps_from(meta, arrays, prefix):
    from .mps import Mps

    m = meta[prefix]
    return Mps([arrays[f"{prefix}.A{k}"] for k in range(m["n_sites"])], m["label_site"])


def to_container(obj, hyperparameters: Optional[dict] = None, extra: Optional[dict] = None) -> ModelContainer:
    """Pack a tree, MPS, top-tensor model or curtain model.

    A top-tensor model is passed as the tuple ``(tree, TopTensor)``.
    """
    from .models import CurtainModel, TopTensor
    from .mps import Mps
    from .tree_builder import TreeNetwork

    meta: dict = {"hyperparameters": hyperparameters or {}}
    meta.update(extra or {})
    arrays: Dict[str, np.ndarray] = {}
    if isinstance(obj, TreeNetwork):
        kind = "tree"
        _tree_parts(obj, meta, arrays)
    elif isinstance(obj, Mps):
        kind = "mps"
        _mps_parts(obj, meta, arrays, "mps")
    elif isinstance(obj, CurtainModel):
        kind = "curtain_model"
        _tree_parts(obj.tree, meta, arrays)
        _mps_parts(obj.top, meta, arrays, "top")
        meta["head"] = {"chi": obj.chi, "trace": obj.trace, "sweep_costs": obj.sweep_costs}
    elif isinstance(obj, tuple) and len(obj) == 2 and isinstance(obj[1], TopTensor):
        kind = "top_model"
        _tree_parts(obj[0], meta, arrays)
        arrays["top.W"] = obj[1].weights
        meta["head"] = {"trace": obj[1].trace}
    else:
        raise ArgumentError(f"cannot serialize {type(obj).__name__}")
    return ModelContainer(kind, meta, arrays)


def from_container(c: ModelContainer):
    """Inverse of :func:`to_container`."""
    from .models import CurtainModel, TopTensor

    try:
        if c.kind == "tree":
            return _tree_from(c.meta, c.arrays)
        if c.kind == "mps":
            return _mps_from(c.meta, c.arrays, "mps")
        if c.kind == "curtain_model":
            h = c.meta["head"]
            return CurtainModel(_tree_from(c.meta, c.arrays), _mps_from(c.meta, c.arrays, "top"),
                                int(h["chi"]), list(h["trace"]), list(h["sweep_costs"]))
        if c.kind == "top_model":
            return _tree_from(c.meta, c.arrays), TopTensor(c.arrays["top.W"], list(c.meta["head"]["trace"]))
    except KeyError as exc:
        raise CorruptionError(f"container of kind {c.kind!r} lacks field {exc}", 0) from exc
    raise FormatError(f"unknown container kind {c.kind!r}", 0)


def save_model(obj, path, hyperparameters: Optional[dict] = None, extra: Optional[dict] = None):
    save(to_container(obj, hyperparameters, extra), path)


def load_model(path):
    return from_container(load(path))
