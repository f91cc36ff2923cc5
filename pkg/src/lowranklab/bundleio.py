"""Weight-bundle container: a `manifest.json` plus one `weights.bin` blob.

The blob holds each matrix's payload row-major, little-endian, at the offset
declared in the manifest. BF16 matrices keep their raw 16-bit words so that
bit-field statistics stay exact; loading decodes them to float32 losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1

ROLES = (
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "mlp_gate",
    "mlp_up",
    "mlp_down",
    "embed",
    "other",
)

_ITEM_BYTES = {"bf16": 2, "f32": 4}


def bf16_to_f32(words) -> np.ndarray:
    """Decode BF16 bit patterns to float32 (bits fill the high half, low half zero)."""
    w = np.ascontiguousarray(words, dtype=np.uint16)
    return (w.astype(np.uint32) << np.uint32(16)).view(np.float32)


def f32_to_bf16(values) -> np.ndarray:
    """Encode float32 values as BF16 words, rounding to nearest even."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


@dataclass
class WeightMatrix:
    """One named dense weight matrix with a role tag and optional raw BF16 payload."""

    name: str
    role: str
    layer_index: int
    values: np.ndarray
    dtype: str = "f32"
    raw_bits: np.ndarray | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r} for matrix {self.name!r}")
        if self.dtype not in _ITEM_BYTES:
            raise DataError(f"unknown dtype {self.dtype!r} for matrix {self.name!r}")
        if self.layer_index < 0:
            raise DataError(f"negative layer index for matrix {self.name!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DataError(f"matrix {self.name!r} must be 2-D and nonempty")
        if self.dtype == "bf16":
            if self.raw_bits is None:
                raise DataError(f"bf16 matrix {self.name!r} is missing raw_bits")
            self.raw_bits = np.ascontiguousarray(self.raw_bits, dtype=np.uint16).ravel()
            if self.raw_bits.size != self.values.size:
                raise DataError(f"raw_bits length mismatch for matrix {self.name!r}")
            decoded = bf16_to_f32(self.raw_bits).reshape(self.values.shape)
            if not np.array_equal(decoded, np.asarray(self.values, np.float32), equal_nan=True):
                raise DataError(f"raw_bits of {self.name!r} do not decode to its values")
        elif self.raw_bits is not None:
            raise DataError(f"raw_bits present on non-bf16 matrix {self.name!r}")

    @classmethod
    def from_values(cls, name, role, layer_index, values, dtype="f32") -> "WeightMatrix":
        """Build a matrix from float values; bf16 dtype rounds through the 16-bit encoding."""
        values = np.asarray(values, dtype=np.float32)
        if dtype == "bf16":
            words = f32_to_bf16(values)
            return cls(name, role, layer_index, bf16_to_f32(words).reshape(values.shape),
                       dtype="bf16", raw_bits=words)
        return cls(name, role, layer_index, values, dtype=dtype)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def param_count(self) -> int:
        return self.rows * self.cols


@dataclass
class ModelBundle:
    """An immutable-by-convention collection of weight matrices plus metadata."""

    matrices: list[WeightMatrix] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [m.name for m in self.matrices]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate matrix names: {dupes}")

    @property
    def total_params(self) -> int:
        return sum(m.param_count for m in self.matrices)

    def matrix(self, name: str) -> WeightMatrix:
        for m in self.matrices:
            if m.name == name:
                return m
        raise KeyError(name)


def load_bundle(path) -> ModelBundle:
    """Load a bundle directory containing manifest.json and weights.bin."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != FORMAT_VERSION:
        raise DataError("corrupt manifest: unsupported or missing version")

    blob_path = path / "weights.bin"
    if not blob_path.is_file():
        raise DataError(f"missing blob: {blob_path}")
    blob = blob_path.read_bytes()

    matrices = []
    for entry in manifest.get("matrices", []):
        try:
            name = entry["name"]
            rows, cols = int(entry["rows"]), int(entry["cols"])
            dtype = entry["dtype"]
            offset = int(entry["offset_bytes"])
            role = entry["role"]
            layer = int(entry["layer"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt manifest entry: {entry!r}") from exc
        if dtype not in _ITEM_BYTES:
            raise DataError(f"unknown dtype {dtype!r} for matrix {name!r}")
        if rows <= 0 or cols <= 0 or offset < 0:
            raise DataError(f"bad shape or offset for matrix {name!r}")
        if role not in ROLES:
            # Foreign manifests may carry roles beyond the recognized set;
            # they land in "other" and stay out of layer-type aggregations.
            role = "other"
        nbytes = rows * cols * _ITEM_BYTES[dtype]
        if offset + nbytes > len(blob):
            raise DataError(f"truncated blob: matrix {name!r} needs bytes "
                            f"[{offset}, {offset + nbytes}) of {len(blob)}")
        payload = blob[offset:offset + nbytes]
        if dtype == "bf16":
            words = np.frombuffer(payload, dtype="<u2")
            matrices.append(WeightMatrix(name, role, layer,
                                         bf16_to_f32(words).reshape(rows, cols),
                                         dtype="bf16", raw_bits=words.copy()))
        else:
            values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
            matrices.append(WeightMatrix(name, role, layer, values.copy(), dtype="f32"))

    metadata = manifest.get("metadata", {})
    if not isinstance(metadata, dict):
        raise DataError("corrupt manifest: metadata must be an object")
    return ModelBundle(matrices, {str(k): str(v) for k, v in metadata.items()})


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a bundle so that load_bundle is its exact inverse (bit-exact for bf16)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for m in bundle.matrices:
        if m.dtype == "bf16":
            payload = m.raw_bits.astype("<u2").tobytes()
        else:
            payload = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
        entries.append({
            "name": m.name,
            "role": m.role,
            "layer": m.layer_index,
            "rows": m.rows,
            "cols": m.cols,
            "dtype": m.dtype,
            "offset_bytes": offset,
        })
        chunks.append(payload)
        offset += len(payload)

    manifest = {"version": FORMAT_VERSION, "matrices": entries}
    if bundle.metadata:
        manifest["metadata"] = dict(bundle.metadata)
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
