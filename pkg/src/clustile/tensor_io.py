"""Binary tensor container and slide manifest I/O.

Tensor container (``.clt``), fixed byte layout so files are portable across
machines and can be produced by exporters in other ecosystems:

    offset 0   magic ``CLT1`` (4 bytes)
    offset 4   h, w, C as little-endian uint32 (12 bytes)
    offset 16  dtype tag, 1 byte: 0 = non-negative float32, 1 = signed float32
    offset 17  h*w*C little-endian float32, row-major (row i, column j, channel c)

Manifest: text file with ``key = value`` header lines, a blank line, then one
tile per line ``origin_x origin_y tensor_path [label] [score] [gradient_path]``
with ``-`` for absent optional fields.  Paths are relative to the manifest.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TensorFormatError, ValidationError

MAGIC = b"CLT1"
HEADER_SIZE = 17
DTYPE_NONNEG = 0
DTYPE_SIGNED = 1

LABEL_SOURCES = ("model_prediction", "annotation", "none")

_HEADER_KEYS = ("slide_id", "tile_size_px", "stride_px", "cell_size_px", "level_downsample")


@dataclass(frozen=True)
class TensorHeader:
    height: int
    width: int
    channels: int
    signed: bool


def write_tensor(path: str | Path, data: np.ndarray, *, signed: bool = False) -> None:
    """Write a (h, w, C) float array as a ``CLT1`` file.

    Non-signed tensors enforce the post-ReLU contract (all values >= 0);
    NaN/Inf are rejected for both dtypes.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise ValidationError(f"tensor must be 3-d (h, w, C), got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c < 1:
        raise ValidationError(f"tensor dims must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("tensor contains NaN or Inf")
    if not signed and (arr < 0).any():
        raise ValidationError("non-negative tensor contains negative values")
    tag = DTYPE_SIGNED if signed else DTYPE_NONNEG
    header = MAGIC + struct.pack("<IIIB", h, w, c, tag)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor_header(path: str | Path) -> TensorHeader:
    """Read only the 17-byte header (cheap shape/dtype peek)."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> TensorHeader:
    if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a CLT1 file (bad magic or truncated header)")
    h, w, c, tag = struct.unpack("<IIIB", raw[4:HEADER_SIZE])
    if tag not in (DTYPE_NONNEG, DTYPE_SIGNED):
        raise TensorFormatError(f"{path}: unknown dtype tag {tag}")
    if h < 1 or w < 1 or c < 1:
        raise TensorFormatError(f"{path}: invalid dims {(h, w, c)}")
    return TensorHeader(h, w, c, signed=(tag == DTYPE_SIGNED))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a ``CLT1`` file into a (h, w, C) float32 array.

    Round trip with :func:`write_tensor` is bit-exact.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header = _parse_header(raw[:HEADER_SIZE], path)
    n = header.height * header.width * header.channels
    payload = raw[HEADER_SIZE:]
    if len(payload) != 4 * n:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {4 * n}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(
        header.height, header.width, header.channels
    )
    if not np.isfinite(arr).all():
        raise TensorFormatError(f"{path}: payload contains NaN or Inf")
    if not header.signed and (arr < 0).any():
        raise TensorFormatError(f"{path}: dtype 0 (non-negative) payload has negative values")
    return arr.copy()


@dataclass(frozen=True)
class TileRecord:
    origin_x_px: int
    origin_y_px: int
    tensor_path: Path
    label: int | None = None
    score: float | None = None
    gradient_path: Path | None = None


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    tile_size_px: int
    stride_px: int
    cell_size_px: int
    level_downsample: float
    tiles: tuple[TileRecord, ...]
    label_source: str = "none"

    @property
    def feature_cells(self) -> int:
        """Feature-map cells per tile edge (w = tile_size_px / cell_size_px)."""
        return self.tile_size_px // self.cell_size_px

    def validate_geometry(self) -> None:
        if self.tile_size_px < 1 or self.stride_px < 1 or self.cell_size_px < 1:
            raise ValidationError(f"{self.slide_id}: non-positive geometry fields")
        if self.tile_size_px % self.stride_px != 0:
            raise ValidationError(
                f"{self.slide_id}: stride {self.stride_px} does not divide "
                f"tile size {self.tile_size_px}"
            )
        if self.stride_px % self.cell_size_px != 0:
            raise ValidationError(
                f"{self.slide_id}: cell size {self.cell_size_px} does not divide "
                f"stride {self.stride_px}"
            )
        if self.tile_size_px % self.cell_size_px != 0:
            raise ValidationError(
                f"{self.slide_id}: cell size {self.cell_size_px} does not divide "
                f"tile size {self.tile_size_px}"
            )
        if self.label_source not in LABEL_SOURCES:
            raise ValidationError(f"{self.slide_id}: bad label_source {self.label_source!r}")
        for t in self.tiles:
            if t.origin_x_px < 0 or t.origin_y_px < 0:
                raise ValidationError(f"{self.slide_id}: negative tile origin "
                                      f"({t.origin_x_px}, {t.origin_y_px})")
            if t.origin_x_px % self.stride_px or t.origin_y_px % self.stride_px:
                raise ValidationError(
                    f"{self.slide_id}: tile origin ({t.origin_x_px}, {t.origin_y_px}) "
                    f"off the stride lattice ({self.stride_px} px)"
                )
            if t.label is not None and t.label not in (0, 1):
                raise ValidationError(f"{self.slide_id}: label must be 0 or 1, got {t.label}")
            if t.score is not None and not (0.0 <= t.score <= 1.0):
                raise ValidationError(f"{self.slide_id}: score {t.score} outside [0, 1]")


def _opt(value: str) -> str | None:
    return None if value == "-" else value


def load_manifest(path: str | Path, *, check_tensors: bool = True) -> SlideManifest:
    """Parse and validate a slide manifest.

    Geometry invariants are always checked.  With ``check_tensors`` the
    referenced tensor headers are peeked (17 bytes each, payloads stay on
    disk) to verify existence and a consistent (h, w, C) that matches the
    manifest's cell size.
    """
    path = Path(path)
    base = path.parent
    header: dict[str, str] = {}
    tiles: list[TileRecord] = []
    in_header = True
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if in_header:
                if not line:
                    in_header = False
                    continue
                if "=" not in line:
                    raise TensorFormatError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            else:
                if not line:
                    continue
                fields = line.split()
                if len(fields) < 3 or len(fields) > 6:
                    raise TensorFormatError(f"{path}:{lineno}: expected 3 to 6 fields")
                fields += ["-"] * (6 - len(fields))
                label = _opt(fields[3])
                score = _opt(fields[4])
                grad = _opt(fields[5])
                tiles.append(
                    TileRecord(
                        origin_x_px=int(fields[0]),
                        origin_y_px=int(fields[1]),
                        tensor_path=Path(os.path.normpath(base / fields[2])),
                        label=int(label) if label is not None else None,
                        score=float(score) if score is not None else None,
                        gradient_path=(
                            Path(os.path.normpath(base / grad)) if grad is not None else None
                        ),
                    )
                )
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise TensorFormatError(f"{path}: missing header keys {missing}")
    manifest = SlideManifest(
        slide_id=header["slide_id"],
        tile_size_px=int(header["tile_size_px"]),
        stride_px=int(header["stride_px"]),
        cell_size_px=int(header["cell_size_px"]),
        level_downsample=float(header["level_downsample"]),
        label_source=header.get("label_source", "none"),
        tiles=tuple(tiles),
    )
    manifest.validate_geometry()
    if check_tensors:
        _check_tile_tensors(manifest)
    return manifest


def _check_tile_tensors(manifest: SlideManifest) -> None:
    expected: TensorHeader | None = None
    for t in manifest.tiles:
        if not t.tensor_path.is_file():
            raise ValidationError(f"{manifest.slide_id}: missing tensor file {t.tensor_path}")
        hdr = read_tensor_header(t.tensor_path)
        if hdr.signed:
            raise ValidationError(f"{t.tensor_path}: feature tensor must use dtype 0")
        if expected is None:
            expected = hdr
            if hdr.width * manifest.cell_size_px != manifest.tile_size_px:
                raise ValidationError(
                    f"{manifest.slide_id}: tensor width {hdr.width} x cell "
                    f"{manifest.cell_size_px} px != tile size {manifest.tile_size_px} px"
                )
        elif (hdr.height, hdr.width, hdr.channels) != (
            expected.height, expected.width, expected.channels,
        ):
            raise ValidationError(
                f"{t.tensor_path}: shape {(hdr.height, hdr.width, hdr.channels)} differs "
                f"from {(expected.height, expected.width, expected.channels)}"
            )
        if t.gradient_path is not None:
            if not t.gradient_path.is_file():
                raise ValidationError(
                    f"{manifest.slide_id}: missing gradient file {t.gradient_path}"
                )
            ghdr = read_tensor_header(t.gradient_path)
            if not ghdr.signed:
                raise ValidationError(f"{t.gradient_path}: gradient tensor must use dtype 1")
            if (ghdr.height, ghdr.width, ghdr.channels) != (
                hdr.height, hdr.width, hdr.channels,
            ):
                raise ValidationError(
                    f"{t.gradient_path}: gradient shape differs from activation shape"
                )


def write_manifest(manifest: SlideManifest, path: str | Path) -> None:
    """Write a manifest; tile paths are stored relative to the manifest file."""
    path = Path(path)
    base = path.parent
    lines = [
        f"slide_id = {manifest.slide_id}",
        f"tile_size_px = {manifest.tile_size_px}",
        f"stride_px = {manifest.stride_px}",
        f"cell_size_px = {manifest.cell_size_px}",
        f"level_downsample = {manifest.level_downsample!r}",
    ]
    if manifest.label_source != "none":
        lines.append(f"label_source = {manifest.label_source}")
    lines.append("")
    for t in manifest.tiles:
        fields = [
            str(t.origin_x_px),
            str(t.origin_y_px),
            os.path.relpath(t.tensor_path, base),
            "-" if t.label is None else str(t.label),
            "-" if t.score is None else format(t.score, ".6g"),
            "-" if t.gradient_path is None else os.path.relpath(t.gradient_path, base),
        ]
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
