"""Per-tile feature tensors to one per-slide feature grid.

Tiles overlap (stride < tile size), so one slide-lattice cell receives
feature vectors from several tiles.  Aggregation trims a configurable
border of feature cells from every tile (borders are the least
shift-equivariant part of a convolutional map), maps the interior cells to
slide-lattice coordinates, and averages all contributions per cell.
Accumulation runs in float64 in a fixed tile order, so results are exactly
independent of manifest ordering; cells are kept in a sparse map because
whole slides are mostly background.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import USING_NUMBA, maybe_njit
from .errors import ValidationError
from .nmf import DEFAULT_PRUNE_REL, FactorModel, nmf_infer, prune_weights
from .tensor_io import SlideManifest, TileRecord, read_tensor, write_tensor

DEFAULT_MARGIN = 2


@dataclass(frozen=True)
class TissueMaskConfig:
    """HSV rule for the background filter.

    A pixel counts as tissue when its HSV saturation is >= saturation_min
    and its HSV value is <= value_max (stained tissue is saturated and
    darker than the glass background); a tile is kept when the tissue
    fraction reaches min_tissue_fraction.
    """

    saturation_min: float = 0.07
    value_max: float = 0.95
    min_tissue_fraction: float = 0.1

    def __post_init__(self):
        for name in ("saturation_min", "value_max", "min_tissue_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} = {v} outside [0, 1]")


@dataclass(frozen=True)
class LatticeGrid:
    """Dense bounding-box crop of a sparse slide-lattice grid.

    Used both for averaged feature grids (channels = C, kind "features")
    and for inferred class-weight grids (channels = K, kind "weights").
    ``counts[gy, gx] == 0`` marks an absent cell; values there are zero.
    """

    slide_id: str
    gx0: int
    gy0: int
    cell_size_px: int
    values: np.ndarray  # (height, width, channels) float32
    counts: np.ndarray  # (height, width) int32
    kind: str = "features"

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def cell_to_slide_coords(tile: TileRecord, i: int, j: int, cell_size_px: int) -> tuple[int, int]:
    """Slide-lattice coordinates (gx, gy) of tile-tensor cell (row i, col j)."""
    if tile.origin_x_px % cell_size_px or tile.origin_y_px % cell_size_px:
        raise ValidationError(
            f"tile origin ({tile.origin_x_px}, {tile.origin_y_px}) not divisible "
            f"by cell size {cell_size_px}"
        )
    return tile.origin_x_px // cell_size_px + j, tile.origin_y_px // cell_size_px + i


def trim_border(tensor: np.ndarray, margin: int = DEFAULT_MARGIN) -> np.ndarray:
    """Interior of the tensor with ``margin`` cells removed on every side.

    The returned interior sits at offset (margin, margin) of the original;
    the input is not modified.
    """
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return tensor
    h, w = tensor.shape[:2]
    if h <= 2 * margin or w <= 2 * margin:
        raise ValidationError(
            f"tensor {h}x{w} too small for margin {margin} (empty interior)"
        )
    return tensor[margin:h - margin, margin:w - margin]


def _tile_tensors(manifest: SlideManifest, tensors) -> list[np.ndarray]:
    if tensors is None:
        return [read_tensor(t.tensor_path) for t in manifest.tiles]
    tensors = list(tensors)
    if len(tensors) != len(manifest.tiles):
        raise ValidationError(
            f"{len(tensors)} tensors for {len(manifest.tiles)} manifest tiles"
        )
    return [np.asarray(t) for t in tensors]


def aggregate_slide(
    manifest: SlideManifest,
    tensors=None,
    margin: int = DEFAULT_MARGIN,
) -> LatticeGrid:
    """Average trimmed tile tensors onto the slide lattice.

    ``tensors`` may supply in-memory arrays parallel to ``manifest.tiles``;
    otherwise tensors are read from the manifest's file references.
    """
    arrays = _tile_tensors(manifest, tensors)
    cell = manifest.cell_size_px
    order = sorted(
        range(len(manifest.tiles)),
        key=lambda idx: (manifest.tiles[idx].origin_y_px, manifest.tiles[idx].origin_x_px),
    )

    shape = arrays[0].shape if arrays else None
    cells: dict[tuple[int, int], list] = {}
    for idx in order:
        tile, tensor = manifest.tiles[idx], arrays[idx]
        if tensor.shape != shape:
            raise ValidationError(
                f"tile at ({tile.origin_x_px}, {tile.origin_y_px}) has shape "
                f"{tensor.shape}, expected {shape}"
            )
        interior = trim_border(tensor, margin).astype(np.float64)
        base_gx = tile.origin_x_px // cell + margin
        base_gy = tile.origin_y_px // cell + margin
        if tile.origin_x_px % cell or tile.origin_y_px % cell:
            raise ValidationError(
                f"tile origin ({tile.origin_x_px}, {tile.origin_y_px}) not on the "
                f"cell lattice ({cell} px)"
            )
        hh, ww = interior.shape[:2]
        for i in range(hh):
            gy = base_gy + i
            for j in range(ww):
                slot = cells.get((base_gx + j, gy))
                if slot is None:
                    cells[(base_gx + j, gy)] = [interior[i, j].copy(), 1]
                else:
                    slot[0] += interior[i, j]
                    slot[1] += 1

    return _finalize(manifest.slide_id, cell, cells, 0 if shape is None else shape[2])


def _finalize(slide_id, cell_size_px, cells, channels) -> LatticeGrid:
    if not cells:
        return LatticeGrid(
            slide_id=slide_id,
            gx0=0,
            gy0=0,
            cell_size_px=cell_size_px,
            values=np.zeros((0, 0, channels), dtype=np.float32),
            counts=np.zeros((0, 0), dtype=np.int32),
        )
    xs = [k[0] for k in cells]
    ys = [k[1] for k in cells]
    gx0, gy0 = min(xs), min(ys)
    width, height = max(xs) - gx0 + 1, max(ys) - gy0 + 1
    values = np.zeros((height, width, channels), dtype=np.float32)
    counts = np.zeros((height, width), dtype=np.int32)
    for (gx, gy), (vec, count) in cells.items():
        values[gy - gy0, gx - gx0] = (vec / count).astype(np.float32)
        counts[gy - gy0, gx - gx0] = count
    return LatticeGrid(
        slide_id=slide_id,
        gx0=gx0,
        gy0=gy0,
        cell_size_px=cell_size_px,
        values=values,
        counts=counts,
    )


def overlap_cosine_probe(manifest: SlideManifest, tensors=None,
                         margin: int = DEFAULT_MARGIN) -> tuple[float, int]:
    """Mean cosine similarity between co-located feature vectors.

    Diagnostic for the equivariance assumption behind overlap averaging:
    contributions to the same lattice cell from different tiles should be
    nearly parallel.  Returns (mean cosine, number of pairs); pairs where
    either vector is zero are skipped.
    """
    arrays = _tile_tensors(manifest, tensors)
    cell = manifest.cell_size_px
    contributions: dict[tuple[int, int], list[np.ndarray]] = {}
    for tile, tensor in zip(manifest.tiles, arrays):
        interior = trim_border(tensor, margin).astype(np.float64)
        base_gx = tile.origin_x_px // cell + margin
        base_gy = tile.origin_y_px // cell + margin
        hh, ww = interior.shape[:2]
        for i in range(hh):
            for j in range(ww):
                contributions.setdefault((base_gx + j, base_gy + i), []).append(interior[i, j])
    total, pairs = 0.0, 0
    for vecs in contributions.values():
        for a in range(len(vecs)):
            na = np.linalg.norm(vecs[a])
            if na == 0.0:
                continue
            for b in range(a + 1, len(vecs)):
                nb = np.linalg.norm(vecs[b])
                if nb == 0.0:
                    continue
                total += float(vecs[a] @ vecs[b] / (na * nb))
                pairs += 1
    return (total / pairs if pairs else 0.0), pairs


def _tissue_fraction_numpy(rgb: np.ndarray, saturation_min: float, value_max: float) -> float:
    arr = rgb.astype(np.float64) / 255.0
    mx = arr.max(axis=2)
    mn = arr.min(axis=2)
    sat = np.where(mx > 0.0, (mx - mn) / np.where(mx > 0.0, mx, 1.0), 0.0)
    tissue = (sat >= saturation_min) & (mx <= value_max)
    return float(tissue.mean())


@maybe_njit(nogil=True)
def _tissue_fraction_loops(rgb: np.ndarray, saturation_min: float, value_max: float) -> float:
    h, w = rgb.shape[:2]
    hits = 0
    for i in range(h):
        for j in range(w):
            r = rgb[i, j, 0] / 255.0
            g = rgb[i, j, 1] / 255.0
            b = rgb[i, j, 2] / 255.0
            mx = max(r, max(g, b))
            mn = min(r, min(g, b))
            sat = (mx - mn) / mx if mx > 0.0 else 0.0
            if sat >= saturation_min and mx <= value_max:
                hits += 1
    return hits / (h * w)


_tissue_fraction = _tissue_fraction_loops if USING_NUMBA else _tissue_fraction_numpy


def tissue_filter(tile_rgb: np.ndarray, config: TissueMaskConfig) -> tuple[bool, float]:
    """Apply the HSV tissue rule to an 8-bit RGB tile.

    Returns (keep, tissue fraction).
    """
    rgb = np.asarray(tile_rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValidationError(f"expected uint8 (H, W, 3) image, got {rgb.dtype} {rgb.shape}")
    if rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise ValidationError("empty image")
    fraction = float(_tissue_fraction(rgb, config.saturation_min, config.value_max))
    return fraction >= config.min_tissue_fraction, fraction


def infer_slide_weights(
    grid: LatticeGrid,
    model: FactorModel,
    *,
    max_iters: int = 100,
    rel_tol: float = 0.0,
    prune_rel: float = DEFAULT_PRUNE_REL,
) -> LatticeGrid:
    """Class-weight grid for every present cell of a feature grid."""
    if grid.channels != model.channels:
        raise ValidationError(
            f"grid has {grid.channels} channels, model expects {model.channels}"
        )
    mask = grid.present
    if not mask.any():
        raise ValidationError(f"{grid.slide_id}: empty feature grid")
    vectors = grid.values[mask].astype(np.float64)
    weights = prune_weights(
        nmf_infer(model, vectors, max_iters=max_iters, rel_tol=rel_tol), prune_rel
    )
    values = np.zeros((grid.height, grid.width, model.k), dtype=np.float32)
    values[mask] = weights.astype(np.float32)
    return LatticeGrid(
        slide_id=grid.slide_id,
        gx0=grid.gx0,
        gy0=grid.gy0,
        cell_size_px=grid.cell_size_px,
        values=values,
        counts=mask.astype(np.int32),
        kind="weights",
    )


def save_grid(grid: LatticeGrid, base: str | Path) -> None:
    """Persist as ``<base>.clt`` + ``<base>.counts.clt`` + ``<base>.meta``."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(Path(f"{base}.clt"), grid.values)
    write_tensor(
        Path(f"{base}.counts.clt"),
        grid.counts.astype(np.float32)[:, :, None],
    )
    Path(f"{base}.meta").write_text(
        "\n".join(
            [
                f"slide_id = {grid.slide_id}",
                f"kind = {grid.kind}",
                f"gx0 = {grid.gx0}",
                f"gy0 = {grid.gy0}",
                f"grid_w = {grid.width}",
                f"grid_h = {grid.height}",
                f"cell_size_px = {grid.cell_size_px}",
                f"channels = {grid.channels}",
            ]
        )
        + "\n",
        encoding="utf-8",
    )


def load_grid(base: str | Path) -> LatticeGrid:
    base = Path(base)
    meta: dict[str, str] = {}
    for line in Path(f"{base}.meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    values = read_tensor(Path(f"{base}.clt"))
    counts = read_tensor(Path(f"{base}.counts.clt"))[:, :, 0].astype(np.int32)
    grid = LatticeGrid(
        slide_id=meta["slide_id"],
        gx0=int(meta["gx0"]),
        gy0=int(meta["gy0"]),
        cell_size_px=int(meta["cell_size_px"]),
        values=values,
        counts=counts,
        kind=meta.get("kind", "features"),
    )
    if grid.values.shape != (int(meta["grid_h"]), int(meta["grid_w"]), int(meta["channels"])):
        raise ValidationError(f"{base}: grid tensor shape disagrees with sidecar")
    return grid
