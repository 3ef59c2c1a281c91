"""Fully-controlled synthetic data for end-to-end verification.

Everything the pipeline consumes can be generated here with known ground
truth: planted factor matrices, whole synthetic slides (region maps, tile
tensors, gradients, RGB textures, labels), and a toy seeded convolutional
feature extractor.  Every generator is a deterministic function of its
seed, and the emitted ``truth.tsv`` allows exact scoring of clustering
recovery, surrogate sign recovery, and tissue filtering.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from ._accel import USING_NUMBA, maybe_njit
from .aggregate import TissueMaskConfig, tissue_filter
from .errors import ValidationError
from .tensor_io import SlideManifest, TileRecord, write_manifest, write_tensor


def default_label_coefficients(k: int) -> tuple[float, ...]:
    """Linear label rule with positive weight on classes 2, 4, 5 and
    negative weight on the rest (within range)."""
    positive = {2, 4, 5}
    coefs = []
    for cls in range(1, k + 1):
        if cls in positive:
            coefs.append(0.3 + 0.05 * cls)
        else:
            coefs.append(-(0.15 + 0.04 * cls))
    return tuple(coefs)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic slide (and of planted-matrix draws)."""

    seed: int = 0
    slide_id: str = "synth0"
    tiles_x: int = 4
    tiles_y: int = 4
    tile_size_px: int = 128
    stride_px: int = 64
    feature_cells: int = 8  # tensor is feature_cells x feature_cells x channels
    channels: int = 64
    k: int = 6
    noise_sigma: float = 0.01
    n_regions: int = 18
    background_fraction: float = 0.25
    n_rows: int = 500  # rows of the planted training matrix
    label_coefficients: tuple[float, ...] | None = None
    label_quantile: float = 0.6
    label_threshold: float | None = None  # absolute rule threshold; None = per-slide quantile
    gradient_jitter: float = 0.05
    region_layout: str = "voronoi"  # or "separated"
    basis_floor: float = 0.05  # dense floor of H*: overlap between class vectors

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValidationError("need at least one tile in each direction")
        if self.tile_size_px % self.feature_cells:
            raise ValidationError("feature_cells must divide tile_size_px")
        if self.tile_size_px % self.stride_px:
            raise ValidationError("stride_px must divide tile_size_px")
        if self.stride_px % self.cell_size_px:
            raise ValidationError("cell size must divide stride_px")
        if self.k < 1 or self.channels < self.k:
            raise ValidationError("need channels >= k >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not (0.0 <= self.background_fraction <= 1.0):
            raise ValidationError("background_fraction must lie in [0, 1]")
        if self.region_layout not in ("voronoi", "separated"):
            raise ValidationError(f"unknown region_layout {self.region_layout!r}")

    @property
    def cell_size_px(self) -> int:
        return self.tile_size_px // self.feature_cells

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @property
    def grid_w(self) -> int:
        return ((self.tiles_x - 1) * self.stride_px + self.tile_size_px) // self.cell_size_px

    @property
    def grid_h(self) -> int:
        return ((self.tiles_y - 1) * self.stride_px + self.tile_size_px) // self.cell_size_px

    def coefficients(self) -> np.ndarray:
        coefs = (
            default_label_coefficients(self.k)
            if self.label_coefficients is None
            else self.label_coefficients
        )
        if len(coefs) != self.k:
            raise ValidationError(f"{len(coefs)} label coefficients for k = {self.k}")
        return np.asarray(coefs, dtype=np.float64)


def planted_basis(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """K x C basis with one dominant channel block per class plus a small
    dense floor, so classes are distinct but not orthogonal."""
    H = rng.uniform(0.0, spec.basis_floor, size=(spec.k, spec.channels))
    bounds = np.linspace(0, spec.channels, spec.k + 1).astype(int)
    for cls in range(spec.k):
        H[cls, bounds[cls]:bounds[cls + 1]] += rng.uniform(0.8, 1.2,
                                                           size=bounds[cls + 1] - bounds[cls])
    return H


def gen_planted_matrix(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(V, W*, H*) with V = max(0, W* H* + noise); rows of W* carry one
    dominant class so argmax ground truth is well defined."""
    rng = np.random.default_rng(spec.seed)
    H = planted_basis(spec, rng)
    W = rng.uniform(0.0, 0.1, size=(spec.n_rows, spec.k))
    dominant = rng.integers(0, spec.k, size=spec.n_rows)
    W[np.arange(spec.n_rows), dominant] = rng.uniform(0.7, 1.3, size=spec.n_rows)
    V = W @ H
    if spec.noise_sigma > 0:
        V = V + rng.normal(0.0, spec.noise_sigma, size=V.shape)
    return np.maximum(V, 0.0), W, H


@dataclass
class SynthSlide:
    """One generated slide with its full ground truth."""

    spec: SynthSpec
    basis: np.ndarray  # planted H*, (k, channels)
    cell_classes: np.ndarray  # (grid_h, grid_w) int, 0 = background, 1..K
    cell_weights: np.ndarray  # (grid_h, grid_w, k) planted class weights
    tile_origins: list[tuple[int, int]]
    tile_tensors: list[np.ndarray]
    tile_gradients: list[np.ndarray]
    tile_labels: list[int]
    tile_scores: list[float]
    tile_kept: list[bool]
    slide_image: np.ndarray  # (H_px, W_px, 3) uint8
    label_threshold: float = 0.0
    tissue_config: TissueMaskConfig = field(default_factory=TissueMaskConfig)

    def tile_image(self, origin: tuple[int, int]) -> np.ndarray:
        ox, oy = origin
        ts = self.spec.tile_size_px
        return self.slide_image[oy:oy + ts, ox:ox + ts]


# anchor fractions of the slide extent for up to four separated regions
_SEPARATED_ANCHORS = ((0.2, 0.22), (0.8, 0.3), (0.45, 0.82), (0.85, 0.85))


def _separated_sites(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Positive-rule classes pinned to well-separated anchor regions so a
    tile rarely sees two of them at once; negative classes and background
    fill the rest of the slide with random sites."""
    coefs = spec.coefficients()
    positives = [cls for cls in range(1, spec.k + 1) if coefs[cls - 1] > 0]
    negatives = [cls for cls in range(1, spec.k + 1) if coefs[cls - 1] <= 0]
    sites, classes = [], []
    jitter = 0.04 * min(spec.grid_w, spec.grid_h)
    for i, cls in enumerate(positives):
        ax, ay = _SEPARATED_ANCHORS[i % len(_SEPARATED_ANCHORS)]
        sites.append((ax * spec.grid_w + rng.uniform(-jitter, jitter),
                      ay * spec.grid_h + rng.uniform(-jitter, jitter)))
        classes.append(cls)
    anchors = np.asarray(sites)
    n_rest = max(spec.n_regions - len(positives), 0)
    n_bg = int(round(n_rest * spec.background_fraction))
    # keep filler sites off the anchors so the anchored regions stay large
    exclusion = 0.22 * min(spec.grid_w, spec.grid_h)
    for i in range(n_rest):
        for _ in range(64):
            x = rng.uniform(0, spec.grid_w)
            y = rng.uniform(0, spec.grid_h)
            if not len(anchors) or np.hypot(anchors[:, 0] - x,
                                            anchors[:, 1] - y).min() >= exclusion:
                break
        sites.append((x, y))
        if i < n_bg or not negatives:
            classes.append(0)
        else:
            classes.append(negatives[(i - n_bg) % len(negatives)])
    return np.asarray(sites), np.asarray(classes, dtype=np.int64)


def _region_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Voronoi partition of the cell lattice into class-labelled regions."""
    if spec.region_layout == "separated":
        sites, site_class = _separated_sites(spec, rng)
    else:
        sites = np.column_stack(
            [
                rng.uniform(0, spec.grid_w, size=spec.n_regions),
                rng.uniform(0, spec.grid_h, size=spec.n_regions),
            ]
        )
        n_bg = int(round(spec.n_regions * spec.background_fraction))
        site_class = np.zeros(spec.n_regions, dtype=np.int64)
        # non-background sites cycle through 1..K so every class appears
        site_class[n_bg:] = (np.arange(spec.n_regions - n_bg) % spec.k) + 1
    gx, gy = np.meshgrid(np.arange(spec.grid_w), np.arange(spec.grid_h))
    d2 = (gx[:, :, None] - sites[None, None, :, 0]) ** 2 + (
        gy[:, :, None] - sites[None, None, :, 1]
    ) ** 2
    return site_class[d2.argmin(axis=2)]


def _stain_palette(k: int) -> np.ndarray:
    """Muted distinct colors for region textures (saturation and value kept
    inside the tissue-filter acceptance band)."""
    colors = []
    for cls in range(k):
        hue = (0.83 + 0.13 * cls) % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.55, 0.85))
    return np.asarray(colors) * 255.0


def _render_slide_image(spec: SynthSpec, cell_classes: np.ndarray) -> np.ndarray:
    """Per-region sinusoidal textures; background cells stay white."""
    cs = spec.cell_size_px
    h_px, w_px = spec.grid_h * cs, spec.grid_w * cs
    ys, xs = np.meshgrid(np.arange(h_px), np.arange(w_px), indexing="ij")
    img = np.full((h_px, w_px, 3), 255.0)
    stains = _stain_palette(spec.k)
    cls_px = np.repeat(np.repeat(cell_classes, cs, axis=0), cs, axis=1)
    for cls in range(1, spec.k + 1):
        mask = cls_px == cls
        if not mask.any():
            continue
        freq = 0.05 + 0.03 * cls
        angle = 0.7 * cls
        phase = np.cos(angle) * xs + np.sin(angle) * ys
        texture = 0.8 + 0.2 * np.sin(2.0 * np.pi * freq * phase)
        for ch in range(3):
            img[:, :, ch] = np.where(mask, stains[cls - 1, ch] * texture, img[:, :, ch])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _gradient_alpha(basis: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """Channel weights alpha with H* alpha = 1 on positive-rule classes and
    0 on the rest (minimum-norm solution), so the saliency of a planted
    tensor tracks the positive classes."""
    target = (coefficients > 0).astype(np.float64)
    return basis.T @ np.linalg.solve(basis @ basis.T, target)


def gen_slide(spec: SynthSpec) -> SynthSlide:
    """Generate a full synthetic slide; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    basis = planted_basis(spec, rng)
    cell_classes = _region_field(spec, rng)

    intensity = rng.uniform(0.6, 1.4, size=(spec.grid_h, spec.grid_w)) * np.clip(
        1.0 + 0.15 * rng.standard_normal((spec.grid_h, spec.grid_w)), 0.3, None
    )
    cell_weights = np.zeros((spec.grid_h, spec.grid_w, spec.k))
    for cls in range(1, spec.k + 1):
        mask = cell_classes == cls
        cell_weights[:, :, cls - 1][mask] = intensity[mask]

    coefs = spec.coefficients()
    alpha = _gradient_alpha(basis, coefs)
    slide_image = _render_slide_image(spec, cell_classes)

    origins = [
        (tx * spec.stride_px, ty * spec.stride_px)
        for ty in range(spec.tiles_y)
        for tx in range(spec.tiles_x)
    ]
    cs = spec.cell_size_px
    fc = spec.feature_cells
    tensors, gradients, rule_values, kept = [], [], [], []
    tissue_config = TissueMaskConfig()
    for ox, oy in origins:
        gx0, gy0 = ox // cs, oy // cs
        w_tile = cell_weights[gy0:gy0 + fc, gx0:gx0 + fc]  # (fc, fc, k)
        tensor = w_tile @ basis
        if spec.noise_sigma > 0:
            tensor = tensor + rng.normal(0.0, spec.noise_sigma, size=tensor.shape)
        tensors.append(np.maximum(tensor, 0.0).astype(np.float32))
        jitter = spec.gradient_jitter * rng.standard_normal((fc, fc, spec.channels))
        jitter -= jitter.mean(axis=(0, 1))  # keep the spatial channel means exact
        gradients.append((alpha[None, None, :] + jitter).astype(np.float32))
        rule_values.append(float(np.tensordot(w_tile.sum(axis=(0, 1)), coefs, axes=1)))
        tile_rgb = slide_image[oy:oy + spec.tile_size_px, ox:ox + spec.tile_size_px]
        kept.append(tissue_filter(tile_rgb, tissue_config)[0])

    values = np.asarray(rule_values)
    if spec.label_threshold is not None:
        threshold = float(spec.label_threshold)
    else:
        threshold = float(np.quantile(values, spec.label_quantile))
    spread = float(values.std()) + 1e-9
    labels = [int(v > threshold) for v in values]
    scores = [float(1.0 / (1.0 + np.exp(-(v - threshold) / spread))) for v in values]

    return SynthSlide(
        spec=spec,
        basis=basis,
        cell_classes=cell_classes,
        cell_weights=cell_weights,
        tile_origins=origins,
        tile_tensors=tensors,
        tile_gradients=gradients,
        tile_labels=labels,
        tile_scores=scores,
        tile_kept=kept,
        slide_image=slide_image,
        label_threshold=threshold,
        tissue_config=tissue_config,
    )


def write_dataset(slide: SynthSlide, out_dir: str | Path, *,
                  with_gradients: bool = True) -> Path:
    """Write manifest + tensors (+ gradients) + images + truth.tsv.

    Tiles rejected by the tissue filter keep their RGB image on disk but are
    omitted from the manifest, mirroring how a real exporter behaves.
    Returns the manifest path.
    """
    out = Path(out_dir)
    for sub in ("tensors", "tiles") + (("gradients",) if with_gradients else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    spec = slide.spec

    records = []
    for idx, (ox, oy) in enumerate(slide.tile_origins):
        name = f"tile_{ox}_{oy}"
        Image.fromarray(slide.tile_image((ox, oy))).save(out / "tiles" / f"{name}.ppm",
                                                         format="PPM")
        if not slide.tile_kept[idx]:
            continue
        tensor_path = out / "tensors" / f"{name}.clt"
        write_tensor(tensor_path, slide.tile_tensors[idx])
        gradient_path = None
        if with_gradients:
            gradient_path = out / "gradients" / f"{name}.clt"
            write_tensor(gradient_path, slide.tile_gradients[idx], signed=True)
        records.append(
            TileRecord(
                origin_x_px=ox,
                origin_y_px=oy,
                tensor_path=tensor_path,
                label=slide.tile_labels[idx],
                score=slide.tile_scores[idx],
                gradient_path=gradient_path,
            )
        )

    manifest = SlideManifest(
        slide_id=spec.slide_id,
        tile_size_px=spec.tile_size_px,
        stride_px=spec.stride_px,
        cell_size_px=spec.cell_size_px,
        level_downsample=1.0,
        label_source="model_prediction",
        tiles=tuple(records),
    )
    manifest_path = out / "manifest.txt"
    write_manifest(manifest, manifest_path)
    Image.fromarray(slide.slide_image).save(out / "slide.ppm", format="PPM")

    lines = ["kind\tx\ty\tvalue"]
    for gy in range(spec.grid_h):
        for gx in range(spec.grid_w):
            lines.append(f"cell\t{gx}\t{gy}\t{slide.cell_classes[gy, gx]}")
    for idx, (ox, oy) in enumerate(slide.tile_origins):
        if slide.tile_kept[idx]:
            lines.append(f"tile\t{ox}\t{oy}\t{slide.tile_labels[idx]}")
    (out / "truth.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


# --- toy feature extractor ---------------------------------------------------

_STAGE1_CHANNELS = 8
_DOWNSAMPLE = 16  # two stride-1 convs, two 4x4 max pools


@dataclass(frozen=True)
class FilterBank:
    """Fixed seeded convolution filters for the toy extractor."""

    stage1: np.ndarray  # (8, 3, 3, 3)
    stage2: np.ndarray  # (C, 3, 3, 8)
    seed: int


def make_filter_bank(channels: int, seed: int = 0) -> FilterBank:
    rng = np.random.default_rng(seed)
    s1 = rng.normal(0.0, 0.5, size=(_STAGE1_CHANNELS, 3, 3, 3))
    s2 = rng.normal(0.0, 0.3, size=(channels, 3, 3, _STAGE1_CHANNELS))
    return FilterBank(stage1=s1, stage2=s2, seed=seed)


def _conv3_relu_numpy(img: np.ndarray, filters: np.ndarray) -> np.ndarray:
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    windows = sliding_window_view(pad, (3, 3), axis=(0, 1))  # (h, w, cin, 3, 3)
    out = np.einsum("hwcuv,ouvc->hwo", windows, filters)
    return np.maximum(out, 0.0)


@maybe_njit(nogil=True, fastmath=True)
def _conv3_relu_loops(img: np.ndarray, filters: np.ndarray) -> np.ndarray:
    h, w, cin = img.shape
    cout = filters.shape[0]
    # (3, 3, cin, cout) layout keeps the output-channel loop contiguous
    ft = np.ascontiguousarray(filters.transpose(1, 2, 3, 0))
    out = np.zeros((h, w, cout))
    acc = np.zeros(cout)
    for i in range(h):
        for j in range(w):
            acc[:] = 0.0
            for di in range(3):
                ii = min(max(i + di - 1, 0), h - 1)  # edge-replicate padding
                for dj in range(3):
                    jj = min(max(j + dj - 1, 0), w - 1)
                    for c in range(cin):
                        v = img[ii, jj, c]
                        row = ft[di, dj, c]
                        for o in range(cout):
                            acc[o] += v * row[o]
            for o in range(cout):
                out[i, j, o] = max(acc[o], 0.0)
    return out


_conv3_relu = _conv3_relu_loops if USING_NUMBA else _conv3_relu_numpy


def _maxpool(img: np.ndarray, size: int) -> np.ndarray:
    h, w, c = img.shape
    return img.reshape(h // size, size, w // size, size, c).max(axis=(1, 3))


def toy_feature_extractor(tile_rgb: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Seeded conv + ReLU + max-pool stack standing in for a CNN layer.

    Downsamples by 16 in each direction; edge-replicate padding keeps the
    map approximately translation-equivariant (a constant input produces a
    spatially constant output), and ReLU keeps it non-negative.
    """
    rgb = np.asarray(tile_rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    if h % _DOWNSAMPLE or w % _DOWNSAMPLE:
        raise ValidationError(f"tile dims {h}x{w} not divisible by {_DOWNSAMPLE}")
    x = rgb.astype(np.float64) / 255.0
    x = _conv3_relu(np.ascontiguousarray(x), bank.stage1)
    x = _maxpool(x, 4)
    x = _conv3_relu(np.ascontiguousarray(x), bank.stage2)
    x = _maxpool(x, 4)
    return x.astype(np.float32)
