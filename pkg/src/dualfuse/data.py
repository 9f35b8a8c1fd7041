"""Dataset preparation: grayscale loading, tiled cropping, mirror
augmentation and seeded batch assembly.

The prep pipeline crops every training image into 128x128 tiles on a
stride-14 grid, optionally appends horizontally mirrored copies, and
writes the tiles as 8-bit PNGs next to a provenance index. Infrared and
visible tiles enter one pooled stream; the shared autoencoder never
distinguishes them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

TILE_SIZE = 128
TILE_STRIDE = 14

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DataError(ValueError):
    """Raised for unreadable inputs or invalid pipeline arguments."""


@dataclass
class ImageRecord:
    """A loaded grayscale image with values in [0, 1]."""

    pixels: Tensor  # (1, 1, H, W) float32
    source_path: str
    role: str = "train"


@dataclass
class TileProvenance:
    source: str
    row: int
    col: int
    flipped: bool


@dataclass
class CropSet:
    tiles: list[Tensor] = field(default_factory=list)
    provenance: list[TileProvenance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tiles)


def load_grayscale(path: str | Path, role: str = "train") -> ImageRecord:
    """Load an 8/16-bit grayscale or RGB image, scaled to [0, 1].

    RGB is converted with luma weights 0.299/0.587/0.114.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        if arr.shape[2] not in (3, 4) or arr.dtype != np.uint8:
            raise DataError(f"{path}: unsupported color layout "
                            f"{arr.shape} dtype {arr.dtype}")
        rgb = arr[:, :, :3].astype(np.float64) / 255.0
        gray = (LUMA_WEIGHTS[0] * rgb[:, :, 0] + LUMA_WEIGHTS[1] * rgb[:, :, 1]
                + LUMA_WEIGHTS[2] * rgb[:, :, 2])
    elif arr.ndim == 2:
        if arr.dtype == np.uint8:
            gray = arr.astype(np.float64) / 255.0
        elif arr.dtype == np.uint16:
            gray = arr.astype(np.float64) / 65535.0
        elif arr.dtype == np.int32:  # PIL mode "I" carries 16-bit PNG/PGM data
            if arr.min() < 0 or arr.max() > 65535:
                raise DataError(f"{path}: integer range outside 16-bit")
            gray = arr.astype(np.float64) / 65535.0
        else:
            raise DataError(f"{path}: unsupported bit depth {arr.dtype}")
    else:
        raise DataError(f"{path}: unsupported image layout {arr.shape}")
    pixels = gray.astype(np.float32)[None, None]
    return ImageRecord(pixels=pixels, source_path=str(path), role=role)


def crop_tiles(image: ImageRecord, size: int = TILE_SIZE,
               stride: int = TILE_STRIDE) -> CropSet:
    """All size x size crops on a stride grid, row-major."""
    h, w = image.pixels.shape[2:]
    if h < size or w < size:
        raise DataError(f"{image.source_path}: image {h}x{w} smaller than "
                        f"tile size {size}")
    crops = CropSet()
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            crops.tiles.append(image.pixels[:, :, r:r + size, c:c + size].copy())
            crops.provenance.append(TileProvenance(image.source_path, r, c, False))
    return crops


def symmetric_expand(crops: CropSet) -> CropSet:
    """Append a horizontally mirrored copy of every tile."""
    out = CropSet(tiles=list(crops.tiles), provenance=list(crops.provenance))
    for tile, prov in zip(crops.tiles, crops.provenance):
        out.tiles.append(tile[:, :, :, ::-1].copy())
        out.provenance.append(TileProvenance(prov.source, prov.row, prov.col, True))
    return out


def make_batches(crops: CropSet, batch_size: int, seed) -> list[Tensor]:
    """One shuffled pass over the tiles; the final partial batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if not crops.tiles:
        raise DataError("empty crop set")
    order = np.random.default_rng(seed).permutation(len(crops.tiles))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        batches.append(np.concatenate([crops.tiles[i] for i in chunk], axis=0))
    return batches


# ---------------------------------------------------------------------------
# manifest and prep output


@dataclass
class ManifestPair:
    role: str
    ir_path: Path
    vis_path: Path


def read_manifest(path: str | Path) -> list[ManifestPair]:
    """Parse 'role<TAB>ir_path<TAB>vis_path' lines; blank lines ignored."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                            f"got {len(parts)}")
        role = parts[0].strip()
        if role not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: role must be train or test, "
                            f"got {role!r}")
        pairs.append(ManifestPair(role, Path(parts[1]), Path(parts[2])))
    if not pairs:
        raise DataError(f"{path}: manifest is empty")
    return pairs


def write_tile_png(tile: Tensor, path: Path) -> None:
    """Export a (1, 1, h, w) tile as 8-bit PNG (round half to even)."""
    arr = np.clip(tile[0, 0], 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="L").save(path)


INDEX_NAME = "index.tsv"
INDEX_HEADER = ("tile", "source", "row", "col", "flipped")


def prep_tiles(manifest_path: str | Path, out_dir: str | Path,
               size: int = TILE_SIZE, stride: int = TILE_STRIDE,
               mirror: bool = True) -> int:
    """Crop every train-role image from the manifest into PNG tiles.

    Writes tile_NNNNNN.png files plus an index.tsv with one provenance row
    per tile. Returns the tile count. Output is byte-deterministic.
    """
    pairs = read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops = CropSet()
    for pair in pairs:
        if pair.role != "train":
            continue
        for img_path in (pair.ir_path, pair.vis_path):
            record = load_grayscale(img_path)
            tiles = crop_tiles(record, size=size, stride=stride)
            if mirror:
                tiles = symmetric_expand(tiles)
            crops.tiles.extend(tiles.tiles)
            crops.provenance.extend(tiles.provenance)
    if not crops.tiles:
        raise DataError(f"{manifest_path}: no train pairs in manifest")
    with open(out_dir / INDEX_NAME, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        for i, (tile, prov) in enumerate(zip(crops.tiles, crops.provenance)):
            name = f"tile_{i:06d}.png"
            write_tile_png(tile, out_dir / name)
            writer.writerow((name, prov.source, prov.row, prov.col,
                             int(prov.flipped)))
    return len(crops.tiles)


def load_tiles_dir(tile_dir: str | Path) -> CropSet:
    """Read back a prep output directory into a CropSet."""
    tile_dir = Path(tile_dir)
    index = tile_dir / INDEX_NAME
    if not index.is_file():
        raise DataError(f"{tile_dir}: missing {INDEX_NAME} (not a prep output?)")
    crops = CropSet()
    with open(index, newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if tuple(header or ()) != INDEX_HEADER:
            raise DataError(f"{index}: unexpected header {header}")
        for row in reader:
            name, source, r, c, flipped = row
            record = load_grayscale(tile_dir / name)
            crops.tiles.append(record.pixels)
            crops.provenance.append(
                TileProvenance(source, int(r), int(c), bool(int(flipped))))
    if not crops.tiles:
        raise DataError(f"{tile_dir}: index lists no tiles")
    return crops
