"""Dataset ingestion: class tables, manifests, PNG rasters and resizing.

Images are 8-bit RGB PNGs; labels are 8-bit single-channel PNGs whose pixel
values are raw class IDs (no color palette). A manifest is a UTF-8 text file
with one "image-path<TAB>label-path" pair per line; '#' starts a comment and
blank lines are skipped. Relative paths resolve against the manifest's own
directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, ParseError
from .kernels import Tensor

LabelMap = np.ndarray  # 2-D integer array of class IDs

ROLES = ("train", "val", "test")


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names; IDs are the positions 0..C-1."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ConfigurationError("class table must not be empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("class names must be unique")
        if any(not name for name in self.names):
            raise ConfigurationError("class names must be non-empty")

    def __len__(self) -> int:
        return len(self.names)

    @staticmethod
    def default() -> "ClassTable":
        """The shipped 20-class snowy street scene table."""
        text = resources.files("snowseg").joinpath("data/classes.txt").read_text("utf-8")
        return ClassTable.parse(text, source="<default>")

    @staticmethod
    def load(path) -> "ClassTable":
        return ClassTable.parse(Path(path).read_text("utf-8"), source=str(path))

    @staticmethod
    def parse(text: str, source: str = "<string>") -> "ClassTable":
        names: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{source}:{lineno}: expected 'id<TAB>name', got {raw!r}")
            try:
                cid = int(parts[0])
            except ValueError:
                raise ParseError(f"{source}:{lineno}: class id {parts[0]!r} is not an integer")
            if cid != len(names):
                raise ParseError(
                    f"{source}:{lineno}: class ids must run 0..C-1 in order, got {cid}")
            names.append(parts[1].strip())
        return ClassTable(tuple(names))

    def save(self, path) -> None:
        lines = [f"{cid}\t{name}" for cid, name in enumerate(self.names)]
        Path(path).write_text("\n".join(lines) + "\n", "utf-8")


@dataclass(frozen=True)
class SampleManifest:
    """A split's (image, label) path pairs with its role attached."""

    role: str
    entries: tuple[tuple[Path, Path], ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"manifest role must be one of {ROLES}, got {self.role!r}")

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path, role: str) -> SampleManifest:
    """Parse a manifest and verify every referenced file exists."""
    path = Path(path)
    entries: list[tuple[Path, Path]] = []
    seen: set[Path] = set()
    base = path.parent
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError(
                f"{path}:{lineno}: expected 'image-path<TAB>label-path', got {raw!r}")
        image = base / parts[0]
        label = base / parts[1]
        if image in seen:
            raise ParseError(f"{path}:{lineno}: duplicate image path {parts[0]!r}")
        seen.add(image)
        for p in (image, label):
            if not p.is_file():
                raise FileNotFoundError(f"manifest {path}:{lineno} references missing file: {p}")
        entries.append((image, label))
    return SampleManifest(role=role, entries=tuple(entries))


def write_manifest(manifest: SampleManifest, path) -> None:
    """Write entries as 'image<TAB>label' lines, relative to the target dir."""
    path = Path(path)
    base = path.parent
    lines = []
    for image, label in manifest.entries:
        try:
            img_rel, lab_rel = image.relative_to(base), label.relative_to(base)
        except ValueError:
            img_rel, lab_rel = image, label
        lines.append(f"{img_rel}\t{lab_rel}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")


def load_sample(entry: tuple[Path, Path], class_table: ClassTable) -> tuple[Tensor, LabelMap]:
    """Read one (image, label) pair; image scaled to [0,1], label validated."""
    image_path, label_path = entry
    with Image.open(image_path) as img:
        if img.mode != "RGB":
            raise DataError(f"{image_path}: expected an 8-bit RGB image, got mode {img.mode!r}")
        rgb = np.asarray(img, dtype=np.float64) / 255.0
    with Image.open(label_path) as lab:
        if lab.mode != "L":
            raise DataError(
                f"{label_path}: expected an 8-bit single-channel label, got mode {lab.mode!r}")
        label = np.asarray(lab, dtype=np.int64)
    if rgb.shape[:2] != label.shape:
        raise DataError(
            f"image {image_path} is {rgb.shape[1]}x{rgb.shape[0]} but label "
            f"{label_path} is {label.shape[1]}x{label.shape[0]}"
        )
    bad = label >= len(class_table)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(
            f"{label_path}: class id {label[r, c]} >= {len(class_table)} at pixel ({r}, {c})")
    tensor = rgb.transpose(2, 0, 1)[None]
    return np.ascontiguousarray(tensor), label


def _bilinear_axis(src: int, dst: int):
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(image: Tensor, target_h: int, target_w: int) -> Tensor:
    """Half-pixel-center bilinear resampling of an (n, c, h, w) tensor."""
    _, _, h, w = image.shape
    r_lo, r_hi, r_f = _bilinear_axis(h, target_h)
    c_lo, c_hi, c_f = _bilinear_axis(w, target_w)
    rows = image[:, :, r_lo, :] * (1.0 - r_f)[:, None] + image[:, :, r_hi, :] * r_f[:, None]
    return rows[:, :, :, c_lo] * (1.0 - c_f) + rows[:, :, :, c_hi] * c_f


def resize_nearest(label: LabelMap, target_h: int, target_w: int) -> LabelMap:
    """Nearest-neighbor resampling; class IDs are categorical, never blended."""
    h, w = label.shape
    rows = np.minimum(((np.arange(target_h) + 0.5) * (h / target_h)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * (w / target_w)).astype(np.int64), w - 1)
    return label[rows][:, cols]


def resize_sample(image: Tensor, label: LabelMap, target_h: int, target_w: int):
    """Resize an (image, label) pair to a network-legal size.

    The image is interpolated bilinearly, the label by nearest neighbor.
    Targets must be multiples of 32; a same-size request returns the inputs
    untouched.
    """
    if target_h % 32 != 0 or target_w % 32 != 0 or target_h < 32 or target_w < 32:
        raise ConfigurationError(
            f"resize target must be positive multiples of 32, got {target_h}x{target_w}")
    if image.shape[2:] != label.shape:
        raise DataError(
            f"image spatial dims {image.shape[2:]} do not match label {label.shape}")
    if (target_h, target_w) == label.shape:
        return image, label
    return resize_bilinear(image, target_h, target_w), resize_nearest(label, target_h, target_w)


def load_dataset(
    manifest: SampleManifest,
    class_table: ClassTable,
    target_h: int | None = None,
    target_w: int | None = None,
) -> list[tuple[Tensor, LabelMap]]:
    """Load every manifest entry into memory, optionally resized."""
    samples = []
    for entry in manifest.entries:
        image, label = load_sample(entry, class_table)
        if target_h is not None and target_w is not None:
            image, label = resize_sample(image, label, target_h, target_w)
        samples.append((image, label))
    return samples
