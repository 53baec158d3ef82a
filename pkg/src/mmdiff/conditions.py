"""The multimodal condition bundle and its on-disk form.

A sample directory holds:

    image.png       rendered RGB image, 8-bit (values map to [-1, 1])
    sketch.png      binary edge map, 0/255 (absent when the slot is null)
    depth.png       depth levels scaled by an integer factor chosen so the
                    quantized values round-trip exactly (absent when null)
    conditions.json caption token ids, boxes, keypoints, palette, style,
                    explicit nulls, schema version

Float fields (palette, style, box and keypoint coordinates) are stored as JSON
numbers, which round-trip bit-exactly through Python's float repr.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptDatasetError, InputError, ShapeError

SCHEMA_VERSION = 1

# slots that can be nulled; caption is also nullable but is the backbone's
# native pathway, not one of the six attached modalities
SLOTS = ("caption", "sketch", "depth", "boxes", "keypoints", "palette", "style")
MODALITY_TO_SLOT = {
    "sketch": "sketch", "depth": "depth", "box": "boxes",
    "keypoint": "keypoints", "palette": "palette", "style": "style",
    "caption": "caption",
}


@dataclass
class ConditionSet:
    caption: np.ndarray | None = None      # (L,) int token ids
    sketch: np.ndarray | None = None       # (H, W, 1) float in {0, 1}
    depth: np.ndarray | None = None        # (H, W, 1) float in [0, 1]
    boxes: list[tuple] | None = None       # (class_id, x1, y1, x2, y2), normalized
    keypoints: list[tuple] | None = None   # (person_id, joint_id, x, y), normalized
    palette: np.ndarray | None = None      # (n_bins,) nonneg, sums to 1
    style: np.ndarray | None = None        # (style_dim,) real

    def copy(self) -> "ConditionSet":
        return ConditionSet(
            caption=None if self.caption is None else self.caption.copy(),
            sketch=None if self.sketch is None else self.sketch.copy(),
            depth=None if self.depth is None else self.depth.copy(),
            boxes=None if self.boxes is None else list(self.boxes),
            keypoints=None if self.keypoints is None else list(self.keypoints),
            palette=None if self.palette is None else self.palette.copy(),
            style=None if self.style is None else self.style.copy(),
        )

    def validate(self, num_classes: int | None = None) -> "ConditionSet":
        for name in ("sketch", "depth"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.ndim != 3 or arr.shape[-1] != 1:
                raise ShapeError(f"{name} must be (H, W, 1), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} has non-finite entries")
        if self.boxes is not None:
            for class_id, x1, y1, x2, y2 in self.boxes:
                if not (x1 < x2 and y1 < y2):
                    raise InputError(f"degenerate box ({x1}, {y1}, {x2}, {y2})")
                if min(x1, y1) < 0 or max(x2, y2) > 1:
                    raise InputError("box coordinates must lie in [0, 1]")
                if num_classes is not None and not 0 <= class_id < num_classes:
                    raise InputError(f"class_id {class_id} outside vocabulary")
        if self.palette is not None:
            if np.any(self.palette < 0):
                raise InputError("palette bins must be nonnegative")
            if abs(float(self.palette.sum()) - 1.0) > 1e-6:
                raise InputError("palette must sum to 1 within 1e-6")
        return self


def null_condition_set() -> ConditionSet:
    return ConditionSet()


def null_substitute(cond: ConditionSet, modality: str) -> ConditionSet:
    """Copy of ``cond`` with one modality replaced by its null stand-in.

    ``modality`` is one of sketch/depth/box/keypoint/palette/style/caption.
    The result differs from ``cond`` only in that slot; nulling an already-null
    slot returns an equal set.
    """
    if modality not in MODALITY_TO_SLOT:
        raise InputError(f"unknown modality {modality!r}")
    out = cond.copy()
    setattr(out, MODALITY_TO_SLOT[modality], None)
    return out


def _depth_scale(depth: np.ndarray) -> int:
    """Integer PNG scale that makes the quantized levels exact: the depth
    convention produces multiples of 1/max_layers, so any multiple of
    max_layers that fits in 8 bits round-trips without error."""
    levels = np.unique(np.round(depth * 1_000_000).astype(np.int64))
    # infer the layer denominator from the stored values; fall back to 255
    for denom in range(1, 256):
        if np.all(levels * denom % 1_000_000 == 0):
            return denom * (255 // denom)
    return 255


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float RGB -> 8-bit."""
    return np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def write_sample(directory: str | Path, image: np.ndarray,
                 cond: ConditionSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_to_uint8(image)).save(directory / "image.png")

    meta: dict = {"version": SCHEMA_VERSION, "nulls": []}
    if cond.sketch is not None:
        arr = (cond.sketch[..., 0] > 0.5).astype(np.uint8) * 255
        Image.fromarray(arr, mode="L").save(directory / "sketch.png")
    else:
        meta["nulls"].append("sketch")
    if cond.depth is not None:
        scale = _depth_scale(cond.depth)
        arr = np.round(cond.depth[..., 0] * scale).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(directory / "depth.png")
        meta["depth_scale"] = scale
    else:
        meta["nulls"].append("depth")

    for name in ("caption", "palette", "style"):
        value = getattr(cond, name)
        if value is None:
            meta["nulls"].append(name)
            meta[name] = None
        else:
            meta[name] = np.asarray(value).tolist()
    for name in ("boxes", "keypoints"):
        value = getattr(cond, name)
        if value is None:
            meta["nulls"].append(name)
            meta[name] = None
        else:
            meta[name] = [list(entry) for entry in value]
    with open(directory / "conditions.json", "w") as fh:
        json.dump(meta, fh)


def read_sample(directory: str | Path) -> tuple[np.ndarray, ConditionSet]:
    directory = Path(directory)
    meta_path = directory / "conditions.json"
    image_path = directory / "image.png"
    if not meta_path.exists() or not image_path.exists():
        raise CorruptDatasetError(f"sample at {directory} is missing files")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("version") != SCHEMA_VERSION:
        raise CorruptDatasetError(
            f"unsupported sample schema version {meta.get('version')!r}")
    image = image_from_uint8(np.asarray(Image.open(image_path).convert("RGB")))

    cond = ConditionSet()
    nulls = set(meta.get("nulls", []))
    if "sketch" not in nulls:
        p = directory / "sketch.png"
        if not p.exists():
            raise CorruptDatasetError(f"{directory}: sketch.png missing")
        cond.sketch = (np.asarray(Image.open(p)) > 127).astype(np.float64)[..., None]
    if "depth" not in nulls:
        p = directory / "depth.png"
        if not p.exists():
            raise CorruptDatasetError(f"{directory}: depth.png missing")
        scale = meta["depth_scale"]
        cond.depth = (np.asarray(Image.open(p)).astype(np.float64) / scale)[..., None]
    if meta.get("caption") is not None:
        cond.caption = np.asarray(meta["caption"], dtype=np.int64)
    if meta.get("palette") is not None:
        cond.palette = np.asarray(meta["palette"], dtype=np.float64)
    if meta.get("style") is not None:
        cond.style = np.asarray(meta["style"], dtype=np.float64)
    if meta.get("boxes") is not None:
        cond.boxes = [tuple(b) for b in meta["boxes"]]
    if meta.get("keypoints") is not None:
        cond.keypoints = [tuple(k) for k in meta["keypoints"]]
    return image, cond


def condition_sets_equal(a: ConditionSet, b: ConditionSet) -> bool:
    for f in dataclasses.fields(ConditionSet):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if (va is None) != (vb is None):
            return False
        if va is None:
            continue
        if f.name in ("boxes", "keypoints"):
            if [tuple(x) for x in va] != [tuple(x) for x in vb]:
                return False
        elif not np.array_equal(np.asarray(va), np.asarray(vb)):
            return False
    return True
