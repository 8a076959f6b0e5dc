# wmcloak/core/imagedata.py
import json
import logging
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
import torch
from PIL import Image as PILImage
from torch.utils.data import Dataset

from wmcloak.core.errors import ImageIOError, IngestionError, RenderError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
WATERMARK_TEXT_PATTERN = re.compile(r"^[A-Za-z0-9_]+$")

# Hershey vector font shipped inside OpenCV; fixed so renders are reproducible
WATERMARK_FONT = cv2.FONT_HERSHEY_SIMPLEX
WATERMARK_FONT_ID = "opencv-hershey-simplex"
MIN_FONT_SCALE = 0.12


@dataclass
class Image:
    """H×W×3 raster in [0,1]"""
    pixels: np.ndarray
    source_path: Optional[str] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"Image pixels must be H×W×3, got {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ShapeError("Image must have positive height and width")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def size(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass
class RenderParams:
    width_fraction: float = 0.8
    placement: str = "center"        # center, top, bottom, tile
    thickness: Optional[int] = None  # px; None derives it from the font scale

    def __post_init__(self):
        if not 0.0 < self.width_fraction <= 1.0:
            raise ValueError(f"width_fraction must be in (0, 1], got {self.width_fraction}")
        if self.placement not in ("center", "top", "bottom", "tile"):
            raise ValueError(f"Unknown placement: {self.placement}")
        if self.thickness is not None and self.thickness < 1:
            raise ValueError(f"thickness must be >= 1 px, got {self.thickness}")


@dataclass
class Watermark:
    """Binary H×W mask (1 = text) with its render metadata"""
    mask: np.ndarray
    text: str
    render_params: RenderParams = field(default_factory=RenderParams)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.mask.ndim != 2:
            raise ShapeError(f"Watermark mask must be H×W, got {self.mask.shape}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("Watermark mask must be strictly binary")
        if self.text and not self.mask.any():
            raise ValueError(f"Watermark '{self.text}' has an empty mask")

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.mask.shape[0]), int(self.mask.shape[1])


@dataclass
class DatasetEntry:
    image_path: str
    watermark_id: str
    split: str  # train / eval


@dataclass
class DatasetIndex:
    entries: List[DatasetEntry]
    watermarks: Dict[str, Watermark]

    def __post_init__(self):
        for entry in self.entries:
            if entry.watermark_id not in self.watermarks:
                raise IngestionError(f"Unresolved watermark id: {entry.watermark_id}")
            if entry.split not in ("train", "eval"):
                raise IngestionError(f"Unknown split tag: {entry.split}")

    def split_entries(self, split: str) -> List[DatasetEntry]:
        return [e for e in self.entries if e.split == split]

    @property
    def train_entries(self) -> List[DatasetEntry]:
        return self.split_entries("train")

    @property
    def eval_entries(self) -> List[DatasetEntry]:
        return self.split_entries("eval")

    @property
    def watermark_ids(self) -> List[str]:
        return sorted(self.watermarks)


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    height, width = int(size[0]), int(size[1])
    if height <= 0 or width <= 0:
        raise ValueError(f"Target size must be positive, got {size}")
    return height, width


def read_image(path: Union[str, Path], target_size: Optional[Tuple[int, int]] = None) -> Image:
    """Load an image as RGB in [0,1], resized (bilinear, antialiased) to target_size"""
    if target_size is not None:
        target_size = _check_size(target_size)
    try:
        with PILImage.open(path) as raw:
            rgb = raw.convert("RGB")
            if target_size is not None and (rgb.height, rgb.width) != target_size:
                rgb = rgb.resize((target_size[1], target_size[0]), PILImage.Resampling.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ImageIOError(f"Cannot read image {path}: {e}") from e
    return Image(pixels=pixels, source_path=str(path))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round-half-up of 255·v to uint8"""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_image(img: Image, path: Union[str, Path]):
    """Write an 8-bit image file; pixels must already lie in [0,1]"""
    if not np.isfinite(img.pixels).all():
        raise ValueError("Pixels contain NaN or inf")
    if img.pixels.min() < 0.0 or img.pixels.max() > 1.0:
        raise ValueError(f"Pixels outside [0,1] (min {img.pixels.min()}, max {img.pixels.max()}); clamp first")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        PILImage.fromarray(quantize(img.pixels)).save(path)
    except (OSError, ValueError) as e:
        raise ImageIOError(f"Cannot write image {path}: {e}") from e


def _font_thickness(scale: float, params: RenderParams) -> int:
    if params.thickness is not None:
        return params.thickness
    return max(2, int(round(scale * 2)))


def render_watermark(text: str, size: Tuple[int, int], params: Optional[RenderParams] = None) -> Watermark:
    """Rasterize text in white on black as a binary mask"""
    params = params or RenderParams()
    height, width = _check_size(size)
    if not text or not WATERMARK_TEXT_PATTERN.match(text):
        raise RenderError(f"Watermark text must be non-empty [A-Za-z0-9_], got {text!r}")

    # width at unit scale, then scale to the configured fraction
    (unit_w, _), _ = cv2.getTextSize(text, WATERMARK_FONT, 1.0, _font_thickness(1.0, params))
    scale = params.width_fraction * width / max(unit_w, 1)
    thickness = _font_thickness(scale, params)
    (text_w, text_h), baseline = cv2.getTextSize(text, WATERMARK_FONT, scale, thickness)
    line_h = text_h + baseline + thickness
    while (text_w > params.width_fraction * width or line_h > height) and scale * 0.95 >= MIN_FONT_SCALE:
        scale *= 0.95
        thickness = _font_thickness(scale, params)
        (text_w, text_h), baseline = cv2.getTextSize(text, WATERMARK_FONT, scale, thickness)
        line_h = text_h + baseline + thickness

    if scale < MIN_FONT_SCALE or text_w > params.width_fraction * width or line_h > height:
        raise RenderError(f"Text {text!r} does not fit in {height}×{width} at minimum font size")

    canvas = np.zeros((height, width), dtype=np.uint8)
    x = (width - text_w) // 2
    if params.placement == "tile":
        pitch = 2 * line_h
        rows = list(range(text_h + thickness, height - baseline, pitch))
    elif params.placement == "top":
        rows = [text_h + thickness]
    elif params.placement == "bottom":
        rows = [height - baseline - thickness]
    else:
        rows = [(height + text_h) // 2]
    for y in rows:
        cv2.putText(canvas, text, (x, y), WATERMARK_FONT, scale, 255, thickness, cv2.LINE_8)

    mask = (canvas > 0).astype(np.float32)
    return Watermark(mask=mask, text=text, render_params=params)


def save_watermark(wm: Watermark, path: Union[str, Path]):
    """Write the mask as an 8-bit 0/255 PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((wm.mask * 255).astype(np.uint8)).save(path)


def load_watermark(path: Union[str, Path], text: str = "", size: Optional[Tuple[int, int]] = None) -> Watermark:
    """Read a mask image back (nonzero = text)"""
    try:
        with PILImage.open(path) as raw:
            gray = raw.convert("L")
            if size is not None and (gray.height, gray.width) != tuple(size):
                gray = gray.resize((size[1], size[0]), PILImage.Resampling.NEAREST)
            mask = (np.asarray(gray) > 127).astype(np.float32)
    except OSError as e:
        raise ImageIOError(f"Cannot read watermark {path}: {e}") from e
    return Watermark(mask=mask, text=text or Path(path).stem)


def default_watermark_text(class_name: str) -> str:
    return re.sub(r"[^A-Z0-9_]", "_", class_name.upper())


def load_mapping(path: Union[str, Path]) -> Dict[str, str]:
    """Load the class → watermark text JSON document"""
    try:
        with open(path, 'r') as file:
            mapping = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Cannot load watermark mapping {path}: {e}") from e
    if not isinstance(mapping, dict) or not all(isinstance(v, str) for v in mapping.values()):
        raise IngestionError(f"Mapping {path} must be a JSON object of class → text")
    return mapping


def build_dataset(root: Union[str, Path], mapping: Dict[str, str], split_per_class: int,
                  image_size: Tuple[int, int] = (512, 512),
                  render_params: Optional[RenderParams] = None) -> DatasetIndex:
    """Index root/<class>/*.{png,jpg}; first split_per_class files per class are train"""
    root = Path(root)
    if split_per_class < 0:
        raise ValueError(f"split_per_class must be >= 0, got {split_per_class}")
    if not root.is_dir():
        raise IngestionError(f"Dataset root not found: {root}")

    entries: List[DatasetEntry] = []
    watermarks: Dict[str, Watermark] = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        class_name = class_dir.name
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise IngestionError(f"Class '{class_name}' has no images")

        text = mapping.get(class_name)
        if text is None:
            text = default_watermark_text(class_name)
            logger.warning(f"No mapping for class '{class_name}', using watermark text {text}")
        watermarks[class_name] = render_watermark(text, image_size, render_params)

        for i, path in enumerate(files):
            split = "train" if i < split_per_class else "eval"
            entries.append(DatasetEntry(image_path=str(path), watermark_id=class_name, split=split))

    if not watermarks:
        raise IngestionError(f"No class directories under {root}")
    index = DatasetIndex(entries=entries, watermarks=watermarks)
    logger.info(f"Indexed {len(entries)} images in {len(watermarks)} classes "
                f"({len(index.train_entries)} train / {len(index.eval_entries)} eval)")
    return index


def image_to_tensor(img: Image) -> torch.Tensor:
    """HWC [0,1] → 1×3×H×W float tensor"""
    return torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1))).unsqueeze(0)


def tensor_to_image(tensor: torch.Tensor, source_path: Optional[str] = None) -> Image:
    """1×3×H×W or 3×H×W tensor → Image (values are not clamped here)"""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return Image(pixels=tensor.detach().cpu().float().numpy().transpose(1, 2, 0), source_path=source_path)


def watermark_to_tensor(wm: Watermark) -> torch.Tensor:
    """H×W mask → 1×1×H×W float tensor"""
    return torch.from_numpy(np.ascontiguousarray(wm.mask))[None, None]


class WatermarkPairDataset(Dataset):
    """(image, class watermark, watermark index) triples for one split, held in memory"""

    def __init__(self, index: DatasetIndex, split: str = "train", image_size: Tuple[int, int] = (512, 512)):
        self.logger = logging.getLogger(__name__)
        self.watermark_ids = index.watermark_ids
        self.entries = index.split_entries(split)
        self.masks = torch.stack([watermark_to_tensor(index.watermarks[w])[0] for w in self.watermark_ids])
        self.images = [image_to_tensor(read_image(e.image_path, image_size))[0] for e in self.entries]
        self.labels = [self.watermark_ids.index(e.watermark_id) for e in self.entries]
        self.logger.info(f"Loaded {len(self.entries)} {split} images at {image_size[0]}×{image_size[1]}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, idx):
        label = self.labels[idx]
        return self.images[idx], self.masks[label], label


def render_params_to_dict(params: RenderParams) -> Dict:
    return asdict(params)
