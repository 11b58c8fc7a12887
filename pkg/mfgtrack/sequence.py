import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .box import BoundingBox, as_box_array
from .errors import BoxError, SequenceFormatError
from .frame import FramePair, ImageTensor, Modality

VISIBLE_DIR = "visible"
THERMAL_DIR = "infrared"
# Optional white-target, black-background images, one per frame
MASK_DIR = "masks"
GROUNDTRUTH_FILE = "groundtruth.txt"
TAGS_FILE = "tags.txt"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

BoxFormat = Literal["auto", "xywh", "corners"]


@dataclass(frozen=True)
class SequenceRecord:
    frames: Tuple[FramePair, ...]
    boxes: Tuple[BoundingBox, ...]
    # Attribute tags of the whole sequence, e.g. "occlusion" or "fast_motion"
    tags: Tuple[str, ...] = ()
    name: str = "sequence"
    # Frame indices in which the target is hidden
    occluded: Tuple[int, ...] = field(default=(), compare=False)
    # Target mask image of every frame, empty when the sequence has none
    masks: Tuple[Path, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise SequenceFormatError(
                f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} boxes"
            )
        if not self.frames:
            raise SequenceFormatError(f"{self.name}: sequence is empty")
        if self.masks and len(self.masks) != len(self.frames):
            raise SequenceFormatError(
                f"{self.name}: {len(self.masks)} masks for {len(self.frames)} frames"
            )

    def __len__(self):
        return len(self.frames)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.frames[0].size


def parse_box_lines(text: str) -> np.ndarray:
    """Parses one box per line, with values separated by commas, tabs or spaces.

    Raises:
        SequenceFormatError: Naming the first line that does not hold four numbers.
    """
    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [part for part in re.split(r"[,\t ]+", line) if part]
        try:
            values = [float(part) for part in parts]
        except ValueError:
            raise SequenceFormatError(f"line {number}: cannot parse {line!r}") from None
        if len(values) != 4:
            raise SequenceFormatError(f"line {number}: expected 4 values, got {len(values)}")
        rows.append(values)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def looks_like_corners(rows: np.ndarray, image_size: Tuple[int, int]) -> bool:
    """Two-corner heuristic: every row has x2 > x1 and y2 > y1 inside the image, and at
    least one row would overflow the image if read as x, y, w, h."""
    height, width = image_size
    x1, y1, x2, y2 = rows.T
    ordered = np.all(x2 > x1) and np.all(y2 > y1)
    inside = np.all(x2 <= width + 1) and np.all(y2 <= height + 1)
    overflows = np.any(x1 + x2 > width + 1) or np.any(y1 + y2 > height + 1)
    return bool(ordered and inside and overflows)


def _image_files(folder: Path) -> List[Path]:
    if not folder.is_dir():
        raise SequenceFormatError(f"Missing image folder {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_image(path: Path, modality: Modality) -> ImageTensor:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise SequenceFormatError(f"Cannot read image {path}")
    return ImageTensor.from_numpy(cv2.cvtColor(image, cv2.COLOR_BGR2RGB), modality)


def _groundtruth_file(directory: Path) -> Path:
    path = directory / GROUNDTRUTH_FILE
    if path.is_file():
        return path
    candidates = [p for p in directory.glob("*.txt") if p.name != TAGS_FILE]
    if len(candidates) != 1:
        raise SequenceFormatError(
            f"Expected {GROUNDTRUTH_FILE} or a single ground-truth .txt file in {directory}"
        )
    return candidates[0]


def load_sequence(
    directory: Union[str, Path],
    box_format: BoxFormat = "auto",
    log: Optional[logging.Logger] = None,
) -> SequenceRecord:
    """Reads a sequence in the common RGB-T benchmark layout.

    The directory holds `visible/` and `infrared/` image folders, paired by sorted
    filename, and a ground-truth text file with one box per line. An optional `masks/`
    folder holds one target mask image per frame for attention training.

    Args:
        directory (Union[str, Path]): Sequence directory.
        box_format (BoxFormat, optional): "xywh", "corners" (x1, y1, x2, y2) or "auto",
            which applies `looks_like_corners`. Defaults to "auto".
        log (Optional[logging.Logger], optional): Logger. Defaults to None.

    Raises:
        SequenceFormatError: Missing folders, unparsable lines, or mismatched counts.

    Returns:
        SequenceRecord: The loaded sequence, named after the directory.
    """
    directory = Path(directory)
    visible = _image_files(directory / VISIBLE_DIR)
    thermal = _image_files(directory / THERMAL_DIR)
    if len(visible) != len(thermal):
        raise SequenceFormatError(
            f"{len(visible)} visible images but {len(thermal)} infrared images in {directory}"
        )
    gt_path = _groundtruth_file(directory)
    try:
        rows = parse_box_lines(gt_path.read_text())
    except SequenceFormatError as e:
        raise SequenceFormatError(f"{gt_path}: {e}") from None
    if len(rows) != len(visible):
        raise SequenceFormatError(
            f"{gt_path} has {len(rows)} boxes for {len(visible)} frame pairs"
        )
    frames = tuple(
        FramePair(_read_image(v, Modality.Visible), _read_image(t, Modality.Thermal))
        for v, t in zip(visible, thermal)
    )
    if box_format == "auto":
        box_format = "corners" if looks_like_corners(rows, frames[0].size) else "xywh"
        if log:
            log.info("%s: ground truth read as %s", directory.name, box_format)
    if box_format == "corners":
        rows = np.concatenate([rows[:, :2], rows[:, 2:] - rows[:, :2]], axis=1)
    try:
        boxes = tuple(BoundingBox.from_array(row) for row in rows)
    except BoxError as e:
        raise SequenceFormatError(f"{gt_path}: {e}") from None
    tags_path = directory / TAGS_FILE
    tags = tuple(tags_path.read_text().split()) if tags_path.is_file() else ()
    mask_dir = directory / MASK_DIR
    masks = tuple(_image_files(mask_dir)) if mask_dir.is_dir() else ()
    return SequenceRecord(frames, boxes, tags, directory.name, masks=masks)


def format_boxes(boxes: Sequence[BoundingBox]) -> str:
    """One `x,y,w,h` line per box; floats are written exactly."""
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in as_box_array(boxes))


def write_boxes(path: Union[str, Path], boxes: Sequence[BoundingBox]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_boxes(boxes))


def read_boxes(path: Union[str, Path]) -> List[BoundingBox]:
    path = Path(path)
    try:
        return [BoundingBox.from_array(row) for row in parse_box_lines(path.read_text())]
    except (SequenceFormatError, BoxError) as e:
        raise SequenceFormatError(f"{path}: {e}") from None


def save_sequence(record: SequenceRecord, directory: Union[str, Path]) -> Path:
    """Writes PNG frame pairs, the ground truth and the tags in the layout `load_sequence` reads."""
    directory = Path(directory)
    for folder, modality in ((VISIBLE_DIR, "visible"), (THERMAL_DIR, "thermal")):
        (directory / folder).mkdir(parents=True, exist_ok=True)
        for index, pair in enumerate(record.frames):
            image = getattr(pair, modality).to_numpy()
            cv2.imwrite(
                str(directory / folder / f"{index:05d}.png"),
                cv2.cvtColor(image, cv2.COLOR_RGB2BGR),
            )
    write_boxes(directory / GROUNDTRUTH_FILE, record.boxes)
    if record.tags:
        (directory / TAGS_FILE).write_text("\n".join(record.tags) + "\n")
    return directory
