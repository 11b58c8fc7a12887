import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, Field, root_validator

from .box import BoundingBox
from .frame import FramePair, ImageTensor, Modality
from .sequence import SequenceRecord


class OcclusionEvent(BaseModel):
    start: int = Field(..., ge=0)
    duration: int = Field(..., ge=1)
    # Pixels of occluder beyond the target box on every side
    margin: int = Field(2, ge=0)
    occluder_visible: Tuple[float, float, float] = (0.45, 0.45, 0.45)
    occluder_thermal: float = Field(0.3, ge=0, le=1)
    # Offset (dx, dy) applied to the target from the middle of the occlusion on
    teleport: Optional[Tuple[float, float]] = None

    @property
    def frames(self) -> range:
        return range(self.start, self.start + self.duration)

    @property
    def midpoint(self) -> int:
        return self.start + self.duration // 2


class SyntheticSpec(BaseModel):
    name: str = "synthetic"
    num_frames: int = Field(60, ge=1)
    # (height, width)
    canvas: Tuple[int, int] = (128, 128)
    # (w, h)
    target_size: Tuple[float, float] = (16.0, 16.0)
    shape: Literal["rectangle", "ellipse"] = "rectangle"
    target_visible: Tuple[float, float, float] = (0.85, 0.25, 0.2)
    target_thermal: float = Field(0.95, ge=0, le=1)
    background_thermal: float = Field(0.2, ge=0, le=1)
    # Target centers (x, y) visited in order, back and forth
    waypoints: List[Tuple[float, float]] = [(40.0, 40.0), (88.0, 88.0)]
    speed: float = Field(1.0, ge=0, description="Pixels per frame along the waypoint path")
    occlusions: List[OcclusionEvent] = []
    # Target look-alikes drawn in the visible image only
    distractors: int = Field(0, ge=0)
    noise: float = Field(0.02, ge=0)
    texture_cells: int = Field(8, ge=1, description="Canvas pixels per background texture cell")

    @root_validator(skip_on_failure=True)
    def _fits_canvas(cls, values):
        height, width = values["canvas"]
        w, h = values["target_size"]
        if w <= 0 or h <= 0:
            raise ValueError("target size must be positive")
        if w > width or h > height:
            raise ValueError(f"target {w}x{h} is larger than the {height}x{width} canvas")
        if not values["waypoints"]:
            raise ValueError("at least one waypoint is required")
        return values

    @staticmethod
    def from_file(path: Union[str, Path]) -> "SyntheticSpec":
        return SyntheticSpec.parse_file(path)

    @property
    def tags(self) -> Tuple[str, ...]:
        tags = []
        if self.occlusions:
            tags.append("occlusion")
        if self.speed > 0.5 * min(self.target_size):
            tags.append("fast_motion")
        if self.distractors:
            tags.append("distractor")
        if any(event.teleport for event in self.occlusions):
            tags.append("teleport")
        return tuple(tags)


def easy_spec(
    num_frames: int = 60,
    canvas: int = 128,
    rng: Optional[np.random.Generator] = None,
    name: str = "easy",
) -> SyntheticSpec:
    """A smoothly moving target on random waypoints, without occlusions or distractors."""
    rng = rng or np.random.default_rng(0)
    side = max(8.0, round(canvas / 8))
    low, high = side, canvas - side
    waypoints = [tuple(map(float, rng.uniform(low, high, size=2))) for _ in range(3)]
    return SyntheticSpec(
        name=name,
        num_frames=num_frames,
        canvas=(canvas, canvas),
        target_size=(side, side),
        waypoints=waypoints,
        speed=1.0,
    )


def occlusion_spec(
    num_frames: int = 60,
    canvas: int = 128,
    start: int = 20,
    duration: int = 15,
    teleport: bool = True,
    rng: Optional[np.random.Generator] = None,
    name: str = "occlusion",
) -> SyntheticSpec:
    """`easy_spec` plus one full occlusion, optionally moving the target while hidden."""
    rng = rng or np.random.default_rng(0)
    spec = easy_spec(num_frames, canvas, rng, name)
    offset = None
    if teleport:
        angle = rng.uniform(0, 2 * math.pi)
        distance = canvas / 3
        offset = (distance * math.cos(angle), distance * math.sin(angle))
    return spec.copy(
        update={"occlusions": [OcclusionEvent(start=start, duration=duration, teleport=offset)]}
    )


def path_position(waypoints: List[Tuple[float, float]], distance: float) -> Tuple[float, float]:
    """Point at arc length `distance` along the waypoint polyline walked back and forth."""
    points = np.asarray(waypoints, dtype=np.float64)
    if len(points) == 1:
        return float(points[0, 0]), float(points[0, 1])
    segments = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(segments.sum())
    if total == 0:
        return float(points[0, 0]), float(points[0, 1])
    distance = distance % (2 * total)
    if distance > total:
        distance = 2 * total - distance
    for (a, b), length in zip(zip(points[:-1], points[1:]), segments):
        if distance <= length and length > 0:
            x, y = a + (b - a) * (distance / length)
            return float(x), float(y)
        distance -= length
    return float(points[-1, 0]), float(points[-1, 1])


def script_boxes(spec: SyntheticSpec) -> List[BoundingBox]:
    """Ground-truth boxes of every frame, occluded ones included."""
    height, width = spec.canvas
    w, h = spec.target_size
    boxes = []
    for t in range(spec.num_frames):
        cx, cy = path_position(spec.waypoints, t * spec.speed)
        for event in spec.occlusions:
            if event.teleport and t >= event.midpoint:
                cx, cy = cx + event.teleport[0], cy + event.teleport[1]
        # Keeps the whole target on the canvas
        cx = min(max(cx, w / 2), width - w / 2)
        cy = min(max(cy, h / 2), height - h / 2)
        boxes.append(BoundingBox(cx - w / 2, cy - h / 2, w, h))
    return boxes


def _texture(rng: np.random.Generator, canvas: Tuple[int, int], cells: int, channels: int):
    height, width = canvas
    coarse = rng.random((height // cells + 2, width // cells + 2, channels)).astype(np.float32)
    texture = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    return np.clip(texture.reshape(height, width, channels), 0, 1)


def _pixel_region(box: BoundingBox, canvas: Tuple[int, int], margin: int = 0):
    height, width = canvas
    x0 = max(int(math.floor(box.x)) - margin, 0)
    y0 = max(int(math.floor(box.y)) - margin, 0)
    x1 = min(int(math.ceil(box.x + box.w)) + margin, width)
    y1 = min(int(math.ceil(box.y + box.h)) + margin, height)
    return slice(y0, y1), slice(x0, x1)


def _shape_mask(box: BoundingBox, canvas: Tuple[int, int], shape: str) -> np.ndarray:
    height, width = canvas
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    if shape == "ellipse":
        cx, cy = box.center
        return ((xs - cx) / (box.w / 2)) ** 2 + ((ys - cy) / (box.h / 2)) ** 2 <= 1
    return (xs >= box.x) & (xs < box.x + box.w) & (ys >= box.y) & (ys < box.y + box.h)


def generate_sequence(spec: SyntheticSpec, seed: int = 0) -> SequenceRecord:
    """Renders an aligned visible/thermal sequence following `spec`.

    The visible image is a colored texture with a colored target and optional
    look-alike distractors. The thermal image is a dim, weakly textured background
    with a bright target, so the two modalities carry complementary cues.

    Args:
        spec (SyntheticSpec): Scene description.
        seed (int, optional): Seed of every random draw. Defaults to 0.

    Returns:
        SequenceRecord: Frames, boxes and attribute tags of the scene.
    """
    rng = np.random.default_rng(seed)
    canvas = spec.canvas
    height, width = canvas
    boxes = script_boxes(spec)
    visible_bg = _texture(rng, canvas, spec.texture_cells, 3)
    thermal_bg = spec.background_thermal + 0.1 * (
        _texture(rng, canvas, 2 * spec.texture_cells, 1)[..., 0] - 0.5
    )
    w, h = spec.target_size
    distractors = [
        BoundingBox(rng.uniform(0, width - w), rng.uniform(0, height - h), w, h)
        for _ in range(spec.distractors)
    ]
    occluded = set()
    frames = []
    for t, box in enumerate(boxes):
        visible = visible_bg.copy()
        thermal = thermal_bg.copy()
        for distractor in distractors:
            visible[_shape_mask(distractor, canvas, spec.shape)] = spec.target_visible
        mask = _shape_mask(box, canvas, spec.shape)
        visible[mask] = spec.target_visible
        thermal[mask] = spec.target_thermal
        for event in spec.occlusions:
            if t in event.frames:
                region = _pixel_region(box, canvas, event.margin)
                visible[region] = event.occluder_visible
                thermal[region] = event.occluder_thermal
                occluded.add(t)
        if spec.noise:
            visible = visible + rng.normal(0, spec.noise, visible.shape)
            thermal = thermal + rng.normal(0, spec.noise, thermal.shape)
        frames.append(
            FramePair(
                ImageTensor.from_numpy(np.clip(visible, 0, 1), Modality.Visible),
                ImageTensor.from_numpy(np.clip(thermal, 0, 1), Modality.Thermal),
            )
        )
    return SequenceRecord(tuple(frames), tuple(boxes), spec.tags, spec.name, tuple(sorted(occluded)))
