from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, BaseSettings, Field, ValidationError, validator

from .errors import ConfigError


class Section(BaseModel):
    class Config:
        extra = "forbid"


class BackboneConfig(Section):
    # Output channels of the shared encoder. Every downstream width derives from it.
    channels: int = Field(512, ge=4, description="Encoder output channels (512 full, 32 reduced)")
    # Upper bound on the rescaled frame, whatever the target size asks for
    input_size: int = Field(1024, ge=8, description="Longest frame side fed to the encoder")

    @validator("channels")
    def _multiple_of_four(cls, value: int):
        if value % 4:
            raise ValueError("channel count must be a multiple of 4")
        return value


class MFGNetConfig(Section):
    kernel_size: int = Field(3, ge=1, le=5, description="Side s of the predicted s x s kernels")
    # mfg: one filter bank per modality, naive: one bank shared by both, off: plain concatenation
    mode: Literal["mfg", "naive", "off"] = "mfg"
    squash: bool = Field(False, description="Pass predicted kernels through tanh")
    bias: bool = Field(False, description="Give the key/query 1x1 transforms a bias")

    @validator("kernel_size")
    def _odd(cls, value: int):
        if value % 2 == 0:
            raise ValueError("kernel size must be odd")
        return value


class CBAMConfig(Section):
    enabled: bool = True
    reduction: int = Field(16, ge=1)
    spatial_kernel: int = Field(7, ge=1)
    # Lower bound on the channel MLP width under reduced channel profiles
    min_hidden: int = Field(4, ge=1)

    @validator("spatial_kernel")
    def _odd(cls, value: int):
        if value % 2 == 0:
            raise ValueError("spatial kernel must be odd")
        return value


class DatanetConfig(Section):
    profile: Literal["full", "desk"] = "desk"
    # Number of consecutive frame pairs per clip, the template is added on top
    clip_len: int = Field(2, ge=1)
    input_size: int = Field(300, ge=16, description="Side the clip images are resized to")
    lr: float = Field(1e-3, gt=0, description="Adagrad learning rate")
    batch_size: int = Field(5, ge=1)
    epochs: int = Field(5, ge=1)
    clips_per_sequence: int = Field(20, ge=1)
    # Global proposal sampling around attention peaks
    num_peaks: int = Field(8, ge=1)
    peak_window: int = Field(15, ge=1, description="Side of the non-maximum suppression window")
    scale_jitter: float = Field(0.2, ge=0, lt=1)


class TrackerConfig(Section):
    # Local search
    n_local: int = Field(256, ge=1)
    sigma_xy: float = Field(0.3, ge=0)
    scale_steps: float = Field(0.5, ge=0, description="Spread of the scale exponent, in steps of 1.05")
    # Frames are rescaled so the first-frame target spans this many encoder pixels
    target_side: int = Field(48, ge=0, description="0 only downscales frames to fit backbone.input_size")
    trans_expand: float = Field(1.1, ge=1, description="Growth of sigma_xy per failed frame")
    trans_limit: float = Field(0.6, ge=0, description="Upper bound of the expanded sigma_xy")
    # Global search switch
    global_search: bool = True
    failure_threshold: int = Field(8, ge=1)
    n_global: int = Field(64, ge=1)
    global_stride: float = Field(
        0.25, ge=0, description="Step of the attention-ranked global grid in target sides, 0 disables it"
    )
    # Sample labeling
    pos_iou: float = Field(0.7, ge=0, le=1)
    neg_iou: float = Field(0.5, ge=0, le=1)
    n_pos: int = Field(32, ge=1)
    n_neg: int = Field(96, ge=1)
    hard_pool: int = Field(1024, ge=1)
    # Instance head
    roi_grid: int = Field(3, ge=1)
    roi_sampling: int = Field(2, ge=0)
    hidden: int = Field(512, ge=1)
    dropout: float = Field(0.5, ge=0, lt=1)
    # First frame finetuning
    n_init_pos: int = Field(256, ge=1)
    n_init_neg: int = Field(1024, ge=1)
    init_lr: float = Field(5e-4, gt=0)
    init_iters: int = Field(50, ge=0)
    # Finetuning continues past init_iters until both classes reach init_accuracy
    init_max_iters: int = Field(300, ge=0)
    init_accuracy: float = Field(0.95, ge=0, le=1)
    balanced: bool = Field(True, description="Weigh positives and negatives equally in head updates")
    head_lr_mult: float = Field(10.0, gt=0)
    bbreg_samples: int = Field(1000, ge=1)
    bbreg_alpha: float = Field(1000.0, gt=0)
    # Online update
    lr: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    update_interval: int = Field(10, ge=1)
    update_iters: int = Field(15, ge=1)
    n_store_pos: int = Field(50, ge=1)
    n_store_neg: int = Field(200, ge=1)
    long_term: int = Field(100, ge=1, description="Frames kept in the long-term store")
    short_term: int = Field(20, ge=1, description="Frames kept in the short-term store")
    seed: int = 0


class TrainConfig(Section):
    iterations: int = Field(200, ge=1)
    lr: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    alpha: float = Field(0.1, ge=0, description="Weight of the instance embedding loss")
    num_sequences: int = Field(4, ge=1)
    seed: int = 0


class ExperimentConfig(Section):
    num_sequences: int = Field(3, ge=1)
    num_frames: int = Field(60, ge=2)
    canvas: int = Field(128, ge=32)
    pr_threshold: float = Field(20.0, ge=0)
    seed: int = 0
    out_dir: Path = Path("runs")
    network: Optional[Path] = Field(None, description="Network checkpoint loaded before tracking")
    attention: Optional[Path] = Field(None, description="Attention network checkpoint for global search")


class Settings(BaseSettings):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    mfgnet: MFGNetConfig = Field(default_factory=MFGNetConfig)
    cbam: CBAMConfig = Field(default_factory=CBAMConfig)
    datanet: DatanetConfig = Field(default_factory=DatanetConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    class Config:
        env_prefix = "MFGTRACK_"
        env_nested_delimiter = "__"
        extra = "forbid"

        @classmethod
        def customise_sources(cls, init_settings, env_settings, file_secret_settings):
            # Environment values override file values
            return env_settings, init_settings, file_secret_settings

    def with_overrides(self, overrides: Dict[str, Any]) -> "Settings":
        """Validated copy with dotted keys replaced, e.g. {"mfgnet.kernel_size": 5}."""
        values = self.dict()
        for key, value in overrides.items():
            _assign(values, key, value)
        return build_settings(values)


def _assign(values: Dict[str, Any], key: str, value: Any):
    section, _, name = key.partition(".")
    if not name:
        raise ConfigError(f"{key}: keys must have the form 'section.key'")
    values.setdefault(section, {})[name] = value


def parse_flat(text: str) -> Dict[str, Dict[str, str]]:
    """Parses `section.key = value` lines into nested raw values.

    Text after "#" is a comment, blank lines are skipped.
    """
    values: Dict[str, Dict[str, str]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            _assign(values, key, value)
        except ConfigError as e:
            raise ConfigError(f"line {number}: {e}") from None
    return values


def build_settings(values: Dict[str, Any]) -> Settings:
    try:
        return Settings(**values)
    except ValidationError as e:
        lines = [
            "{}: {}".format(".".join(str(part) for part in error["loc"]), error["msg"])
            for error in e.errors()
        ]
        raise ConfigError("invalid configuration\n" + "\n".join(lines)) from None


def load_config(path: Optional[Union[str, Path]] = None) -> Settings:
    """Loads a flat key-value config file. Without a path only defaults and
    environment overrides apply."""
    if path is None:
        return build_settings({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return build_settings(parse_flat(path.read_text()))


def dump_flat(settings: Settings) -> str:
    """Renders settings back into the flat file format."""
    lines = []
    for section, fields in settings.dict().items():
        for name, value in fields.items():
            if value is None:
                continue
            lines.append(f"{section}.{name} = {value}")
    return "\n".join(lines) + "\n"
