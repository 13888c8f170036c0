"""Request and response bodies for every pipeline operation."""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

SingleModelName = Literal["unet", "sd_unet", "resunet", "rd_unet"]
EnsembleScheme = Literal["unweighted", "weighted"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class GenerateRequest(_Strict):
    out_dir: str
    blastocysts: int = Field(default=20, ge=1)
    frames: int = Field(default=31, ge=1)
    image_size: int = Field(default=500, ge=32)
    noise_level: float = Field(default=6.0, ge=0.0)
    debris_count: int = Field(default=3, ge=0)
    seed: int = 0


class GenerateResponse(_Strict):
    out_dir: str
    manifest_path: str
    n_pairs: int
    n_blastocysts: int
    frames: int
    image_size: int
    seed: int


class TrainRequest(_Strict):
    dataset: str
    model: SingleModelName
    out_dir: str
    base_filters: int = Field(default=16, ge=1)
    size: int = Field(default=240, ge=16)
    seed: int = 0
    augment: bool = True
    split_ratio: float = Field(default=0.75, gt=0.0, lt=1.0)
    val_fraction: float = Field(default=0.15, gt=0.0, lt=1.0)
    by_source: bool = False
    config_text: Optional[str] = None
    max_epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    initial_lr: Optional[float] = Field(default=None, gt=0.0)


class TrainResponse(_Strict):
    checkpoint_path: str
    history_path: str
    config_path: str
    model: str
    epochs: int
    stop_reason: str
    best_epoch: int
    best_val_loss: float
    best_val_jaccard: float
    n_train: int
    n_val: int
    n_test: int


class EvalRequest(_Strict):
    dataset: str
    checkpoints: list[str] = Field(min_length=1)
    out_dir: str
    scheme: Optional[EnsembleScheme] = None
    expect_model: Optional[SingleModelName] = None
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    seed: int = 0
    split_ratio: float = Field(default=0.75, gt=0.0, lt=1.0)
    use_all: bool = False
    overlays: int = Field(default=4, ge=0)


class MemberSummary(_Strict):
    checkpoint: str
    model: str
    report_path: str
    weight: float
    micro_jaccard: Optional[float]
    micro_dice: Optional[float]


class EvalResponse(_Strict):
    report_path: str
    target: str
    threshold: float
    n_images: int
    micro: dict
    macro: dict
    categories: dict
    uncategorized: int
    overlay_paths: list[str]
    members: list[MemberSummary] = []


class SegmentRequest(_Strict):
    image: str
    checkpoints: list[str] = Field(min_length=1)
    out_path: str
    scheme: Optional[EnsembleScheme] = None
    expect_model: Optional[SingleModelName] = None
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class SegmentResponse(_Strict):
    mask_path: str
    threshold: float
    working_size: int
    image_size: list[int]
    positive_fraction: float


class SweepRequest(_Strict):
    dataset: str
    checkpoints: list[str] = Field(min_length=1)
    out_dir: str
    scheme: Optional[EnsembleScheme] = None
    expect_model: Optional[SingleModelName] = None
    seed: int = 0
    split_ratio: float = Field(default=0.75, gt=0.0, lt=1.0)
    use_all: bool = False


class SweepRow(_Strict):
    threshold: float
    micro_jaccard: Optional[float]


class SweepResponse(_Strict):
    table_path: str
    rows: list[SweepRow]
    best_threshold: float
    insensitive_04_06: bool
    jaccard_04_06_spread: float


class HealthResponse(_Strict):
    status: str
    version: str


class ErrorInfo(_Strict):
    code: str
    message: str


class ErrorBody(_Strict):
    error: ErrorInfo
