#!/usr/bin/env python3
"""
⚙️ CONFIGURATION - FEATURIZED QUERY R-CNN
=========================================

Pydantic models for every knob of the detector, the synthetic dataset and a
training/evaluation run, plus environment-driven runtime settings and the
shared logging setup.

Runtime settings (read from the environment, `.env` supported):
- FQRCNN_LOG_LEVEL  logging level name (default INFO)
- FQRCNN_LOG_FILE   optional log file path
- FQRCNN_STRICT     "1" rejects non-finite inputs in every primitive
"""

import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class ConfigError(ValueError):
    """Malformed configuration; the message carries the dotted key path."""

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LossConfig(_Strict):
    """Matching and loss coefficients for the QGN and the R-CNN stages"""
    alpha: float = Field(0.8, ge=0.0, le=1.0, description="Q_obj^(1-alpha) * Q_IoU^alpha")
    lambda_obj: float = Field(1.0, ge=0.0)
    lambda_giou: float = Field(2.0, ge=0.0)
    lambda_cls: float = Field(2.0, ge=0.0)
    lambda_l1: float = Field(5.0, ge=0.0)
    lambda_giou_rcnn: float = Field(2.0, ge=0.0)
    focal_gamma: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, ge=0.0, le=1.0)
    qgn_weight: float = Field(1.0, ge=0.0, description="Multiplier on the QGN loss when summed with R-CNN losses")


class OptimizerConfig(_Strict):
    """AdamW hyperparameters"""
    lr: float = Field(1e-4, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    clip_norm: Optional[float] = Field(1.0, gt=0.0, description="Global gradient norm clip, null disables")
    warmup_iters: int = Field(20, ge=0, description="Linear learning-rate warmup length in steps, 0 disables")
    warmup_ratio: float = Field(0.1, gt=0.0, le=1.0, description="Fraction of lr at the first step")


class ModelConfig(_Strict):
    """Detector architecture and training-loss configuration"""
    num_queries: int = Field(20, ge=1, description="K, size of the query set")
    d_model: int = Field(64, ge=4)
    fpn_channels: int = Field(32, ge=1, description="C, FPN output width shared by all levels")
    fpn_levels: Tuple[int, int] = (3, 7)
    n_stages: int = Field(2, ge=1)
    num_classes: int = Field(3, ge=1)
    roi_size: int = Field(7, ge=1)
    roi_sampling: int = Field(2, ge=1, description="Bilinear sample points per bin side")
    roi_canonical_size: float = Field(224.0, gt=0.0)
    roi_canonical_level: int = Field(4, ge=3, le=7)
    roi_reference_size: float = Field(800.0, gt=0.0, description="Image side the canonical size refers to")
    heads: int = Field(4, ge=1)
    dim_feedforward: int = Field(128, ge=1)
    dynamic_dim: Optional[int] = Field(None, ge=1, description="c_mid, defaults to d_model // 4")
    mode: Literal["featurized", "learnable"] = "featurized"
    query_branch: Literal["conv1x1", "conv3x3", "stacked"] = "conv1x1"
    use_roi_self_attention: bool = True
    roi_self_attention_all_stages: bool = False
    image_height: int = Field(64, ge=8)
    image_width: int = Field(64, ge=8)
    objectness_bias: float = -2.0
    class_prior_prob: float = Field(0.01, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()

    @model_validator(mode="after")
    def _check_shape_rules(self) -> "ModelConfig":
        lo, hi = self.fpn_levels
        if not 3 <= lo <= hi <= 7:
            raise ValueError(f"fpn_levels must satisfy 3 <= lo <= hi <= 7, got {self.fpn_levels}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if not lo <= self.roi_canonical_level <= hi:
            raise ValueError(f"roi_canonical_level {self.roi_canonical_level} outside fpn_levels {self.fpn_levels}")
        return self

    @property
    def c_mid(self) -> int:
        return self.dynamic_dim or max(1, self.d_model // 4)

    @property
    def levels(self) -> List[int]:
        return list(range(self.fpn_levels[0], self.fpn_levels[1] + 1))


class SceneSpec(_Strict):
    """Synthetic shapes scene generation parameters"""
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    min_objects: int = Field(1, ge=0)
    max_objects: int = Field(4, ge=0)
    num_classes: int = Field(3, ge=1, le=5)
    min_size: int = Field(8, ge=8)
    max_size: int = Field(32, ge=8)
    noise: float = Field(0.05, ge=0.0, le=0.5)
    max_retries: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SceneSpec":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if self.min_size > self.max_size:
            raise ValueError("min_size exceeds max_size")
        if self.max_size > min(self.height, self.width):
            raise ValueError("max_size exceeds the image extent")
        return self


class PathsConfig(_Strict):
    dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    output_dir: str = "runs/default"
    resume: Optional[str] = None


class RunControls(_Strict):
    steps: int = Field(3000, ge=0)
    batch_size: int = Field(4, ge=1)
    eval_every: int = Field(0, ge=0, description="0 disables periodic evaluation")
    log_every: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    log_wall_clock: bool = Field(False, description="Write measured wall-clock ms into the metrics CSV")
    report_top: Optional[int] = Field(None, ge=1)


class RunConfig(_Strict):
    """One training/evaluation run: model + paths + run controls"""
    model: ModelConfig = ModelConfig()
    paths: PathsConfig = PathsConfig()
    run: RunControls = RunControls()


@dataclass
class RuntimeSettings:
    log_level: str = "INFO"
    log_file: Optional[str] = None
    strict: bool = False


def runtime_settings() -> RuntimeSettings:
    """Read runtime settings from the environment (after loading `.env`)"""
    load_dotenv()
    return RuntimeSettings(
        log_level=os.getenv('FQRCNN_LOG_LEVEL', 'INFO').upper(),
        log_file=os.getenv('FQRCNN_LOG_FILE') or None,
        strict=os.getenv('FQRCNN_STRICT', '0').strip() in ('1', 'true', 'yes'),
    )


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging the same way for every entry point"""
    settings = runtime_settings()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = log_file or settings.log_file
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def _error_path(error: ValidationError, root: str = "") -> ConfigError:
    first = error.errors()[0]
    path = ".".join(str(part) for part in first.get("loc", ()))
    if root:
        path = f"{root}.{path}" if path else root
    return ConfigError(path, first.get("msg", "invalid value"))


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides to a nested JSON document (copy returned)"""
    result = json.loads(json.dumps(document))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = [part for part in key.strip().split(".") if part]
        if not parts:
            raise ConfigError(item, "empty key path")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"'{part}' is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return result


def load_json(path: str) -> Dict[str, Any]:
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    try:
        document = json.loads(config_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError("", f"{path} must hold a JSON object")
    return document


def parse_run_config(document: Dict[str, Any], overrides: Sequence[str] = ()) -> RunConfig:
    try:
        return RunConfig.model_validate(apply_overrides(document, overrides))
    except ValidationError as e:
        raise _error_path(e) from e


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Load a RunConfig JSON file (or defaults when path is None) with overrides"""
    document = load_json(path) if path else {}
    config = parse_run_config(document, overrides)
    logger.debug(f"Loaded run config from {path or '<defaults>'} with {len(overrides)} override(s)")
    return config


def load_scene_spec(path: Optional[str], overrides: Sequence[str] = ()) -> SceneSpec:
    document = load_json(path) if path else {}
    try:
        return SceneSpec.model_validate(apply_overrides(document, overrides))
    except ValidationError as e:
        raise _error_path(e) from e


def model_config_from_json(text: str) -> ModelConfig:
    try:
        return ModelConfig.model_validate_json(text)
    except ValidationError as e:
        raise _error_path(e, "model") from e
