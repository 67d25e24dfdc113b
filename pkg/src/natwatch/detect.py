"""Training pipeline, percentile threshold calibration, and the local
detector runtime with its action dispatch."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional, Union

import numpy as np

from natwatch.flowdata import (
    DeviceModelId,
    FlowDataset,
    FlowRecord,
    LabeledFlow,
    chronological_split,
    filter_model,
)
from natwatch.iforest import (
    DEFAULT_SUBSAMPLE,
    DEFAULT_TREES,
    ModelArtifact,
    normality_score,
    normality_scores,
    train_forest,
)
from natwatch.preprocess import InsufficientDataError, fit_schema, transform, transform_many

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: DeviceModelId
    n_trees: int = DEFAULT_TREES
    subsample: int = DEFAULT_SUBSAMPLE
    master_seed: int = 0
    calibration_percentiles: list[int] = field(default_factory=lambda: [10])
    split_ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)

    def __post_init__(self):
        for p in self.calibration_percentiles:
            if not 0 <= p <= 30:
                raise ValueError(f"calibration percentile out of [0, 30]: {p}")


def train_pipeline(dataset: FlowDataset, cfg: TrainConfig) -> ModelArtifact:
    """Full per-model training: chronological split, model filtering,
    schema fit, forest training, and threshold calibration."""
    split = chronological_split(dataset, cfg.split_ratios)
    training = filter_model(split.training, cfg.model)
    validation = filter_model(split.validation, cfg.model)
    if len(training) == 0:
        raise InsufficientDataError(
            f"insufficient-data: no {cfg.model} flows in the training portion"
        )
    schema = fit_schema(training, cfg.model)
    X = transform_many(schema, [lf.flow for lf in training])
    forest = train_forest(X, cfg.n_trees, cfg.subsample, cfg.master_seed)
    artifact = ModelArtifact(
        model=cfg.model,
        schema=schema,
        forest=forest,
        default_threshold=0.0,
        trained_at=datetime.now(timezone.utc).isoformat(),
        training_flow_count=len(training),
    )
    if len(validation) == 0:
        log.warning("empty validation set for %s; skipping threshold calibration", cfg.model)
    else:
        for p in cfg.calibration_percentiles:
            artifact.calibrated_thresholds[p] = calibrate_threshold(artifact, validation, p)
    return artifact


def calibrate_threshold(
    artifact: ModelArtifact, validation: FlowDataset, percentile: int
) -> float:
    """Nearest-rank percentile of validation normality scores.

    Returns the k-th smallest g with k = max(1, ceil(percentile/100 * n)).
    Flows scoring at or above the returned value classify as the model.
    """
    if len(validation) == 0:
        raise InsufficientDataError("insufficient-data: empty validation set")
    if not 0 <= percentile <= 30:
        raise ValueError(f"percentile out of [0, 30]: {percentile}")
    X = transform_many(artifact.schema, [lf.flow for lf in validation])
    g = np.sort(normality_scores(artifact.forest, X))
    k = max(1, math.ceil(percentile / 100 * len(g)))
    return float(g[k - 1])


@dataclass
class DetectionEvent:
    flow: FlowRecord
    model: DeviceModelId
    normality_g: float
    threshold: float
    decision: str  # "M" | "non-M"
    action_taken: str = "log"
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "model": self.model.canonical(),
            "g": self.normality_g,
            "threshold": self.threshold,
            "decision": self.decision,
            "action": self.action_taken,
            "wall_time_s": self.wall_time_s,
            "flow": {
                "src_ip": self.flow.src_ip,
                "dst_ip": self.flow.dst_ip,
                "dst_port": self.flow.dst_port,
                "protocol": self.flow.ip_protocol,
                "start_ms": self.flow.flow_start_ms,
            },
        }


def classify(
    artifact: ModelArtifact, flow: FlowRecord, threshold_selector: Union[str, int] = "default"
) -> DetectionEvent:
    """Preprocess and score one flow against one artifact.

    Decision is "M" iff g >= threshold (boundary inclusive).
    """
    th = artifact.threshold(threshold_selector)
    t0 = time.perf_counter()
    x = transform(artifact.schema, flow)
    g = normality_score(artifact.forest, x)
    wall = time.perf_counter() - t0
    decision = "M" if g >= th else "non-M"
    return DetectionEvent(
        flow=flow,
        model=artifact.model,
        normality_g=g,
        threshold=th,
        decision=decision,
        wall_time_s=wall,
    )


@dataclass
class ActionPolicy:
    """Ordered reactions to a positive detection.

    "log" is always applied; "notify_stub" and "block_stub" record the
    would-be side effect to JSONL files instead of performing it;
    "cascade_hook" calls a pluggable secondary verifier.
    """

    on_positive: list[str] = field(default_factory=lambda: ["log"])
    notify_path: Optional[str] = None
    block_path: Optional[str] = None
    cascade_hook: Optional[Callable[[DetectionEvent], bool]] = None

    KNOWN = ("log", "notify_stub", "block_stub", "cascade_hook")

    def __post_init__(self):
        for a in self.on_positive:
            if a not in self.KNOWN:
                raise ValueError(f"unknown action: {a}")
        if "log" not in self.on_positive:
            self.on_positive = ["log"] + list(self.on_positive)

    def apply(self, event: DetectionEvent) -> str:
        """Run the configured actions; returns the last action applied."""
        last = "log"
        for action in self.on_positive:
            if action == "notify_stub" and self.notify_path:
                with open(self.notify_path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {
                                "timestamp": datetime.now(timezone.utc).isoformat(),
                                "model": event.model.canonical(),
                                "message": "possible vulnerable device detected",
                            }
                        )
                        + "\n"
                    )
            elif action == "block_stub" and self.block_path:
                with open(self.block_path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {
                                "timestamp": datetime.now(timezone.utc).isoformat(),
                                "model": event.model.canonical(),
                                "flow_key": list(event.flow.key),
                            }
                        )
                        + "\n"
                    )
            elif action == "cascade_hook" and self.cascade_hook is not None:
                self.cascade_hook(event)
            last = action
        return last


def run_detector(
    flow_source: Iterable[Union[FlowRecord, LabeledFlow]],
    artifacts: list[ModelArtifact],
    policy: Optional[ActionPolicy] = None,
    threshold_selector: Union[str, int] = "default",
    audit_path: Optional[str] = None,
) -> list[DetectionEvent]:
    """Score every incoming flow against every artifact, in arrival order.

    Positive decisions trigger the policy actions; every event is
    appended to the JSONL audit log when a path is given.
    """
    if not artifacts:
        raise ValueError("at least one artifact required")
    policy = policy or ActionPolicy()
    events: list[DetectionEvent] = []
    audit = open(audit_path, "a", encoding="utf-8") if audit_path else None
    try:
        for item in flow_source:
            flow = item.flow if isinstance(item, LabeledFlow) else item
            for artifact in artifacts:
                event = classify(artifact, flow, threshold_selector)
                if event.decision == "M":
                    event.action_taken = policy.apply(event)
                events.append(event)
                if audit is not None:
                    audit.write(json.dumps(event.to_dict()) + "\n")
    finally:
        if audit is not None:
            audit.close()
    return events
