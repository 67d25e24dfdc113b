"""Per-model feature schema: min-max scaling of the numeric flow
features and one-hot encoding of the categorical ones, fitted on
training flows only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from natwatch.flowdata import DeviceModelId, FlowDataset, FlowRecord, flow_duration

NUMERIC_FEATURES = ("in_bytes", "out_bytes", "flow_duration")
CATEGORICAL_FEATURES = ("protocol", "l4_dst_port", "l7_proto_name", "src_tos", "dst_tos")


class InsufficientDataError(ValueError):
    pass


def _numeric_values(flow: FlowRecord) -> tuple[float, float, float]:
    return (float(flow.in_bytes), float(flow.out_bytes), float(flow_duration(flow)))


def _categorical_values(flow: FlowRecord) -> tuple:
    return (flow.ip_protocol, flow.dst_port, flow.l7_proto_name, flow.src_tos, flow.dst_tos)


@dataclass
class FeatureSchema:
    """Fitted feature transformation for one device model.

    Numeric features scale to [0,1] on the training range (values
    outside it are not clipped; a constant feature maps to 0). Each
    categorical feature expands into one dummy column per distinct
    training value, ordered by first appearance; unseen values encode
    as an all-zero block.
    """

    model: DeviceModelId
    numeric_ranges: dict[str, tuple[float, float]]
    categories: dict[str, list]

    def __post_init__(self):
        for name, (lo, hi) in self.numeric_ranges.items():
            if lo > hi:
                raise ValueError(f"min > max for numeric feature {name}")
        for name, vocab in self.categories.items():
            if len(set(vocab)) != len(vocab):
                raise ValueError(f"duplicate category value in {name}")
        self._index = {
            name: {v: i for i, v in enumerate(vocab)}
            for name, vocab in self.categories.items()
        }

    @property
    def dimension(self) -> int:
        return len(NUMERIC_FEATURES) + sum(len(v) for v in self.categories.values())

    def to_dict(self) -> dict:
        return {
            "model": self.model.canonical(),
            "numeric_ranges": {k: list(v) for k, v in self.numeric_ranges.items()},
            "categories": self.categories,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            model=DeviceModelId.parse(d["model"]),
            numeric_ranges={k: (float(v[0]), float(v[1])) for k, v in d["numeric_ranges"].items()},
            categories={k: list(v) for k, v in d["categories"].items()},
        )


def fit_schema(training: FlowDataset, m: DeviceModelId) -> FeatureSchema:
    """Fit the schema on model-m training flows only."""
    if len(training) == 0:
        raise InsufficientDataError("insufficient-data: empty training set")
    for lf in training:
        if lf.label != m:
            raise ValueError(f"training flow labeled {lf.label}, expected {m}")

    numerics = np.array([_numeric_values(lf.flow) for lf in training])
    numeric_ranges = {
        name: (float(numerics[:, i].min()), float(numerics[:, i].max()))
        for i, name in enumerate(NUMERIC_FEATURES)
    }
    categories: dict[str, list] = {name: [] for name in CATEGORICAL_FEATURES}
    seen: dict[str, set] = {name: set() for name in CATEGORICAL_FEATURES}
    for lf in training:
        for name, value in zip(CATEGORICAL_FEATURES, _categorical_values(lf.flow)):
            if value not in seen[name]:
                seen[name].add(value)
                categories[name].append(value)
    return FeatureSchema(model=m, numeric_ranges=numeric_ranges, categories=categories)


def transform(schema: FeatureSchema, flow: FlowRecord) -> np.ndarray:
    """Map one flow to a fixed-length numeric vector under the schema."""
    out = np.zeros(schema.dimension)
    for i, (name, x) in enumerate(zip(NUMERIC_FEATURES, _numeric_values(flow))):
        lo, hi = schema.numeric_ranges[name]
        out[i] = (x - lo) / (hi - lo) if hi > lo else 0.0
    offset = len(NUMERIC_FEATURES)
    for name, value in zip(CATEGORICAL_FEATURES, _categorical_values(flow)):
        idx = schema._index[name].get(value)
        if idx is not None:
            out[offset + idx] = 1.0
        offset += len(schema.categories[name])
    return out


def transform_many(schema: FeatureSchema, flows: list[FlowRecord]) -> np.ndarray:
    """Vectorize a batch of flows into an (n, dimension) matrix."""
    n = len(flows)
    out = np.zeros((n, schema.dimension))
    ranges = [schema.numeric_ranges[name] for name in NUMERIC_FEATURES]
    cat_offsets = []
    offset = len(NUMERIC_FEATURES)
    for name in CATEGORICAL_FEATURES:
        cat_offsets.append((name, offset, schema._index[name]))
        offset += len(schema.categories[name])
    for r, flow in enumerate(flows):
        for i, x in enumerate(_numeric_values(flow)):
            lo, hi = ranges[i]
            out[r, i] = (x - lo) / (hi - lo) if hi > lo else 0.0
        for (name, off, index), value in zip(cat_offsets, _categorical_values(flow)):
            j = index.get(value)
            if j is not None:
                out[r, off + j] = 1.0
    return out
