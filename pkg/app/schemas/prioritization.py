from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, root_validator, validator

from app.models.catalog import CATALOG, MetricKind, parse_metric


class Label(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


class ZScoreFeature(BaseModel):
    """Max |Z| per metric over one span of one task, with its label"""

    task_id: str
    window_span: Tuple[int, int] = Field(..., description="Half-open [start, end) grid indices")
    per_metric_max_z: Dict[MetricKind, float]
    label: Label

    class Config:
        allow_mutation = False

    @validator("window_span")
    def span_ordered(cls, v):
        if v[0] < 0 or v[1] <= v[0]:
            raise ValueError(f"invalid span {v}")
        return v

    @validator("per_metric_max_z")
    def finite_non_negative(cls, v):
        for metric, value in v.items():
            if not (value >= 0.0 and value < float("inf")):
                raise ValueError(f"{metric.value}: max |Z| must be finite and >= 0, got {value}")
        return v


class TreeNode(BaseModel):
    depth: int = Field(..., ge=0)
    counts: Tuple[int, int] = Field(..., description="(normal, abnormal) training instances reaching the node")
    split_metric: Optional[MetricKind] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None

    class Config:
        allow_mutation = False

    @property
    def is_leaf(self) -> bool:
        return self.split_metric is None

    @property
    def label(self) -> Label:
        # ties go to normal
        return Label.ABNORMAL if self.counts[1] > self.counts[0] else Label.NORMAL

    @property
    def purity(self) -> float:
        total = self.counts[0] + self.counts[1]
        return max(self.counts) / total if total else 1.0


class DecisionTree(BaseModel):
    """Binary CART tree stored as a node list; node 0 is the root"""

    nodes: List[TreeNode]
    max_depth: int = Field(..., ge=1)

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def well_formed(cls, values):
        nodes = values["nodes"]
        if not nodes:
            raise ValueError("a tree has at least a root")
        seen = set()
        stack = [0]
        while stack:
            index = stack.pop()
            if index in seen:
                raise ValueError(f"node {index} reached twice")
            seen.add(index)
            node = nodes[index]
            if node.is_leaf:
                continue
            if node.threshold is None or node.left is None or node.right is None:
                raise ValueError(f"internal node {index} lacks a threshold or children")
            for child in (node.left, node.right):
                if not 0 < child < len(nodes):
                    raise ValueError(f"node {index} points at missing child {child}")
                if nodes[child].depth != node.depth + 1:
                    raise ValueError(f"child {child} of node {index} has wrong depth")
                stack.append(child)
        if len(seen) != len(nodes):
            raise ValueError("tree has unreachable nodes")
        return values

    @property
    def depth(self) -> int:
        return max(node.depth for node in self.nodes)

    def predict(self, features: Dict[MetricKind, float]) -> Label:
        node = self.nodes[0]
        while not node.is_leaf:
            go_left = features[node.split_metric] <= node.threshold
            node = self.nodes[node.left if go_left else node.right]
        return node.label

    def split_metrics(self) -> List[MetricKind]:
        return [n.split_metric for n in self.nodes if not n.is_leaf]

    def to_text(self) -> List[str]:
        """Indented, human-auditable rendering of the tree"""
        lines: List[str] = []

        def walk(index: int, prefix: str) -> None:
            node = self.nodes[index]
            counts = f"normal={node.counts[0]} abnormal={node.counts[1]}"
            indent = "  " * node.depth
            if node.is_leaf:
                lines.append(f"{indent}{prefix}leaf {node.label.value} purity={node.purity:.3f} [{counts}]")
                return
            lines.append(f"{indent}{prefix}{node.split_metric.value} <= {node.threshold:.6g} [{counts}]")
            walk(node.left, "yes: ")
            walk(node.right, "no: ")

        walk(0, "")
        return lines


class PriorityEntry(BaseModel):
    metric: MetricKind
    min_depth: Optional[int] = Field(None, ge=0, description="None for metrics the tree never splits on")

    class Config:
        allow_mutation = False


class PriorityList(BaseModel):
    ordered: List[PriorityEntry]

    class Config:
        allow_mutation = False

    @validator("ordered")
    def no_duplicates_sorted(cls, v):
        metrics = [e.metric for e in v]
        if len(set(metrics)) != len(metrics):
            raise ValueError("duplicate metrics in priority list")
        keys = [e.min_depth if e.min_depth is not None else float("inf") for e in v]
        if any(b < a for a, b in zip(keys, keys[1:])):
            raise ValueError("priority list must be ordered by non-decreasing depth")
        return v

    @property
    def metrics(self) -> List[MetricKind]:
        return [e.metric for e in self.ordered]

    def restricted(self, allowed: List[MetricKind]) -> "PriorityList":
        """Same order, keeping only the allowed metrics"""
        keep = set(allowed)
        return PriorityList(ordered=[e for e in self.ordered if e.metric in keep])

    def to_text(self, tree: Optional[DecisionTree] = None) -> str:
        lines = ["# metric\tmin_depth"]
        for entry in self.ordered:
            depth = "-" if entry.min_depth is None else str(entry.min_depth)
            lines.append(f"{entry.metric.value}\t{depth}")
        if tree is not None:
            lines.append("#")
            lines.append(f"# decision tree (max_depth={tree.max_depth})")
            lines.extend(f"# {line}" for line in tree.to_text())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PriorityList":
        entries = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, _, depth = line.partition("\t")
            depth = depth.strip()
            entries.append(
                PriorityEntry(
                    metric=parse_metric(name.strip()),
                    min_depth=None if depth in ("", "-") else int(depth),
                )
            )
        return cls(ordered=entries)

    @classmethod
    def catalog_default(cls, metrics: Optional[List[MetricKind]] = None) -> "PriorityList":
        """Catalog order with no tree information"""
        return cls(ordered=[PriorityEntry(metric=m) for m in (metrics or CATALOG)])
