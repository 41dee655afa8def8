"""Metric prioritization: Z-score dispersion features and a CART tree over them"""
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from app.core.errors import IndexOutOfRange, SingleClassDataset, SpanUncovered
from app.models.catalog import CATALOG, MetricKind, catalog_order
from app.schemas.prioritization import DecisionTree, Label, PriorityEntry, PriorityList, TreeNode, ZScoreFeature
from app.schemas.simulation import GroundTruth
from app.schemas.traces import AlignedTensor, TaskTensors

logger = logging.getLogger(__name__)

ZSCORE_EPS = 1e-9
# a split must beat the incumbent by more than this
GAIN_TOL = 1e-12


# --- Z-score features ---

def zscores(values: np.ndarray) -> np.ndarray:
    """Z-score across machines (axis 0) for every time column, zero where dispersion vanishes"""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    safe = np.where(std < ZSCORE_EPS, 1.0, std)
    return np.where(std < ZSCORE_EPS, 0.0, (values - mean) / safe)


def zscore_per_machine(tensor: AlignedTensor, time_index: int) -> np.ndarray:
    if not 0 <= time_index < tensor.n_steps:
        raise IndexOutOfRange(f"time index {time_index} outside [0, {tensor.n_steps})")
    return zscores(tensor.values[:, time_index : time_index + 1])[:, 0]


def max_z_feature(
    tensors: Union[TaskTensors, Mapping[MetricKind, AlignedTensor]],
    window_span: Tuple[int, int],
    label: Label,
    task_id: Optional[str] = None,
) -> ZScoreFeature:
    """Max |Z| over machines and the span's time indices, per metric"""
    by_metric = tensors.tensors if isinstance(tensors, TaskTensors) else dict(tensors)
    start, end = window_span
    features: Dict[MetricKind, float] = {}
    for metric, tensor in by_metric.items():
        if start < 0 or end > tensor.n_steps or end <= start:
            raise SpanUncovered(f"{metric.value}: span [{start}, {end}) not within [0, {tensor.n_steps})")
        features[metric] = float(np.abs(zscores(tensor.values[:, start:end])).max())
    if task_id is None:
        task_id = next(iter(by_metric.values())).task_id
    return ZScoreFeature(task_id=task_id, window_span=(start, end), per_metric_max_z=features, label=label)


def build_feature_dataset(
    tasks: Sequence[Tuple[TaskTensors, GroundTruth]], span_seconds: float = 240.0
) -> List[ZScoreFeature]:
    """Cut each task into non-overlapping spans, labeled abnormal when a fault overlaps"""
    dataset: List[ZScoreFeature] = []
    for task, truth in tasks:
        span = max(1, int(round(span_seconds / task.grid_interval)))
        for start in range(0, task.n_steps - span + 1, span):
            t0 = task.grid_start + start * task.grid_interval
            t1 = task.grid_start + (start + span) * task.grid_interval
            abnormal = any(f.overlaps(t0, t1) for f in truth.faults)
            label = Label.ABNORMAL if abnormal else Label.NORMAL
            dataset.append(max_z_feature(task, (start, start + span), label, task_id=task.task_id))
    n_abnormal = sum(1 for f in dataset if f.label == Label.ABNORMAL)
    logger.info(f"Built {len(dataset)} feature spans ({n_abnormal} abnormal) from {len(tasks)} tasks")
    return dataset


# --- CART ---

class Split(NamedTuple):
    column: int
    threshold: float
    gain: float


def gini(n_normal: float, n_abnormal: float) -> float:
    total = n_normal + n_abnormal
    if total == 0:
        return 0.0
    p = n_abnormal / total
    return 2.0 * p * (1.0 - p)


def split_gains(x: np.ndarray, y: np.ndarray, min_samples_leaf: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Gini decrease of every midpoint split of one feature, thresholds ascending"""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    boundaries = np.nonzero(xs[1:] > xs[:-1])[0] + 1  # left size at each distinct-value boundary
    if boundaries.size == 0:
        return np.empty(0), np.empty(0)
    thresholds = (xs[boundaries - 1] + xs[boundaries]) / 2.0
    left_pos = np.cumsum(ys)[boundaries - 1]
    total_pos = ys.sum()
    n_left = boundaries.astype(np.float64)
    n_right = n - n_left
    p_left = left_pos / n_left
    p_right = (total_pos - left_pos) / n_right
    weighted = (n_left * 2 * p_left * (1 - p_left) + n_right * 2 * p_right * (1 - p_right)) / n
    gains = gini(n - total_pos, total_pos) - weighted
    valid = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    return thresholds[valid], gains[valid]


def best_split(X: np.ndarray, y: np.ndarray, min_samples_leaf: int = 1) -> Optional[Split]:
    """Highest-gain split; ties go to the lower column, then the lower threshold"""
    best: Optional[Split] = None
    for column in range(X.shape[1]):
        thresholds, gains = split_gains(X[:, column], y, min_samples_leaf)
        if gains.size == 0:
            continue
        k = int(np.argmax(gains >= gains.max() - GAIN_TOL))
        if gains[k] <= GAIN_TOL:
            continue
        if best is None or gains[k] > best.gain + GAIN_TOL:
            best = Split(column, float(thresholds[k]), float(gains[k]))
    return best


def _feature_matrix(dataset: Sequence[ZScoreFeature]) -> Tuple[np.ndarray, np.ndarray, List[MetricKind]]:
    metrics = catalog_order(m for f in dataset for m in f.per_metric_max_z)
    X = np.array([[f.per_metric_max_z[m] for m in metrics] for f in dataset], dtype=np.float64)
    y = np.array([1 if f.label == Label.ABNORMAL else 0 for f in dataset], dtype=np.int64)
    return X, y, metrics


def train_tree(dataset: Sequence[ZScoreFeature], max_depth: int = 7, min_samples_leaf: int = 1) -> DecisionTree:
    """Greedy CART induction with Gini impurity"""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    labels = {f.label for f in dataset}
    if len(labels) < 2:
        raise SingleClassDataset(f"dataset of {len(dataset)} instances has classes {sorted(l.value for l in labels)}")
    ragged = [f.task_id for f in dataset if set(f.per_metric_max_z) != set(dataset[0].per_metric_max_z)]
    if ragged:
        raise ValueError(f"instances with a different metric set: {ragged[:5]}")
    X, y, metrics = _feature_matrix(dataset)

    nodes: List[Optional[TreeNode]] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        index = len(nodes)
        nodes.append(None)
        n_abnormal = int(y[idx].sum())
        counts = (int(idx.size) - n_abnormal, n_abnormal)
        split = None
        pure = counts[0] == 0 or counts[1] == 0
        if not pure and depth < max_depth and idx.size >= 2 * min_samples_leaf:
            split = best_split(X[idx], y[idx], min_samples_leaf)
        if split is None:
            nodes[index] = TreeNode(depth=depth, counts=counts)
            return index
        go_left = X[idx, split.column] <= split.threshold
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        nodes[index] = TreeNode(
            depth=depth,
            counts=counts,
            split_metric=metrics[split.column],
            threshold=split.threshold,
            left=left,
            right=right,
        )
        return index

    grow(np.arange(len(dataset)), 0)
    tree = DecisionTree(nodes=nodes, max_depth=max_depth)
    logger.info(f"Trained tree with {len(nodes)} nodes, depth {tree.depth}, on {len(dataset)} instances")
    return tree


# --- Priority ---

def extract_priority(tree: DecisionTree, catalog: Optional[Sequence[MetricKind]] = None) -> PriorityList:
    """Order metrics by the shallowest node splitting on them"""
    catalog = list(catalog) if catalog is not None else list(CATALOG)
    position = {m: i for i, m in enumerate(catalog)}
    min_depth: Dict[MetricKind, int] = {}
    for node in tree.nodes:
        if node.is_leaf or node.split_metric not in position:
            continue
        min_depth[node.split_metric] = min(node.depth, min_depth.get(node.split_metric, node.depth))
    used = sorted(min_depth, key=lambda m: (min_depth[m], position[m]))
    unused = [m for m in catalog if m not in min_depth]
    entries = [PriorityEntry(metric=m, min_depth=min_depth[m]) for m in used]
    entries += [PriorityEntry(metric=m) for m in unused]
    return PriorityList(ordered=entries)


def write_priority(path: Path, priority: PriorityList, tree: Optional[DecisionTree] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(priority.to_text(tree), encoding="utf-8")


def read_priority(path: Path) -> PriorityList:
    return PriorityList.from_text(Path(path).read_text(encoding="utf-8"))
