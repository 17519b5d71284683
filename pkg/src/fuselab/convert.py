"""Converters from externally preprocessed scans into the FLPC point format.

Only SemanticKITTI-style raw scans are handled here: a ``.bin`` file of
float32 (x, y, z, intensity) records and an optional ``.label`` file of
uint32 per point whose lower 16 bits are the semantic id. nuScenes sweeps
must be exported to this layout by the dataset's own tooling first.
"""
import logging
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

from .errors import CountMismatchError, LabelRangeError, TruncatedPayloadError
from .pointcloud import LabelArray, PointCloud, save_cloud

logger = logging.getLogger(__name__)

KITTI_RECORD = np.dtype('<f4')
KITTI_FIELDS = 4
SEMANTIC_MASK = 0xFFFF


def kitti_scan_to_cloud(scan_path, label_path=None, remap: Optional[Mapping[int, int]] = None,
                        n_cls: Optional[int] = None) -> Tuple[PointCloud, Optional[LabelArray]]:
    """Read a raw scan; ``remap`` maps semantic ids to training ids (unmapped ids are an error)."""
    raw = Path(scan_path).read_bytes()
    record_bytes = KITTI_RECORD.itemsize * KITTI_FIELDS
    if len(raw) % record_bytes:
        raise TruncatedPayloadError(f"{scan_path}: {len(raw)} bytes is not a whole number of {record_bytes}-byte records")
    records = np.frombuffer(raw, dtype=KITTI_RECORD).reshape(-1, KITTI_FIELDS).astype(np.float64)
    cloud = PointCloud(records[:, :3], np.clip(records[:, 3], 0.0, 1.0))

    labels = None
    if label_path is not None:
        raw_labels = np.fromfile(label_path, dtype='<u4')
        if raw_labels.shape[0] != cloud.n:
            raise CountMismatchError(f"{label_path}: {raw_labels.shape[0]} labels for {cloud.n} points")
        semantic = (raw_labels & SEMANTIC_MASK).astype(np.int64)
        if remap is not None:
            table = {int(k): int(v) for k, v in remap.items()}
            unknown = sorted(set(np.unique(semantic).tolist()) - set(table))
            if unknown:
                raise LabelRangeError(f"{label_path}: semantic ids {unknown} have no entry in the remap table")
            lookup = np.vectorize(table.__getitem__, otypes=[np.int64])
            semantic = lookup(semantic) if semantic.size else semantic
        if n_cls is None:
            n_cls = int(semantic.max()) + 1 if semantic.size else 1
        labels = LabelArray(semantic, n_cls)
    logger.info(f"Read {cloud.n} points from {scan_path}")
    return cloud, labels


def convert_kitti_scan(scan_path, out_path, label_path=None, remap: Optional[Mapping[int, int]] = None,
                       n_cls: Optional[int] = None) -> Path:
    cloud, labels = kitti_scan_to_cloud(scan_path, label_path, remap, n_cls)
    return save_cloud(cloud, labels, out_path)
