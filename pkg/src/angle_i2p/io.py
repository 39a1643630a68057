"""Line-oriented text format for correspondence sets.

::

    K fx fy cx cy width height
    POSE r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz     (optional)
    u v qx qy qz d ox oy oz [label [gt_depth]]             (one per line)

``label`` is 1/0; ``gt_depth`` is the true depth of the pixel when known.
Reals are written with 17 significant digits so a write/read cycle is exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CorrespondenceSet, GeometryError, Pose


def _fmt(x) -> str:
    return format(float(x), ".17g")


def format_correspondences(corrs: CorrespondenceSet) -> str:
    K = corrs.intrinsics
    lines = ["K " + " ".join([_fmt(K.fx), _fmt(K.fy), _fmt(K.cx), _fmt(K.cy), str(K.width), str(K.height)])]
    if corrs.gt_pose is not None:
        vals = list(corrs.gt_pose.rotation.reshape(-1)) + list(corrs.gt_pose.translation)
        lines.append("POSE " + " ".join(_fmt(v) for v in vals))
    for i in range(len(corrs)):
        row = [*corrs.pixels[i], *corrs.points[i], corrs.est_depth[i], *corrs.est_points[i]]
        text = " ".join(_fmt(v) for v in row)
        if corrs.gt_labels is not None:
            text += " " + ("1" if corrs.gt_labels[i] else "0")
            if corrs.gt_depth is not None:
                text += " " + _fmt(corrs.gt_depth[i])
        lines.append(text)
    return "\n".join(lines) + "\n"


def parse_correspondences(text: str) -> CorrespondenceSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("K "):
        raise GeometryError("correspondence file must start with a 'K' intrinsics line")
    head = lines[0].split()
    if len(head) != 7:
        raise GeometryError("intrinsics line needs fx fy cx cy width height")
    K = CameraIntrinsics(float(head[1]), float(head[2]), float(head[3]), float(head[4]),
                         int(head[5]), int(head[6]))
    body = lines[1:]
    pose = None
    if body and body[0].startswith("POSE"):
        vals = [float(v) for v in body[0].split()[1:]]
        if len(vals) != 12:
            raise GeometryError("POSE line needs 12 values")
        pose = Pose(np.reshape(vals[:9], (3, 3)), vals[9:], check=False)
        body = body[1:]
    rows, labels, depths = [], [], []
    widths = set()
    for lineno, ln in enumerate(body, start=2 + (pose is not None)):
        parts = ln.split()
        if len(parts) not in (9, 10, 11):
            raise GeometryError(f"line {lineno}: expected 9 to 11 fields, got {len(parts)}")
        widths.add(len(parts))
        rows.append([float(v) for v in parts[:9]])
        if len(parts) >= 10:
            if parts[9] not in ("0", "1"):
                raise GeometryError(f"line {lineno}: label must be 0 or 1, got {parts[9]!r}")
            labels.append(parts[9] == "1")
        if len(parts) == 11:
            depths.append(float(parts[10]))
    if len(widths) > 1:
        raise GeometryError("every record must carry the same optional fields")
    data = np.array(rows, dtype=np.float64).reshape(-1, 9)
    return CorrespondenceSet(data[:, 0:2], data[:, 2:5], data[:, 5], data[:, 6:9], K,
                             gt_pose=pose, gt_labels=np.array(labels) if labels else None,
                             gt_depth=np.array(depths) if depths else None)


def save_correspondences(path, corrs: CorrespondenceSet) -> None:
    Path(path).write_text(format_correspondences(corrs))


def load_correspondences(path) -> CorrespondenceSet:
    return parse_correspondences(Path(path).read_text())
