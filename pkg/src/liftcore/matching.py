"""Shared-focal recovery, pairwise similarity alignment and tree registration."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from liftcore.core import DepthMap, Intrinsics, PointMap, Pose

log = logging.getLogger(__name__)

MIN_WEIGHT = 1e-6


class DegenerateGeometry(ValueError):
    pass


# -- focal -------------------------------------------------------------------


def _focal_terms(pm: PointMap, eps: float):
    h, w = pm.height, pm.width
    jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    z = pm.points[..., 2]
    ok = (pm.confidence > 0) & (z > eps)
    u = np.stack([ii[ok] - w / 2.0, jj[ok] - h / 2.0], axis=1)
    v = pm.points[ok][:, :2] / z[ok][:, None]
    return u, v, pm.confidence[ok]


def focal_objective(pm: PointMap, f: float, eps: float = 1e-9) -> float:
    u, v, c = _focal_terms(pm, eps)
    return float(np.sum(c * np.linalg.norm(u - f * v, axis=1)))


def estimate_focal(pm: PointMap, iters: int = 200, tol: float = 1e-13, eps: float = 1e-9) -> Intrinsics:
    """Weiszfeld / IRLS minimizer of the confidence-weighted reprojection norm."""
    u, v, c = _focal_terms(pm, eps)
    vv = np.sum(v * v, axis=1)
    uv = np.sum(u * v, axis=1)
    if len(c) == 0 or np.sum(c * vv) <= 1e-18:
        raise DegenerateGeometry("degenerate geometry: all points lie on the optical axis")
    f = np.sum(c * uv) / np.sum(c * vv)
    # floor on residuals keeps weights bounded when a point is fit exactly
    floor = 1e-12 * max(1.0, float(np.max(np.abs(u))))
    for _ in range(iters):
        r = np.linalg.norm(u - f * v, axis=1)
        wgt = c / np.maximum(r, floor)
        f_new = np.sum(wgt * uv) / np.sum(wgt * vv)
        if abs(f_new - f) <= tol * abs(f):
            f = f_new
            break
        f = f_new
    if not (f > 0 and np.isfinite(f)):
        raise DegenerateGeometry(f"focal estimate is not positive ({f})")
    return Intrinsics(float(f), pm.width, pm.height)


# -- pairwise alignment -----------------------------------------------------


@dataclass(frozen=True)
class PairObservation:
    ref_frame_id: str
    src_frame_id: str
    src_in_src: PointMap  # source pixels in the source camera frame
    src_in_ref: PointMap  # the same pixels expressed in the reference frame

    def __post_init__(self):
        if self.src_in_src.points.shape != self.src_in_ref.points.shape:
            raise ValueError("pair pointmaps must share a resolution")

    @property
    def weights(self) -> np.ndarray:
        return self.src_in_src.confidence * self.src_in_ref.confidence


@dataclass(frozen=True)
class RelativePose:
    """Similarity taking source-frame points to the reference frame:
    ``x_ref = scale * (rotation @ x_src + translation)``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    residual: float = 0.0

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.scale * self.translation
        return m

    def apply(self, pts) -> np.ndarray:
        return self.scale * (np.asarray(pts) @ self.rotation.T + self.translation)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d) -> "RelativePose":
        return cls(np.asarray(d["rotation"], float), np.asarray(d["translation"], float), float(d["scale"]), float(d.get("residual", 0.0)))


def weighted_umeyama(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Closed-form ``(s, R, t)`` minimizing ``sum w |s R x + t - y|^2``."""
    w = np.asarray(w, dtype=np.float64)
    keep = w >= MIN_WEIGHT
    x, y, w = np.asarray(x, float)[keep], np.asarray(y, float)[keep], w[keep]
    if len(w) < 3:
        raise DegenerateGeometry("degenerate geometry: fewer than 3 weighted points")
    wn = w / w.sum()
    mx, my = wn @ x, wn @ y
    dx, dy = x - mx, y - my
    cov = (dy * wn[:, None]).T @ dx
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometry("degenerate geometry: rank-deficient covariance")
    sgn = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2] = -1.0
    rot = (u * sgn) @ vt
    var_x = float(np.sum(wn * np.sum(dx * dx, axis=1)))
    s = float(np.sum(d * sgn) / var_x)
    t = my - s * rot @ mx
    return s, rot, t


def relative_pose(pair: PairObservation) -> RelativePose:
    x = pair.src_in_src.points.reshape(-1, 3)
    y = pair.src_in_ref.points.reshape(-1, 3)
    w = pair.weights.reshape(-1)
    s, rot, t = weighted_umeyama(x, y, w)
    rel = RelativePose(rot, t / s, s)
    keep = w >= MIN_WEIGHT
    err = rel.apply(x[keep]) - y[keep]
    res = float(np.sqrt(np.sum(w[keep] * np.sum(err * err, axis=1)) / np.sum(w[keep])))
    return RelativePose(rot, t / s, s, res)


# -- graph -------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    ref: str
    src: str
    extra: bool = False

    @property
    def key(self) -> str:
        return f"{self.ref}__{self.src}"


@dataclass
class MatchGraph:
    nodes: list
    edges: list  # Edge, tree edges first
    root: str

    @property
    def tree_edges(self) -> list:
        return [e for e in self.edges if not e.extra]

    @property
    def extra_edges(self) -> list:
        return [e for e in self.edges if e.extra]

    def to_dict(self) -> dict:
        return {"root": self.root, "nodes": list(self.nodes), "edges": [{"ref": e.ref, "src": e.src, "extra": e.extra} for e in self.edges]}

    @classmethod
    def from_dict(cls, d) -> "MatchGraph":
        return cls(list(d["nodes"]), [Edge(e["ref"], e["src"], bool(e.get("extra", False))) for e in d["edges"]], d["root"])


def build_match_graph(frames, extra_edges: int = 0) -> MatchGraph:
    """Pair every frame with the one generated just before it.

    ``frames`` are FrameRecords (or PlannedFrames) carrying ``parent_id``;
    ``extra_edges`` adds that many cross-clip pairs between the closest stamps.
    """
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate frame ids")
    roots = [f for f in frames if f.parent_id is None]
    if len(roots) != 1:
        raise ValueError(f"expected exactly one root frame, found {len(roots)}")
    known = set(ids)
    edges = []
    for f in frames:
        if f.parent_id is None:
            continue
        if f.parent_id not in known:
            raise ValueError(f"disconnected plan: {f.frame_id} pairs with unknown frame {f.parent_id}")
        edges.append(Edge(f.parent_id, f.frame_id))
    root = roots[0].frame_id
    # reachability check catches parent cycles
    children = {}
    for e in edges:
        children.setdefault(e.ref, []).append(e.src)
    seen, todo = {root}, [root]
    while todo:
        for c in children.get(todo.pop(), []):
            if c not in seen:
                seen.add(c)
                todo.append(c)
    if len(seen) != len(ids):
        raise ValueError(f"disconnected plan: {len(ids) - len(seen)} frames unreachable from {root}")
    if extra_edges:
        tree = {(e.ref, e.src) for e in edges} | {(e.src, e.ref) for e in edges}
        cands = []
        for a in range(len(frames)):
            for b in range(a + 1, len(frames)):
                fa, fb = frames[a], frames[b]
                if fa.clip_id == fb.clip_id or (fa.frame_id, fb.frame_id) in tree:
                    continue
                d = max(abs(fa.stamp.t_i - fb.stamp.t_i), abs(fa.stamp.t_j - fb.stamp.t_j))
                cands.append((d, a, b))
        cands.sort()
        for _, a, b in cands[:extra_edges]:
            edges.append(Edge(frames[a].frame_id, frames[b].frame_id, extra=True))
    return MatchGraph(ids, edges, root)


# -- registration -----------------------------------------------------------


@dataclass
class RegisteredScene:
    poses: dict  # frame_id -> Pose (camera-to-root)
    scales: dict  # frame_id -> pointmap scale relative to the root
    intrinsics: Intrinsics
    points: np.ndarray  # (M, 3) in root coordinates
    colors: np.ndarray  # (M, 3)
    confidence: np.ndarray  # (M,)
    source: np.ndarray  # (M,) index into frame_ids
    frame_ids: list
    depths: dict = field(default_factory=dict)  # frame_id -> DepthMap(kind="absolute")
    depth_masks: dict = field(default_factory=dict)

    @property
    def extent(self) -> float:
        if len(self.points) == 0:
            return 1.0
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


def _similarity(scale, rot, t) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = scale * rot
    m[:3, 3] = t
    return m


def _split(m: np.ndarray):
    s = float(np.cbrt(np.linalg.det(m[:3, :3])))
    rot = m[:3, :3] / s
    u, _, vt = np.linalg.svd(rot)
    return s, u @ vt, m[:3, 3].copy()


def _refine(graph, absolute, observations, iters, lr0=1.0, max_points=2048):
    """L-BFGS on summed pairwise residuals, root held fixed."""
    import torch

    from liftcore._torch import so3_exp as so3_exp_t

    free = [n for n in graph.nodes if n != graph.root]
    index = {n: k for k, n in enumerate(free)}
    base = {n: _split(absolute[n]) for n in graph.nodes}
    data = []
    rng = np.random.default_rng(0)
    for e in graph.edges:
        obs = observations.get(e.key)
        if obs is None:
            continue
        w = obs.weights.reshape(-1)
        keep = np.flatnonzero(w >= MIN_WEIGHT)
        if len(keep) > max_points:
            keep = np.sort(rng.choice(keep, max_points, replace=False))
        x = torch.tensor(obs.src_in_src.points.reshape(-1, 3)[keep])
        y = torch.tensor(obs.src_in_ref.points.reshape(-1, 3)[keep])
        data.append((e.ref, e.src, x, y, torch.tensor(w[keep] / w[keep].sum())))
    if not data:
        return absolute
    extent = max(float(torch.cat([d[3] for d in data]).std()), 1e-12)

    omega = torch.zeros(len(free), 3, dtype=torch.float64, requires_grad=True)
    dt = torch.zeros(len(free), 3, dtype=torch.float64, requires_grad=True)
    dlog = torch.zeros(len(free), dtype=torch.float64, requires_grad=True)

    def frame_sim(n):
        s, rot, t = base[n]
        s_t = torch.tensor(s, dtype=torch.float64)
        r_t = torch.tensor(rot)
        t_t = torch.tensor(t)
        if n == graph.root:
            return s_t, r_t, t_t
        k = index[n]
        return s_t * torch.exp(dlog[k]), r_t @ so3_exp_t(omega[k]), t_t + dt[k] * extent

    def objective():
        total = 0.0
        for ref, src, x, y, wn in data:
            s_r, r_r, t_r = frame_sim(ref)
            s_s, r_s, t_s = frame_sim(src)
            world = s_s * x @ r_s.T + t_s
            pred = ((world - t_r) @ r_r) / s_r
            total = total + torch.sum(wn * torch.sum((pred - y) ** 2, dim=1)) / extent**2
        return total

    opt = torch.optim.LBFGS([omega, dt, dlog], lr=lr0, max_iter=iters, tolerance_grad=1e-14, tolerance_change=1e-16, history_size=20, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = objective()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        loss = objective()
    out = dict(absolute)
    with torch.no_grad():
        for n in free:
            s, rot, t = frame_sim(n)
            out[n] = _similarity(float(s), rot.numpy(), t.numpy())
    log.info("pose refinement finished at loss %.3e", loss.item())
    return out


def register(
    graph: MatchGraph,
    relative: dict,
    pointmaps: dict,
    intrinsics: Intrinsics,
    images: dict | None = None,
    observations: dict | None = None,
    refine_iters: int = 400,
) -> RegisteredScene:
    """Chain edge similarities from the root; optionally refine over extra edges.

    ``relative`` maps ``Edge.key`` to RelativePose, ``pointmaps`` maps frame ids
    to their own-frame PointMap, ``images`` supplies point colors.
    """
    for e in graph.edges:
        if e.ref not in graph.nodes or e.src not in graph.nodes:
            raise ValueError(f"edge {e.key} references a frame outside the graph")
        if e.key not in relative:
            raise ValueError(f"missing relative pose for edge {e.key}")
    absolute = {graph.root: np.eye(4)}
    children = {}
    for e in graph.tree_edges:
        children.setdefault(e.ref, []).append(e)
    todo = deque([graph.root])
    while todo:
        n = todo.popleft()
        for e in children.get(n, []):
            if e.src in absolute:
                raise ValueError(f"inconsistent edge endpoints: {e.src} reached twice")
            absolute[e.src] = absolute[n] @ relative[e.key].matrix()
            todo.append(e.src)
    if len(absolute) != len(graph.nodes):
        raise ValueError("inconsistent edge endpoints: tree does not reach every frame")
    if graph.extra_edges and refine_iters > 0 and observations:
        absolute = _refine(graph, absolute, observations, refine_iters)

    poses, scales = {}, {}
    for n in graph.nodes:
        s, rot, t = _split(absolute[n])
        poses[n] = Pose(rot, t)
        scales[n] = s
    return assemble_scene(list(graph.nodes), poses, scales, pointmaps, intrinsics, images)


def assemble_scene(frame_ids, poses: dict, scales: dict, pointmaps: dict, intrinsics: Intrinsics, images: dict | None = None) -> RegisteredScene:
    """Merge per-frame pointmaps into root coordinates (``s R p + t``)."""
    pts, cols, conf, src, depths, masks = [], [], [], [], {}, {}
    for k, n in enumerate(frame_ids):
        s, rot, t = scales[n], poses[n].rotation, poses[n].translation
        pm = pointmaps[n]
        valid = pm.valid
        world = s * pm.points[valid] @ rot.T + t
        pts.append(world)
        conf.append(pm.confidence[valid])
        src.append(np.full(len(world), k, dtype=np.int32))
        if images is not None and n in images:
            img = images[n].data
            c = img[valid] if img.shape[2] == 3 else np.repeat(img[valid], 3, axis=1)
        else:
            c = np.full((len(world), 3), 0.5)
        cols.append(c)
        d = np.where(valid, s * pm.points[..., 2], 0.0)
        depths[n] = DepthMap(d, "absolute")
        masks[n] = valid & (d > 0)
    return RegisteredScene(
        poses=dict(poses),
        scales=dict(scales),
        intrinsics=intrinsics,
        points=np.concatenate(pts) if pts else np.zeros((0, 3)),
        colors=np.concatenate(cols) if cols else np.zeros((0, 3)),
        confidence=np.concatenate(conf) if conf else np.zeros(0),
        source=np.concatenate(src) if src else np.zeros(0, np.int32),
        frame_ids=list(frame_ids),
        depths=depths,
        depth_masks=masks,
    )

