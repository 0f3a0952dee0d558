"""Planted-model scene synthesis, occlusion injection, and file formats.

On-disk contracts
-----------------
Scene files are a single self-describing text container: header comment
lines (key=value), then record sections, each with a header row:

    [measurements]  frame,point,u,v,visible
    [shapes]        frame,point,x,y,z          (optional, ground truth)
    [cameras]       frame,m11,m21,m31,m12,m22,m32,scale,t1,t2  (optional)
    [normalization] frame,cx,cy,scale          (optional)

Floats carry 17 significant digits so round trips are bit-exact.

Checkpoints are a binary container: a UTF-8 JSON manifest line (version,
config, step, tensor names/shapes), a blank line, then one little-endian
float64 blob per tensor in manifest order.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import (CameraWeak, normalize_bbox, noise_perturb,
                       project, random_camera)
from .model import ModelParams, default_beta, default_gamma

SCENE_MAGIC = "# nrsfm-scene v1"
CHECKPOINT_MAGIC = "nrsfm-checkpoint v1"


class SceneFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Scene:
    """A dataset of 2D measurements with visibility, optional ground truth,
    and optional per-frame normalization records."""

    measurements: np.ndarray                 # (F, P, 2)
    visibility: np.ndarray                   # (F, P) bool
    mode: str = "orthogonal"
    gt_shapes: np.ndarray | None = None      # (F, P, 3)
    gt_rotations: np.ndarray | None = None   # (F, 3, 2)
    gt_scales: np.ndarray | None = None      # (F,)
    gt_translations: np.ndarray | None = None  # (F, 2)
    norm_centroids: np.ndarray | None = None   # (F, 2)
    norm_scales: np.ndarray | None = None      # (F,)

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.measurements.ndim != 3 or self.measurements.shape[2] != 2:
            raise ValueError("measurements must be (F, P, 2)")
        if self.visibility.shape != self.measurements.shape[:2]:
            raise ValueError("visibility shape must match measurements")
        if self.gt_shapes is not None:
            self.gt_shapes = np.asarray(self.gt_shapes, dtype=float)
            if self.gt_shapes.shape != self.measurements.shape[:2] + (3,):
                raise ValueError("ground-truth shapes must cover all frames")

    @property
    def frame_count(self):
        return self.measurements.shape[0]

    @property
    def point_count(self):
        return self.measurements.shape[1]

    @property
    def has_ground_truth(self):
        return self.gt_shapes is not None

    @property
    def is_normalized(self):
        return self.norm_centroids is not None

    def gt_cameras(self):
        if self.gt_rotations is None:
            return None
        F = self.frame_count
        scales = self.gt_scales if self.gt_scales is not None else np.ones(F)
        trans = self.gt_translations if self.gt_translations is not None else np.zeros((F, 2))
        return [CameraWeak(self.gt_rotations[f], float(scales[f]), trans[f])
                for f in range(F)]

    def copy(self):
        def c(a):
            return None if a is None else a.copy()
        return Scene(self.measurements.copy(), self.visibility.copy(), self.mode,
                     c(self.gt_shapes), c(self.gt_rotations), c(self.gt_scales),
                     c(self.gt_translations), c(self.norm_centroids), c(self.norm_scales))


@dataclass
class PlantedSpec:
    """Generative recipe for a synthetic scene drawn from the hierarchical
    sparse model itself."""

    points: int = 31
    frames: int = 200
    layers: int = 2
    width_first: int = 32
    width_last: int = 8
    sparsity: int = 2
    camera_mode: str = "orthogonal"
    noise_ratio: float = 0.0
    max_missing: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.points < 1:
            raise ValueError("need at least one frame and one point")
        if not (1 <= self.sparsity <= self.width_last):
            raise ValueError("sparsity must be in 1..width_last")
        if self.camera_mode not in ("orthogonal", "weak_perspective"):
            raise ValueError(f"unknown camera mode {self.camera_mode!r}")

    @property
    def widths(self):
        return [int(round(k)) for k in
                np.linspace(self.width_first, self.width_last, self.layers)]


def _planted_dictionaries(spec, rng):
    """Unit-norm Gaussian dictionaries; first-layer atoms are centered so
    every generated shape has zero centroid."""
    widths = spec.widths
    P = spec.points
    D1r = rng.standard_normal((P, widths[0], 3))
    D1r -= D1r.mean(axis=0, keepdims=True)
    D1 = D1r.reshape(P, 3 * widths[0])
    norms = np.linalg.norm(D1r, axis=(0, 2))
    D1 /= np.repeat(norms, 3)[None, :]
    dicts = [D1]
    for i in range(1, spec.layers):
        D = rng.standard_normal((widths[i - 1], widths[i]))
        D /= np.linalg.norm(D, axis=0)
        dicts.append(D)
    return dicts


def synth_planted(spec):
    """Sample a planted scene: non-negative sparse codes expanded through
    unit-norm hierarchical dictionaries, projected by random cameras.

    Returns (scene with ground truth, generating ModelParams).
    """
    rng = np.random.default_rng(spec.seed)
    widths = spec.widths
    dicts = _planted_dictionaries(spec, rng)
    params = ModelParams(
        dicts,
        [np.zeros(k) for k in widths],
        [np.zeros(k) for k in widths[:-1]],
        default_beta(3), default_gamma(widths[-1]),
    )
    F, P = spec.frames, spec.points
    W = np.empty((F, P, 2))
    shapes = np.empty((F, P, 3))
    rot = np.empty((F, 3, 2))
    scales = np.ones(F)
    trans = np.zeros((F, 2))
    for f in range(F):
        psi = np.zeros(widths[-1])
        support = rng.choice(widths[-1], size=spec.sparsity, replace=False)
        psi[support] = rng.uniform(0.5, 1.5, size=spec.sparsity)
        phi = psi
        for d in range(spec.layers - 1, 0, -1):
            phi = dicts[d] @ phi
        S = np.einsum("pkc,k->pc", dicts[0].reshape(P, widths[0], 3), phi)
        cam = random_camera(rng, spec.camera_mode)
        shapes[f] = S
        rot[f] = cam.rotation
        scales[f] = cam.scale
        trans[f] = cam.translation
        W[f] = project(S, cam, mode=spec.camera_mode)
        if spec.noise_ratio > 0:
            W[f] = noise_perturb(W[f], spec.noise_ratio, rng)
    scene = Scene(W, np.ones((F, P), bool), spec.camera_mode,
                  gt_shapes=shapes, gt_rotations=rot,
                  gt_scales=scales, gt_translations=trans)
    if spec.max_missing > 0:
        scene = make_missing(scene, spec.max_missing, rng)
    return scene, params


def make_missing(scene, max_missing, seed):
    """Hide 1..max_missing uniformly chosen points per frame (uniform count,
    uniform positions).  Coordinates are retained; only visibility flips."""
    P = scene.point_count
    if not (1 <= max_missing < P):
        raise ValueError(f"max_missing must be in 1..{P - 1}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = scene.copy()
    vis = np.ones((scene.frame_count, P), dtype=bool)
    for f in range(scene.frame_count):
        m = int(rng.integers(1, max_missing + 1))
        hidden = rng.choice(P, size=m, replace=False)
        vis[f, hidden] = False
    out.visibility = vis
    return out


def normalize_scene(scene, mode="bbox"):
    """Per-frame input normalization, recorded for later de-normalization.

    bbox: unit bounding box (centroid of visible points to 0, larger side 1)
    center: visible-centroid shift only
    none: identity (no records)
    """
    if mode == "none":
        return scene.copy()
    out = scene.copy()
    F = scene.frame_count
    centroids = np.zeros((F, 2))
    scales = np.ones(F)
    for f in range(F):
        if mode == "bbox":
            Wn, (c, s) = normalize_bbox(scene.measurements[f], scene.visibility[f])
        elif mode == "center":
            m = scene.visibility[f]
            c = scene.measurements[f][m].mean(axis=0)
            s = 1.0
            Wn = np.where(m[:, None], scene.measurements[f] - c, 0.0)
        else:
            raise ValueError(f"unknown normalization mode {mode!r}")
        out.measurements[f] = Wn
        centroids[f] = c
        scales[f] = s
    out.norm_centroids = centroids
    out.norm_scales = scales
    return out


# ---------------------------------------------------------------------------
# scene IO

def _fmt(x):
    return format(float(x), ".17g")


def save_scene(scene, path):
    lines = [SCENE_MAGIC,
             f"# mode={scene.mode}",
             f"# frames={scene.frame_count} points={scene.point_count}"]
    lines.append("[measurements]")
    lines.append("frame,point,u,v,visible")
    F, P = scene.frame_count, scene.point_count
    W, vis = scene.measurements, scene.visibility
    for f in range(F):
        for p in range(P):
            lines.append(f"{f},{p},{_fmt(W[f, p, 0])},{_fmt(W[f, p, 1])},{int(vis[f, p])}")
    if scene.gt_shapes is not None:
        lines.append("[shapes]")
        lines.append("frame,point,x,y,z")
        S = scene.gt_shapes
        for f in range(F):
            for p in range(P):
                lines.append(f"{f},{p},{_fmt(S[f, p, 0])},{_fmt(S[f, p, 1])},{_fmt(S[f, p, 2])}")
    if scene.gt_rotations is not None:
        lines.append("[cameras]")
        lines.append("frame,m11,m21,m31,m12,m22,m32,scale,t1,t2")
        scales = scene.gt_scales if scene.gt_scales is not None else np.ones(F)
        trans = scene.gt_translations if scene.gt_translations is not None else np.zeros((F, 2))
        for f in range(F):
            M = scene.gt_rotations[f]
            vals = [M[0, 0], M[1, 0], M[2, 0], M[0, 1], M[1, 1], M[2, 1],
                    scales[f], trans[f, 0], trans[f, 1]]
            lines.append(f"{f}," + ",".join(_fmt(v) for v in vals))
    if scene.norm_centroids is not None:
        lines.append("[normalization]")
        lines.append("frame,cx,cy,scale")
        for f in range(F):
            lines.append(f"{f},{_fmt(scene.norm_centroids[f, 0])},"
                         f"{_fmt(scene.norm_centroids[f, 1])},{_fmt(scene.norm_scales[f])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_rows(section, rows, n_fields, lineno):
    try:
        return np.array([[float(v) for v in row.split(",")] for row in rows])
    except ValueError as exc:
        raise SceneFormatError(
            f"[{section}] starting at line {lineno}: bad record ({exc})") from None


def load_scene(path):
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0] != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: not a scene file (missing magic header)")
    header = {}
    sections = {}
    current = None
    start_line = {}
    for i, line in enumerate(raw[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    header[k] = v
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
            start_line[current] = i + 2   # past the header row
            continue
        if current is None:
            raise SceneFormatError(f"{path}:{i}: data outside any section")
        sections[current].append(line)

    try:
        F = int(header["frames"])
        P = int(header["points"])
    except KeyError as exc:
        raise SceneFormatError(f"{path}: missing header field {exc}") from None
    mode = header.get("mode", "orthogonal")

    def section_array(name, n_fields, expected_rows):
        rows = sections[name]
        if not rows:
            raise SceneFormatError(f"{path}: empty section [{name}]")
        body = rows[1:]   # skip header row
        if len(body) != expected_rows:
            raise SceneFormatError(
                f"{path}: section [{name}] has {len(body)} records, expected {expected_rows}")
        arr = _parse_rows(name, body, n_fields, start_line[name])
        if arr.shape[1] != n_fields:
            raise SceneFormatError(
                f"{path}: section [{name}] records have {arr.shape[1]} fields, "
                f"expected {n_fields}")
        return arr

    if "measurements" not in sections:
        raise SceneFormatError(f"{path}: missing [measurements] section")
    m = section_array("measurements", 5, F * P)
    order = np.lexsort((m[:, 1], m[:, 0]))
    m = m[order]
    W = m[:, 2:4].reshape(F, P, 2)
    vis = m[:, 4].reshape(F, P).astype(bool)
    scene = Scene(W, vis, mode)
    if "shapes" in sections:
        s = section_array("shapes", 5, F * P)
        s = s[np.lexsort((s[:, 1], s[:, 0]))]
        scene.gt_shapes = s[:, 2:5].reshape(F, P, 3)
    if "cameras" in sections:
        c = section_array("cameras", 10, F)
        c = c[np.argsort(c[:, 0])]
        rot = np.empty((F, 3, 2))
        rot[:, :, 0] = c[:, 1:4]
        rot[:, :, 1] = c[:, 4:7]
        scene.gt_rotations = rot
        scene.gt_scales = c[:, 7].copy()
        scene.gt_translations = c[:, 8:10].copy()
    if "normalization" in sections:
        n = section_array("normalization", 4, F)
        n = n[np.argsort(n[:, 0])]
        scene.norm_centroids = n[:, 1:3].copy()
        scene.norm_scales = n[:, 3].copy()
    return scene


# ---------------------------------------------------------------------------
# checkpoint IO

def _params_tensors(params):
    return dict(params.param_items())


def save_checkpoint(path, params, config=None, opt_state=None, step=0,
                    skipped=0):
    """Write params (+ optional training config / optimizer state) to a
    binary checkpoint.  Everything is float64 little-endian."""
    tensors = dict(params.param_items())
    if opt_state is not None:
        for name, arr in opt_state.moment1.items():
            tensors[f"adam_m/{name}"] = arr
        for name, arr in opt_state.moment2.items():
            tensors[f"adam_v/{name}"] = arr
    manifest = {
        "version": 1,
        "activation": params.activation,
        "block_rows": params.block_rows,
        "step": int(step),
        "skipped": int(skipped),
        "config": None if config is None else asdict(config),
        "opt_step": None if opt_state is None else int(opt_state.step),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(manifest) + "\n").encode())
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint.  Returns (params, config_dict_or_None,
    opt_state_or_None, step, skipped)."""
    from .training import OptimizerState   # deferred: training imports data

    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format/version "
                f"(got {magic!r}, expected {CHECKPOINT_MAGIC!r})")
        manifest = json.loads(fh.readline().decode())
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    dicts, enc_b, dec_b = [], [], []
    i = 1
    while f"dict{i}" in tensors:
        dicts.append(tensors[f"dict{i}"])
        i += 1
    for i in range(1, len(dicts) + 1):
        enc_b.append(tensors[f"enc_b{i}"])
    for i in range(2, len(dicts) + 1):
        dec_b.append(tensors[f"dec_b{i}"])
    params = ModelParams(dicts, enc_b, dec_b, tensors["beta"], tensors["gamma"],
                         manifest["activation"], manifest["block_rows"])
    opt_state = None
    if manifest.get("opt_step") is not None:
        m1 = {n: tensors[f"adam_m/{n}"] for n, _ in params.param_items()}
        m2 = {n: tensors[f"adam_v/{n}"] for n, _ in params.param_items()}
        opt_state = OptimizerState(m1, m2, manifest["opt_step"])
    return (params, manifest.get("config"), opt_state,
            manifest.get("step", 0), manifest.get("skipped", 0))
