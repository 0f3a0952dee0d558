"""Exact gradients, Adam with exponential learning-rate decay, the training
loop, and inference over a trained model."""

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .geometry import CameraWeak, mutual_coherence, normalized_3d_error

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    layers: int = 2
    width_first: int = 32
    width_last: int = 8
    activation: str = "relu"
    translation: bool = False
    batch_size: int = 64
    total_steps: int = 10000
    base_lr: float = 0.003
    decay_factor: float = 0.9
    decay_steps: int = 4000
    seed: int = 0
    eval_interval: int = 500
    normalize: str = "bbox"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not (self.width_first >= self.width_last >= 1):
            raise ValueError("widths must satisfy K1 >= K_N >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.total_steps < 1:
            raise ValueError("need at least one step")
        if self.eval_interval < 1:
            raise ValueError("eval interval must be >= 1")
        if self.normalize not in ("bbox", "center", "none"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")

    @property
    def widths(self):
        return [int(round(k)) for k in
                np.linspace(self.width_first, self.width_last, self.layers)]

    @property
    def block_rows(self):
        return 4 if self.translation else 3


@dataclass
class OptimizerState:
    moment1: dict
    moment2: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({n: np.zeros_like(a) for n, a in params.param_items()},
                   {n: np.zeros_like(a) for n, a in params.param_items()}, 0)


@dataclass
class HistoryRecord:
    step: int
    mean_loss: float
    coherence: float
    error3d: float | None
    skipped: int


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


def init_params(config, point_count, seed=None):
    """Gaussian dictionaries with unit-norm columns, zero thresholds, and
    uniform-average combiners.  Deterministic per seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    widths = config.widths
    D1 = rng.standard_normal((point_count, 3 * widths[0]))
    atom_norms = np.linalg.norm(D1.reshape(point_count, widths[0], 3), axis=(0, 2))
    D1 /= np.repeat(atom_norms, 3)[None, :]
    dicts = [D1]
    for i in range(1, config.layers):
        D = rng.standard_normal((widths[i - 1], widths[i]))
        D /= np.linalg.norm(D, axis=0)
        dicts.append(D)
    return mdl.ModelParams(
        dicts,
        [np.zeros(k) for k in widths],
        [np.zeros(k) for k in widths[:-1]],
        mdl.default_beta(config.block_rows),
        mdl.default_gamma(widths[-1]),
        activation=config.activation,
        block_rows=config.block_rows,
    )


def gradients(params, measurements, masks):
    """Exact gradient of the summed loss over the batch with respect to
    every parameter.  Rank-deficient frames contribute nothing (their count
    is in the returned info).  Raises FloatingPointError if any gradient
    entry is non-finite, naming the parameter group."""
    grads, info = _forward_backward(params, measurements, masks)
    return grads


def _forward_backward(params, measurements, masks):
    measurements = np.asarray(measurements, dtype=float)
    if measurements.ndim == 2:
        measurements = measurements[None]
        masks = np.asarray(masks, dtype=bool)[None]
    if measurements.shape[0] == 0:
        raise ValueError("gradients: empty batch")
    losses, valid, cache = mdl.forward_batch(measurements, masks, params)
    grads = mdl.backward_batch(cache, params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
    info = {"losses": losses, "valid": valid,
            "skipped": int(np.count_nonzero(~valid))}
    return grads, info


def adam_step(params, grads, state, lr):
    """Standard Adam update (beta1 0.9, beta2 0.999, eps 1e-8) with
    threshold non-negativity projection.  Updates in place and returns
    (params, state)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.param_items():
        g = grads[name]
        m = state.moment1[name]
        v = state.moment2[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if name.startswith(("enc_b", "dec_b")):
            np.maximum(p, 0.0, out=p)
    return params, state


def lr_schedule(step, config):
    """base_lr * decay_factor ** (step / decay_steps), continuous exponent."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return config.base_lr * config.decay_factor ** (step / config.decay_steps)


def last_dictionary_atoms(params):
    """The final dictionary as a (dim, K_N) atom matrix, usable for
    coherence.  For single-layer models the first dictionary's atoms are
    flattened to 3P-vectors."""
    if params.n_layers > 1:
        return params.dictionaries[-1]
    P = params.point_count
    K1 = params.widths[0]
    return params.dictionaries[0].reshape(P, K1, 3).transpose(0, 2, 1).reshape(3 * P, K1)


def _denorm_scales(scene):
    if scene.norm_scales is None:
        return np.ones(scene.frame_count)
    return scene.norm_scales


def scene_forward(scene, params):
    """Batched forward over every frame of a (normalized) scene."""
    return mdl.forward_batch(scene.measurements, scene.visibility, params)


def scene_error(scene, params, allow_scale=None):
    """Normalized mean 3D error of the model's reconstructions against the
    scene's ground truth, after de-normalization.  Invalid frames are
    excluded."""
    if scene.gt_shapes is None:
        raise ValueError("scene has no ground truth")
    if allow_scale is None:
        allow_scale = scene.mode == "weak_perspective"
    _, valid, cache = scene_forward(scene, params)
    shapes = cache["S"] * _denorm_scales(scene)[:, None, None]
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("no valid frames to evaluate")
    return normalized_3d_error(shapes[idx], scene.gt_shapes[idx],
                               allow_scale=allow_scale)


def _evaluate(scene, params, allow_scale):
    losses, valid, cache = scene_forward(scene, params)
    n_valid = int(np.count_nonzero(valid))
    mean_loss = float(losses[valid].mean()) if n_valid else float("nan")
    coherence = mutual_coherence(last_dictionary_atoms(params))
    error3d = None
    if scene.gt_shapes is not None and n_valid:
        shapes = cache["S"] * _denorm_scales(scene)[:, None, None]
        idx = np.flatnonzero(valid)
        error3d = normalized_3d_error(shapes[idx], scene.gt_shapes[idx],
                                      allow_scale=allow_scale)
    return mean_loss, coherence, error3d


def _epoch_perm(seed, epoch, n):
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def _batch_indices(seed, n_frames, step, batch_size, perm_cache):
    g0 = step * batch_size
    out = np.empty(batch_size, dtype=int)
    for i in range(batch_size):
        g = g0 + i
        epoch, pos = divmod(g, n_frames)
        if epoch not in perm_cache:
            perm_cache[epoch] = _epoch_perm(seed, epoch, n_frames)
        out[i] = perm_cache[epoch][pos]
    return out


@dataclass
class TrainResult:
    params: mdl.ModelParams
    history: TrainHistory
    opt_state: OptimizerState
    skipped: int

    def __iter__(self):
        # allow `params, history = train(...)`
        return iter((self.params, self.history))


def train(scene, config, init=None, verbose=True):
    """Minibatch Adam over seeded-shuffled frames.  Records full-scene mean
    loss, final-dictionary coherence, and (with ground truth) normalized 3D
    error every eval_interval steps.  Deterministic given (scene, config,
    seed).  Pass init=(params, opt_state, start_step, skipped) to resume.

    Returns a TrainResult; unpacks as (params, history)."""
    if scene.frame_count == 0:
        raise ValueError("empty scene")
    if config.normalize != "none" and not scene.is_normalized:
        raise ValueError("scene must be pre-normalized (see normalize_scene) "
                         "or config.normalize set to 'none'")
    allow_scale = scene.mode == "weak_perspective"
    if init is None:
        params = init_params(config, scene.point_count)
        opt_state = OptimizerState.zeros(params)
        start_step, skipped = 0, 0
    else:
        params, opt_state, start_step, skipped = init
        params = params.copy()

    history = TrainHistory()
    perm_cache = {}

    def record(step):
        mean_loss, coherence, error3d = _evaluate(scene, params, allow_scale)
        history.records.append(HistoryRecord(step, mean_loss, coherence,
                                             error3d, skipped))
        if verbose:
            err = "-" if error3d is None else f"{error3d:.6f}"
            print(f"step {step:6d} lr {lr_schedule(step, config):.6g} "
                  f"loss {mean_loss:.6f} coherence {coherence:.4f} err3d {err}",
                  flush=True)

    if start_step == 0:
        record(0)
    for step in range(start_step, config.total_steps):
        idx = _batch_indices(config.seed, scene.frame_count, step,
                             config.batch_size, perm_cache)
        grads, info = _forward_backward(params, scene.measurements[idx],
                                        scene.visibility[idx])
        skipped += info["skipped"]
        adam_step(params, grads, opt_state, lr_schedule(step, config))
        if (step + 1) % config.eval_interval == 0 or step + 1 == config.total_steps:
            record(step + 1)
    return TrainResult(params, history, opt_state, skipped)


def reconstruct(scene, params):
    """Pure inference: per-frame (shape, camera) for every frame, with
    shapes and translations mapped back through the scene's normalization
    records.  Raises CameraRankError on a rank-deficient frame."""
    losses, valid, cache = scene_forward(scene, params)
    if not np.all(valid):
        bad = int(np.flatnonzero(~valid)[0])
        raise mdl.CameraRankError(f"rank-deficient camera at frame {bad}")
    scales = _denorm_scales(scene)
    centroids = (scene.norm_centroids if scene.norm_centroids is not None
                 else np.zeros((scene.frame_count, 2)))
    out = []
    for f in range(scene.frame_count):
        S = cache["S"][f] * scales[f]
        t = centroids[f].copy()
        if params.block_rows == 4:
            t = t + scales[f] * cache["eps"][f] * cache["Mraw"][f, 3, :]
        out.append((S, CameraWeak(cache["Q"][f], 1.0, t)))
    return out
