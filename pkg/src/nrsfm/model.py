"""Forward model: hierarchical block-ISTA encoder, code/camera bottleneck,
nonlinear decoder, masked reprojection loss, and the exact backward pass.

Conventions
-----------
- The first dictionary is stored in its reshaped P x 3K1 form: atom k
  occupies columns 3k..3k+2 and is a P x 3 point-cloud basis element.
- Later dictionaries are plain K_{i-1} x K_i matrices; the Kronecker
  structure with I_r is applied implicitly by operating blockwise on
  (K, r, 2) codes.
- block_rows r is 3 for pure rotation cameras and 4 in translation mode,
  where each first-layer atom carries an implicit appended column of ones
  (the homogeneous coordinate).
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraWeak

LOSS_SMOOTHING = 1e-12
RANK_EPS = 1e-10
HOMOGENEOUS_EPS = 1e-6
POLAR_CLAMP = 1e-8


class CameraRankError(RuntimeError):
    """Recovered camera is numerically rank-deficient (or the homogeneous
    coordinate vanished in translation mode)."""


@dataclass
class ModelParams:
    """All learnable parameters of the encoder-decoder.

    dictionaries: [D1 as (P, 3*K1)] + [(K_{i-1}, K_i) for i = 2..N]
    enc_thresholds: per-layer block threshold vectors, enc_thresholds[i]
        has length K_{i+1} (the width of layer i, 0-based).
    dec_thresholds: dec_thresholds[i] (length K_{i+1}) is applied in the
        decoder after multiplying by dictionaries[i+1], i = 0..N-2.
    beta: (r, 2) code-combiner weights; gamma: (K_N,) camera-combiner.
    """

    dictionaries: list
    enc_thresholds: list
    dec_thresholds: list
    beta: np.ndarray
    gamma: np.ndarray
    activation: str = "relu"
    block_rows: int = 3

    def __post_init__(self):
        if self.activation not in ("relu", "soft"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.block_rows not in (3, 4):
            raise ValueError("block_rows must be 3 or 4")
        if self.dictionaries[0].shape[1] % 3 != 0:
            raise ValueError("first dictionary must have 3*K1 columns")
        widths = self.widths
        for i, D in enumerate(self.dictionaries[1:], start=1):
            if D.shape[0] != widths[i - 1]:
                raise ValueError(f"dictionary {i + 1} rows do not chain: "
                                 f"{D.shape[0]} != {widths[i - 1]}")
        for i, b in enumerate(self.enc_thresholds):
            if b.shape != (widths[i],):
                raise ValueError(f"encoder threshold {i + 1} has wrong length")
        for i, b in enumerate(self.dec_thresholds):
            if b.shape != (widths[i],):
                raise ValueError(f"decoder threshold {i + 2} has wrong length")
        if self.beta.shape != (self.block_rows, 2):
            raise ValueError("beta must be (block_rows, 2)")
        if self.gamma.shape != (widths[-1],):
            raise ValueError("gamma must have length K_N")

    @property
    def n_layers(self):
        return len(self.dictionaries)

    @property
    def point_count(self):
        return self.dictionaries[0].shape[0]

    @property
    def widths(self):
        return [self.dictionaries[0].shape[1] // 3] + [D.shape[1] for D in self.dictionaries[1:]]

    def param_items(self):
        """Stable (name, array) ordering used by the optimizer, finite
        differences, and checkpoints."""
        items = [(f"dict{i + 1}", D) for i, D in enumerate(self.dictionaries)]
        items += [(f"enc_b{i + 1}", b) for i, b in enumerate(self.enc_thresholds)]
        items += [(f"dec_b{i + 2}", b) for i, b in enumerate(self.dec_thresholds)]
        items += [("beta", self.beta), ("gamma", self.gamma)]
        return items

    def copy(self):
        return ModelParams(
            [D.copy() for D in self.dictionaries],
            [b.copy() for b in self.enc_thresholds],
            [b.copy() for b in self.dec_thresholds],
            self.beta.copy(), self.gamma.copy(),
            self.activation, self.block_rows,
        )


def default_beta(block_rows):
    """Uniform-average combiner, matching the oracle 1/(r*2) weighting."""
    return np.full((block_rows, 2), 1.0 / (block_rows * 2))


def default_gamma(k_last):
    return np.full(k_last, 1.0 / k_last)


@dataclass
class ForwardOutput:
    hidden_blocks: np.ndarray      # Psi_N, (K_N, r, 2)
    code: np.ndarray               # psi_N, (K_N,)
    camera_raw: np.ndarray         # (r, 2)
    camera: CameraWeak
    shape: np.ndarray              # (P, 3)
    reprojection: np.ndarray       # (P, 2)
    loss_value: float


def _act_fwd(v, b, activation):
    """Threshold activation; b broadcasts against v."""
    if activation == "relu":
        return np.maximum(v - b, 0.0)
    return np.sign(v) * np.maximum(np.abs(v) - b, 0.0)


def _act_masks(v, b, activation):
    """Returns (dv multiplier, db multiplier per active entry)."""
    if activation == "relu":
        active = (v - b) > 0
        return active, np.where(active, -1.0, 0.0)
    active = np.abs(v) > b
    return active, np.where(active, -np.sign(v), 0.0)


def _first_dict_3d(params):
    P = params.point_count
    K1 = params.widths[0]
    return params.dictionaries[0].reshape(P, K1, 3)


def forward_batch(W, vis, params):
    """Run the full forward pass over a batch of frames.

    W: (B, P, 2), vis: (B, P) boolean.  Returns (losses (B,), valid (B,)
    boolean, cache) where invalid frames had a rank-deficient camera (their
    loss is reported but they carry no gradient and should be skipped).
    """
    W = np.asarray(W, dtype=float)
    vis = np.asarray(vis, dtype=bool)
    if W.ndim != 3 or W.shape[2] != 2:
        raise ValueError(f"forward_batch: W must be (B, P, 2), got {W.shape}")
    if vis.shape != W.shape[:2]:
        raise ValueError("forward_batch: visibility shape must match W")
    P = params.point_count
    if W.shape[1] != P:
        raise ValueError(f"forward_batch: model has {P} points, W has {W.shape[1]}")
    r = params.block_rows
    act = params.activation
    B = W.shape[0]

    X = np.where(vis[:, :, None], W, 0.0)
    D1r = _first_dict_3d(params)

    # encoder
    T0 = np.empty((B, params.widths[0], r, 2))
    T0[:, :, :3, :] = np.einsum("pkc,bpq->bkcq", D1r, X)
    if r == 4:
        T0[:, :, 3, :] = X.sum(axis=1)[:, None, :]
    pre_acts = [T0]
    psi = _act_fwd(T0, params.enc_thresholds[0][None, :, None, None], act)
    blocks = [psi]
    for d in range(1, params.n_layers):
        V = np.einsum("jk,bjrc->bkrc", params.dictionaries[d], psi)
        pre_acts.append(V)
        psi = _act_fwd(V, params.enc_thresholds[d][None, :, None, None], act)
        blocks.append(psi)

    # bottleneck
    psiN = np.einsum("rc,bkrc->bk", params.beta, blocks[-1])
    Mraw = np.einsum("k,bkrc->brc", params.gamma, blocks[-1])
    Mtop = Mraw[:, :3, :]
    U, s, Vt = np.linalg.svd(Mtop, full_matrices=False)
    Q = U @ Vt
    valid = s[:, 1] > RANK_EPS

    # decoder
    phi = psiN
    dec_pre = []
    dec_inputs = []
    for d in range(params.n_layers - 1, 0, -1):
        dec_inputs.append(phi)
        u = np.einsum("jk,bk->bj", params.dictionaries[d], phi)
        dec_pre.append(u)
        phi = _act_fwd(u, params.dec_thresholds[d - 1][None, :], act)
    S = np.einsum("pkc,bk->bpc", D1r, phi)

    eps = None
    t_hat = np.zeros((B, 2))
    if r == 4:
        eps = phi.sum(axis=1)
        valid = valid & (np.abs(eps) > HOMOGENEOUS_EPS)
        t_hat = eps[:, None] * Mraw[:, 3, :]

    What = np.einsum("bpc,bcq->bpq", S, Q) + t_hat[:, None, :]
    resid = np.where(vis[:, :, None], W - What, 0.0)
    losses = np.sqrt(np.sum(resid * resid, axis=(1, 2)) + LOSS_SMOOTHING)

    cache = {
        "W": W, "vis": vis, "X": X, "pre_acts": pre_acts, "blocks": blocks,
        "psiN": psiN, "Mraw": Mraw, "U": U, "s": s, "Vt": Vt, "Q": Q,
        "dec_pre": dec_pre, "dec_inputs": dec_inputs, "phi1": phi, "S": S,
        "eps": eps, "What": What, "resid": resid, "losses": losses,
        "valid": valid,
    }
    return losses, valid, cache


def polar_jvp(U, s, Vt, dA):
    """Differential of the polar factor Q = U V^T of a batch of 3x2
    matrices, given their thin SVD and a direction dA (broadcastable to
    (B, 3, 2)).  Singular-value-sum denominators are clamped below."""
    V = np.swapaxes(Vt, -1, -2)
    dA = np.broadcast_to(dA, U.shape[:-2] + (3, 2))
    Pm = np.einsum("bij,bik,bkl->bjl", U, dA, V)
    skew = Pm - np.swapaxes(Pm, -1, -2)
    denom = np.maximum(s[:, :, None] + s[:, None, :], POLAR_CLAMP)
    core = skew / denom
    term1 = np.einsum("bij,bjk,blk->bil", U, core, V)
    proj = dA - np.einsum("bij,bkj,bkl->bil", U, U, dA)
    sinv = 1.0 / np.maximum(s, POLAR_CLAMP)
    term2 = np.einsum("bij,blj->bil", proj @ (V * sinv[:, None, :]), V)
    return term1 + term2


def polar_vjp(U, s, Vt, gQ):
    """Adjoint of polar_jvp: gradient with respect to the 3x2 input, given
    the gradient with respect to Q.  Built from the 6x6 Jacobian assembled
    column by column (the matrix is tiny)."""
    B = U.shape[0]
    cols = []
    for idx in range(6):
        E = np.zeros((3, 2))
        E[idx // 2, idx % 2] = 1.0
        cols.append(polar_jvp(U, s, Vt, E[None]).reshape(B, 6))
    J = np.stack(cols, axis=2)            # J[b, :, j] = vec(dQ/dA_j)
    return np.einsum("bij,bi->bj", J, gQ.reshape(B, 6)).reshape(B, 3, 2)


def backward_batch(cache, params):
    """Exact gradient of the summed loss over valid frames with respect to
    every parameter.  Returns a dict keyed like param_items()."""
    act = params.activation
    r = params.block_rows
    D1r = _first_dict_3d(params)
    N = params.n_layers

    vis = cache["vis"]
    weight = cache["valid"].astype(float)
    gWhat = (-cache["resid"] / cache["losses"][:, None, None]) * weight[:, None, None]

    S, Q, Mraw = cache["S"], cache["Q"], cache["Mraw"]
    gS = np.einsum("bpq,bcq->bpc", gWhat, Q)
    gQ = np.einsum("bpc,bpq->bcq", S, gWhat)
    gMraw = np.zeros_like(Mraw)
    g_eps = None
    if r == 4:
        gt = gWhat.sum(axis=1)
        g_eps = np.sum(gt * Mraw[:, 3, :], axis=1)
        gMraw[:, 3, :] = cache["eps"][:, None] * gt
    gMraw[:, :3, :] = polar_vjp(cache["U"], cache["s"], cache["Vt"], gQ)

    grads = {name: np.zeros_like(arr) for name, arr in params.param_items()}

    # decoder final (linear) layer
    phi1 = cache["phi1"]
    gphi = np.einsum("pkc,bpc->bk", D1r, gS)
    grads["dict1"] += np.einsum("bpc,bk->pkc", gS, phi1).reshape(params.dictionaries[0].shape)
    if r == 4:
        gphi = gphi + g_eps[:, None]

    # decoder thresholded layers, in reverse of decode order
    for step in range(N - 2, -1, -1):
        d = step + 1                       # dictionary index used at this step
        u = cache["dec_pre"][N - 2 - step]
        phi_in = cache["dec_inputs"][N - 2 - step]
        b = params.dec_thresholds[d - 1][None, :]
        dv, db = _act_masks(u, b, act)
        gu = gphi * dv
        grads[f"dec_b{d + 1}"] += (gphi * db).sum(axis=0)
        grads[f"dict{d + 1}"] += np.einsum("bj,bk->jk", gu, phi_in)
        gphi = np.einsum("jk,bj->bk", params.dictionaries[d], gu)
    gpsiN = gphi

    # bottleneck
    blocksN = cache["blocks"][-1]
    grads["beta"] += np.einsum("bk,bkrc->rc", gpsiN, blocksN)
    grads["gamma"] += np.einsum("brc,bkrc->k", gMraw, blocksN)
    gPsi = (params.beta[None, None] * gpsiN[:, :, None, None]
            + params.gamma[None, :, None, None] * gMraw[:, None, :, :])

    # encoder layers 2..N
    for d in range(N - 1, 0, -1):
        V = cache["pre_acts"][d]
        b = params.enc_thresholds[d][None, :, None, None]
        dv, db = _act_masks(V, b, act)
        gV = gPsi * dv
        grads[f"enc_b{d + 1}"] += (gPsi * db).sum(axis=(0, 2, 3))
        grads[f"dict{d + 1}"] += np.einsum("bjrc,bkrc->jk", cache["blocks"][d - 1], gV)
        gPsi = np.einsum("jk,bkrc->bjrc", params.dictionaries[d], gV)

    # encoder first layer
    T0 = cache["pre_acts"][0]
    b = params.enc_thresholds[0][None, :, None, None]
    dv, db = _act_masks(T0, b, act)
    gT0 = gPsi * dv
    grads["enc_b1"] += (gPsi * db).sum(axis=(0, 2, 3))
    gD1r = np.einsum("bkcq,bpq->pkc", gT0[:, :, :3, :], cache["X"])
    grads["dict1"] += gD1r.reshape(params.dictionaries[0].shape)

    return grads


def encode(W, mask, params):
    """Hierarchical block-ISTA encoder for one frame; returns the list of
    block codes Psi_1..Psi_N, each (K_i, r, 2)."""
    W = np.asarray(W, dtype=float)
    if mask is None:
        mask = np.ones(W.shape[0], dtype=bool)
    _, _, cache = forward_batch(W[None], np.asarray(mask, dtype=bool)[None], params)
    return [blk[0] for blk in cache["blocks"]]


def recover_code_camera(PsiN, params):
    """Linear bottleneck: psi_N^k = <beta, Psi_N^k>, camera_raw = sum_k
    gamma_k Psi_N^k."""
    PsiN = np.asarray(PsiN, dtype=float)
    r = params.block_rows
    if PsiN.shape != (params.widths[-1], r, 2):
        raise ValueError(f"recover_code_camera: expected {(params.widths[-1], r, 2)}, "
                         f"got {PsiN.shape}")
    psiN = np.einsum("rc,krc->k", params.beta, PsiN)
    Mraw = np.einsum("k,krc->rc", params.gamma, PsiN)
    return psiN, Mraw


def decode(psiN, params):
    """Nonlinear decoder from the hidden code to a P x 3 shape.  The final
    layer is purely linear (no threshold)."""
    psiN = np.asarray(psiN, dtype=float)
    if psiN.shape != (params.widths[-1],):
        raise ValueError("decode: code length must equal K_N")
    phi = psiN
    for d in range(params.n_layers - 1, 0, -1):
        u = params.dictionaries[d] @ phi
        phi = _act_fwd(u, params.dec_thresholds[d - 1], params.activation)
    S = np.einsum("pkc,k->pc", _first_dict_3d(params), phi)
    return S


def forward(W, mask, params, mode=None):
    """Full forward pass for one frame.  mode defaults to 'orthogonal' for
    3-row models and 'weak_translation' for 4-row models."""
    if mode is None:
        mode = "weak_translation" if params.block_rows == 4 else "orthogonal"
    if (mode == "weak_translation") != (params.block_rows == 4):
        raise ValueError(f"forward: mode {mode!r} inconsistent with "
                         f"block_rows={params.block_rows}")
    W = np.asarray(W, dtype=float)
    if mask is None:
        mask = np.ones(W.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    losses, valid, cache = forward_batch(W[None], mask[None], params)
    if not valid[0]:
        raise CameraRankError(
            "recovered camera is rank-deficient"
            + ("" if params.block_rows == 3 else " or homogeneous coordinate vanished"))
    Mortho = cache["Q"][0]
    t_hat = np.zeros(2)
    if params.block_rows == 4:
        t_hat = cache["eps"][0] * cache["Mraw"][0, 3, :]
    cam = CameraWeak(Mortho, scale=1.0, translation=t_hat)
    return ForwardOutput(
        hidden_blocks=cache["blocks"][-1][0],
        code=cache["psiN"][0],
        camera_raw=cache["Mraw"][0],
        camera=cam,
        shape=cache["S"][0],
        reprojection=cache["What"][0],
        loss_value=float(losses[0]),
    )


def loss(W, mask, params, mode=None):
    """Masked reprojection loss: per frame the smoothed unsquared Frobenius
    norm of the visible residual, summed over the batch."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        return forward(W, mask, params, mode=mode).loss_value
    if mask is None:
        mask = np.ones(W.shape[:2], dtype=bool)
    losses, valid, _ = forward_batch(W, mask, params)
    if not np.all(valid):
        raise CameraRankError("rank-deficient camera in batch")
    return float(losses.sum())


@dataclass
class SplitCheckRecord:
    reconstruction_error: float
    camera_error: float
    ok: bool


def nonneg_split_check(D, Psi, gamma=None, tol=1e-12):
    """Verify that splitting a signed block code into non-negative halves
    preserves both the dictionary product and the gamma camera combination:
    [D, -D] [Psi+; -Psi-] == D Psi."""
    D = np.asarray(D, dtype=float)
    Psi = np.asarray(Psi, dtype=float)
    pos = np.maximum(Psi, 0.0)
    neg = np.minimum(Psi, 0.0)
    direct = np.einsum("jk,krc->jrc", D, Psi)
    split = (np.einsum("jk,krc->jrc", D, pos)
             + np.einsum("jk,krc->jrc", -D, -neg))
    rec_err = float(np.max(np.abs(direct - split))) if direct.size else 0.0
    cam_err = 0.0
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=float)
        M = np.einsum("k,krc->rc", gamma, Psi)
        M_split = (np.einsum("k,krc->rc", gamma, pos)
                   + np.einsum("k,krc->rc", -gamma, -neg))
        cam_err = float(np.max(np.abs(M - M_split)))
    return SplitCheckRecord(rec_err, cam_err, rec_err <= tol and cam_err <= tol)
