"""Differentiable motion-fusion estimator and a dead-reckoning baseline.

The model maps per-pair image features, IMU acceleration, and inter-frame
Euler angles through a small leaky-integrator recurrence to the six rigid
motion parameters. Acceleration features are added to the previous pair
embedding (building a velocity-like feature), Euler features are concatenated
into the recurrent input. Parameters live in float64 torch tensors so the
online refinement can differentiate through everything.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffgeo
from .imu import preprocess_acceleration, relative_euler
from .simulator import ScanBundle

log = logging.getLogger(__name__)

FEATURE_GRID = 4
FEATURE_DIM = FEATURE_GRID * FEATURE_GRID + 1

MODEL_FORMAT = "fusion-model-v1"

PARAM_SHAPES = {
    "w_embed": (None, FEATURE_DIM),
    "b_embed": (None,),
    "w_acc": (None, 3),
    "w_euler": (None, 3),
    "w_rec": (None, None),  # (d, 3d)
    "b_rec": (None,),
    "alpha": (),
    "w_out": (6, None),
    "b_out": (6,),
}


@dataclass
class PairFeatures:
    """Patch-difference grid plus global correlation for one frame pair."""

    grid: np.ndarray  # (FEATURE_GRID, FEATURE_GRID), in [0, 1]
    ncc: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.grid.ravel(), [self.ncc]])


def _block_mean(img: np.ndarray, grid: int) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % grid
    pw = (-w) % grid
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    h2, w2 = img.shape
    return img.reshape(grid, h2 // grid, grid, w2 // grid).mean(axis=(1, 3))


def frame_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Global normalized cross-correlation of two frames (1 for identical)."""
    a = a.astype(float).ravel()
    b = b.astype(float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    sa = np.sqrt((a * a).mean())
    sb = np.sqrt((b * b).mean())
    if sa == 0.0 or sb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip((a * b).mean() / (sa * sb), -1.0, 1.0))


def extract_pair_features(frame_a: np.ndarray, frame_b: np.ndarray, grid: int = FEATURE_GRID) -> PairFeatures:
    """Coarse content-change descriptor for one adjacent frame pair."""
    if frame_a.shape != frame_b.shape:
        raise ValueError("frames must share a size")
    diff = np.abs(frame_a.astype(float) - frame_b.astype(float))
    return PairFeatures(grid=_block_mean(diff, grid) / 255.0, ncc=frame_correlation(frame_a, frame_b))


def pair_feature_matrix(frames: np.ndarray, pairs) -> np.ndarray:
    """Feature vectors (len(pairs), FEATURE_DIM) for arbitrary frame pairs."""
    out = np.empty((len(pairs), FEATURE_DIM))
    for row, (i, j) in enumerate(pairs):
        out[row] = extract_pair_features(frames[i], frames[j]).vector()
    return out


class FusionModel:
    """Parameter container for the fusion estimator."""

    def __init__(self, params: dict[str, torch.Tensor], embed_dim: int, seed: int = 0):
        self.params = params
        self.embed_dim = embed_dim
        self.seed = seed

    @classmethod
    def create(cls, embed_dim: int = 16, seed: int = 0) -> "FusionModel":
        """Seeded uniform init in [-0.1, 0.1]; leak starts at 0.5."""
        rng = np.random.default_rng(seed)
        d = embed_dim

        def u(*shape):
            return torch.tensor(rng.uniform(-0.1, 0.1, shape), dtype=torch.float64)

        params = {
            "w_embed": u(d, FEATURE_DIM),
            "b_embed": u(d),
            "w_acc": u(d, 3),
            "w_euler": u(d, 3),
            "w_rec": u(d, 3 * d),
            "b_rec": u(d),
            "alpha": torch.tensor(0.5, dtype=torch.float64),
            "w_out": u(6, d),
            "b_out": u(6),
        }
        return cls(params, embed_dim=d, seed=seed)

    def copy(self) -> "FusionModel":
        return FusionModel(
            {k: v.detach().clone() for k, v in self.params.items()},
            embed_dim=self.embed_dim,
            seed=self.seed,
        )

    def requires_grad_(self, flag: bool = True) -> "FusionModel":
        for v in self.params.values():
            v.requires_grad_(flag)
        return self

    def validate(self):
        for name, v in self.params.items():
            if not torch.isfinite(v).all():
                raise ValueError(f"non-finite parameter {name}")
        a = float(self.params["alpha"])
        if not 0.0 < a < 1.0:
            raise ValueError("leak alpha must lie in (0, 1)")

    def save(self, path):
        payload = {
            "format": MODEL_FORMAT,
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "params": {k: v.detach().numpy().tolist() for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FusionModel":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model file format {payload.get('format')!r}")
        params = {
            k: torch.tensor(np.asarray(v), dtype=torch.float64)
            for k, v in payload["params"].items()
        }
        return cls(params, embed_dim=int(payload["embed_dim"]), seed=int(payload.get("seed", 0)))


@dataclass
class EstimateResult:
    """Estimated inter-frame poses, one row per adjacent pair."""

    poses: np.ndarray  # (N-1, 6)


def velocity_features(embeddings: np.ndarray, acc_features: np.ndarray) -> np.ndarray:
    """Combine pair embeddings with acceleration embeddings.

    Row 0 keeps the first embedding; row i (i >= 1) is the previous embedding
    plus the acceleration feature of the shared frame, so the output is linear
    in the accelerations.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    acc_features = np.asarray(acc_features, dtype=float)
    if len(acc_features) != max(len(embeddings) - 1, 0):
        raise ValueError("expected one acceleration feature per pair after the first")
    out = embeddings.copy()
    if len(embeddings) > 1:
        out[1:] = embeddings[:-1] + acc_features
    return out


def sequence_inputs(bundle: ScanBundle):
    """Numpy model inputs for one scan: pair features, relative Euler, accel."""
    n = bundle.n_frames
    feats = pair_feature_matrix(bundle.frames, list(zip(range(n - 1), range(1, n))))
    phis = relative_euler(bundle.imu)
    accs = preprocess_acceleration(bundle.imu)
    return feats, phis, accs


def forward_core(params: dict[str, torch.Tensor], feats: torch.Tensor, phis: torch.Tensor, accs: torch.Tensor) -> torch.Tensor:
    """Recurrence over one sequence: (m, 17/3 inputs) -> (m, 6) poses.

    ``accs`` holds the preprocessed acceleration of every frame of the
    sequence (m + 1 rows); row j feeds the velocity feature of pair j.
    """
    e = feats @ params["w_embed"].T + params["b_embed"]
    m = e.shape[0]
    if m > 1:
        va = accs[1:m] @ params["w_acc"].T
        v = torch.cat([e[:1], e[:-1] + va], dim=0)
    else:
        v = e
    pf = phis @ params["w_euler"].T
    x = torch.cat([e, v, pf], dim=1)
    pre = torch.tanh(x @ params["w_rec"].T + params["b_rec"])
    alpha = params["alpha"]
    h = torch.zeros(e.shape[1], dtype=torch.float64)
    hs = []
    for t in range(m):
        h = torch.lerp(h, pre[t], alpha)  # (1 - alpha) * h + alpha * pre[t]
        hs.append(h)
    H = torch.stack(hs, dim=0)
    return H @ params["w_out"].T + params["b_out"]


def forward_batch(
    params: dict[str, torch.Tensor],
    feats: torch.Tensor,  # (B, P, FEATURE_DIM) zero-padded
    phis: torch.Tensor,  # (B, P, 3)
    accs: torch.Tensor,  # (B, P, 3) preprocessed accel at the pair's first frame
    mask: torch.Tensor,  # (B, P) bool, True where the pair exists
) -> torch.Tensor:
    """Padded batch of sequences, run in lockstep; padded slots carry junk."""
    e = feats @ params["w_embed"].T + params["b_embed"]
    va = accs @ params["w_acc"].T
    v = torch.cat([e[:, :1], e[:, :-1] + va[:, 1:]], dim=1)
    pf = phis @ params["w_euler"].T
    x = torch.cat([e, v, pf], dim=-1)
    pre = torch.tanh(x @ params["w_rec"].T + params["b_rec"])
    alpha = params["alpha"]
    B, P, d = e.shape
    h = torch.zeros((B, d), dtype=torch.float64)
    hs = []
    for t in range(P):
        h = torch.where(mask[:, t : t + 1], torch.lerp(h, pre[:, t], alpha), h)
        hs.append(h)
    H = torch.stack(hs, dim=1)
    return H @ params["w_out"].T + params["b_out"]


def forward(model: FusionModel, bundle: ScanBundle) -> EstimateResult:
    """Estimate all inter-frame poses of a scan (N >= 3 frames)."""
    if bundle.n_frames < 3:
        raise ValueError("need at least 3 frames")
    feats, phis, accs = sequence_inputs(bundle)
    with torch.no_grad():
        theta = forward_core(
            model.params,
            diffgeo.to_tensor(feats),
            diffgeo.to_tensor(phis),
            diffgeo.to_tensor(accs),
        )
    return EstimateResult(poses=theta.numpy())


def training_loss_t(est: torch.Tensor, gt: torch.Tensor, pearson: str = "flat") -> torch.Tensor:
    """Mean absolute error plus a trend-agreement (1 - correlation) term."""
    mae = (est - gt).abs().mean()
    if pearson == "flat":
        r, degenerate = diffgeo.pearson_t(est, gt)
        if degenerate:
            log.warning("zero-variance sequence in correlation loss; term fixed at 1")
        term = 1.0 - r
    elif pearson == "per-dim":
        terms = []
        for dim in range(est.shape[1]):
            r, degenerate = diffgeo.pearson_t(est[:, dim], gt[:, dim])
            if degenerate:
                log.warning("zero-variance dimension %d in correlation loss", dim)
            terms.append(1.0 - r)
        term = torch.stack([torch.as_tensor(t, dtype=torch.float64) for t in terms]).mean()
    else:
        raise ValueError("pearson must be 'flat' or 'per-dim'")
    return mae + term


def training_loss(estimated, ground_truth, pearson: str = "flat") -> float:
    est = diffgeo.to_tensor(np.asarray(estimated, dtype=float).reshape(-1, 6))
    gt = diffgeo.to_tensor(np.asarray(ground_truth, dtype=float).reshape(-1, 6))
    if est.shape != gt.shape:
        raise ValueError("estimate and ground truth must share a shape")
    return float(training_loss_t(est, gt, pearson=pearson))


def gradients(model: FusionModel, bundle: ScanBundle, loss_fn) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss_fn(model, bundle)`` per parameter.

    ``loss_fn`` must build a scalar torch value from the model parameters; it
    may run the estimator any number of times (on subsequences, reordered
    scans, ...). Non-finite gradients raise with the parameter named.
    """
    work = model.copy().requires_grad_(True)
    loss = loss_fn(work, bundle)
    if not torch.isfinite(loss):
        raise RuntimeError("loss is non-finite")
    if not loss.requires_grad:
        # constant loss (e.g. a skipped term): gradient is identically zero
        return {name: np.zeros(p.shape) for name, p in work.params.items()}
    names = list(work.params)
    grads = torch.autograd.grad(loss, [work.params[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(work.params[name])
        if not torch.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient for parameter {name}")
        out[name] = g.detach().numpy().copy()
    return out


def _supervised_loss(model: FusionModel, bundle: ScanBundle, targets: torch.Tensor, pearson: str) -> torch.Tensor:
    feats, phis, accs = sequence_inputs(bundle)
    est = forward_core(
        model.params,
        diffgeo.to_tensor(feats),
        diffgeo.to_tensor(phis),
        diffgeo.to_tensor(accs),
    )
    return training_loss_t(est, targets, pearson=pearson)


def fit_to_poses(
    model: FusionModel,
    bundle: ScanBundle,
    target_poses: np.ndarray,
    epochs: int = 100,
    lr: float = 1e-3,
    pearson: str = "flat",
) -> FusionModel:
    """Fit the model to arbitrary target poses on one scan (Adam, full batch)."""
    work = model.copy().requires_grad_(True)
    targets = diffgeo.to_tensor(np.asarray(target_poses, dtype=float))
    opt = torch.optim.Adam(list(work.params.values()), lr=lr)
    inputs = sequence_inputs(bundle)
    tensors = tuple(diffgeo.to_tensor(x) for x in inputs)
    for epoch in range(epochs):
        opt.zero_grad()
        est = forward_core(work.params, *tensors)
        loss = training_loss_t(est, targets, pearson=pearson)
        if float(loss.detach()) > 1e6 or not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss {float(loss.detach()):g}")
        loss.backward()
        opt.step()
        with torch.no_grad():
            work.params["alpha"].clamp_(1e-3, 1 - 1e-3)
    return work.requires_grad_(False)


def train(
    model: FusionModel,
    bundles,
    epochs: int = 200,
    lr: float = 1e-3,
    pearson: str = "flat",
    shuffle: bool = False,
    seed: int = 0,
) -> FusionModel:
    """Supervised training on ground-truthed bundles (Adam, deterministic).

    With lr = 0 the returned model equals the input. Divergence (loss above
    1e6 or non-finite) aborts with a report.
    """
    bundles = list(bundles)
    if not bundles or any(b.poses_gt is None for b in bundles):
        raise ValueError("training needs at least one bundle with ground truth")
    work = model.copy().requires_grad_(True)
    opt = torch.optim.Adam(list(work.params.values()), lr=lr)
    rng = np.random.default_rng(seed)
    prepared = [
        (tuple(diffgeo.to_tensor(x) for x in sequence_inputs(b)), diffgeo.to_tensor(b.poses_gt))
        for b in bundles
    ]
    for epoch in range(epochs):
        order = rng.permutation(len(prepared)) if shuffle else np.arange(len(prepared))
        opt.zero_grad()
        total = torch.zeros((), dtype=torch.float64)
        for idx in order:
            tensors, targets = prepared[idx]
            est = forward_core(work.params, *tensors)
            total = total + training_loss_t(est, targets, pearson=pearson)
        total = total / len(prepared)
        if float(total.detach()) > 1e6 or not torch.isfinite(total):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss {float(total.detach()):g}")
        total.backward()
        opt.step()
        with torch.no_grad():
            work.params["alpha"].clamp_(1e-3, 1 - 1e-3)
    return work.requires_grad_(False)


def estimate_shift(a: np.ndarray, b: np.ndarray, max_shift: int | None = None):
    """Integer (dy, dx) such that b[y, x] ~ a[y + dy, x + dx], via FFT NCC peak."""
    a0 = a.astype(float) - a.astype(float).mean()
    b0 = b.astype(float) - b.astype(float).mean()
    corr = np.fft.irfft2(np.fft.rfft2(a0) * np.conj(np.fft.rfft2(b0)), s=a.shape)
    h, w = corr.shape
    if max_shift is None:
        max_shift = min(h, w) // 4
    shifted = np.fft.fftshift(corr)
    cy, cx = h // 2, w // 2
    window = shifted[cy - max_shift : cy + max_shift + 1, cx - max_shift : cx + max_shift + 1]
    peak = np.unravel_index(np.argmax(window), window.shape)
    return int(peak[0] - max_shift), int(peak[1] - max_shift)


def dead_reckoning_estimate(
    bundle: ScanBundle, nominal_step: float | None = None, signed_elevation: bool = True
) -> EstimateResult:
    """IMU-plus-registration baseline.

    Rotations come straight from the inter-frame IMU Euler angles; in-plane
    translation from the correlation-peak shift between adjacent frames; the
    elevation step has the configured nominal magnitude. With
    ``signed_elevation`` the step's sign follows the velocity integrated from
    the measured acceleration (assuming the sweep starts forward at nominal
    speed), so reversing scans keep a sane baseline; a scan that never slows
    below the nominal speed keeps tz = +nominal exactly.
    """
    if nominal_step is None:
        nominal_step = float(bundle.meta.get("nominal_speed", 0.5))
    rot = relative_euler(bundle.imu)
    poses = np.zeros((bundle.n_frames - 1, 6))
    poses[:, 3:] = rot
    poses[:, 2] = nominal_step
    if signed_elevation and nominal_step != 0.0:
        accel_z = preprocess_acceleration(bundle.imu)[:, 2]
        velocity = nominal_step + np.concatenate([[0.0], np.cumsum(accel_z[1:-1])])
        poses[:, 2] = np.where(velocity >= 0, nominal_step, -nominal_step)
    for i in range(bundle.n_frames - 1):
        dy, dx = estimate_shift(bundle.frames[i], bundle.frames[i + 1])
        poses[i, 0] = dx * bundle.spacing
        poses[i, 1] = dy * bundle.spacing
    return EstimateResult(poses=poses)
