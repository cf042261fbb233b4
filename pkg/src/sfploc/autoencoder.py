"""Trainable sparsifying autoencoder (desk-scale).

A U-Net-style encoder/decoder over a feature pyramid.  Each encoder block
is maxpool(3, 2, 1) -> batchnorm -> ReLU -> 3x3 conv; per-level keep
scores are sigmoids of a learned inner product with the features.  During
training the pyramid is gated by a sampled Bernoulli mask whose gradient
uses the straight-through estimator (backward treats dm/dp as 1); the
decoder reconstructs the input from the gated skip connections.  Loss is
the per-image sum of absolute reconstruction differences plus a weighted
expected-storage-cost term (see ``pyramid.compression_cost``).

Everything runs in float64 on CPU and is deterministic given seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError, FormatError
from .pyramid import DensePyramid, FeatureGrid, LevelSpec, SparsePyramid, densify

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters: channel plan and loss weight."""

    level_dims: tuple[int, ...] = (32, 64, 128)
    image_channels: int = 1
    lam: float = 0.01

    def __post_init__(self):
        if len(self.level_dims) < 2:
            raise ValueError("need at least 2 pyramid levels")
        if any(d <= 0 or d % 2 for d in self.level_dims):
            raise ValueError(f"level dims must be positive and even, got {self.level_dims}")
        if any(b <= a for a, b in zip(self.level_dims, self.level_dims[1:])):
            raise ValueError(f"level dims must strictly increase, got {self.level_dims}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    @property
    def n_levels(self) -> int:
        return len(self.level_dims)

    def level_specs(self) -> list[LevelSpec]:
        return [LevelSpec(i + 1, 2 ** (i + 1), d) for i, d in enumerate(self.level_dims)]


@dataclass(frozen=True)
class TrainBatch:
    """Images (B, H, W, C) in [0, 1] with dims divisible by 2**n_levels."""

    images: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.images, dtype=np.float64)
        object.__setattr__(self, "images", img)
        if img.ndim != 4 or img.shape[0] == 0:
            raise ValueError(f"images must be nonempty (B, H, W, C), got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    def tensor(self) -> torch.Tensor:
        # NHWC -> NCHW
        return torch.from_numpy(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)))


@dataclass
class LossReport:
    """One loss evaluation: total = reconstruction + lambda * compression."""

    total: float
    reconstruction: float
    compression: float
    mean_keypoints_per_level: list[float]


@dataclass
class FrozenMasks:
    """A mask sample pinned together with the scores it was drawn from.

    Replaying the forward pass with these constants makes the
    straight-through surrogate a plain differentiable function, which is
    what finite differences must probe.
    """

    bits: list[torch.Tensor]
    base_scores: list[torch.Tensor]


class PyramidAutoencoder(nn.Module):
    """Encoder/decoder with sparsification gates on the skip connections."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        dims = config.level_dims
        chans = [config.image_channels, *dims]

        self.pools = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.enc_convs = nn.ModuleList()
        for i in range(config.n_levels):
            self.pools.append(nn.MaxPool2d(kernel_size=3, stride=2, padding=1))
            self.norms.append(nn.BatchNorm2d(chans[i]))
            self.enc_convs.append(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1))

        self.omegas = nn.ParameterList(
            [nn.Parameter(torch.zeros(d)) for d in dims]
        )

        # decoder: deep -> shallow, upsample+conv then a fuse conv over the skip
        self.up_convs = nn.ModuleList()
        self.fuse_convs = nn.ModuleList()
        for i in range(config.n_levels - 1, 0, -1):
            self.up_convs.append(nn.Conv2d(dims[i], dims[i - 1], 3, padding=1))
            self.fuse_convs.append(nn.Conv2d(2 * dims[i - 1], dims[i - 1], 3, padding=1))
        self.out_conv = nn.Conv2d(dims[0], config.image_channels, 3, padding=1)

        self.double()

    # -- forward pieces ----------------------------------------------------

    def encode_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-level feature maps (B, d_i, H_i, W_i), shallow to deep."""
        self._check_divisible(images)
        feats = []
        x = images
        for pool, norm, conv in zip(self.pools, self.norms, self.enc_convs):
            x = conv(torch.relu(norm(pool(x))))
            feats.append(x)
        return feats

    def scores_from_features(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        """Keep probabilities per level: sigmoid(omega . f) per cell."""
        return [
            torch.sigmoid(torch.einsum("bchw,c->bhw", f, w))
            for f, w in zip(feats, self.omegas)
        ]

    def decode_features(self, gated: list[torch.Tensor]) -> torch.Tensor:
        """Reconstruct the image from gated pyramid levels (shallow to deep)."""
        x = gated[-1]
        for i, (up, fuse) in enumerate(zip(self.up_convs, self.fuse_convs)):
            skip = gated[len(gated) - 2 - i]
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = torch.relu(up(x))
            x = torch.relu(fuse(torch.cat([x, skip], dim=1)))
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.out_conv(x)

    def forward(
        self,
        images: torch.Tensor,
        mask_mode: str = "sample",
        *,
        generator: torch.Generator | None = None,
        frozen: FrozenMasks | None = None,
        tau: float = 0.5,
    ) -> dict:
        """Full pass.  mask_mode: 'sample' | 'frozen' | 'threshold' | 'ones'.

        'sample' draws Bernoulli masks from the scores with straight-through
        gradients; 'frozen' replays a FrozenMasks surrogate; 'threshold' and
        'ones' are deterministic (inference / dense reconstruction).
        """
        feats = self.encode_features(images)
        scores = self.scores_from_features(feats)

        if mask_mode == "sample":
            masks = []
            for p in scores:
                draw = torch.rand(p.shape, generator=generator, dtype=p.dtype)
                bits = (draw < p).to(p.dtype)
                masks.append(p + (bits - p).detach())
        elif mask_mode == "frozen":
            if frozen is None:
                raise ValueError("mask_mode 'frozen' needs FrozenMasks")
            masks = [
                p - p0 + b
                for p, p0, b in zip(scores, frozen.base_scores, frozen.bits)
            ]
        elif mask_mode == "threshold":
            masks = [(p >= tau).to(p.dtype) for p in scores]
        elif mask_mode == "ones":
            masks = [torch.ones_like(p) for p in scores]
        else:
            raise ValueError(f"unknown mask_mode {mask_mode!r}")

        gated = [f * m.unsqueeze(1) for f, m in zip(feats, masks)]
        recon = self.decode_features(gated)
        return {
            "features": feats,
            "scores": scores,
            "masks": masks,
            "gated": gated,
            "reconstruction": recon,
        }

    def _check_divisible(self, images: torch.Tensor) -> None:
        div = 2 ** self.config.n_levels
        h, w = images.shape[-2], images.shape[-1]
        if h % div or w % div:
            raise ValueError(
                f"image dims ({h}, {w}) must be divisible by {div} for {self.config.n_levels} levels"
            )


def build_network(config: NetConfig, seed: int = 0) -> PyramidAutoencoder:
    """Construct a network with seeded (reproducible) initialization."""
    torch.manual_seed(seed)
    return PyramidAutoencoder(config)


# -- loss ------------------------------------------------------------------


def loss_terms(
    images: torch.Tensor,
    recon: torch.Tensor,
    scores: list[torch.Tensor],
    dims,
    lam: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction, compression) as torch scalars, batch-averaged.

    Reconstruction is the per-image sum of absolute differences; compression
    the per-image expected stored-scalar count.
    """
    if images.shape != recon.shape:
        raise ValueError(f"image {tuple(images.shape)} vs recon {tuple(recon.shape)}")
    b = images.shape[0]
    rec = (images - recon).abs().sum() / b
    comp = images.new_zeros(())
    for p, d in zip(scores, dims):
        comp = comp + p.sum() * float(d)
    comp = comp / b
    return rec + lam * comp, rec, comp


def loss_report(
    image: np.ndarray,
    recon: np.ndarray,
    scores_per_level,
    dims,
    lam: float,
) -> LossReport:
    """Evaluate the loss on numpy arrays (single image or batch)."""
    img = np.asarray(image, dtype=np.float64)
    rec = np.asarray(recon, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
        rec = rec[None]
        scores_per_level = [np.asarray(s)[None] for s in scores_per_level]
    ti = torch.from_numpy(np.ascontiguousarray(img))
    tr = torch.from_numpy(np.ascontiguousarray(rec))
    ts = [torch.from_numpy(np.ascontiguousarray(np.asarray(s, dtype=np.float64))) for s in scores_per_level]
    total, recon_t, comp_t = loss_terms(ti, tr, ts, list(dims), lam)
    mean_kp = [float(s.sum() / s.shape[0]) for s in ts]
    return LossReport(
        total=float(total), reconstruction=float(recon_t), compression=float(comp_t),
        mean_keypoints_per_level=mean_kp,
    )


def _report_from_forward(
    net: PyramidAutoencoder, images: torch.Tensor, out: dict
) -> tuple[torch.Tensor, LossReport]:
    total, rec, comp = loss_terms(
        images, out["reconstruction"], out["scores"], net.config.level_dims, net.config.lam
    )
    b = images.shape[0]
    mean_kp = [float(p.detach().sum() / b) for p in out["scores"]]
    report = LossReport(
        total=float(total.detach()),
        reconstruction=float(rec.detach()),
        compression=float(comp.detach()),
        mean_keypoints_per_level=mean_kp,
    )
    return total, report


# -- public ops ------------------------------------------------------------


def encode(image: np.ndarray, net: PyramidAutoencoder) -> DensePyramid:
    """Run the encoder on one (H, W, C) image and attach scores.

    Uses frozen normalization statistics (inference behavior).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {img.shape}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
            feats = net.encode_features(x)
            scores = net.scores_from_features(feats)
    finally:
        net.train(was_training)
    grids = []
    for spec, f, p in zip(net.config.level_specs(), feats, scores):
        grids.append(
            FeatureGrid(
                level=spec,
                values=f[0].permute(1, 2, 0).numpy(),
                scores=p[0].numpy(),
            )
        )
    return DensePyramid(levels=tuple(grids), image_shape=(img.shape[0], img.shape[1]))


def decode(sparse: SparsePyramid, net: PyramidAutoencoder) -> np.ndarray:
    """Reconstruct an (H, W, C) image from a (zero-densified) sparse pyramid."""
    specs = net.config.level_specs()
    if [lv.level.level_index for lv in sparse.levels] != [s.level_index for s in specs]:
        raise ValueError("sparse pyramid levels do not match the network's level plan")
    gated = []
    for lv, spec in zip(sparse.levels, specs):
        if lv.level.dim != spec.dim:
            raise ValueError(
                f"level {spec.level_index} dim {lv.level.dim} != network dim {spec.dim}"
            )
        dense = densify(lv).astype(np.float64)
        gated.append(torch.from_numpy(dense.transpose(2, 0, 1))[None])
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            recon = net.decode_features(gated)
    finally:
        net.train(was_training)
    return recon[0].permute(1, 2, 0).numpy()


def sample_frozen_masks(
    net: PyramidAutoencoder, images: torch.Tensor, seed: int
) -> FrozenMasks:
    """Draw one Bernoulli mask sample and pin it with its base scores."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        feats = net.encode_features(images)
        scores = net.scores_from_features(feats)
        bits = []
        for p in scores:
            draw = torch.rand(p.shape, generator=gen, dtype=p.dtype)
            bits.append((draw < p).to(p.dtype))
    return FrozenMasks(bits=bits, base_scores=[p.clone() for p in scores])


def backward(
    batch: TrainBatch,
    net: PyramidAutoencoder,
    rng_seed: int,
    *,
    frozen: FrozenMasks | None = None,
) -> tuple[dict[str, torch.Tensor], LossReport]:
    """Gradients of the training loss for every parameter.

    With ``frozen`` the pinned surrogate is replayed (grad-check path);
    otherwise a fresh mask is sampled from ``rng_seed``.
    """
    images = batch.tensor()
    net.zero_grad(set_to_none=True)
    if frozen is not None:
        out = net(images, mask_mode="frozen", frozen=frozen)
    else:
        gen = torch.Generator().manual_seed(rng_seed)
        out = net(images, mask_mode="sample", generator=gen)
    if not torch.isfinite(out["reconstruction"]).all():
        raise FloatingPointError("non-finite values in the decoder output")
    total, report = _report_from_forward(net, images, out)
    if not math.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss: {report}")
    total.backward()
    grads = {}
    for name, p in net.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g.detach().clone()
    return grads, report


def train(
    batch: TrainBatch,
    net: PyramidAutoencoder,
    steps: int,
    learning_rate: float,
    rng_seed: int,
) -> tuple[PyramidAutoencoder, list[LossReport]]:
    """Plain fixed-step gradient descent; one full-batch step per iteration.

    Returns the trained network (modified in place) and the per-step loss
    trace.  Raises DivergenceError (carrying the trace) if the loss goes
    non-finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    images = batch.tensor()
    gen = torch.Generator().manual_seed(rng_seed)
    opt = torch.optim.SGD(net.parameters(), lr=learning_rate)
    net.train()
    trace: list[LossReport] = []
    for step in range(steps):
        opt.zero_grad(set_to_none=True)
        out = net(images, mask_mode="sample", generator=gen)
        total, report = _report_from_forward(net, images, out)
        if not math.isfinite(report.total):
            raise DivergenceError(f"loss diverged at step {step}", trace)
        trace.append(report)
        total.backward()
        opt.step()
    net.eval()
    # one clean pass so eval-mode running stats see the trained weights
    with torch.no_grad():
        net.train()
        net(images, mask_mode="ones")
        net.eval()
    return net, trace


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    kink_margins: dict[str, float]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _frozen_loss(net, images, frozen) -> float:
    with torch.no_grad():
        out = net(images, mask_mode="frozen", frozen=frozen)
        total, _, _ = loss_terms(
            images, out["reconstruction"], out["scores"], net.config.level_dims, net.config.lam
        )
    return float(total)


def compare_gradients(
    analytic: dict[str, torch.Tensor],
    numeric: dict[str, torch.Tensor],
) -> tuple[float, str, dict[str, float]]:
    """Worst deviation per parameter tensor, relative to its gradient scale.

    For each tensor the error is max|a - n| / max(|a|_inf, |n|_inf); this
    judges every entry against the tensor's own gradient magnitude, so
    finite-difference roundoff on near-zero entries is not mistaken for a
    wrong derivative while any real formula error (which perturbs values
    at the gradient's scale) still stands out.  A tensor that is zero on
    both sides counts as agreement.
    """
    per_param = {}
    worst, worst_name = 0.0, ""
    for name in analytic:
        a = analytic[name].reshape(-1)
        n = numeric[name].reshape(-1)
        scale = max(float(a.abs().max()), float(n.abs().max())) if len(a) else 0.0
        if scale == 0.0:
            err = 0.0
        else:
            err = float((a - n).abs().max()) / scale
        per_param[name] = err
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name, per_param


def finite_difference_gradients(
    net: PyramidAutoencoder,
    images: torch.Tensor,
    frozen: FrozenMasks,
    epsilon: float,
) -> dict[str, torch.Tensor]:
    """Central differences of the frozen-surrogate loss for every parameter."""
    numeric = {}
    for name, p in net.named_parameters():
        flat = p.data.reshape(-1)
        grad = torch.zeros_like(flat)
        for k in range(len(flat)):
            orig = float(flat[k])
            flat[k] = orig + epsilon
            up = _frozen_loss(net, images, frozen)
            flat[k] = orig - epsilon
            down = _frozen_loss(net, images, frozen)
            flat[k] = orig
            grad[k] = (up - down) / (2.0 * epsilon)
        numeric[name] = grad.reshape(p.shape)
    return numeric


def _pool_tie_margin(x: torch.Tensor) -> float:
    """Smallest positive (max - runner-up) over every pooling window of x.

    Exact zero gaps are plateau duplicates — entries computed from
    identical neighborhoods that move together under any parameter
    perturbation — so only strictly positive gaps can flip a selection.
    """
    padded = nn.functional.pad(x, (1, 1, 1, 1), value=-math.inf)
    windows = nn.functional.unfold(padded, kernel_size=3, stride=2)
    b, ck, l = windows.shape
    windows = windows.reshape(b, x.shape[1], 9, l)
    top2 = windows.topk(2, dim=2).values
    gaps = top2[:, :, 0, :] - top2[:, :, 1, :]
    gaps = gaps[torch.isfinite(gaps) & (gaps > 0)]
    return float(gaps.min()) if len(gaps) else math.inf


def kink_margins(net: PyramidAutoencoder, images: torch.Tensor, frozen: FrozenMasks) -> dict[str, float]:
    """Distances to the nearest nondifferentiable point of the frozen loss.

    Margins well above the finite-difference perturbation scale mean the
    differences probe smooth ground.  The first pooling layer sees only
    the (constant) input image, so its ties cannot flip under parameter
    perturbations and are excluded.
    """
    margins = {}
    with torch.no_grad():
        out = net(images, mask_mode="frozen", frozen=frozen)
        resid = (images - out["reconstruction"]).abs()
        margins["l1_residual"] = float(resid.min())
        relu_min = math.inf
        pool_min = math.inf
        x = images
        for i, (pool, norm, conv) in enumerate(zip(net.pools, net.norms, net.enc_convs)):
            if i > 0:
                pool_min = min(pool_min, _pool_tie_margin(x))
            pre = norm(pool(x))
            relu_min = min(relu_min, float(pre.abs().min()))
            x = conv(torch.relu(pre))
        margins["relu_preactivation"] = relu_min
        margins["maxpool_tie"] = pool_min
    return margins


def grad_check(
    net: PyramidAutoencoder,
    batch: TrainBatch,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Analytic gradients vs central finite differences, mask sample frozen.

    The sampled mask and its base scores are pinned, making the
    straight-through surrogate an ordinary differentiable function; both
    derivative routes evaluate exactly that function.
    """
    n_params = sum(p.numel() for p in net.parameters())
    if n_params > 10_000:
        raise ValueError(
            f"grad_check is meant for small nets (<= 10k params), got {n_params}"
        )
    images = batch.tensor()
    state_backup = {k: v.clone() for k, v in net.state_dict().items()}
    was_training = net.training
    net.train()
    try:
        frozen = sample_frozen_masks(net, images, seed)
        analytic, _ = backward(batch, net, rng_seed=seed, frozen=frozen)
        numeric = finite_difference_gradients(net, images, frozen, epsilon)
        margins = kink_margins(net, images, frozen)
    finally:
        net.load_state_dict(state_backup)
        net.train(was_training)
    worst, worst_name, per_param = compare_gradients(analytic, numeric)
    return GradCheckReport(
        max_rel_err=worst,
        worst_param=worst_name,
        per_param=per_param,
        kink_margins=margins,
    )


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(net: PyramidAutoencoder, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "level_dims": list(net.config.level_dims),
            "image_channels": net.config.image_channels,
            "lambda": float(net.config.lam),
            "state_dict": net.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> PyramidAutoencoder:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise FormatError(f"{path}: not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {payload['format_version']}"
        )
    config = NetConfig(
        level_dims=tuple(payload["level_dims"]),
        image_channels=int(payload["image_channels"]),
        lam=float(payload["lambda"]),
    )
    net = PyramidAutoencoder(config)
    try:
        net.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise FormatError(f"{path}: checkpoint shapes do not match ({exc})") from exc
    net.eval()
    return net
