"""Image-optimization loop with scheduled regularization.

Per iteration: one forward/backward pass for the dual-objective loss, a
center-masked gradient-descent step, periodic Gaussian blur and
total-variation denoising, clamping to the pixel range, and a latent
update of the robust-loss scale/shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, NumericAbortError, ValidationError
from .facets import Facet, top_k_channels
from .objective import RobustLossParams, evaluate_objective


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Linear interpolation between start and end over `iters` steps.

    Evaluated literally as ((end-start)*t + start*iters) / (iters-1),
    so the value at t=0 is start*iters/(iters-1), not start, and the
    value at the last step carries a start/(iters-1) offset past end.
    """

    start: float
    end: float
    iters: int


def schedule_value(s: Schedule, t: int) -> float:
    if s.iters < 2:
        raise ConfigError(f"schedule needs iters >= 2, got {s.iters}")
    if not (np.isfinite(s.start) and np.isfinite(s.end)):
        raise ConfigError("schedule endpoints must be finite")
    if not 0 <= t <= s.iters - 1:
        raise ValidationError(f"schedule step {t} outside [0, {s.iters - 1}]")
    return ((s.end - s.start) * t + s.start * s.iters) / (s.iters - 1)


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()

def _correlate_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="reflect")
    out = np.zeros_like(arr)
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i, i + arr.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur per channel; kernel radius ceil(3*sigma).

    Reflect boundary handling; sigma = 0 is the identity.
    """
    if sigma < 0:
        raise ValidationError(f"blur sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    out = image
    for axis in (-2, -1):
        # reflect padding requires radius < axis length
        radius = min(math.ceil(3.0 * sigma), image.shape[axis] - 1)
        out = _correlate_axis(out, _gaussian_kernel(sigma, radius), axis)
    return out


def _grad_xy(u: np.ndarray):
    """Forward differences with a zero last row/column (Neumann)."""
    ux = np.zeros_like(u)
    ux[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    uy = np.zeros_like(u)
    uy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return ux, uy


def _div_adjoint(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Adjoint of the forward-difference gradient (negative divergence)."""
    out = np.zeros_like(vx)
    out[..., :, :-1] -= vx[..., :, :-1]
    out[..., :, 1:] += vx[..., :, :-1]
    out[..., :-1, :] -= vy[..., :-1, :]
    out[..., 1:, :] += vy[..., :-1, :]
    return out


def rof_energy(u: np.ndarray, f: np.ndarray, weight: float) -> float:
    """0.5 * ||u - f||^2 + weight * isotropic TV(u)."""
    ux, uy = _grad_xy(np.asarray(u, dtype=np.float64))
    tv = np.sqrt(ux * ux + uy * uy).sum()
    return float(0.5 * np.sum((u - f) ** 2) + weight * tv)


def total_variation(u: np.ndarray) -> float:
    ux, uy = _grad_xy(np.asarray(u, dtype=np.float64))
    return float(np.sqrt(ux * ux + uy * uy).sum())


def _neighbor_sum(u: np.ndarray) -> np.ndarray:
    up = np.pad(u, [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    return (up[..., :-2, 1:-1] + up[..., 2:, 1:-1]
            + up[..., 1:-1, :-2] + up[..., 1:-1, 2:])


def tv_denoise(image: np.ndarray, weight: float, iterations: int = 10,
               tol: float = 1e-4, return_energies: bool = False):
    """Split-Bregman minimization of 0.5*||u-f||^2 + weight*TV(u).

    Per outer iteration: isotropic shrink of the auxiliary gradient
    variables, Bregman-variable update, then red/black Gauss-Seidel
    sweeps on the quadratic subproblem. Updating the auxiliary variables
    first keeps the energy monotone from the very first step. Outer
    iterations stop on the residual tolerance, the iteration cap, or as
    soon as a step fails to lower the energy (the step is discarded), so
    the recorded energy sequence is non-increasing by construction.
    """
    if weight <= 0:
        raise ValidationError(f"denoise weight must be > 0, got {weight}")
    f = np.asarray(image, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[None]
    mu = 1.0 / weight
    lam = 2.0 * mu
    u = f.copy()
    h, w = f.shape[-2:]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    red = (ii + jj) % 2 == 0
    bx = np.zeros_like(f)
    by = np.zeros_like(f)
    energies = [rof_energy(u, f, weight)]
    for _ in range(iterations):
        u_prev = u.copy()
        ux, uy = _grad_xy(u)
        sx, sy = ux + bx, uy + by
        mag = np.sqrt(sx * sx + sy * sy)
        shrink = np.maximum(mag - 1.0 / lam, 0.0) / np.maximum(mag, 1e-12)
        dx, dy = shrink * sx, shrink * sy
        bx += ux - dx
        by += uy - dy
        rhs_fixed = mu * f + lam * _div_adjoint(dx - bx, dy - by)
        for _ in range(2):
            for mask in (red, ~red):
                upd = (rhs_fixed + lam * _neighbor_sum(u)) / (mu + 4.0 * lam)
                u[..., mask] = upd[..., mask]
        energy = rof_energy(u, f, weight)
        if energy > energies[-1]:
            u = u_prev
            break
        energies.append(energy)
        if np.max(np.abs(u - u_prev)) < tol:
            break
    if squeeze:
        u = u[0]
    return (u, energies) if return_energies else u


def center_mask(h: int, w: int, sigma: float) -> np.ndarray:
    """Centered 2D Gaussian scaled so its maximum is exactly 1."""
    if sigma <= 0:
        raise ValidationError(f"mask sigma must be > 0, got {sigma}")
    rr = (np.arange(h, dtype=np.float64) - (h - 1) / 2.0) ** 2
    cc = (np.arange(w, dtype=np.float64) - (w - 1) / 2.0) ** 2
    mask = np.exp(-(rr[:, None] + cc[None, :]) / (2.0 * sigma * sigma))
    return mask / mask.max()


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------

@dataclass
class OptimizationConfig:
    """Knobs of one optimization run; scalar fields mirror the CLI flags.

    Only the lambda endpoints are fixed by the method; the remaining
    defaults are tuned on the built-in toy model.
    """

    iters: int = 500
    lr_start: float = 0.5
    lr_end: float = 0.05
    blur_sigma_start: float = 0.3
    blur_sigma_end: float = 0.1
    blur_every: int = 4
    denoise_weight_start: float = 0.005
    denoise_weight_end: float = 0.001
    denoise_every: int = 20
    denoise_iters: int = 10
    mask_sigma_start_frac: float = 0.4
    mask_sigma_end_frac: float = 0.25
    mask_enabled: bool = True
    lambda_start: float = 1e-3
    lambda_end: float = 1e-4
    top_k: int | None = None
    momentum: float = 0.0
    train_robust_params: bool = True
    robust_lr_scale: float = 0.01
    strict_paper_ad: bool = False
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    seed: int = 0
    checkpoint_every: int = 50

    def validate(self):
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        for name in ("blur_every", "denoise_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not self.clamp_lo < self.clamp_hi:
            raise ConfigError("clamp range must satisfy lo < hi")
        if self.denoise_weight_start <= 0 or self.denoise_weight_end <= 0:
            raise ConfigError("denoise weight endpoints must be > 0")
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ConfigError("lambda endpoints must be >= 0")
        return self

    def _value(self, start: float, end: float, t: int) -> float:
        if self.iters == 1:
            # the linear formula is undefined for a single step
            return start
        return schedule_value(Schedule(start, end, self.iters), t)

    def lr_at(self, t):
        return self._value(self.lr_start, self.lr_end, t)

    def blur_sigma_at(self, t):
        return self._value(self.blur_sigma_start, self.blur_sigma_end, t)

    def denoise_weight_at(self, t):
        return self._value(self.denoise_weight_start, self.denoise_weight_end, t)

    def mask_sigma_at(self, t, hw: tuple[int, int]):
        scale = float(min(hw))
        return self._value(self.mask_sigma_start_frac * scale,
                           self.mask_sigma_end_frac * scale, t)

    def lambda_at(self, t):
        return self._value(self.lambda_start, self.lambda_end, t)

    def to_dict(self):
        return asdict(self)


TRACE_COLUMNS = ("iter", "dm", "ad", "mdist", "l1_prev", "lambda",
                 "lr", "sigma", "r", "b", "total")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    dm: float
    ad: float
    mdist: float
    l1_prev: float
    lam: float
    lr: float
    sigma: float
    r: float
    b: float
    total: float

    def as_csv_values(self):
        return (self.iter, self.dm, self.ad, self.mdist, self.l1_prev,
                self.lam, self.lr, self.sigma, self.r, self.b, self.total)


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)
    final_image: np.ndarray | None = None


def optimize(model, facet: Facet, cfg: OptimizationConfig) -> RunTrace:
    """Run the full synthesis loop for one facet; returns the trace."""
    cfg.validate()
    layer = model.resolve_layer(facet.layer.name)
    if cfg.top_k is not None:
        top_k = top_k_channels(facet.target, cfg.top_k)
    else:
        top_k = facet.top_k
    image = np.clip(np.asarray(facet.init_image, dtype=np.float64),
                    cfg.clamp_lo, cfg.clamp_hi)
    h, w = image.shape[-2:]
    params = RobustLossParams(r=1.0, b=1.0, trainable=cfg.train_robust_params)
    velocity = np.zeros_like(image)
    trace = RunTrace()
    holder: dict = {}

    for t in range(cfg.iters):
        lr = cfg.lr_at(t)
        sigma_blur = cfg.blur_sigma_at(t)
        lam = cfg.lambda_at(t)

        def loss_fn(prev, curr):
            ev = evaluate_objective(prev, curr, facet.target, top_k, params,
                                    lam, strict_paper=cfg.strict_paper_ad)
            holder["ev"] = ev
            return ev.breakdown.total, ev.grad_prev, ev.grad_curr

        try:
            _, grad = model.loss_gradient(image, layer, loss_fn)
        except ValidationError as exc:
            abort = NumericAbortError(t, "objective", f"iteration {t}: {exc}")
            abort.trace = trace
            raise abort from exc
        ev = holder["ev"]
        if not np.all(np.isfinite(grad)):
            abort = NumericAbortError(t, "image-gradient")
            abort.trace = trace
            raise abort

        if cfg.mask_enabled:
            grad = grad * center_mask(h, w, cfg.mask_sigma_at(t, (h, w)))[None]
        velocity = cfg.momentum * velocity - lr * grad
        image = image + velocity
        if (t + 1) % cfg.blur_every == 0 and sigma_blur > 0:
            image = gaussian_blur(image, sigma_blur)
        if (t + 1) % cfg.denoise_every == 0:
            image = tv_denoise(image, cfg.denoise_weight_at(t), cfg.denoise_iters)
        image = np.clip(image, cfg.clamp_lo, cfg.clamp_hi)
        params.gradient_step(ev.d_r, ev.d_b_latent, lr * cfg.robust_lr_scale)

        trace.rows.append(TraceRow(
            iter=t, dm=ev.breakdown.dm, ad=ev.breakdown.ad, mdist=ev.mdist,
            l1_prev=ev.breakdown.l1_prev, lam=lam, lr=lr, sigma=sigma_blur,
            r=params.r, b=params.b, total=ev.breakdown.total,
        ))
        if t % cfg.checkpoint_every == 0 or t == cfg.iters - 1:
            trace.checkpoints.append((t, image.copy()))

    trace.final_image = image
    return trace
