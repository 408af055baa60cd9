"""Multi-hypothesis analysis-by-synthesis fitting of camera and articulation.

Each hypothesis is a flat parameter vector ``q[4], s, t[2], theta[K],
t_k[3K]`` (see :func:`csmfit.losses.state_to_vector`).  Fitting runs in two
phases: a camera-only warm-up, then joint optimization of every free
variable.  The root part's angle and translation stay at zero throughout;
they duplicate the camera rotation and would only add a flat direction.
Part translations are held at zero unless ``free_part_translations`` is set:
on thin parts a small translation mimics a rotation, and letting both move
trades angle accuracy for a marginally lower loss.

In ``joint-expected`` mode the hypotheses share one objective,
``sum_i c_i L_i - lambda_H H(c)`` with ``c = softmax(logits)``.  In
``independent`` mode each hypothesis minimizes its own loss and the lowest
final loss wins.

To keep per-instance cost bounded, the second phase only optimizes the
``active_hypotheses`` best hypotheses after warm-up; the others keep their
warm-up parameters (and, in joint mode, their logits stay in the softmax).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .articulation import ArticulationParams
from .camera import Camera, azimuth_elevation_quat
from .errors import FitDivergenceError, FormatError
from .losses import LossConfig, LossContext, Model, vector_to_state

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
MIN_SCALE = 1e-3


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 600
    warmup_iterations: int = 100
    lr: float = 1e-2
    lr_final: float = 1e-3  # geometric decay from lr to lr_final over all iterations
    logit_lr: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    entropy_weight: float = 0.05
    seed: int = 0
    mode: str = "joint-expected"
    n_hypotheses: int = 8
    active_hypotheses: int = 2
    init_scale: float = 0.8
    fd_scheme: str = "forward"
    free_part_translations: bool = False
    tol: float = 1e-9
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.mode not in ("joint-expected", "independent"):
            raise ValueError(f"unknown fit mode {self.mode!r}")
        if not 0 <= self.warmup_iterations <= self.iterations:
            raise ValueError("warmup_iterations must lie in [0, iterations]")
        if not (self.lr > 0 and self.lr_final > 0 and self.logit_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.n_hypotheses < 1 or self.active_hypotheses < 1:
            raise ValueError("hypothesis counts must be >= 1")
        if self.fd_scheme not in ("forward", "central"):
            raise ValueError(f"unknown difference scheme {self.fd_scheme!r}")

    def to_json(self):
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        try:
            if "loss" in data:
                data["loss"] = LossConfig.from_json(data["loss"])
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"malformed fit config ({exc})") from None


@dataclass(eq=False)
class FitState:
    """Hypothesis parameter rows ``x`` (n, 7 + 4K) and their logits (n,)."""

    x: np.ndarray
    logits: np.ndarray
    n_parts: int

    @property
    def n(self):
        return len(self.x)

    @property
    def probabilities(self):
        return softmax(self.logits)

    def hypothesis(self, i):
        return vector_to_state(self.x[i], self.n_parts)

    def to_json(self):
        return {"x": self.x.tolist(), "logits": self.logits.tolist(), "n_parts": self.n_parts}

    @classmethod
    def from_json(cls, data):
        try:
            return cls(np.asarray(data["x"], float), np.asarray(data["logits"], float),
                       int(data["n_parts"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed fit state ({exc})") from None


@dataclass(eq=False)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x, dtype=float), np.zeros_like(x, dtype=float))


@dataclass(eq=False)
class FitResult:
    best: int
    camera: Camera
    params: ArticulationParams
    state: FitState
    losses: np.ndarray  # final per-hypothesis total loss
    trace: np.ndarray  # (n_hypotheses, iterations run) loss before each update
    report: object  # LossReport of the selected hypothesis
    mode: str
    iterations_run: int
    active: list
    wall_clock: float
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {
            "best": self.best, "mode": self.mode,
            "camera": self.camera.to_json(),
            "articulation": {"angles": self.params.angle.tolist(),
                             "translations": self.params.trans.tolist()},
            "state": self.state.to_json(),
            "probabilities": self.state.probabilities.tolist(),
            "losses": self.losses.tolist(),
            "trace": self.trace.tolist(),
            "report": self.report.to_json(),
            "iterations_run": self.iterations_run,
            "active": list(self.active),
            "wall_clock": self.wall_clock,
            "warnings": list(self.warnings),
        }


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy(c):
    c = np.asarray(c, dtype=float)
    nz = c[c > 0]
    return float(-np.sum(nz * np.log(nz)))


def init_hypotheses(n, seed=0, n_parts=1, scale=0.8):
    """Azimuth fan: ``n`` cameras evenly spaced about the vertical axis.

    The fan is fully deterministic; ``seed`` is accepted so every entry point
    shares the same signature and recorded configuration.
    """
    if n < 1:
        raise ValueError("need at least one hypothesis")
    del seed
    dim = 7 + 4 * n_parts
    x = np.zeros((n, dim))
    for i in range(n):
        x[i, :4] = azimuth_elevation_quat(2.0 * np.pi * i / n)
        x[i, 4] = scale
    return FitState(x, np.zeros(n), n_parts)


def adam_step(params, grad, moments, config, step_index, lr=None, constrain=True):
    """One bias-corrected Adam update; returns ``(new_params, new_moments)``.

    ``step_index`` counts from 1.  With ``constrain`` and a full camera
    block (length >= 7) the quaternion is renormalized and the scale kept
    above ``1e-3``.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise FitDivergenceError("non-finite gradient")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    m = b1 * moments.m + (1 - b1) * grad
    v = b2 * moments.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step_index)
    v_hat = v / (1 - b2 ** step_index)
    out = params - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if constrain and out.shape[-1] >= 7:
        out[..., :4] /= np.linalg.norm(out[..., :4], axis=-1, keepdims=True)
        out[..., 4] = np.maximum(out[..., 4], MIN_SCALE)
    if not np.all(np.isfinite(out)):
        raise FitDivergenceError("non-finite parameters after Adam step")
    return out, AdamMoments(m, v)


def free_masks(n_parts, part_translations=False):
    """Differentiated coordinates for the warm-up and the main phase."""
    dim = 7 + 4 * n_parts
    warm = np.zeros(dim, dtype=bool)
    warm[:7] = True
    full = np.ones(dim, dtype=bool)
    full[7] = False  # root angle
    if part_translations:
        full[7 + n_parts:7 + n_parts + 3] = False  # root translation
    else:
        full[7 + n_parts:] = False
    return warm, full


def logit_gradient(losses, logits, entropy_weight):
    """Gradient of ``sum c_i L_i - lambda H(c)`` with respect to the logits."""
    c = softmax(logits)
    losses = np.asarray(losses, dtype=float)
    h = entropy(c)
    logc = np.log(np.maximum(c, 1e-300))
    return c * (losses - c @ losses) + entropy_weight * c * (logc + h)


def _lr_at(config, it):
    if config.iterations <= 1:
        return config.lr
    return config.lr * (config.lr_final / config.lr) ** (it / (config.iterations - 1))


def _pick_active(config, fstate, losses):
    k = min(config.active_hypotheses, fstate.n)
    if config.mode == "joint-expected":
        key = -fstate.logits
    else:
        key = np.asarray(losses, dtype=float)
    # stable sort: ties keep the lower hypothesis index
    return sorted(np.argsort(key, kind="stable")[:k].tolist())


def select_index(mode, logits, losses):
    """Best hypothesis: argmax logit (joint) or argmin loss (independent), lowest index on ties."""
    if mode == "joint-expected":
        return int(np.argmax(logits))
    return int(np.argmin(losses))


def select(result):
    """Selected ``(Camera, ArticulationParams)`` of a :class:`FitResult`."""
    i = select_index(result.mode, result.state.logits, result.losses)
    s = result.state.hypothesis(i)
    return s.camera, s.params


@dataclass(eq=False)
class Checkpoint:
    state: FitState
    iteration: int
    moments: AdamMoments
    logit_moments: AdamMoments
    active: list | None
    trace: list

    def to_json(self):
        return {"state": self.state.to_json(), "iteration": self.iteration,
                "moments": {"m": self.moments.m.tolist(), "v": self.moments.v.tolist()},
                "logit_moments": {"m": self.logit_moments.m.tolist(),
                                  "v": self.logit_moments.v.tolist()},
                "active": self.active, "trace": self.trace}

    @classmethod
    def from_json(cls, data):
        try:
            mom = AdamMoments(np.asarray(data["moments"]["m"], float),
                              np.asarray(data["moments"]["v"], float))
            lmom = AdamMoments(np.asarray(data["logit_moments"]["m"], float),
                               np.asarray(data["logit_moments"]["v"], float))
            return cls(FitState.from_json(data["state"]), int(data["iteration"]), mom, lmom,
                       data["active"], [list(map(float, t)) for t in data["trace"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed checkpoint ({exc})") from None


def fit(obs, mesh, rig, sphere, config=FitConfig(), resume=None, on_checkpoint=None,
        checkpoint_every=50):
    """Fit camera and articulation hypotheses to one observation.

    Parameters
    ----------
    obs : Observation
        Ground-truth mask plus optional csm and keypoints.
    resume : Checkpoint, optional
        Continue a previous run; the result is identical to an uninterrupted one.
    on_checkpoint : callable, optional
        Called with a :class:`Checkpoint` every ``checkpoint_every`` iterations.
    """
    t_start = time.perf_counter()
    notes = []
    has_kp = obs.keypoints is not None and obs.keypoints.visible.any()
    if obs.csm is None and not has_kp:
        msg = "pose ambiguity: neither csm nor keypoints given, only the mask constrains the fit"
        warnings.warn(msg)
        notes.append(msg)

    k = rig.n_parts
    ctx = LossContext(obs, Model(mesh, rig, sphere), config.loss)
    warm_free, full_free = free_masks(k, config.free_part_translations)
    if resume is None:
        fstate = init_hypotheses(config.n_hypotheses, config.seed, k, config.init_scale)
        moments = AdamMoments.zeros_like(fstate.x)
        lmoments = AdamMoments.zeros_like(fstate.logits)
        start, active, trace = 0, None, [[] for _ in range(fstate.n)]
    else:
        fstate = FitState(resume.state.x.copy(), resume.state.logits.copy(), k)
        moments, lmoments = resume.moments, resume.logit_moments
        start, active = resume.iteration, resume.active
        trace = [list(t) for t in resume.trace]

    n = fstate.n
    losses = np.full(n, np.nan)
    grads = np.zeros_like(fstate.x)
    stale = np.ones(n, dtype=bool)  # losses of frozen hypotheses are cached
    it = start
    while it < config.iterations:
        warm = it < config.warmup_iterations
        if not warm and active is None:
            if stale.any():
                for i in np.flatnonzero(stale):
                    losses[i] = ctx.objective(fstate.x[i])
            active = _pick_active(config, fstate, losses)
            stale[:] = True
            logger.info("phase 2 active hypotheses: %s", active)
        idx = list(range(n)) if warm or active is None else active
        free = warm_free if warm else full_free
        for i in idx:
            losses[i], grads[i] = ctx.value_and_grad(fstate.x[i], free, config.fd_scheme)
            stale[i] = False
        for i in np.flatnonzero(stale):
            losses[i] = ctx.objective(fstate.x[i])
            stale[i] = False
        for i in range(n):
            trace[i].append(float(losses[i]))
        if not np.all(np.isfinite(losses)) or losses.max() > DIVERGENCE_LIMIT:
            raise FitDivergenceError(f"loss diverged at iteration {it}",
                                     trace=[list(t) for t in trace])
        if losses.min() <= config.tol:
            break

        lr = _lr_at(config, it)
        g = np.zeros_like(fstate.x)
        if config.mode == "joint-expected":
            c = fstate.probabilities
            g[idx] = c[idx, None] * grads[idx]
            lg = logit_gradient(losses, fstate.logits, config.entropy_weight)
            fstate.logits, lmoments = adam_step(fstate.logits, lg, lmoments, config, it + 1,
                                                lr=config.logit_lr, constrain=False)
        else:
            g[idx] = grads[idx]
        new_x, new_mom = adam_step(fstate.x[idx], g[idx],
                                   AdamMoments(moments.m[idx], moments.v[idx]),
                                   config, it + 1, lr=lr)
        fstate.x[idx] = new_x
        moments.m[idx], moments.v[idx] = new_mom.m, new_mom.v
        it += 1
        if on_checkpoint is not None and it % checkpoint_every == 0:
            on_checkpoint(Checkpoint(FitState(fstate.x.copy(), fstate.logits.copy(), k), it,
                                     AdamMoments(moments.m.copy(), moments.v.copy()),
                                     AdamMoments(lmoments.m.copy(), lmoments.v.copy()),
                                     active, [list(t) for t in trace]))
        # frozen hypotheses keep cached losses; updated ones must be re-evaluated
        stale[:] = False
        stale[idx] = True

    final = np.array([ctx.objective(fstate.x[i]) for i in range(n)])
    best = select_index(config.mode, fstate.logits, final)
    chosen = fstate.hypothesis(best)
    return FitResult(
        best=best, camera=chosen.camera, params=chosen.params, state=fstate, losses=final,
        trace=np.array(trace), report=ctx.report(chosen), mode=config.mode,
        iterations_run=it, active=list(range(n)) if active is None else active,
        wall_clock=time.perf_counter() - t_start, warnings=notes,
    )


__all__ = ["FitConfig", "FitState", "FitResult", "AdamMoments", "Checkpoint", "init_hypotheses",
           "adam_step", "fit", "select", "select_index", "softmax", "entropy", "logit_gradient",
           "free_masks"]
