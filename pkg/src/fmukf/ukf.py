"""Additive-noise unscented Kalman filter with history-conditioned process models.

Sigma points use the symmetric base set: ``2 d`` points at
``mean +- column_i(chol(d * cov))`` with uniform weights ``1 / (2 d)`` and no
center point.  The Cholesky column order is fixed, so sigma point ``n`` at one
step and sigma point ``n`` at the next form a per-index trajectory that
history-conditioned models consume as context.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ModelFailure, NotPositiveDefinite, SingularInnovation
from .sensors import wrap_angle

JITTER = 1e-9
DEFAULT_CAPACITY = 192


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def is_valid(self, sym_tol: float = 1e-12) -> bool:
        c = self.cov
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(c))):
            return False
        scale = max(np.max(np.abs(c)), 1.0)
        if np.max(np.abs(c - c.T)) > sym_tol * scale:
            return False
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            return False
        return True


@dataclass
class SigmaEnsemble:
    points: np.ndarray   # (2d, d)
    w_mu: np.ndarray
    w_sigma: np.ndarray


def symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def robust_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; one symmetrize+jitter retry, then NotPositiveDefinite."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    c = symmetrize(cov)
    c = c + np.eye(d) * (JITTER * max(np.trace(c), 0.0) / d + np.finfo(float).tiny)
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite after jitter") from exc


def sigma_points(belief: GaussianBelief) -> SigmaEnsemble:
    d = belief.dim
    S = robust_cholesky(d * belief.cov)
    pts = np.concatenate([belief.mean + S.T, belief.mean - S.T], axis=0)
    w = np.full(2 * d, 1.0 / (2 * d))
    return SigmaEnsemble(pts, w, w.copy())


def _moments(points, w_mu, w_sigma, angle_mask=None):
    if angle_mask is not None and np.any(angle_mask):
        ref = points[0]
        dev = points - ref
        dev[:, angle_mask] = wrap_angle(dev[:, angle_mask])
        mean = ref + w_mu @ dev
        mean[angle_mask] = wrap_angle(mean[angle_mask])
        resid = points - mean
        resid[:, angle_mask] = wrap_angle(resid[:, angle_mask])
    else:
        mean = w_mu @ points
        resid = points - mean
    cov = (resid * w_sigma[:, None]).T @ resid
    return mean, symmetrize(cov), resid


def unscented_transform(ensemble: SigmaEnsemble, fn: Callable | None = None,
                        angle_mask=None) -> GaussianBelief:
    """Weighted mean and outer-product covariance of ``fn`` over the sigma points.

    ``fn`` maps an (N, d) array to (N, m); None means identity.  Columns in
    ``angle_mask`` are averaged and differenced on the circle.
    """
    pts = ensemble.points if fn is None else np.asarray(fn(ensemble.points), dtype=float)
    mean, cov, _ = _moments(pts, ensemble.w_mu, ensemble.w_sigma, angle_mask)
    return GaussianBelief(mean, cov)


# ------------------------------------------------------------ process models

class ProcessModel:
    """Interface for prediction models.

    ``predict(points_history, controls_history)`` receives the per-index
    sigma trajectories as an array of shape (T, N, d) (oldest first, last
    entry = current posterior sigma points) and the shared controls (T, du);
    it returns the N predicted points.  Memoryless models implement
    :meth:`step` and ignore everything but the last entry.
    """

    history_conditioned = False

    def step(self, points: np.ndarray, control: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, points_history: np.ndarray, controls_history: np.ndarray) -> np.ndarray:
        return self.step(points_history[-1], controls_history[-1])


class FunctionModel(ProcessModel):
    """Memoryless model from a plain ``f(points, control)`` callable."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def step(self, points, control):
        return self.fn(points, control)


class SigmaHistory:
    """Sliding window of posterior sigma point sets and the controls applied to them."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._points: deque = deque(maxlen=capacity)
        self._controls: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._points)

    def append(self, points: np.ndarray, control: np.ndarray) -> None:
        self._points.append(np.array(points, dtype=float))
        self._controls.append(np.array(control, dtype=float))

    @property
    def points(self) -> np.ndarray:
        """Shape (T, N, d)."""
        return np.stack(self._points)

    @property
    def controls(self) -> np.ndarray:
        return np.stack(self._controls)

    def per_index(self, n: int) -> np.ndarray:
        """Trajectory (T, d) of sigma point ``n``."""
        return np.stack([p[n] for p in self._points])

    def clear(self) -> None:
        self._points.clear()
        self._controls.clear()


def predict(belief: GaussianBelief, history: SigmaHistory, u, model: ProcessModel,
            Q) -> tuple[GaussianBelief, SigmaEnsemble]:
    """Prediction step; appends the posterior sigma points and ``u`` to ``history``."""
    ens = sigma_points(belief)
    history.append(ens.points, np.atleast_1d(np.asarray(u, dtype=float)))
    if model.history_conditioned:
        out = model.predict(history.points, history.controls)
    else:
        out = model.step(ens.points, history._controls[-1])
    out = np.asarray(out, dtype=float)
    if out.shape != ens.points.shape or not np.all(np.isfinite(out)):
        raise ModelFailure(f"process model returned bad output of shape {out.shape}")
    mean, cov, _ = _moments(out, ens.w_mu, ens.w_sigma)
    cov = cov + np.asarray(Q, dtype=float)
    return GaussianBelief(mean, cov), SigmaEnsemble(out, ens.w_mu, ens.w_sigma)


def update(predicted: GaussianBelief, predicted_ensemble: SigmaEnsemble | None, y,
           cfg=None, R=None, *, hfun: Callable | None = None,
           angle_mask=None) -> GaussianBelief:
    """Measurement update with a second unscented transform.

    Either pass a :class:`~fmukf.sensors.SensorConfig` as ``cfg`` (its ``h``,
    noise and angle channels are used) or an explicit ``hfun``/``R``.
    Sigma points are regenerated from ``predicted`` so the process-noise
    inflation is included; ``predicted_ensemble`` is accepted for interface
    symmetry but not reused.
    """
    if cfg is not None:
        from . import sensors

        if hfun is None:
            hfun = lambda pts: sensors.h(pts, cfg)  # noqa: E731
        if R is None:
            R = cfg.R
        if angle_mask is None:
            angle_mask = cfg.angle_mask
    if hfun is None or R is None:
        raise ValueError("need a sensor config or hfun and R")
    y = np.asarray(getattr(y, "values", y), dtype=float)
    ens = sigma_points(predicted)
    ys = np.asarray(hfun(ens.points), dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    if y.shape[-1] != ys.shape[-1]:
        raise ValueError(f"measurement has {y.shape[-1]} channels, model produces {ys.shape[-1]}")
    y_mean, Pyy, y_resid = _moments(ys, ens.w_mu, ens.w_sigma, angle_mask)
    S = Pyy + np.atleast_2d(R)
    x_resid = ens.points - predicted.mean
    Pxy = (x_resid * ens.w_sigma[:, None]).T @ y_resid
    innov = y - y_mean
    if angle_mask is not None and np.any(angle_mask):
        innov[angle_mask] = wrap_angle(innov[angle_mask])
    try:
        K = np.linalg.solve(S.T, Pxy.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is singular") from exc
    if not np.all(np.isfinite(K)):
        raise SingularInnovation("non-finite Kalman gain")
    mean = predicted.mean + K @ innov
    cov = symmetrize(predicted.cov - K @ S @ K.T)
    robust_cholesky(cov)
    return GaussianBelief(mean, cov)


class UKF:
    """Stateful filter: belief plus sigma history.

    Step ``k`` consumes the control applied at ``k-1`` and the measurement at
    ``k``; the first step is a pure measurement update of the prior.
    """

    def __init__(self, model: ProcessModel, Q, *, sensor=None, R=None,
                 hfun: Callable | None = None, angle_mask=None,
                 capacity: int = DEFAULT_CAPACITY):
        self.model = model
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.sensor = sensor
        self.R = R
        self.hfun = hfun
        self.angle_mask = angle_mask
        self.history = SigmaHistory(capacity)
        self.belief: GaussianBelief | None = None

    def initialize(self, belief: GaussianBelief) -> None:
        self.belief = GaussianBelief(belief.mean.copy(), belief.cov.copy())
        self.history.clear()

    def _update(self, pred, ens, y):
        return update(pred, ens, y, self.sensor, self.R, hfun=self.hfun,
                      angle_mask=self.angle_mask)

    def first(self, y) -> GaussianBelief:
        self.belief = self._update(self.belief, None, y)
        return self.belief

    def step(self, u_prev, y) -> GaussianBelief:
        pred, ens = predict(self.belief, self.history, u_prev, self.model, self.Q)
        self.belief = self._update(pred, ens, y) if y is not None else pred
        return self.belief

    def run(self, prior: GaussianBelief, measurements, controls) -> tuple[np.ndarray, np.ndarray]:
        """Filter a whole sequence; returns (means (L, d), covs (L, d, d))."""
        self.initialize(prior)
        L = len(measurements)
        means = np.empty((L, prior.dim))
        covs = np.empty((L, prior.dim, prior.dim))
        b = self.first(measurements[0])
        means[0], covs[0] = b.mean, b.cov
        for k in range(1, L):
            b = self.step(controls[k - 1], measurements[k])
            means[k], covs[k] = b.mean, b.cov
        return means, covs
