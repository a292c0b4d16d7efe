"""Per-axis ARMA fitting and recursive multi-step pose forecasting.

Each of the seven pose axes is modeled by an independent scalar ARMA(p, q)
fitted over a sliding window with the two-stage Hannan-Rissanen scheme: a
long autoregression supplies innovation estimates, then levels, AR and MA
coefficients are estimated jointly by least squares. Multi-step forecasts
recurse the one-step model with future innovations set to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import POSE_DIM, Pose, canonicalize_quat_block
from .errors import HorizonOutOfRange, NotEnoughData, NumericalError

DEFAULT_P = 4
DEFAULT_Q = 1
DEFAULT_WINDOW_MS = 4000.0
DEFAULT_REFIT_MS = 250.0
DEFAULT_H_MAX_MS = 1000.0


class HistoryBuffer:
    """Ring buffer of timestamped poses spanning at most window_ms."""

    def __init__(self, window_ms: float = DEFAULT_WINDOW_MS, rate_hz: float = 120.0):
        self.window_ms = float(window_ms)
        self.rate_hz = float(rate_hz)
        cap = int(window_ms * rate_hz / 1000.0) + 4
        self._t_us = np.zeros(cap, dtype=np.int64)
        self._vals = np.zeros((cap, POSE_DIM))
        self._n = 0
        self._cap = cap

    def __len__(self) -> int:
        return self._n

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.rate_hz

    def push(self, t_us: int, pose7: np.ndarray) -> None:
        if self._n and t_us <= self._t_us[self._n - 1]:
            raise ValueError("history timestamps must be strictly increasing")
        if self._n == self._cap:
            self._t_us[:-1] = self._t_us[1:]
            self._vals[:-1] = self._vals[1:]
            self._n -= 1
        self._t_us[self._n] = t_us
        self._vals[self._n] = pose7
        self._n += 1
        # also drop samples older than the window span
        lo = t_us - int(self.window_ms * 1000)
        first = int(np.searchsorted(self._t_us[: self._n], lo, side="left"))
        if first > 0:
            self._t_us[: self._n - first] = self._t_us[first : self._n]
            self._vals[: self._n - first] = self._vals[first : self._n]
            self._n -= first

    def values(self) -> np.ndarray:
        """(n, 7) window contents, oldest first."""
        return self._vals[: self._n]

    def times_us(self) -> np.ndarray:
        return self._t_us[: self._n]

    def latest(self) -> np.ndarray:
        if self._n == 0:
            raise NotEnoughData("history buffer is empty")
        return self._vals[self._n - 1].copy()

    def tail_matrix(self, p: int) -> np.ndarray:
        """(7, p) newest-first value lags for the forecast recursion."""
        if self._n < p:
            raise NotEnoughData(f"need {p} samples, have {self._n}")
        return self._vals[self._n - p : self._n][::-1].T.copy()


@dataclass
class ArmaModel:
    """Fitted per-axis ARMA coefficients plus innovation state."""

    c: np.ndarray  # (7,)
    phi: np.ndarray  # (7, p)
    theta: np.ndarray  # (7, q)
    resid: np.ndarray  # (7, q) newest-first innovation ring
    p: int
    q: int
    period_ms: float
    h_max_ms: float = DEFAULT_H_MAX_MS
    stationary: np.ndarray | None = None  # (7,) bool
    resid_var: np.ndarray | None = None  # (7,) in-sample one-step variance
    naive_var: np.ndarray | None = None  # (7,) last-value predictor variance

    def stationary_flags(self) -> np.ndarray:
        """Per-axis stationarity: AR roots outside the unit circle (tol 1e-6).

        Computed lazily; marginal trend-following fits on smooth motion are
        legitimately non-stationary and only flagged, never rejected.
        """
        if self.stationary is None:
            self.stationary = _stationary_flags(self.phi)
        return self.stationary

    def one_step(self, tail: np.ndarray) -> np.ndarray:
        """One-step-ahead prediction from (7, p) newest-first lags."""
        pred = self.c + np.einsum("ij,ij->i", self.phi, tail)
        if self.q:
            pred = pred + np.einsum("ij,ij->i", self.theta, self.resid)
        return pred

    def observe(self, tail_before: np.ndarray, y_new: np.ndarray) -> None:
        """Advance the innovation ring with a newly observed sample."""
        if self.q == 0:
            return
        eps = y_new - self.one_step(tail_before)
        self.resid[:, 1:] = self.resid[:, :-1]
        self.resid[:, 0] = eps

    def horizon_steps(self, horizon_ms: float) -> int:
        if horizon_ms < 0 or horizon_ms > self.h_max_ms:
            raise HorizonOutOfRange(
                f"horizon {horizon_ms} ms outside [0, {self.h_max_ms}]"
            )
        return int(round(horizon_ms / self.period_ms))


def _ar_longfit(y: np.ndarray, order: int) -> np.ndarray:
    """Residuals of an OLS AR(order) fit with intercept; len = len(y) - order."""
    n = len(y)
    X = np.ones((n - order, order + 1))
    for i in range(order):
        X[:, i + 1] = y[order - 1 - i : n - 1 - i]
    beta, *_ = np.linalg.lstsq(X, y[order:], rcond=None)
    return y[order:] - X @ beta


def _clamp_explosive(phi_a: np.ndarray, rho: float = 1.0) -> np.ndarray:
    """Project AR coefficients so the recursion modes stay within radius rho.

    Eigenvalues of the companion matrix with modulus > rho are rescaled onto
    that radius. Least squares on near-collinear smooth signals easily lands
    a root slightly outside the unit disk, which a 120-step recursion
    amplifies beyond any use; rho slightly below 1 additionally damps the
    ringing modes picked up when the window straddles a velocity jump.
    """
    p = len(phi_a)
    if p == 0 or not np.any(phi_a):
        return phi_a
    comp = np.zeros((p, p))
    comp[0] = phi_a
    if p > 1:
        comp[np.arange(1, p), np.arange(0, p - 1)] = 1.0
    lam = np.linalg.eigvals(comp)
    mod = np.abs(lam)
    if np.max(mod) <= rho + 1e-12:
        return phi_a
    lam = np.where(mod > rho, lam * (rho / np.maximum(mod, 1e-300)), lam)
    poly = np.poly(lam)
    return -np.real(poly[1:])


def _stationary_flags(phi: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    flags = np.ones(phi.shape[0], dtype=bool)
    for a in range(phi.shape[0]):
        coeffs = np.concatenate([[1.0], -phi[a]])
        # strip trailing ~zero coefficients so polyroots sees the true degree
        nz = np.nonzero(np.abs(coeffs) > 1e-14)[0]
        if len(nz) <= 1:
            continue
        roots = np.polynomial.polynomial.polyroots(coeffs[: nz[-1] + 1])
        if len(roots) and np.min(np.abs(roots)) < 1.0 - tol:
            flags[a] = False
    return flags


def fit(
    history: HistoryBuffer,
    p: int = DEFAULT_P,
    q: int = DEFAULT_Q,
    h_max_ms: float = DEFAULT_H_MAX_MS,
    difference: bool = False,
) -> ArmaModel:
    """Fit per-axis ARMA(p, q) on the history window (Hannan-Rissanen).

    Requires at least 10*(p+q+1) samples. A degenerate MA regression is
    retried with q-1 until q reaches 0; a fit is accepted only when its
    in-sample one-step residual variance does not exceed the naive
    last-value predictor's on the same window.

    With difference=True the ARMA is estimated on first differences and
    the coefficients are expanded back to an equivalent level-form model
    of AR order p+1 carrying an exact unit root. Level-form least squares
    cannot distinguish a root at 1-1e-4 from one at 1+1e-4 on a short
    window of smooth motion, yet at a 120-step horizon the former teleports
    the forecast toward an arbitrary implied mean and the latter explodes;
    pinning the root keeps multi-step forecasts trend-following. This is
    the estimator the live pipeline uses.
    """
    Y = history.values()
    n = len(Y)
    if n < 10 * (p + q + 1):
        raise NotEnoughData(f"need {10 * (p + q + 1)} samples, have {n}")

    series = np.diff(Y, axis=0) if difference else Y
    naive_var = np.var(np.diff(series, axis=0), axis=0)
    last_err: Exception | None = None
    for q_try in range(q, -1, -1):
        try:
            model = _fit_orders(
                series,
                p,
                q_try,
                history.period_ms,
                h_max_ms,
                naive_var,
                pin_mean=difference,
            )
        except NumericalError as exc:
            last_err = exc
            continue
        if difference:
            model = _integrate_model(model)
        return model
    raise NumericalError(f"ARMA fit failed at q=0: {last_err}")


def _integrate_model(m: ArmaModel) -> ArmaModel:
    """Expand a difference-form ARMA(p, q) to level form with a unit root.

    y_t = y_{t-1} + v_t with v the differenced series gives level AR order
    p+1: a_1 = 1 + f_1, a_i = f_i - f_{i-1}, a_{p+1} = -f_p. Innovations
    and MA terms are unchanged.
    """
    n_axes, p = m.phi.shape
    phi = np.zeros((n_axes, p + 1))
    phi[:, 0] = 1.0 + m.phi[:, 0] if p > 0 else 1.0
    for i in range(1, p):
        phi[:, i] = m.phi[:, i] - m.phi[:, i - 1]
    if p > 0:
        phi[:, p] = -m.phi[:, p - 1]
    return ArmaModel(
        c=m.c,
        phi=phi,
        theta=m.theta,
        resid=m.resid,
        p=p + 1,
        q=m.q,
        period_ms=m.period_ms,
        h_max_ms=m.h_max_ms,
        resid_var=m.resid_var,
        naive_var=m.naive_var,
    )


def _fit_orders(
    Y: np.ndarray,
    p: int,
    q: int,
    period_ms: float,
    h_max_ms: float,
    naive_var: np.ndarray,
    pin_mean: bool = False,
) -> ArmaModel:
    n, n_axes = Y.shape
    if q > 0:
        L = min(max(2 * (p + q), 8), (n - 1) // 4)
        start = max(p, L + q)
    else:
        L = 0
        start = p
    rows = n - start
    rho = 0.995 if pin_mean else 1.0
    c = np.zeros(n_axes)
    phi = np.zeros((n_axes, p))
    theta = np.zeros((n_axes, q))
    resid = np.zeros((n_axes, q))
    resid_var = np.zeros(n_axes)

    for a in range(n_axes):
        y = Y[:, a]
        if pin_mean:
            # regress around the window mean and pin the intercept so the
            # implied long-run level is exactly that mean; a free intercept
            # next to near-unit AR roots makes c/(1-sum(phi)) arbitrary
            mean = float(np.mean(y))
            yc = y - mean
            X = np.zeros((rows, p + q))
            col = 0
        else:
            mean = 0.0
            yc = y
            X = np.ones((rows, 1 + p + q))
            col = 1
        for i in range(p):
            X[:, col + i] = yc[start - 1 - i : n - 1 - i]
        if q > 0:
            eps_long = _ar_longfit(y, L)  # eps_long[k] is innovation at t=L+k
            for j in range(q):
                lo = start - 1 - j - L
                X[:, col + p + j] = eps_long[lo : lo + rows]
        beta, _, _, _ = np.linalg.lstsq(X, yc[start:], rcond=None)
        if not np.all(np.isfinite(beta)):
            raise NumericalError(f"non-finite ARMA coefficients on axis {a}")
        beta[col : col + p] = _clamp_explosive(beta[col : col + p], rho)
        # bound the MA impulse response the same way: enormous theta on a
        # near-collinear innovation proxy generalizes terribly out of sample
        beta[col + p :] = _clamp_explosive(beta[col + p :], rho)
        res = yc[start:] - X @ beta
        rv = float(np.var(res))
        if rv > float(naive_var[a]) * (1.0 + 1e-9) + 1e-18:
            raise NumericalError(
                f"axis {a}: fit variance {rv:.3e} exceeds naive {naive_var[a]:.3e}"
            )
        phi[a] = beta[col : col + p]
        theta[a] = beta[col + p :]
        c[a] = mean * (1.0 - float(np.sum(phi[a]))) if pin_mean else beta[0]
        resid_var[a] = rv
        if q > 0:
            # seed the innovation ring with the newest in-sample residuals
            resid[a] = res[-1 : -q - 1 : -1]

    return ArmaModel(
        c=c,
        phi=phi,
        theta=theta,
        resid=resid,
        p=p,
        q=q,
        period_ms=period_ms,
        h_max_ms=h_max_ms,
        resid_var=resid_var,
        naive_var=naive_var.copy(),
    )


def forecast_multi(
    model: ArmaModel, history: HistoryBuffer, horizons_ms
) -> np.ndarray:
    """(len(horizons), 7) forecasts; horizon 0 returns the latest pose.

    All requested horizons are produced by one recursion pass. Quaternion
    blocks are renormalized and sign-canonicalized.
    """
    steps = np.array([model.horizon_steps(h) for h in horizons_ms], dtype=np.int64)
    out = np.tile(history.latest(), (len(steps), 1))
    pos = np.nonzero(steps > 0)[0]
    if len(pos):
        order = pos[np.argsort(steps[pos], kind="stable")]
        uniq_steps, inv = np.unique(steps[order], return_inverse=True)
        buf = np.empty((len(uniq_steps), POSE_DIM))
        kernels.arma_forecast(
            history.tail_matrix(model.p),
            model.c,
            model.phi,
            model.theta,
            model.resid.copy(),
            uniq_steps.astype(np.int64),
            buf,
        )
        for k, row in enumerate(order):
            out[row] = buf[inv[k]]
    for row in range(len(out)):
        canonicalize_quat_block(out[row])
    return out


def predict_recursive(
    model: ArmaModel, history: HistoryBuffer, horizon_ms: float
) -> Pose:
    """Recursive multi-step forecast as a Pose."""
    return Pose.from_array(forecast_multi(model, history, [horizon_ms])[0])


def dual_predict(
    history: HistoryBuffer,
    h_r_ms: float,
    h_v_ms: float,
    p: int = DEFAULT_P,
    q: int = DEFAULT_Q,
    h_max_ms: float = DEFAULT_H_MAX_MS,
    model: ArmaModel | None = None,
) -> tuple[Pose, Pose]:
    """Forecast the control and visual horizons from a single fitted model."""
    if model is None:
        model = fit(history, p=p, q=q, h_max_ms=h_max_ms)
    both = forecast_multi(model, history, [h_r_ms, h_v_ms])
    return Pose.from_array(both[0]), Pose.from_array(both[1])


class OnlinePredictor:
    """Pipeline-facing wrapper: sliding refits plus per-sample residual updates.

    Until the first successful fit the predictor degrades to returning the
    latest observed pose for every horizon (equivalent to no prediction).
    """

    def __init__(
        self,
        rate_hz: float = 120.0,
        window_ms: float = DEFAULT_WINDOW_MS,
        refit_ms: float = DEFAULT_REFIT_MS,
        p: int = DEFAULT_P,
        q: int = DEFAULT_Q,
        h_max_ms: float = DEFAULT_H_MAX_MS,
        difference: bool = True,
    ):
        self.history = HistoryBuffer(window_ms=window_ms, rate_hz=rate_hz)
        self.p = p
        self.q = q
        self.h_max_ms = h_max_ms
        self.difference = difference
        self.refit_every = max(1, int(round(refit_ms * rate_hz / 1000.0)))
        self.model: ArmaModel | None = None
        self._since_fit = 0
        self._min_fit = 10 * (p + q + 1)

    def on_sample(self, t_us: int, pose7: np.ndarray) -> None:
        tail_before = None
        if self.model is not None and len(self.history) >= self.model.p:
            tail_before = self.history.tail_matrix(self.model.p)
        self.history.push(t_us, pose7)
        if self.model is not None and tail_before is not None:
            self.model.observe(tail_before, pose7)
        self._since_fit += 1
        if len(self.history) >= self._min_fit and (
            self.model is None or self._since_fit >= self.refit_every
        ):
            self.model = fit(
                self.history,
                p=self.p,
                q=self.q,
                h_max_ms=self.h_max_ms,
                difference=self.difference,
            )
            self._since_fit = 0

    def predict_pair(self, h_r_ms: float, h_v_ms: float) -> np.ndarray:
        """(2, 7) array: forecasts at the control and visual horizons."""
        if self.model is None:
            latest = self.history.latest()
            return np.stack([latest, latest])
        return forecast_multi(self.model, self.history, [h_r_ms, h_v_ms])
