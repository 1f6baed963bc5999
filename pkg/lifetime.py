"""
g2kit Lifetime Module
Pulse-train exponential model of a pulsed chronogram and its weighted
least-squares fit:

    f(tau) = a + b * sum_n (1 - delta_0n / c) * exp(-|tau - n*dt| / d)
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

import metrics
from correlator import Chronogram
from errors import DegenerateStatisticsError, LifetimeFitError

logger = logging.getLogger('g2kit.lifetime')

PathLike = Union[str, Path]

# e^-40 keeps omitted tail terms far below 1e-12 of the retained sum
_TAIL_LIFETIMES = 40
_G_MIN = 1e-6
_MAX_NFEV = 500


@dataclass(frozen=True)
class LifetimeModel:
    """
    a: background coincidences per bin; b: peak normalisation (counts);
    c: number of excited emitters (>= 1); d: lifetime incl. jitter (ns);
    delta_t: excitation period (ns); n_range: pulse-sum truncation
    """
    a: float
    b: float
    c: float
    d: float
    delta_t: float
    n_range: int = 0

    def __post_init__(self):
        if not self.d > 0:
            raise LifetimeFitError(f"lifetime must be positive, got {self.d}")
        if not self.delta_t > 0:
            raise LifetimeFitError(f"period must be positive, got {self.delta_t}")
        if not self.c >= 1:
            raise LifetimeFitError(f"emitter parameter c must be >= 1, got {self.c}")

    def terms_for(self, tau: np.ndarray) -> int:
        """Smallest truncation bound valid for the given delays"""
        span = float(np.max(np.abs(tau))) if np.size(tau) else 0.0
        needed = math.ceil(span / self.delta_t) + math.ceil(_TAIL_LIFETIMES * self.d / self.delta_t)
        return max(self.n_range, needed)

    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])


def _components(m: LifetimeModel, tau: np.ndarray):
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    n = np.arange(-m.terms_for(tau), m.terms_for(tau) + 1)
    dist = np.abs(tau[:, None] - n[None, :] * m.delta_t)
    decay = np.exp(-dist / m.d)
    total = decay.sum(axis=1)
    first_moment = (dist * decay).sum(axis=1) / m.d ** 2
    centre = np.exp(-np.abs(tau) / m.d)
    return tau, total, first_moment, centre


def model_eval(m: LifetimeModel, tau: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Expected counts per bin at delays tau (ns)"""
    scalar = np.ndim(tau) == 0
    _, total, _, centre = _components(m, tau)
    values = m.a + m.b * (total - centre / m.c)
    return float(values[0]) if scalar else values


def model_gradient(m: LifetimeModel, tau: Union[float, np.ndarray]) -> np.ndarray:
    """Partial derivatives (df/da, df/db, df/dc, df/dd), shape (len(tau), 4)"""
    tau, total, first_moment, centre = _components(m, tau)
    g = 1.0 / m.c
    d_a = np.ones_like(tau)
    d_b = total - g * centre
    d_c = m.b * centre / m.c ** 2
    d_d = m.b * (first_moment - g * np.abs(tau) / m.d ** 2 * centre)
    return np.column_stack([d_a, d_b, d_c, d_d])


def peak_tail(d: float, delta_t: float) -> float:
    """sum over n != 0 of exp(-|n| dt / d), the side-peak tails at a peak centre"""
    r = math.exp(-delta_t / d)
    return 2 * r / (1 - r)


@dataclass
class LifetimeFit:
    model: LifetimeModel
    covariance: np.ndarray
    chi2_reduced: float
    n_iter: int
    converged: bool
    tau_ns: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    label: str = ''

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def lifetime_ns(self) -> float:
        return self.model.d

    def as_dict(self) -> Dict:
        return {
            'label': self.label,
            'a': self.model.a,
            'b': self.model.b,
            'c': self.model.c,
            'd': self.model.d,
            'delta_t': self.model.delta_t,
            'stderr': dict(zip('abcd', self.stderr.tolist())),
            'cov': self.covariance.tolist(),
            'chi2_reduced': self.chi2_reduced,
            'n_iter': self.n_iter,
            'converged': self.converged,
            'weighting': 'poisson, 1/max(N,1)',
            'optimizer': 'trust-region reflective least squares, gtol 1e-8, cap 500 evaluations',
        }


def _window_mean(tau: np.ndarray, y: np.ndarray, centre: float, half_width: float) -> float:
    sel = np.abs(tau - centre) <= half_width
    return float(y[sel].mean()) if sel.any() else float('nan')


def _flank_lifetime(tau, y, a0, start, stop):
    sel = (tau >= start) & (tau <= stop) & (y - a0 > 0)
    if sel.sum() < 3:
        return None
    excess = y[sel] - a0
    slope, _ = np.polyfit(tau[sel], np.log(excess), 1, w=np.sqrt(excess))
    return -1.0 / slope if slope < 0 else None


def initial_guess(ch: Chronogram, mask: Optional[np.ndarray] = None) -> LifetimeModel:
    """
    Deterministic starting point: a from the median of the background
    interval around -T/2, d from a log-linear fit of the +T peak's right
    flank, b from the +T peak height and c from the central peak height.
    """
    tau = ch.centers_ns()
    y = ch.bins.astype(float)
    if mask is not None:
        tau, y = tau[mask], y[mask]
    dt = ch.period_ns()
    bw = ch.bin_width_ns
    if tau.size == 0 or tau.min() > -dt / 2 or tau.max() < dt + bw:
        raise LifetimeFitError("chronogram must span the background interval and the +T peak",
                               diagnostics={'range_ns': (float(ch.min_delay * ch.tick_ns),
                                                         float(ch.max_delay * ch.tick_ns))})

    background = np.abs(tau + dt / 2) <= dt / 8
    a0 = float(np.median(y[background])) if background.any() else float(y.min())

    half = 1.5 * bw
    h1 = _window_mean(tau, y, dt, half)
    b0 = h1 - a0
    if not b0 > 0:
        raise LifetimeFitError("no side peak above background", diagnostics={'a0': a0, 'h1': h1})

    d0 = dt / 25
    for _ in range(2):
        estimate = _flank_lifetime(tau, y, a0, dt + d0, dt + 3 * d0)
        if estimate is None:
            break
        d0 = float(np.clip(estimate, bw, dt / 4))

    h0 = _window_mean(tau, y, 0.0, half)
    tail = peak_tail(d0, dt)
    g0 = 1 - (h0 - a0 - b0 * tail) / b0 if np.isfinite(h0) else 1.0
    c0 = 1.0 / g0 if g0 > 0.01 else 100.0
    c0 = float(np.clip(c0, 1.0, 100.0))
    return LifetimeModel(a=max(a0, 0.0), b=b0, c=c0, d=d0, delta_t=dt)


def fit_lifetime(ch: Chronogram, init: Optional[LifetimeModel] = None,
                 mask: Optional[np.ndarray] = None, label: str = '') -> LifetimeFit:
    """
    Poisson-weighted least-squares fit of the pulse-train model.

    The period is fixed from the chronogram's excitation rate. Internally the
    fit runs on g = 1/c in [1e-6, 1]; covariance is (J^T J)^-1 transformed
    back to c.

    Args:
        ch: chronogram spanning the background interval and the +T peak
        init: starting model (default: initial_guess)
        mask: boolean array of bins to include

    Returns:
        LifetimeFit with model, covariance (a, b, c, d) and reduced chi^2
    """
    tau_all = ch.centers_ns()
    y_all = ch.bins.astype(float)
    mask = np.ones(ch.n_bins, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    tau, y = tau_all[mask], y_all[mask]
    if tau.size <= 4:
        raise LifetimeFitError("not enough bins to fit", diagnostics={'n_bins': int(tau.size)})

    start = init if init is not None else initial_guess(ch, mask)
    dt = ch.period_ns()
    n_range = start.terms_for(tau_all)
    weights = 1.0 / np.sqrt(np.maximum(y, 1.0))

    def to_model(p: np.ndarray) -> LifetimeModel:
        return LifetimeModel(a=p[0], b=p[1], c=1.0 / p[2], d=p[3], delta_t=dt, n_range=n_range)

    def residuals(p):
        return (model_eval(to_model(p), tau) - y) * weights

    def jacobian(p):
        m = to_model(p)
        grad = model_gradient(m, tau)
        # chain rule from c to g = 1/c
        grad[:, 2] *= -m.c ** 2
        return grad * weights[:, None]

    lower = np.array([0.0, 0.0, _G_MIN, 1e-3])
    upper = np.array([np.inf, np.inf, 1.0, np.inf])
    x0 = np.clip([start.a, start.b, 1.0 / start.c, start.d], lower, upper)

    try:
        result = least_squares(residuals, x0, jac=jacobian, bounds=(lower, upper), method='trf',
                               x_scale='jac', ftol=1e-12, xtol=1e-12, gtol=1e-8,
                               max_nfev=_MAX_NFEV)
    except (ValueError, np.linalg.LinAlgError) as e:
        metrics.FITS.labels(status='failed').inc()
        raise LifetimeFitError(f"lifetime fit failed: {e}", diagnostics={'x0': x0.tolist()}) from e

    diagnostics = {
        'status': int(result.status),
        'message': result.message,
        'nfev': int(result.nfev),
        'x': result.x.tolist(),
        'cost': float(result.cost),
    }
    if result.status <= 0:
        metrics.FITS.labels(status='failed').inc()
        raise LifetimeFitError(f"lifetime fit did not converge: {result.message}", diagnostics)

    jtj = result.jac.T @ result.jac
    if not np.all(np.isfinite(jtj)) or np.linalg.cond(jtj) > 1e15:
        metrics.FITS.labels(status='failed').inc()
        raise LifetimeFitError("singular Jacobian at the fitted parameters", diagnostics)
    cov_g = np.linalg.inv(jtj)
    a, b, g, d = result.x
    transform = np.diag([1.0, 1.0, -1.0 / g ** 2, 1.0])
    covariance = transform @ cov_g @ transform.T

    dof = max(tau.size - 4, 1)
    chi2_reduced = float(2 * result.cost / dof)
    model = LifetimeModel(a=float(a), b=float(b), c=float(1.0 / g), d=float(d), delta_t=dt,
                          n_range=n_range)
    metrics.FITS.labels(status='converged').inc()
    logger.info(f"Lifetime fit{' ' + label if label else ''}: d={model.d:.3f} ns, c={model.c:.3f}, "
                f"chi2_red={chi2_reduced:.3f}, {result.nfev} evaluations")
    return LifetimeFit(model=model, covariance=covariance, chi2_reduced=chi2_reduced,
                       n_iter=int(result.nfev), converged=True, tau_ns=tau_all, counts=y_all,
                       mask=mask, label=label)


@dataclass(frozen=True)
class LifetimeSummary:
    mean: float
    standard_error: float
    n: int


def _summary(values: Sequence[float]) -> LifetimeSummary:
    if len(values) < 2:
        raise DegenerateStatisticsError(f"at least two fits needed, got {len(values)}")
    arr = np.asarray(values, dtype=float)
    return LifetimeSummary(mean=float(arr.mean()),
                           standard_error=float(arr.std(ddof=1) / math.sqrt(arr.size)), n=int(arr.size))


def aggregate_lifetime(fits: Sequence[Union[LifetimeFit, float]],
                       groups: Optional[Sequence[str]] = None
                       ) -> Union[LifetimeSummary, Dict[str, LifetimeSummary]]:
    """
    Unweighted mean lifetime and standard error of the mean across fits.

    With groups (one label per fit) the summary is computed per label.
    """
    values = [f.lifetime_ns if isinstance(f, LifetimeFit) else float(f) for f in fits]
    if groups is None:
        return _summary(values)
    if len(groups) != len(values):
        raise DegenerateStatisticsError("one group label per fit required")
    grouped: Dict[str, List[float]] = {}
    for label, value in zip(groups, values):
        grouped.setdefault(label, []).append(value)
    return {label: _summary(v) for label, v in grouped.items()}


def residual_table(fit: LifetimeFit) -> pd.DataFrame:
    model = model_eval(fit.model, fit.tau_ns)
    return pd.DataFrame({
        'tau_ns': fit.tau_ns,
        'data': fit.counts,
        'model': model,
        'residual': fit.counts - model,
        'included': fit.mask,
    })


def export_fit(fit: LifetimeFit, json_path: PathLike, csv_path: Optional[PathLike] = None) -> None:
    Path(json_path).write_text(json.dumps(fit.as_dict(), indent=2) + '\n')
    if csv_path is not None:
        residual_table(fit).to_csv(csv_path, index=False)
    logger.info(f"Fit report written to {json_path}")


def fit_many(chronograms: Sequence[Chronogram],
             labels: Optional[Sequence[str]] = None) -> List[LifetimeFit]:
    """Fit each chronogram independently, in order"""
    labels = labels or [''] * len(chronograms)
    return [fit_lifetime(ch, label=label) for ch, label in zip(chronograms, labels)]
