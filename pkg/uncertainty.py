"""
g2kit Uncertainty Module
Run-to-run statistics of windowed counts propagated to a combined standard
uncertainty on alpha with correlated inputs, budget tables and the
normalized-error compatibility check.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import (
    CoverageFactorMismatchError,
    DegenerateStatisticsError,
    InconsistentCorrelationError,
    UndefinedCorrelationError,
    UsageError,
)
from estimator import AlphaEstimate, CountTriple, WindowSpec, compute_alpha

logger = logging.getLogger('g2kit.uncertainty')

PathLike = Union[str, Path]

INPUT_NAMES = ('N_C', 'N_xi', 'N_bg')
RADICAND_TOLERANCE = 1e-12


@dataclass(frozen=True)
class RunSeries:
    """Windowed counts of repeated runs sharing one window geometry"""
    triples: Tuple[CountTriple, ...]
    window: Optional[WindowSpec] = None
    label: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'triples', tuple(CountTriple(*t) for t in self.triples))
        if not self.triples:
            raise UsageError("run series is empty")

    @classmethod
    def from_estimates(cls, estimates: Sequence[AlphaEstimate], label: str = '') -> 'RunSeries':
        windows = {e.window for e in estimates if e.window is not None}
        if len(windows) > 1:
            raise UsageError("runs were counted with different window geometries")
        return cls(tuple(e.counts for e in estimates), windows.pop() if windows else None, label)

    def __len__(self) -> int:
        return len(self.triples)

    def matrix(self) -> np.ndarray:
        """runs x 3 array of (N_C, N_xi, N_bg)"""
        return np.array([[t.n_c, t.n_xi, t.n_bg] for t in self.triples], dtype=float)

    def alphas(self) -> List[float]:
        return [compute_alpha(t).alpha for t in self.triples]


def _require_runs(series: RunSeries) -> None:
    if len(series) < 2:
        raise DegenerateStatisticsError(f"at least two runs needed, got {len(series)}")


def mean_counts(series: RunSeries) -> CountTriple:
    m = series.matrix().mean(axis=0)
    return CountTriple(float(m[0]), float(m[1]), float(m[2]), source=series.label)


def u_counts(series: RunSeries) -> Tuple[float, float, float]:
    """Sample standard deviation across runs of each count"""
    _require_runs(series)
    s = series.matrix().std(axis=0, ddof=1)
    return float(s[0]), float(s[1]), float(s[2])


def sensitivities(counts: CountTriple) -> Tuple[float, float, float]:
    """Partial derivatives of alpha w.r.t. (N_C, N_xi, N_bg)"""
    denominator = counts.n_xi - counts.n_bg
    if denominator <= 0:
        raise DegenerateStatisticsError(
            f"accidental peak ({counts.n_xi}) not above background ({counts.n_bg})")
    c_c = 1.0 / denominator
    c_xi = -(counts.n_c - counts.n_bg) / denominator ** 2
    c_bg = -c_c - c_xi
    return c_c, c_xi, c_bg


def correlation_matrix(series: RunSeries) -> np.ndarray:
    """Sample correlation coefficients of the three counts across runs"""
    _require_runs(series)
    data = series.matrix()
    std = data.std(axis=0, ddof=1)
    if np.any(std == 0):
        flat = [INPUT_NAMES[i] for i in np.flatnonzero(std == 0)]
        raise UndefinedCorrelationError(f"zero variance across runs for {', '.join(flat)}")
    cov = np.cov(data, rowvar=False, ddof=1)
    rho = np.clip(cov / np.outer(std, std), -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def _check_rho(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (3, 3):
        raise InconsistentCorrelationError(f"correlation matrix must be 3x3, got {rho.shape}")
    if not np.allclose(rho, rho.T) or not np.allclose(np.diag(rho), 1.0) \
            or np.any(np.abs(rho) > 1.0 + 1e-12):
        raise InconsistentCorrelationError("correlation matrix must be symmetric with unit "
                                           "diagonal and entries in [-1, 1]")
    return rho


def propagate(contributions: Sequence[float], rho: np.ndarray) -> float:
    """
    sqrt(v . rho . v) for contributions v_x = c_x u_x.

    A radicand below zero by more than a relative 1e-12 means the
    correlations cannot belong to these inputs; smaller round-off is clamped.
    """
    rho = _check_rho(rho)
    contributions = np.asarray(contributions, dtype=float)
    variance = float(contributions @ rho @ contributions)
    scale = float(np.sum(contributions ** 2))
    if variance < 0:
        if variance < -RADICAND_TOLERANCE * max(scale, np.finfo(float).tiny):
            raise InconsistentCorrelationError(
                f"negative variance {variance:.3g}; correlations inconsistent with the inputs")
        variance = 0.0
    return math.sqrt(variance)


def combined_uncertainty(counts: CountTriple, u: Sequence[float], rho: np.ndarray) -> float:
    """
    Combined standard uncertainty (k=1) of alpha with correlated inputs.

    u_c^2 = sum_x (c_x u_x)^2 + 2 sum_{x<y} rho_xy c_x u_x c_y u_y
    """
    return propagate(np.asarray(sensitivities(counts)) * np.asarray(u, dtype=float), rho)


def poisson_uncertainty(counts: CountTriple) -> float:
    """u(alpha) for a single chronogram, u(N) = sqrt(N) and uncorrelated inputs"""
    u = tuple(math.sqrt(max(n, 0)) for n in (counts.n_c, counts.n_xi, counts.n_bg))
    return combined_uncertainty(counts, u, np.eye(3))


@dataclass(frozen=True)
class AlphaBudget:
    """
    Uncertainty budget of alpha. Input uncertainties and u_combined are
    stored at k=1; U = k * u_combined.
    """
    alpha: float
    u_combined: float
    k: float = 2.0
    mean_counts: Optional[CountTriple] = None
    u_counts: Optional[Tuple[float, float, float]] = None
    sensitivities: Optional[Tuple[float, float, float]] = None
    correlations: Optional[Tuple[Tuple[float, ...], ...]] = None
    n_runs: int = 0
    alpha_mean_runs: Optional[float] = None
    label: str = ''
    notes: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def expanded(self) -> float:
        return self.k * self.u_combined

    def contributions(self) -> Optional[Tuple[float, float, float]]:
        if self.sensitivities is None or self.u_counts is None:
            return None
        return tuple(c * u for c, u in zip(self.sensitivities, self.u_counts))

    def rows(self) -> List[Dict[str, Any]]:
        """Table rows (quantity, value, standard uncertainty, sensitivity, contribution)"""
        if self.mean_counts is None:
            return []
        values = (self.mean_counts.n_c, self.mean_counts.n_xi, self.mean_counts.n_bg)
        return [
            {'quantity': name, 'value': v, 'u': u, 'sensitivity': c, 'contribution': c * u}
            for name, v, u, c in zip(INPUT_NAMES, values, self.u_counts, self.sensitivities)
        ]


def budget_report(series: RunSeries, k: float = 2.0) -> AlphaBudget:
    """
    Uncertainty budget of a run series.

    alpha is evaluated at the mean counts; the mean of the per-run alphas is
    kept alongside. Render with render_text or budget_to_json.
    """
    means = mean_counts(series)
    u = u_counts(series)
    rho = correlation_matrix(series)
    c = sensitivities(means)
    u_c = combined_uncertainty(means, u, rho)
    alpha = compute_alpha(means).alpha
    budget = AlphaBudget(
        alpha=alpha,
        u_combined=u_c,
        k=k,
        mean_counts=means,
        u_counts=u,
        sensitivities=c,
        correlations=tuple(tuple(float(x) for x in row) for row in rho),
        n_runs=len(series),
        alpha_mean_runs=float(np.mean(series.alphas())),
        label=series.label,
        notes=('input standard uncertainties are sample standard deviations across runs (k=1)',
               'alpha evaluated at the mean counts'),
    )
    logger.info(f"Budget {series.label or ''}: alpha={alpha:.4f}, U(k={k:g})={budget.expanded:.4f} "
                f"over {len(series)} runs")
    return budget


def budget_from_value(alpha: float, expanded: float, k: float = 2.0, label: str = '') -> AlphaBudget:
    """Budget holding only a reported value and its expanded uncertainty"""
    if expanded < 0 or k <= 0:
        raise UsageError(f"invalid uncertainty {expanded} at k={k}")
    return AlphaBudget(alpha=alpha, u_combined=expanded / k, k=k, label=label,
                       notes=('reported value; no input breakdown',))


def _fmt(value: float) -> str:
    if value == 0:
        return '0'
    magnitude = abs(value)
    if 1e-3 <= magnitude < 1e5:
        return f"{value:.4g}"
    return f"{value:.2e}"


def render_text(budget: AlphaBudget) -> str:
    """Aligned text table: Quantity, Value, Standard unc., Sens. coeff., Unc. contribution"""
    header = ('Quantity', 'Value', 'Standard unc.', 'Sens. coeff.', 'Unc. contribution')
    lines = []
    if budget.label:
        lines.append(f"Uncertainty budget: {budget.label}")
    rows = [header]
    for row in budget.rows():
        rows.append((row['quantity'], _fmt(row['value']), _fmt(row['u']),
                     _fmt(row['sensitivity']), _fmt(row['contribution'])))
    rows.append(('alpha', _fmt(budget.alpha), '', '', f"U = {_fmt(budget.expanded)} (k={budget.k:g})"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        lines.append('  '.join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    if budget.correlations is not None:
        lines.append('')
        lines.append('Correlation coefficients:')
        for name, row in zip(INPUT_NAMES, budget.correlations):
            lines.append(f"  {name:<5}" + ''.join(f"{x:>8.3f}" for x in row))
    if budget.n_runs:
        lines.append(f"Runs: {budget.n_runs}; mean of per-run alpha: {_fmt(budget.alpha_mean_runs)}")
    lines.append(f"u_c (k=1) = {_fmt(budget.u_combined)}")
    for note in budget.notes:
        lines.append(f"Note: {note}")
    return '\n'.join(lines) + '\n'


def budget_to_json(budget: AlphaBudget) -> Dict[str, Any]:
    inputs = []
    if budget.mean_counts is not None:
        values = (budget.mean_counts.n_c, budget.mean_counts.n_xi, budget.mean_counts.n_bg)
        inputs = [{'name': name, 'value': v, 'u': u, 'k': 1}
                  for name, v, u in zip(INPUT_NAMES, values, budget.u_counts)]
    return {
        'label': budget.label,
        'inputs': inputs,
        'sensitivities': list(budget.sensitivities) if budget.sensitivities else None,
        'rho': [list(row) for row in budget.correlations] if budget.correlations else None,
        'alpha': budget.alpha,
        'u_combined': budget.u_combined,
        'k': budget.k,
        'U': budget.expanded,
        'n_runs': budget.n_runs,
        'alpha_mean_runs': budget.alpha_mean_runs,
        'notes': list(budget.notes),
    }


def budget_from_json(data: Dict[str, Any]) -> AlphaBudget:
    try:
        inputs = data.get('inputs') or []
        k = float(data['k'])
        if 'u_combined' in data:
            u_c = float(data['u_combined'])
        else:
            u_c = float(data['U']) / k
        means = u = None
        if inputs:
            by_name = {i['name']: i for i in inputs}
            values = [by_name[name] for name in INPUT_NAMES]
            means = CountTriple(*(float(i['value']) for i in values), source=data.get('label', ''))
            u = tuple(float(i['u']) / float(i.get('k', 1)) for i in values)
        rho = data.get('rho')
        sens = data.get('sensitivities')
        return AlphaBudget(
            alpha=float(data['alpha']),
            u_combined=u_c,
            k=k,
            mean_counts=means,
            u_counts=u,
            sensitivities=tuple(sens) if sens else None,
            correlations=tuple(tuple(row) for row in rho) if rho else None,
            n_runs=int(data.get('n_runs', 0)),
            alpha_mean_runs=data.get('alpha_mean_runs'),
            label=data.get('label', ''),
            notes=tuple(data.get('notes', ())),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"malformed budget JSON: {e}") from e


def save_budget(budget: AlphaBudget, path: PathLike) -> None:
    Path(path).write_text(json.dumps(budget_to_json(budget), indent=2) + '\n')


def load_budget(path: PathLike) -> AlphaBudget:
    return budget_from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ComparisonResult:
    labels: Tuple[str, str]
    alphas: Tuple[Tuple[float, float], Tuple[float, float]]
    k: float
    compatible: bool
    normalized_error: float

    def as_dict(self) -> Dict[str, Any]:
        return {
            'labels': list(self.labels),
            'alphas': [{'alpha': a, 'U': u} for a, u in self.alphas],
            'k': self.k,
            'normalized_error': self.normalized_error,
            'compatible': self.compatible,
        }


def compare(a: AlphaBudget, b: AlphaBudget) -> ComparisonResult:
    """Normalized error E = |alpha_a - alpha_b| / sqrt(U_a^2 + U_b^2); compatible when E <= 1"""
    if a.k != b.k:
        raise CoverageFactorMismatchError(f"coverage factors differ: k={a.k:g} vs k={b.k:g}")
    difference = abs(a.alpha - b.alpha)
    scale = math.hypot(a.expanded, b.expanded)
    if scale > 0:
        error = difference / scale
    else:
        error = 0.0 if difference == 0 else math.inf
    result = ComparisonResult(
        labels=(a.label, b.label),
        alphas=((a.alpha, a.expanded), (b.alpha, b.expanded)),
        k=a.k,
        compatible=error <= 1.0,
        normalized_error=error,
    )
    logger.info(f"Compare {a.label or 'a'} vs {b.label or 'b'}: E={error:.3f} "
                f"({'compatible' if result.compatible else 'NOT compatible'} at k={a.k:g})")
    return result


@dataclass(frozen=True)
class RunStatistics:
    alphas: Tuple[float, ...]
    mean: float
    sigma: float

    @property
    def band(self) -> Tuple[float, float]:
        return self.mean - self.sigma, self.mean + self.sigma

    def standard_error(self) -> float:
        return self.sigma / math.sqrt(len(self.alphas))


def run_statistics(series: RunSeries) -> RunStatistics:
    """Per-run alpha with its mean and sample standard deviation (1-sigma band)"""
    _require_runs(series)
    alphas = np.array(series.alphas())
    return RunStatistics(alphas=tuple(float(a) for a in alphas), mean=float(alphas.mean()),
                         sigma=float(alphas.std(ddof=1)))


def export_run_statistics(stats: RunStatistics, path: PathLike) -> None:
    lower, upper = stats.band
    frame = pd.DataFrame({
        'run': np.arange(len(stats.alphas)),
        'alpha': stats.alphas,
        'mean': stats.mean,
        'lower_1sigma': lower,
        'upper_1sigma': upper,
    })
    frame.to_csv(path, index=False)
