"""Linear stability analysis of the two-term and staggered update rules.

The scalar test recurrence ``p_{j+1} = a·p_{j-1} + (b + hλ)·p_j`` has the
characteristic polynomial ``r² − s·r − a`` with ``s = b + hλ``. Both
forward iteration and backward reconstruction stay bounded only when both
roots lie on the unit circle.
"""
import csv
import logging
import math

import attr
import numpy as np

log = logging.getLogger("stability")

#: |r| = 1 classification tolerance.
ROOT_TOLERANCE = 1e-9
#: Roots closer than this count as a double root.
DOUBLE_ROOT_GAP = 1e-6
#: Empirical verdict: growth beyond this multiple of n_steps is exponential.
GROWTH_FACTOR = 10.0
#: Grid points with max |r| in (1 + ROOT_TOLERANCE, 1 + NEAR_BOUNDARY] are excluded from agreement.
NEAR_BOUNDARY = 1e-3

A_VARIANCE_ANALYTIC = 13.0 / 12.0
A_VARIANCE_ASSERTED = 1.0

GRID_COLUMNS = ('a', 'b', 're_hlambda', 'im_hlambda', 'mod_r1', 'mod_r2', 'fb_stable')


def _finite(instance, attribute, value):
    if not np.isfinite(value):
        raise ValueError(f"{attribute.name} must be finite, got {value!r}")


@attr.s(frozen=True)
class StabilityQuery:
    a = attr.ib(converter=float, validator=_finite)
    b = attr.ib(converter=float, validator=_finite)
    hlambda = attr.ib(default=0j, converter=complex, validator=_finite)

    @property
    def s(self):
        return self.b + self.hlambda


@attr.s(frozen=True)
class HamiltonianLinearQuery:
    """Coefficients of q' = a·q + α·p, p' = b·p + β·q'."""
    a = attr.ib(converter=float, validator=_finite)
    b = attr.ib(converter=float, validator=_finite)
    alpha = attr.ib(converter=float, validator=_finite)
    beta = attr.ib(converter=float, validator=_finite)

    def matrix(self):
        return np.array([[self.a, self.alpha],
                         [self.a * self.beta, self.b + self.alpha * self.beta]])


@attr.s(frozen=True)
class StabilityReport:
    """Roots (or eigenvalues) and the verdicts derived from them.

    ``predicate`` holds the closed-form verdict when one was evaluated.
    """
    roots = attr.ib()
    fb_stable = attr.ib()
    marginal = attr.ib()
    condition_values = attr.ib(factory=dict)
    predicate = attr.ib(default=None)

    @property
    def moduli(self):
        return tuple(abs(r) for r in self.roots)

    @property
    def distinct(self):
        return abs(self.roots[0] - self.roots[1]) > DOUBLE_ROOT_GAP

    @property
    def verdict(self):
        if not self.fb_stable:
            return 'unstable'
        return 'marginal' if self.marginal else 'stable'


def _roots_verdict(roots, tol=ROOT_TOLERANCE):
    moduli = [abs(r) for r in roots]
    stable = max(moduli) <= 1.0 + tol and min(moduli) >= 1.0 - tol
    marginal = stable and abs(roots[0] - roots[1]) <= DOUBLE_ROOT_GAP
    return stable, marginal


def quadratic_roots(s, a):
    """Roots of r² − s·r − a without cancellation in the smaller root."""
    s = complex(s)
    sq = np.sqrt(complex(s * s + 4.0 * a))
    big = (s + sq) / 2.0 if abs(s + sq) >= abs(s - sq) else (s - sq) / 2.0
    if big == 0:
        return 0j, 0j
    return big, -a / big


def char_roots(q):
    r1, r2 = quadratic_roots(q.s, q.a)
    stable, marginal = _roots_verdict((r1, r2))
    return StabilityReport(
        roots=(r1, r2),
        fb_stable=stable,
        marginal=marginal,
        condition_values={'abs_a': abs(q.a), 'abs_s': abs(q.s)},
    )


def stability_condition(q, tol=1e-12):
    """Closed-form test for both roots on the unit circle.

    Needs |a| = 1 and |b + hλ| ≤ 2; for a = 1 the sum b + hλ must be purely
    imaginary, for a = −1 purely real.
    """
    s = q.s
    if abs(abs(q.a) - 1.0) > tol:
        return False
    if abs(s) > 2.0 + tol:
        return False
    if q.a > 0:
        return abs(s.real) <= tol
    return abs(s.imag) <= tol


def _iterate(a, s, n_steps, p0, p1):
    a = np.asarray(a, dtype=np.complex128)
    s = np.asarray(s, dtype=np.complex128)
    prev = np.broadcast_to(np.asarray(p0, dtype=np.complex128), s.shape).copy()
    cur = np.broadcast_to(np.asarray(p1, dtype=np.complex128), s.shape).copy()
    start = np.maximum(np.abs(prev), np.abs(cur))
    peak = start.copy()
    blown = np.zeros(s.shape, dtype=bool)
    with np.errstate(over='ignore', invalid='ignore'):
        for _ in range(n_steps - 1):
            prev, cur = cur, a * prev + s * cur
            mag = np.abs(cur)
            blown |= ~np.isfinite(mag) | (mag > 1e150)
            peak = np.where(blown, np.inf, np.maximum(peak, mag))
            if blown.any():
                prev = np.where(blown, 0, prev)
                cur = np.where(blown, 0, cur)
    return peak / start


def empirical_iterate(q, n_steps, p0=1.0, p1=1.0):
    """Largest |p_j| over n_steps iterates relative to the starting values; overflow gives inf."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if max(abs(p0), abs(p1)) == 0:
        raise ValueError("starting values must not both be zero")
    return float(_iterate(q.a, q.s, n_steps, p0, p1))


def empirically_stable(growth, n_steps):
    return bool(np.isfinite(growth) and growth <= GROWTH_FACTOR * n_steps)


@attr.s(eq=False)
class GridSweep:
    """Per-point results of a grid over (a, b, Re hλ, Im hλ)."""
    a = attr.ib()
    b = attr.ib()
    hlambda = attr.ib()
    moduli = attr.ib()
    fb_stable = attr.ib()
    condition = attr.ib()
    growth = attr.ib()
    n_steps = attr.ib()

    @property
    def empirical_stable(self):
        return np.isfinite(self.growth) & (self.growth <= GROWTH_FACTOR * self.n_steps)

    @property
    def comparable(self):
        excess = self.moduli.max(axis=1) - 1.0
        return ~((excess > ROOT_TOLERANCE) & (excess <= NEAR_BOUNDARY))

    def agreement(self):
        """Fraction of comparable points where all three verdicts agree."""
        mask = self.comparable
        agree = (self.fb_stable == self.condition) & (self.fb_stable == self.empirical_stable)
        return float(agree[mask].mean()) if mask.any() else 1.0

    def rows(self):
        for i in range(len(self.a)):
            yield {
                'a': self.a[i], 'b': self.b[i],
                're_hlambda': self.hlambda[i].real, 'im_hlambda': self.hlambda[i].imag,
                'mod_r1': self.moduli[i, 0], 'mod_r2': self.moduli[i, 1],
                'fb_stable': int(self.fb_stable[i]),
            }


def default_grid():
    b = np.linspace(-2.0, 2.0, 20)
    return {
        'a_values': (1.0, -1.0),
        'b_values': b,
        're_values': -b,
        'im_values': np.linspace(0.0, 2.5, 10),
    }


def grid_sweep(a_values, b_values, re_values, im_values, n_steps=20000):
    """Evaluates char_roots, stability_condition and empirical_iterate on a product grid."""
    grid = np.array([(a, b, re, im) for a in a_values for b in b_values
                     for re in re_values for im in im_values], dtype=np.float64)
    a, b = grid[:, 0], grid[:, 1]
    hlambda = grid[:, 2] + 1j * grid[:, 3]
    moduli = np.empty((len(grid), 2))
    fb_stable = np.empty(len(grid), dtype=bool)
    condition = np.empty(len(grid), dtype=bool)
    for i in range(len(grid)):
        q = StabilityQuery(a[i], b[i], hlambda[i])
        report = char_roots(q)
        moduli[i] = report.moduli
        fb_stable[i] = report.fb_stable
        condition[i] = stability_condition(q)
    growth = _iterate(a, b + hlambda, n_steps, 1.0, 1.0)
    sweep = GridSweep(a, b, hlambda, moduli, fb_stable, condition, growth, n_steps)
    log.info("grid of %d points: %d stable, agreement %.4f", len(grid), fb_stable.sum(),
             sweep.agreement())
    return sweep


def write_grid_csv(path, sweep):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        for row in sweep.rows():
            writer.writerow(row)


def sample_a(rng, size):
    """Per-layer coefficients: a fair coin picks ±1, then a uniform offset in [−½, ½]."""
    branch = rng.integers(0, 2, size) * 2.0 - 1.0
    return branch + 0.5 * rng.uniform(-1.0, 1.0, size)


@attr.s(frozen=True)
class MomentsReport:
    mean_trace = attr.ib()
    expected_trace = attr.ib()
    max_z = attr.ib()
    conditional_variance = attr.ib()
    predicted_variance = attr.ib()
    a_variance = attr.ib()
    a_variance_analytic = attr.ib(default=A_VARIANCE_ANALYTIC)
    a_variance_asserted = attr.ib(default=A_VARIANCE_ASSERTED)

    @property
    def variance_rel_error(self):
        if self.predicted_variance == 0:
            return abs(self.conditional_variance)
        return abs(self.conditional_variance - self.predicted_variance) / self.predicted_variance


def midpoint_a_moments(n_trials, n_layers, hlambda, rng, p_prev=0.0, p_cur=1.0):
    """Monte Carlo check of the midpoint_a recurrence statistics.

    The mean over trials of p_j started from p_0 = p_1 = 1 should follow
    (1 + hλ)^(j−1); the single-step variance for fixed (p_prev, p_cur)
    should be Var(a)·(p_prev − p_cur)², with Var(a) measured on an
    independent sample.
    """
    if n_trials < 1000:
        raise ValueError("midpoint_a_moments needs at least 1000 trials")
    hlambda = float(hlambda)
    prev = np.ones(n_trials)
    cur = np.ones(n_trials)
    means = [1.0, 1.0]
    z_scores = [0.0, 0.0]
    expected = [1.0, 1.0]
    for j in range(n_layers):
        a = sample_a(rng.child(0, j), n_trials)
        prev, cur = cur, a * prev + (1.0 - a) * cur + hlambda * cur
        mean = float(cur.mean())
        target = expected[-1] * (1.0 + hlambda)
        stderr = float(cur.std(ddof=1)) / math.sqrt(n_trials)
        means.append(mean)
        expected.append(target)
        z_scores.append(abs(mean - target) / stderr if stderr > 0 else abs(mean - target))

    a = sample_a(rng.child(1), n_trials)
    step = a * p_prev + (1.0 - a) * p_cur + hlambda * p_cur
    a_variance = float(sample_a(rng.child(2), n_trials).var())
    report = MomentsReport(
        mean_trace=np.array(means),
        expected_trace=np.array(expected),
        max_z=max(z_scores),
        conditional_variance=float(step.var()),
        predicted_variance=a_variance * (p_prev - p_cur) ** 2,
        a_variance=a_variance,
    )
    log.info("Var(a) measured %.5f (analytic %.5f, asserted %.1f), max z %.2f",
             report.a_variance, A_VARIANCE_ANALYTIC, A_VARIANCE_ASSERTED, report.max_z)
    return report


def hamiltonian_predicate(q, tol=1e-12):
    """Unit-modulus eigenvalues of the staggered update matrix, in closed form.

    det = ab; for det = 1 the trace must satisfy |trace| ≤ 2, for det = −1
    the trace must vanish (eigenvalues ±1).
    """
    det = q.a * q.b
    trace = q.a + q.b + q.alpha * q.beta
    if abs(det - 1.0) <= tol:
        return abs(trace) <= 2.0 + tol
    if abs(det + 1.0) <= tol:
        return abs(trace) <= tol
    return False


def hamiltonian_linear_stability(q):
    eigenvalues = np.linalg.eigvals(q.matrix())
    roots = (complex(eigenvalues[0]), complex(eigenvalues[1]))
    stable, marginal = _roots_verdict(roots)
    return StabilityReport(
        roots=roots,
        fb_stable=stable,
        marginal=marginal,
        condition_values={'det': q.a * q.b, 'trace': q.a + q.b + q.alpha * q.beta},
        predicate=hamiltonian_predicate(q),
    )


def sample_hamiltonian_queries(rng, n, unit_fraction=0.9):
    """Random queries; a fraction ``unit_fraction`` has b = ±1/a so |ab| = 1."""
    queries = []
    for i in range(n):
        a = math.copysign(math.exp(rng.uniform(-1.0, 1.0)), rng.uniform(-1.0, 1.0))
        if rng.uniform(0.0, 1.0) < unit_fraction:
            b = math.copysign(1.0 / a, rng.uniform(-1.0, 1.0))
        else:
            b = rng.uniform(-3.0, 3.0)
        queries.append(HamiltonianLinearQuery(a, b, rng.uniform(-3.0, 3.0),
                                              rng.uniform(-3.0, 3.0)))
    return queries


def hamiltonian_agreement(queries):
    """Returns (agreement fraction, number of compared queries) over distinct-eigenvalue queries."""
    compared = agree = 0
    for q in queries:
        report = hamiltonian_linear_stability(q)
        if not report.distinct:
            continue
        compared += 1
        agree += report.fb_stable == report.predicate
    return (agree / compared if compared else 1.0), compared
