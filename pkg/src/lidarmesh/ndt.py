"""Normal-distributions-transform grid, scoring and registration.

The reference cloud is summarized per cubic cell by the sample mean and
covariance of its points; a query cloud is registered by maximizing
sum_i exp(-1/2 d_i^T Sigma_c^-1 d_i) with d_i the offset of the
transformed point from its cell mean (the unnormalized-Gaussian score).
Each point is matched against the cell containing it plus its 26
neighbors and keeps the best-scoring one, so points that drift just
across a cell boundary or corner (into a possibly empty cell) are
still pulled back instead of dropping out of the objective.

Derivatives are taken w.r.t. the right perturbation
T <- T * exp([rotation, translation]). The reported Hessian is the
exact second derivative of the fixed-cell-assignment objective (the
objective is smooth between re-assignment events, which re-running the
match handles); registration itself iterates with the positive
semidefinite Gauss-Newton curvature, which equals the exact Hessian at
a perfect fit.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import Pose, quat_from_rotvec, quat_multiply, voxel_keys

MIN_CELL_POINTS = 5
EIG_CLAMP_RATIO = 0.01
EIG_MAX_FLOOR = 0.01 ** 2        # m^2
FITNESS_TEMPER = 20.0   # variance inflation for the fitness scale
FITNESS_CAP = 0.45      # deficit for misses / out-of-distribution points


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


class NdtGrid:
    """Per-cell Gaussian statistics with incremental add/remove.

    Cells with fewer than MIN_CELL_POINTS points never score. Stored
    covariances are eigenvalue-clamped so the smallest eigenvalue is at
    least EIG_CLAMP_RATIO times the largest (the largest floored at
    EIG_MAX_FLOOR before the ratio is applied).
    """

    def __init__(self, resolution):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self._n = {}       # key -> point count
        self._sx = {}      # key -> sum of points
        self._sxx = {}     # key -> sum of outer products
        self._dirty = set()
        self._keys = np.zeros(0, dtype=np.int64)
        self._mu = np.zeros((0, 3))
        self._icov = np.zeros((0, 3, 3))
        self._cov = np.zeros((0, 3, 3))

    def num_valid_cells(self):
        return len(self._keys)

    def add_points(self, points):
        self._accumulate(points, +1)

    def remove_points(self, points):
        self._accumulate(points, -1)

    def _accumulate(self, points, sign):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return
        keys = voxel_keys(points, self.resolution)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        pts = points[order]
        uniq, starts = np.unique(keys, return_index=True)
        outer = pts[:, :, None] * pts[:, None, :]
        sums = np.add.reduceat(pts, starts, axis=0)
        sqsums = np.add.reduceat(outer, starts, axis=0)
        counts = np.diff(np.append(starts, len(keys)))
        for k, c, s, ss in zip(uniq.tolist(), counts, sums, sqsums):
            n = self._n.get(k, 0) + sign * int(c)
            if n <= 0:
                self._n.pop(k, None)
                self._sx.pop(k, None)
                self._sxx.pop(k, None)
            else:
                self._n[k] = n
                self._sx[k] = self._sx.get(k, 0.0) + sign * s
                self._sxx[k] = self._sxx.get(k, 0.0) + sign * ss
            self._dirty.add(k)

    def refresh(self):
        """Recompute lookup arrays after accumulate calls."""
        if not self._dirty:
            return
        self._dirty.clear()
        valid = [k for k, n in self._n.items() if n >= MIN_CELL_POINTS]
        if not valid:
            self._keys = np.zeros(0, dtype=np.int64)
            self._mu = np.zeros((0, 3))
            self._icov = np.zeros((0, 3, 3))
            self._cov = np.zeros((0, 3, 3))
            return
        keys = np.array(sorted(valid), dtype=np.int64)
        n = np.array([self._n[k] for k in keys], dtype=float)
        sx = np.stack([self._sx[k] for k in keys])
        sxx = np.stack([self._sxx[k] for k in keys])
        mu = sx / n[:, None]
        cov = sxx / n[:, None, None] - mu[:, :, None] * mu[:, None, :]
        cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        lam, vec = np.linalg.eigh(cov)
        floor = EIG_CLAMP_RATIO * np.maximum(lam[:, -1], EIG_MAX_FLOOR)
        lam = np.maximum(lam, floor[:, None])
        self._cov = np.einsum("nij,nj,nkj->nik", vec, lam, vec)
        self._icov = np.einsum("nij,nj,nkj->nik", vec, 1.0 / lam, vec)
        self._mu = mu
        self._keys = keys

    def cell_stats(self, point):
        """(n, mean, clamped covariance) of the cell containing point,
        or None when the cell is absent or below the point minimum."""
        key = int(voxel_keys(np.asarray(point, dtype=float)[None, :],
                             self.resolution)[0])
        i = np.searchsorted(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            return self._n[key], self._mu[i].copy(), self._cov[i].copy()
        return None

    def lookup(self, points):
        """Per-point cell statistics: (valid mask, mu, inverse cov)."""
        keys = voxel_keys(points, self.resolution)
        valid, rows = self._find_keys(keys)
        return valid, self._mu[rows[valid]], self._icov[rows[valid]]

    def tempered_icov(self, temper):
        """Per-cell inverse covariances with variances inflated by
        `temper`, row-aligned with the grid; 1 is the exact metric."""
        if temper == 1.0:
            return self._icov
        return self._icov / temper

    def _find_keys(self, keys):
        """(present mask, row index) of packed cell keys, vectorized."""
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool), np.zeros(keys.shape, int)
        rows = np.searchsorted(self._keys, keys)
        rows = np.clip(rows, 0, len(self._keys) - 1)
        return self._keys[rows] == keys, rows


def ndt_build(points, resolution):
    grid = NdtGrid(resolution)
    grid.add_points(points)
    grid.refresh()
    return grid


class Correspondences:
    """Frozen point-to-cell assignment taken at one pose.

    The NDT objective restricted to a fixed assignment is smooth, so
    derivative checks and per-iteration solves run against this view;
    re-matching between iterations restores the full objective.
    """

    __slots__ = ("p", "mu", "icov", "index", "total", "cell")

    def __init__(self, p, mu, icov, index, total, cell):
        self.p = p
        self.mu = mu
        self.icov = icov
        self.index = index      # query-point index of each pair
        self.total = total      # query size including unmatched points
        self.cell = cell        # grid row of the assigned cell

    def __len__(self):
        return len(self.p)


# Packed-key deltas of the 3x3x3 cell neighborhood (see
# geometry.voxel_keys): one unit is 1 in k, 1<<21 in j, 1<<42 in i.
# Diagonal neighbors matter because points lying exactly on cell
# corners can cross two or three boundaries in one tiny motion.
_NEIGHBOR_DELTAS = (
    np.array([-1, 0, 1], dtype=np.int64)[:, None, None] * (1 << 42)
    + np.array([-1, 0, 1], dtype=np.int64)[None, :, None] * (1 << 21)
    + np.array([-1, 0, 1], dtype=np.int64)[None, None, :]
).ravel()


def match_cells(grid, points, pose, icov_table=None):
    """Pair each transformed point with the lowest-energy populated cell
    among the containing cell and its 26 neighbors.

    The diagonal neighbors matter: points lying exactly on cell corners
    (walls and floors tend to sit on round coordinates) cross several
    boundaries in one tiny motion, and a face-only search would drop
    them. `icov_table` substitutes a per-cell inverse covariance
    (row-aligned with the grid) for both the energies and the returned
    correspondences."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if icov_table is None:
        icov_table = grid._icov
    y = points @ pose.rotation_matrix().T + pose.t
    keys = voxel_keys(y, grid.resolution)
    # Points sharing a containing cell share the same 27 candidates, so
    # the neighborhood lookup runs once per distinct key and its
    # present-cell runs are expanded back per point.
    ukeys, inv = np.unique(keys, return_inverse=True)
    present, urows = grid._find_keys(ukeys[:, None] + _NEIGHBOR_DELTAS)
    rows_of_key = urows[present]             # runs, concatenated key-major
    key_count = present.sum(axis=1)
    key_start = np.concatenate(([0], np.cumsum(key_count[:-1])))
    count = key_count[inv]
    pair_pt = np.repeat(np.arange(len(points)), count)
    if not len(pair_pt):
        empty = np.zeros(0, dtype=np.int64)
        return Correspondences(points[:0], grid._mu[:0], icov_table[:0],
                               empty, len(points), empty)
    run_pos = np.arange(len(pair_pt)) \
        - np.repeat(np.cumsum(count) - count, count)
    rows = rows_of_key[np.repeat(key_start[inv], count) + run_pos]
    d = y[pair_pt] - grid._mu[rows]
    # Pair energies through the six unique entries of each symmetric
    # inverse covariance: a (cells, 6) table gathered per pair beats
    # gathering (pairs, 3, 3) tensors.
    a6 = icov_table[:, (0, 0, 0, 1, 1, 2), (0, 1, 2, 1, 2, 2)][rows]
    d0, d1, d2 = d[:, 0], d[:, 1], d[:, 2]
    e = 0.5 * (a6[:, 0] * d0 * d0 + a6[:, 3] * d1 * d1
               + a6[:, 5] * d2 * d2) \
        + a6[:, 1] * d0 * d1 + a6[:, 2] * d0 * d2 + a6[:, 4] * d1 * d2
    # Lowest energy per point, the first candidate winning ties;
    # pair_pt is nondecreasing, so per-point runs are contiguous.
    starts = np.flatnonzero(np.r_[True, pair_pt[1:] != pair_pt[:-1]])
    seg = np.zeros(len(pair_pt), dtype=np.int64)
    seg[starts[1:]] = 1
    seg_min = np.minimum.reduceat(e, starts)[np.cumsum(seg)]
    hit = np.flatnonzero(e == seg_min)
    hp = pair_pt[hit]
    choice = hit[np.r_[True, hp[1:] != hp[:-1]]]
    index = pair_pt[choice]
    best = rows[choice]
    return Correspondences(points[index], grid._mu[best], icov_table[best],
                           index, len(points), best)


def score_of(corr, pose):
    if len(corr) == 0:
        return 0.0
    d = corr.p @ pose.rotation_matrix().T + pose.t - corr.mu
    e = 0.5 * np.einsum("ni,nij,nj->n", d, corr.icov, d)
    return float(np.exp(-e).sum())


_EPS_LC = np.zeros((3, 3, 3))       # Levi-Civita symbol
_EPS_LC[0, 1, 2] = _EPS_LC[1, 2, 0] = _EPS_LC[2, 0, 1] = 1.0
_EPS_LC[0, 2, 1] = _EPS_LC[2, 1, 0] = _EPS_LC[1, 0, 2] = -1.0


def derivatives_of(corr, pose, exact=True):
    """(score, gradient, hessian) of the objective -score at `pose`
    under the frozen assignment. exact=False swaps the Hessian for the
    Gauss-Newton curvature (PSD, equal to exact at zero residual).

    The curvature sum_n s_n J_n^T Bt_c J_n, with J_n = [-skew(p_n), I]
    and Bt_c = R^T B_c R the metric of point n's cell, is grouped per
    cell: each block is linear in Bt_c and polynomial in p_n, so it
    collapses onto the weighted moments sum s, sum s p and sum s p p^T
    of each cell's points — skew(a) Bt skew(a) expands through the
    Levi-Civita symbol as eps_ijm eps_klr Bt_jk (a_m a_r). The exact
    extras are plain weighted outer products and stay pointwise.
    """
    if len(corr) == 0:
        return 0.0, np.zeros(6), np.zeros((6, 6))
    p, icov = corr.p, corr.icov
    R = pose.rotation_matrix()
    d = p @ R.T + pose.t - corr.mu
    bd = np.einsum("nij,nj->ni", icov, d)
    e = 0.5 * np.einsum("ni,ni->n", d, bd)
    s = np.exp(-e)
    score = float(s.sum())

    u = bd @ R                              # R^T (B d) per point
    a = np.concatenate([np.cross(p, u), u], axis=1)
    g = a.T @ s                             # gradient of -score

    order = np.argsort(corr.cell, kind="stable")
    cs = corr.cell[order]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    ps, ss = p[order], s[order]
    w = np.add.reduceat(ss, starts)
    m = np.add.reduceat(ss[:, None] * ps, starts, axis=0)
    M2 = np.add.reduceat(
        ss[:, None] * (ps[:, :, None] * ps[:, None, :]).reshape(-1, 9),
        starts, axis=0).reshape(-1, 3, 3)
    Bt = np.einsum("ai,cij,jb->cab", R.T, icov[order[starts]], R)

    H = np.empty((6, 6))
    H[3:, 3:] = np.einsum("c,cab->ab", w, Bt)
    H12 = np.einsum("cab,cbd->ad", _skew_batch(m), Bt)
    H[:3, 3:] = H12
    H[3:, :3] = H12.T
    H[:3, :3] = -np.einsum("ijm,klr,cjk,cmr->il", _EPS_LC, _EPS_LC,
                           Bt, M2, optimize=True)
    if exact:
        X = (u * s[:, None]).T @ p
        H[:3, :3] += 0.5 * (X + X.T)
        H[:3, :3] -= float(((u * p).sum(axis=1) * s).sum()) * np.eye(3)
        H -= (a * s[:, None]).T @ a
    return score, g, 0.5 * (H + H.T)


def score_and_derivatives(grid, points, pose, derivatives=True):
    """NDT score plus exact gradient/Hessian of -score at `pose`.

    Points outside valid cells contribute nothing. With
    derivatives=False only the score is computed.
    """
    corr = match_cells(grid, points, pose)
    if not derivatives:
        return score_of(corr, pose), None, None
    return derivatives_of(corr, pose, exact=True)


def fitness(grid, points, pose):
    """Mean per-point score deficit x100; lower is better.

    The deficit is -log of the cell Gaussian score with variances
    inflated by FITNESS_TEMPER, capped at FITNESS_CAP; points outside
    valid cells take the cap. Scaled so a correctly placed scan over a
    co-visible reference sits under the customary acceptance threshold
    of 15 while misregistrations of half a metre or more sit above it.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return 100.0 * FITNESS_CAP
    corr = match_cells(grid, points, pose)
    deficit = np.full(len(points), FITNESS_CAP)
    if len(corr):
        d = corr.p @ pose.rotation_matrix().T + pose.t - corr.mu
        e = 0.5 * np.einsum("ni,nij,nj->n", d, corr.icov, d) / FITNESS_TEMPER
        deficit[corr.index] = np.minimum(e, FITNESS_CAP)
    return 100.0 * float(deficit.mean())


def _solve_damped(H, g):
    lam = 1e-6 * (abs(np.trace(H)) / 6.0 + 1e-12)
    eye = np.eye(6)
    for _ in range(40):
        try:
            cf = cho_factor(H + lam * eye, lower=True)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        return cho_solve(cf, -g)
    return None


# Variance inflation factors for the annealed solve; the final stage
# must be 1 (the exact metric). Coarse stages widen every cell Gaussian
# so the score surface loses the shallow false optima the exact metric
# carries (e.g. scan-ring alignment patterns on flat ground), letting
# the solve travel several cell widths; each sharper stage then refines
# within the basin the previous one reached. Used for loop-closure
# refinement, where priors can be off by a large fraction of a cell;
# odometry-guided registration runs the plain single-stage descent.
ANNEAL_SCHEDULE = (16.0, 4.0, 1.0)
PLAIN_SCHEDULE = (1.0,)


def _gn_run(grid, points, pose, icov_table, budget, step_tol):
    """One damped Gauss-Newton descent under a fixed cell metric.

    Returns (pose, converged, updates, budget_left, score) where
    converged means the full proposed step fell under step_tol; halved
    steps merely safeguard the score and must not fake stationarity.
    The returned score is the final pose's score under `icov_table`.
    """
    converged = False
    updates = 0
    corr = match_cells(grid, points, pose, icov_table)
    score = score_of(corr, pose)
    while budget > 0:
        budget -= 1
        _, g, H = derivatives_of(corr, pose, exact=False)
        if not np.any(g):
            converged = True
            break
        step = _solve_damped(H, g)
        if step is None:
            break
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
        accepted = None
        for _ in range(16):
            cand = Pose(quat_multiply(pose.q, quat_from_rotvec(step[:3])),
                        pose.t + pose.rotation_matrix() @ step[3:])
            cand_corr = match_cells(grid, points, cand, icov_table)
            cand_score = score_of(cand_corr, cand)
            if cand_score >= score - 1e-12 * max(1.0, abs(score)):
                accepted = (cand, cand_corr, cand_score)
                break
            step = 0.5 * step
        if accepted is None:
            break
        pose, corr, score = accepted
        updates += 1
    return pose, converged, updates, budget, score


def register_cloud(grid, points, prior, max_iterations=30, step_tol=1e-4,
                   schedule=PLAIN_SCHEDULE):
    """Register a sensor-frame cloud against the grid from a prior.

    Runs one damped Gauss-Newton descent per schedule entry, coarsest
    first, sharing `max_iterations` across stages. The default single
    exact-metric stage suits odometry-grade priors (it stops within a
    step or two when the prior is already at the optimum); pass
    ANNEAL_SCHEDULE when the prior may be off by a large fraction of a
    cell, as with loop-closure candidates. `converged` reports
    stationarity under the exact metric; `iterations` counts applied
    pose updates; `score` is the exact-metric score at the result.

    Returns (pose, converged, iterations, score).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pose = prior
    converged = False
    updates = 0
    budget = max_iterations
    score = 0.0
    for stage, temper in enumerate(schedule):
        table = grid.tempered_icov(temper)
        pose, conv, did, budget, score = _gn_run(
            grid, points, pose, table, budget, step_tol)
        updates += did
        converged = conv and stage == len(schedule) - 1
    if schedule[-1] != 1.0:     # score must report the exact metric
        score = score_of(match_cells(grid, points, pose), pose)
    return pose, converged, updates, score
