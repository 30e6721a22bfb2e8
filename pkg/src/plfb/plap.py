"""Regularized p-Laplacian solver on the active region, energies and fluxes.

The degenerate coefficient |grad u|^{p-2} is regularized as
(|grad u|^2 + delta^2)^{(p-2)/2} and the nonlinear problem is solved by
Picard (lagged coefficient) iteration with damped updates; each inner
problem is a symmetric positive definite variable-coefficient diffusion
solved by preconditioned conjugate gradients.

Dirichlet data is imposed by cut-cell (ghost value) closures on both the
body wall and the free-boundary contour: an arm from an unknown node that
crosses a boundary at fraction theta of the spacing contributes a/theta
times (u - g) to the flux balance, which keeps the matrix symmetric and
second-order accurate.  This matters because benchmark insulation layers
are only a few cells thick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg as _cg

from .errors import ConfigError, ConvergenceError, TopologyError
from .geometry import (
    CellClass,
    DomainSpec,
    GridSpec,
    RegionMask,
    ScalarField,
    _bilinear,
    cell_positive_fractions,
)

__all__ = [
    "SolverConfig",
    "BoundaryFlux",
    "solve_p_harmonic",
    "extended_values",
    "p_energy",
    "boundary_flux_inner",
    "free_boundary_flux",
    "fit_slope_through_zero",
]

THETA_FLOOR = 0.01  # cut-arm fraction floor, keeps the matrix well conditioned
PIN_TOL = 0.05      # unknowns closer than this (in cells) to a boundary are pinned to it


@dataclass
class SolverConfig:
    p: float
    delta: Optional[float] = None  # None -> 1e-6 * max(phi) / h
    picard_tol: float = 1e-8
    picard_max_iter: int = 80
    damping: float = 0.7
    linear_tol: float = 1e-11
    linear_max_iter: int = 5000
    residual_csv: Optional[str] = None

    def __post_init__(self):
        if self.p <= 1:
            raise ConfigError(f"exponent must satisfy p > 1, got {self.p}")
        if self.delta is not None and self.delta <= 0:
            raise ConfigError("regularization delta must be positive")
        if self.picard_tol <= 0 or self.linear_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigError("damping must lie in (0, 1]")


@dataclass
class BoundaryFlux:
    """Flux samples on the free boundary.

    Normals point outward from the positivity set into the dead region;
    q is the slope of u along the inward normal fitted on the positive side.
    Flagged samples lacked a clean positive-side stencil and are excluded
    from the statistics.
    """

    points: np.ndarray
    q: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    valid: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(~self.valid))

    def q_valid(self) -> np.ndarray:
        return self.q[self.valid]

    def mean_q(self) -> float:
        return float(np.mean(self.q_valid()))

    def cv(self) -> float:
        qv = self.q_valid()
        m = float(np.mean(qv))
        if m == 0.0:
            return 0.0
        return float(np.std(qv) / m)


# ---------------------------------------------------------------------------
# arm geometry (cut-cell closures), computed once per mask


@dataclass
class _CutBatch:
    axis: int
    node: np.ndarray    # unknown index owning the arm
    face: np.ndarray    # flat index into the axis face array
    theta: np.ndarray   # crossing fraction from the unknown node
    g: np.ndarray       # boundary value at the crossing


@dataclass
class _Arms:
    n_unknown: int
    unk_of: np.ndarray          # flat node -> unknown index or -1
    fluid_flat: np.ndarray      # flat indices of unknowns, C order
    fluid_eff: np.ndarray       # unknown nodes (fluid minus pinned), bool grid
    pin_flat: np.ndarray        # flat indices of pinned near-boundary nodes
    pin_val: np.ndarray         # their boundary values
    int_lo: list                # per axis: unknown idx of low node
    int_hi: list
    int_face: list              # per axis: face flat index into face array
    cuts: list                  # list of _CutBatch
    grounded: np.ndarray        # flat node indices with a body closure


def _build_arms(mask: RegionMask, domain: Optional[DomainSpec], outer_zero: bool) -> _Arms:
    grid = mask.grid
    nd = grid.ndim
    dims = grid.dims
    fluid = mask.fluid()
    nodes = grid.nodes()
    psi = mask.psi
    is_body = mask.cls == CellClass.BODY

    # unknowns sitting essentially on a boundary take its value directly;
    # a cut arm with a vanishing fraction would poison the stencil instead
    pin_wall = fluid & (mask.body_sd < PIN_TOL * grid.h)
    if outer_zero and psi is not None:
        pin_dead = fluid & ~pin_wall & (psi > -PIN_TOL * grid.h)
    else:
        pin_dead = np.zeros_like(fluid)
    pinned = pin_wall | pin_dead
    pin_val_grid = np.zeros(dims)
    if np.any(pin_wall):
        if domain is None:
            raise ConfigError("a body boundary is present; the solve needs its temperature")
        pin_val_grid[pin_wall] = domain.phi_at(nodes[pin_wall])
    fluid_eff = fluid & ~pinned

    n_unknown = int(np.count_nonzero(fluid_eff))
    if n_unknown == 0:
        raise TopologyError("no active nodes to solve on")
    unk_of = -np.ones(grid.node_count(), dtype=np.int64)
    fluid_flat = np.flatnonzero(fluid_eff.ravel())
    unk_of[fluid_flat] = np.arange(n_unknown)

    G = np.arange(grid.node_count()).reshape(dims)
    pinned_r = pinned.ravel()
    pin_val_r = pin_val_grid.ravel()
    is_body_r = is_body.ravel()

    int_lo, int_hi, int_face = [], [], []
    cuts: list[_CutBatch] = []
    grounded_list = []

    for ax in range(nd):
        sl_lo = tuple(slice(None, -1) if k == ax else slice(None) for k in range(nd))
        sl_hi = tuple(slice(1, None) if k == ax else slice(None) for k in range(nd))
        lo, hi = G[sl_lo].ravel(), G[sl_hi].ravel()
        f_lo, f_hi = fluid_eff[sl_lo].ravel(), fluid_eff[sl_hi].ravel()
        faces = np.arange(lo.size)

        both = f_lo & f_hi
        int_lo.append(unk_of[lo[both]])
        int_hi.append(unk_of[hi[both]])
        int_face.append(faces[both])

        # cut arms: one side an unknown, the other body, dead or pinned
        for fluid_side, c_all, nb_all, sgn in ((f_lo & ~f_hi, lo, hi, +1.0),
                                               (f_hi & ~f_lo, hi, lo, -1.0)):
            if not np.any(fluid_side):
                continue
            c = c_all[fluid_side]
            nb = nb_all[fluid_side]
            fidx = faces[fluid_side]
            nb_pin = pinned_r[nb]
            nb_body = is_body_r[nb] & ~nb_pin
            nb_dead = ~nb_body & ~nb_pin
            # pinned neighbor: full arm to its held value
            if np.any(nb_pin):
                cc, nn, ff = c[nb_pin], nb[nb_pin], fidx[nb_pin]
                cuts.append(_CutBatch(ax, unk_of[cc], ff, np.ones(cc.size), pin_val_r[nn]))
                wall = mask.body_sd.ravel()[nn] < PIN_TOL * grid.h
                if np.any(wall):
                    grounded_list.append(cc[wall])
            # body closure: wall crossing interpolated from the signed distance
            if np.any(nb_body):
                cc, nn, ff = c[nb_body], nb[nb_body], fidx[nb_body]
                sd = mask.body_sd.ravel()
                th = np.clip(sd[cc] / (sd[cc] - sd[nn]), THETA_FLOOR, 1.0)
                if domain is None:
                    raise ConfigError("a body boundary is present; the solve needs its temperature")
                cross = nodes.reshape(-1, nd)[cc].copy()
                cross[:, ax] += sgn * th * grid.h
                cuts.append(_CutBatch(ax, unk_of[cc], ff, th, domain.phi_at(cross)))
                grounded_list.append(cc)
            # dead-side closure: zero at the level-set crossing
            if outer_zero and np.any(nb_dead):
                cc, nn, ff = c[nb_dead], nb[nb_dead], fidx[nb_dead]
                if psi is None:
                    raise ConfigError("dead nodes present but mask has no level set")
                ps = psi.ravel()
                th = np.clip(ps[cc] / (ps[cc] - ps[nn]), THETA_FLOOR, 1.0)
                cuts.append(_CutBatch(ax, unk_of[cc], ff, th, np.zeros(cc.size)))
    grounded = np.concatenate(grounded_list) if grounded_list else np.empty(0, dtype=np.int64)
    return _Arms(n_unknown, unk_of, fluid_flat, fluid_eff,
                 np.flatnonzero(pinned.ravel()), pin_val_r[pinned_r],
                 int_lo, int_hi, int_face, cuts, grounded)


def _check_connectivity(mask: RegionMask, arms: _Arms) -> None:
    fluid = arms.fluid_eff
    labels, n_comp = ndimage.label(fluid)
    if n_comp == 0:
        raise TopologyError("empty active region")
    grounded_labels = set(np.unique(labels.ravel()[arms.grounded])) - {0}
    all_labels = set(range(1, n_comp + 1))
    if all_labels - grounded_labels:
        raise TopologyError(
            f"{len(all_labels - grounded_labels)} active component(s) not connected to the body boundary")


def _face_coefficients(vals: np.ndarray, h: float, p: float, delta: float) -> list[np.ndarray]:
    """Regularized diffusivity (|grad u|^2 + delta^2)^((p-2)/2) at cell faces."""
    nd = vals.ndim
    grads = np.gradient(vals, h, edge_order=1)
    if nd == 1:
        grads = [grads]
    out = []
    for ax in range(nd):
        sl_lo = tuple(slice(None, -1) if k == ax else slice(None) for k in range(nd))
        sl_hi = tuple(slice(1, None) if k == ax else slice(None) for k in range(nd))
        g2 = ((vals[sl_hi] - vals[sl_lo]) / h) ** 2
        for other in range(nd):
            if other == ax:
                continue
            gavg = 0.5 * (grads[other][sl_lo] + grads[other][sl_hi])
            g2 = g2 + gavg**2
        out.append((g2 + delta * delta) ** ((p - 2.0) / 2.0))
    return out


def _assemble(arms: _Arms, coeffs: list[np.ndarray], nd: int):
    n = arms.n_unknown
    diag = np.zeros(n)
    b = np.zeros(n)
    rows, cols, vals = [], [], []
    for ax in range(nd):
        a = coeffs[ax].ravel()[arms.int_face[ax]]
        lo, hi = arms.int_lo[ax], arms.int_hi[ax]
        np.add.at(diag, lo, a)
        np.add.at(diag, hi, a)
        rows.append(lo); cols.append(hi); vals.append(-a)
        rows.append(hi); cols.append(lo); vals.append(-a)
    for cut in arms.cuts:
        a = coeffs[cut.axis].ravel()[cut.face] / cut.theta
        np.add.at(diag, cut.node, a)
        np.add.at(b, cut.node, a * cut.g)
    rows.append(np.arange(n)); cols.append(np.arange(n)); vals.append(diag)
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A, b


def solve_p_harmonic(grid: GridSpec, mask: RegionMask, domain: DomainSpec,
                     outer_zero: bool = True, cfg: Optional[SolverConfig] = None,
                     u0: Optional[ScalarField] = None) -> ScalarField:
    """Solve div((|grad u|^2+delta^2)^((p-2)/2) grad u) = 0 on the active region.

    Temperature phi on the body wall, zero on the free-boundary contour when
    outer_zero is set.  Returns the nodal field with dead nodes at zero and
    body nodes stamped with the wall temperature.
    """
    if cfg is None:
        raise ConfigError("solver configuration required")
    if grid is not mask.grid and grid.dims != mask.grid.dims:
        raise ConfigError("grid/mask mismatch")
    arms = _build_arms(mask, domain, outer_zero)
    _check_connectivity(mask, arms)

    max_phi = domain.max_phi() if domain is not None else 1.0
    delta = cfg.delta if cfg.delta is not None else 1e-6 * max_phi / grid.h

    vals = np.zeros(grid.dims) if u0 is None else u0.values.copy()
    _stamp(vals, mask, domain)
    vals.ravel()[arms.pin_flat] = arms.pin_val
    x = vals.ravel()[arms.fluid_flat]

    history = []
    converged = False
    for it in range(cfg.picard_max_iter):
        ext = extended_values(ScalarField(grid, vals), mask, domain, _stamped=True)
        coeffs = _face_coefficients(ext, grid.h, cfg.p, delta)
        A, b = _assemble(arms, coeffs, grid.ndim)
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            bnorm = 1.0
        res = float(np.linalg.norm(A @ x - b)) / bnorm
        history.append(res)
        if res < cfg.picard_tol:
            converged = True
            break
        dinv = 1.0 / A.diagonal()
        M = sparse.diags(dinv)
        xn, info = _cg(A, b, x0=x, rtol=cfg.linear_tol, atol=0.0,
                       maxiter=cfg.linear_max_iter, M=M)
        if info > 0:
            raise ConvergenceError(
                f"inner linear solve stalled after {cfg.linear_max_iter} iterations", history=history)
        x = x + cfg.damping * (xn - x)
        vals.ravel()[arms.fluid_flat] = x
    if not converged:
        raise ConvergenceError(
            f"Picard iteration did not reach {cfg.picard_tol:g} in {cfg.picard_max_iter} steps "
            f"(last residual {history[-1]:.3e})", history=history)

    if cfg.residual_csv:
        with open(cfg.residual_csv, "w") as f:
            f.write("iter,residual\n")
            for i, r in enumerate(history):
                f.write(f"{i},{r:.12e}\n")

    vals.ravel()[arms.fluid_flat] = x
    _stamp(vals, mask, domain)
    vals.ravel()[arms.pin_flat] = arms.pin_val
    # tiny CG undershoots below zero are numerical noise; true violations stay
    tol = 1e-8 * max_phi
    vals[(vals > -tol) & (vals < 0.0)] = 0.0
    return ScalarField(grid, vals)


def _stamp(vals: np.ndarray, mask: RegionMask, domain: Optional[DomainSpec]) -> None:
    """Display values outside the unknowns: wall temperature in the body, zero in the dead set."""
    if domain is not None and np.any(mask.cls == CellClass.BODY):
        if callable(domain.phi):
            nodes = mask.grid.nodes()
            body = mask.cls == CellClass.BODY
            vals[body] = domain.phi_at(nodes[body])
        else:
            vals[mask.cls == CellClass.BODY] = float(domain.phi)
    dead = (mask.cls == CellClass.DEAD) | (mask.cls == CellClass.DIRICHLET_OUTER)
    vals[dead] = 0.0


_GHOST_THETA_FLOOR = 0.03


def extended_values(u: ScalarField, mask: RegionMask, domain: Optional[DomainSpec],
                    _stamped: bool = False) -> np.ndarray:
    """Field values with one ghost layer continued across the boundaries.

    Dead nodes adjacent to the positivity set get the continuation through
    the contour zero, body nodes the continuation through the wall
    temperature; quadratic along each arm when a second interior node is
    available, linear otherwise.  Interpolation near either boundary then
    sees a consistent smooth profile instead of stamped constants.
    """
    grid = u.grid
    nd = grid.ndim
    dims = grid.dims
    vals = u.values.copy()
    flat = vals.ravel()
    fluid = mask.fluid().ravel()
    is_body = (mask.cls == CellClass.BODY).ravel()
    sd = mask.body_sd.ravel()
    psi = mask.psi.ravel() if mask.psi is not None else None
    nodes = grid.nodes().reshape(-1, nd)
    N = flat.size
    acc = np.zeros(N)
    cnt = np.zeros(N)

    strides = []
    st = 1
    for k in reversed(range(nd)):
        strides.insert(0, st)
        st *= dims[k]
    idx_nd = np.unravel_index(np.arange(N), dims)

    for ax in range(nd):
        stride = strides[ax]
        for sgn in (+1, -1):
            # ghost candidate n with interior neighbor c = n + sgn along ax
            pos = idx_nd[ax]
            ok_c = (pos + sgn >= 0) & (pos + sgn < dims[ax])
            n_idx = np.flatnonzero(~fluid & ok_c)
            c_idx = n_idx + sgn * stride
            keep = fluid[c_idx]
            n_idx, c_idx = n_idx[keep], c_idx[keep]
            if n_idx.size == 0:
                continue
            nb_body = is_body[n_idx]
            # crossing fraction theta measured from the interior node c
            th = np.empty(n_idx.size)
            g = np.empty(n_idx.size)
            if np.any(nb_body):
                num = sd[c_idx[nb_body]]
                den = num - sd[n_idx[nb_body]]
                th[nb_body] = num / np.where(den == 0.0, 1.0, den)
                if domain is None:
                    # no temperature available: hold the stamped value
                    th[nb_body] = 1.0
                    g[nb_body] = flat[n_idx[nb_body]]
                else:
                    cross = nodes[c_idx[nb_body]].copy()
                    cross[:, ax] -= sgn * np.clip(th[nb_body], _GHOST_THETA_FLOOR, 1.0) * grid.h
                    g[nb_body] = domain.phi_at(cross)
            dead = ~nb_body
            if np.any(dead):
                if psi is None:
                    th[dead] = 1.0
                    g[dead] = 0.0
                else:
                    num = psi[c_idx[dead]]
                    den = num - psi[n_idx[dead]]
                    th[dead] = num / np.where(den == 0.0, 1.0, den)
                    g[dead] = 0.0
            th = np.clip(th, _GHOST_THETA_FLOOR, 1.0)
            uc = flat[c_idx]
            # second interior node along the arm enables quadratic continuation
            pos_c2 = idx_nd[ax][c_idx] + sgn
            has_c2 = (pos_c2 >= 0) & (pos_c2 < dims[ax])
            c2_idx = np.where(has_c2, c_idx + sgn * stride, c_idx)
            has_c2 &= fluid[c2_idx]
            uc2 = flat[c2_idx]
            ghost_quad = (2.0 * g / (th * (1.0 + th))
                          - 2.0 * (1.0 - th) * uc / th
                          + (1.0 - th) * uc2 / (1.0 + th))
            ghost_lin = uc + (g - uc) / th
            ghost = np.where(has_c2, ghost_quad, ghost_lin)
            np.add.at(acc, n_idx, ghost)
            np.add.at(cnt, n_idx, 1.0)
    filled = cnt > 0
    flat[filled] = acc[filled] / cnt[filled]
    return flat.reshape(dims)


def sampling_valid(mask: RegionMask, include_body_side: bool = False) -> np.ndarray:
    """Nodes whose values can enter near-contour interpolation stencils.

    The positivity-set nodes plus the dead-side ghost layer; body-side ghosts
    only on request (their values continue the profile through the wall, not
    through the contour).
    """
    fluid = mask.fluid()
    is_body = mask.cls == CellClass.BODY
    nd = fluid.ndim
    out = fluid.copy()
    for ax in range(nd):
        sl_lo = tuple(slice(None, -1) if k == ax else slice(None) for k in range(nd))
        sl_hi = tuple(slice(1, None) if k == ax else slice(None) for k in range(nd))
        for g_sl, c_sl in ((sl_lo, sl_hi), (sl_hi, sl_lo)):
            ghost = ~fluid[g_sl] & fluid[c_sl]
            if not include_body_side:
                ghost &= ~is_body[g_sl]
            sub = out[g_sl]
            sub[ghost] = True
            out[g_sl] = sub
    return out


# ---------------------------------------------------------------------------
# energy and fluxes


def p_energy(u: ScalarField, mask: RegionMask, p: float,
             domain: Optional[DomainSpec] = None) -> float:
    """Dirichlet p-energy over the positivity region outside the body.

    Cell-centered gradients of the ghost-extended field, weighted by the
    sub-cell fraction of each cell inside the region.
    """
    if p <= 1:
        raise ConfigError("exponent must satisfy p > 1")
    grid = u.grid
    nd = grid.ndim
    vals = extended_values(u, mask, domain)

    # cell weights: outside the body and (when present) inside the contour
    if np.any(mask.cls == CellClass.BODY):
        w = cell_positive_fractions(mask.body_sd)
    else:
        w = np.ones(tuple(d - 1 for d in grid.dims))
    if mask.psi is not None:
        w = w * cell_positive_fractions(-mask.psi)

    g2 = np.zeros_like(w)
    for ax in range(nd):
        sl_lo = tuple(slice(None, -1) if k == ax else slice(None) for k in range(nd))
        sl_hi = tuple(slice(1, None) if k == ax else slice(None) for k in range(nd))
        d = (vals[sl_hi] - vals[sl_lo]) / grid.h
        g2 = g2 + _cell_average_along(d, ax, nd) ** 2
    integrand = g2 ** (p / 2.0)
    return float(np.sum(w * integrand)) * grid.h**nd


def _cell_average_along(d: np.ndarray, ax: int, nd: int) -> np.ndarray:
    """Average an axis-difference array over the remaining cell directions."""
    out = d
    for other in range(nd):
        if other == ax:
            continue
        sl_lo = tuple(slice(None, -1) if k == other else slice(None) for k in range(out.ndim))
        sl_hi = tuple(slice(1, None) if k == other else slice(None) for k in range(out.ndim))
        out = 0.5 * (out[sl_lo] + out[sl_hi])
    return out


def fit_slope_through_zero(svals: np.ndarray, uvals: np.ndarray) -> np.ndarray:
    """Least-squares slope at 0 of u(s) = c1 s + c2 s^2 through the origin.

    svals: offsets (k,);  uvals: samples (..., k).  Returns c1 per row.
    """
    s = np.asarray(svals, dtype=float)
    A = np.stack([s, s * s], axis=1)
    AtA = A.T @ A
    At = A.T
    sol = np.linalg.solve(AtA, At @ np.moveaxis(np.asarray(uvals, dtype=float), -1, 0))
    return np.moveaxis(sol, 0, -1)[..., 0]


def boundary_flux_inner(u: ScalarField, domain: DomainSpec, p: float, mask: RegionMask,
                        weighted: bool = True, n_samples: Optional[int] = None) -> float:
    """Wall heat flux: integral over the body surface of phi |grad u|^{p-2} du/dmu.

    mu points from the insulation into the body, so the normal derivative is
    positive for a decaying field.  The slope is fitted along the outward ray
    at three offsets with the wall temperature pinned at offset zero; the
    offsets shrink when the insulation layer is thinner than three cells.
    Set weighted=False to drop the phi factor (the form entering the
    free-boundary balance identity).
    """
    grid = u.grid
    h = grid.h
    if n_samples is None:
        # resolve the wall at roughly the grid scale
        n_samples = max(64, int(8.0 / h))
    pts, normals, w = domain.body.boundary_quadrature(n_samples, grid)
    phi_b = domain.phi_at(pts)
    ext = extended_values(u, mask, domain)
    s_max = 3.0 * h
    if mask.psi is not None:
        # stay inside the layer: psi at the wall is minus the gap width
        gap = -float(np.max(_bilinear(mask.psi, grid, pts)))
        if gap > 0:
            s_max = min(s_max, 0.75 * gap)
    offsets = s_max * np.array([1.0 / 3.0, 2.0 / 3.0, 1.0])
    samples = np.stack([
        _bilinear(ext, grid, pts + s * normals) for s in offsets], axis=-1)
    c1 = fit_slope_through_zero(offsets, samples - phi_b[..., None])
    q_wall = np.maximum(-c1, 0.0)  # du/dmu with mu pointing into the body
    integrand = q_wall ** (p - 1.0)
    if weighted:
        integrand = phi_b * integrand
    return float(np.sum(integrand * w))


def free_boundary_flux(u: ScalarField, levelset, p: float, mask: RegionMask,
                       domain: Optional[DomainSpec] = None) -> BoundaryFlux:
    """Sample the Bernoulli flux q = |grad u| along the free boundary.

    For each contour point the slope of u into the positivity set is fitted
    over offsets {h, 2h, 3h} with the contour zero pinned.  Samples whose
    interpolation stencils leave the positivity set (for example where the
    layer is thinner than three cells) are flagged and excluded.
    """
    from .geometry import contour_points  # local import avoids cycle at module load

    grid = u.grid
    h = grid.h
    pts, normals, w = contour_points(levelset)
    ext = extended_values(u, mask, domain)
    valid_nodes = sampling_valid(mask)

    offsets = np.array([1.0, 2.0, 3.0]) * h
    sample_pts = [pts - s * normals for s in offsets]
    samples = np.stack([_bilinear(ext, grid, sp) for sp in sample_pts], axis=-1)
    ok = np.ones(len(pts), dtype=bool)
    for sp in sample_pts:
        ok &= _stencil_valid(valid_nodes, grid, sp)
    c1 = fit_slope_through_zero(offsets, samples)
    q = np.maximum(c1, 0.0)
    return BoundaryFlux(points=pts, q=q, normals=normals, weights=w, valid=ok)


def _stencil_valid(valid: np.ndarray, grid: GridSpec, pts: np.ndarray) -> np.ndarray:
    idx = (np.asarray(pts) - grid.origin) / grid.h
    nd = grid.ndim
    base = np.floor(idx).astype(int)
    inside = np.ones(pts.shape[:-1], dtype=bool)
    for k in range(nd):
        inside &= (base[..., k] >= 0) & (base[..., k] <= grid.dims[k] - 2)
        base[..., k] = np.clip(base[..., k], 0, grid.dims[k] - 2)
    ok = inside.copy()
    for bits in range(2**nd):
        loc = tuple(base[..., ax] + ((bits >> ax) & 1) for ax in range(nd))
        ok &= valid[loc]
    return ok
