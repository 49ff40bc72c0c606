"""Pure-numpy MPM substep kernels (fallback backend).

One substep: trial strain + von Mises return map + fixed-corotated stress,
particle-to-grid transfer, grid momentum update with gravity, smoothed
manipulator contact, wall conditions, grid-to-particle transfer, position
integration with domain clamping. `substep_grad` is the exact hand-derived
adjoint of `substep` (the SVD-based material map included), so reverse-mode
gradients of any final-state loss match finite differences.

The compiled backend in `_kernels.pyx` mirrors this module function for
function; keep the two in sync.
"""

from __future__ import annotations

import numpy as np

from .config import (
    P_BOUND, P_CONTACT_FRICTION, P_CONTACT_SOFT, P_DT, P_GATE_V, P_GX, P_GY,
    P_GZ, P_INV_DX, P_LAM, P_MARGIN, P_MASS, P_MU, P_NGRID, P_VOL,
    P_WALL_FRICTION, P_YIELD,
)

BACKEND_NAME = "numpy"

_OFFSETS = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)],
                    dtype=np.int64)
_PAIRS = ((0, 1), (0, 2), (1, 2))
_EPS = 1e-12


# ---------------------------------------------------------------------------
# B-spline weights
# ---------------------------------------------------------------------------

def _weights(x, inv_dx):
    pos = x * inv_dx
    base = np.floor(pos - 0.5).astype(np.int64)
    fx = pos - base
    w = np.stack([0.5 * (1.5 - fx) ** 2,
                  0.75 - (fx - 1.0) ** 2,
                  0.5 * (fx - 0.5) ** 2], axis=2)      # (N, 3 axes, 3 offsets)
    dw = np.stack([fx - 1.5,
                   -2.0 * (fx - 1.0),
                   fx - 0.5], axis=2)
    return base, fx, w, dw


def _stencil(base, fx, w, dw, inv_dx, G):
    """27-point stencil: flat node ids, weights, weight gradients, dpos."""
    o0, o1, o2 = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    w27 = w[:, 0, o0] * w[:, 1, o1] * w[:, 2, o2]                     # (N, 27)
    gw = np.empty(w27.shape + (3,))
    gw[:, :, 0] = inv_dx * dw[:, 0, o0] * w[:, 1, o1] * w[:, 2, o2]
    gw[:, :, 1] = inv_dx * w[:, 0, o0] * dw[:, 1, o1] * w[:, 2, o2]
    gw[:, :, 2] = inv_dx * w[:, 0, o0] * w[:, 1, o1] * dw[:, 2, o2]
    dpos = (_OFFSETS[None, :, :] - fx[:, None, :]) / inv_dx           # (N, 27, 3)
    flat = ((base[:, 0, None] + o0) * G + (base[:, 1, None] + o1)) * G \
        + (base[:, 2, None] + o2)
    return flat, w27, gw, dpos


# ---------------------------------------------------------------------------
# Proper SVD and the elastoplastic material map
# ---------------------------------------------------------------------------

def _svd3_proper(A):
    """Batched SVD with det(U) = det(V) = +1; sigma[2] carries sign(det A)."""
    U, s, Vh = np.linalg.svd(A)
    V = np.swapaxes(Vh, 1, 2)
    s = s.copy()
    detU = np.linalg.det(U)
    flip = detU < 0
    U[flip, :, 2] *= -1.0
    s[flip, 2] *= -1.0
    detV = np.linalg.det(V)
    flip = detV < 0
    V[flip, :, 2] *= -1.0
    s[flip, 2] *= -1.0
    return U, s, V


def _material_forward(Ftr, mu, lam, yield_stress):
    """Return map + fixed-corotated stress.

    Returns (F_new, tau, cache); tau = 2 mu (F - R) F^T + lam J (J - 1) I.
    """
    U, s, V = _svd3_proper(Ftr)
    with np.errstate(invalid="ignore", divide="ignore"):
        eps = np.log(s)
    mean = eps.mean(axis=1, keepdims=True)
    dev = eps - mean
    en = np.linalg.norm(dev, axis=1)
    k = yield_stress / (2.0 * mu)
    yielded = en > max(k, _EPS)
    eps_new = eps.copy()
    H = np.broadcast_to(np.eye(3), Ftr.shape).copy()
    if np.any(yielded):
        sel = yielded
        scale = (k / en[sel])[:, None]
        eps_new[sel] = mean[sel] + dev[sel] * scale
        ehat = dev[sel] * (1.0 / en[sel])[:, None]
        Pdev = np.eye(3) - np.ones((3, 3)) / 3.0
        Mp = np.ones((3, 3)) / 3.0 + scale[:, :, None] * (Pdev - ehat[:, :, None] * ehat[:, None, :])
        # d sigma'_i / d sigma_j = sigma'_i * Mp_ij / sigma_j
        sp_sel = np.exp(eps_new[sel])
        H[sel] = sp_sel[:, :, None] * Mp / np.exp(eps[sel])[:, None, :]
    sp = np.exp(eps_new)
    Fn = np.einsum("nik,nk,njk->nij", U, sp, V)
    R = np.einsum("nik,njk->nij", U, V)
    J = sp.prod(axis=1)
    FnT = np.swapaxes(Fn, 1, 2)
    tau = 2.0 * mu * (Fn - R) @ FnT \
        + (lam * J * (J - 1.0))[:, None, None] * np.eye(3)
    cache = (U, s, V, sp, H, Fn, R, J)
    return Fn, tau, cache


def _material_backward(cache, tau_bar, Fn_bar_ext, mu, lam):
    """Adjoint of _material_forward: (tau_bar, Fn_bar) -> Ftr_bar."""
    U, s, V, sp, H, Fn, R, J = cache
    FnT = np.swapaxes(Fn, 1, 2)
    tbT = np.swapaxes(tau_bar, 1, 2)
    Fn_bar = Fn_bar_ext + 2.0 * mu * (tau_bar @ Fn + tbT @ Fn - tbT @ R)
    R_bar = -2.0 * mu * (tau_bar @ Fn)
    J_bar = lam * (2.0 * J - 1.0) * np.trace(tau_bar, axis1=1, axis2=2)
    sp_bar = J_bar[:, None] * J[:, None] / sp

    UT = np.swapaxes(U, 1, 2)
    B_bar = UT @ Fn_bar @ V
    Rh_bar = UT @ R_bar @ V

    A_bar = np.zeros_like(B_bar)
    for i in range(3):
        sp_bar[:, i] += B_bar[:, i, i]
    for (i, j) in _PAIRS:
        den = s[:, j] - s[:, i]
        num = sp[:, j] - sp[:, i]
        small = np.abs(den) < 1e-6 * (np.abs(s[:, i]) + np.abs(s[:, j]) + 1e-30)
        with np.errstate(invalid="ignore", divide="ignore"):
            D = np.where(small, H[:, j, j] - H[:, i, j], num / np.where(small, 1.0, den))
        t = (sp[:, i] + sp[:, j]) / (s[:, i] + s[:, j])
        p_bar = (B_bar[:, i, j] + B_bar[:, j, i]) * D
        m_bar = (B_bar[:, i, j] - B_bar[:, j, i]) * t \
            + (Rh_bar[:, i, j] - Rh_bar[:, j, i]) * 2.0 / (s[:, i] + s[:, j])
        A_bar[:, i, j] = 0.5 * (p_bar + m_bar)
        A_bar[:, j, i] = 0.5 * (p_bar - m_bar)
    s_bar = np.einsum("nij,ni->nj", H, sp_bar)
    for i in range(3):
        A_bar[:, i, i] = s_bar[:, i]
    return U @ A_bar @ np.swapaxes(V, 1, 2)


# ---------------------------------------------------------------------------
# Manipulator SDF queries (local frame) with normals and curvature terms
# ---------------------------------------------------------------------------

def _quat_mat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _manip_sdf(kind, sz, xl):
    """Return (s, n_l, P, r): H_local = (I - n n^T) diag(P) / r."""
    A = xl.shape[0]
    P = np.ones((A, 3))
    if kind == 0:    # sphere
        r = np.linalg.norm(xl, axis=1)
        rs = np.maximum(r, 1e-9)
        n = xl / rs[:, None]
        n[r < 1e-9] = (0.0, 1.0, 0.0)
        return r - sz[0], n, P, rs
    if kind == 1:    # capsule along local y
        u = xl.copy()
        u[:, 1] -= np.clip(xl[:, 1], -sz[1], sz[1])
        P[:, 1] = (np.abs(xl[:, 1]) >= sz[1]).astype(float)
        r = np.linalg.norm(u, axis=1)
        rs = np.maximum(r, 1e-9)
        n = u / rs[:, None]
        n[r < 1e-9] = (0.0, 1.0, 0.0)
        return r - sz[0], n, P, rs
    if kind == 2:    # rounded box, half extents sz[0:3], radius sz[3]
        b = sz[0:3]
        q = np.abs(xl) - b
        u = np.sign(xl) * np.maximum(q, 0.0)
        r = np.linalg.norm(u, axis=1)
        out = r > 1e-9
        rs = np.maximum(r, 1e-9)
        n = np.where(out[:, None], u / rs[:, None], 0.0)
        P = (q > 0.0).astype(float)
        s = np.where(out, r - sz[3], q.max(axis=1) - sz[3])
        if np.any(~out):
            rows = np.where(~out)[0]
            ax = np.argmax(q[rows], axis=1)
            sign = np.sign(xl[rows, ax])
            sign[sign == 0.0] = 1.0
            n[rows, ax] = sign
            P[rows] = 0.0
        return s, n, P, rs
    raise ValueError(f"unknown manipulator kind {kind}")


def _smootherstep(t):
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def _smootherstep_d(t):
    return 30.0 * t * t * (t - 1.0) * (t - 1.0)


def _gate(vn, v_gate):
    """Smooth one-sided gate: ~0 for approaching, ~vn for separating."""
    z = np.clip(vn / v_gate, 0.0, 1.0)
    s = _smootherstep(z)
    g = vn * s
    gp = s + z * _smootherstep_d(z)
    return g, gp


def _contact_stage(u, X, mp_row, h_soft, mu_c, v_gate, want_back=False):
    """Forward contact response of one manipulator on node velocities u.

    Returns (u_new, locals) where locals feed the backward pass.
    """
    kind = int(mp_row[0])
    sz = mp_row[1:5]
    c = mp_row[5:8]
    q = mp_row[8:12]
    vm = mp_row[12:15]
    om = mp_row[15:18]
    Rm = _quat_mat(q)
    d = X - c
    xl = d @ Rm
    s, n_l, P, r = _manip_sdf(kind, sz, xl)
    act = s < h_soft
    if not np.any(act):
        return u, None
    idx = np.where(act)[0]
    sa = s[idx]
    t = np.clip(1.0 - sa / h_soft, 0.0, 1.0)
    wgt = _smootherstep(t)
    n = n_l[idx] @ Rm.T
    da = d[idx]
    v_pt = vm + np.cross(om, da)
    ua = u[idx]
    vrel = ua - v_pt
    vn = np.einsum("ij,ij->i", vrel, n)
    gv, gp = _gate(vn, v_gate)
    vt = vrel - vn[:, None] * n
    vc = v_pt + gv[:, None] * n + (1.0 - mu_c) * vt
    u_new = u.copy()
    u_new[idx] = ua + wgt[:, None] * (vc - ua)
    loc = None
    if want_back:
        loc = dict(idx=idx, s=sa, t=t, wgt=wgt, n=n, d=da, v_pt=v_pt, u_in=ua,
                   vrel=vrel, vn=vn, gv=gv, gp=gp, vc=vc, Rm=Rm, omega=om,
                   P=P[idx], r=r[idx], n_l=n_l[idx])
    return u_new, loc


def _contact_stage_back(b, loc, h_soft, mu_c):
    """Adjoint of _contact_stage. Returns (u_bar, c_bar, th_bar, vm_bar, om_bar)."""
    u_bar = b.copy()
    idx = loc["idx"]
    ba = b[idx]
    wgt = loc["wgt"][:, None]
    n = loc["n"]
    vrel = loc["vrel"]
    gp = loc["gp"][:, None]
    gv = loc["gv"][:, None]
    vn = loc["vn"][:, None]
    # E = gp n n^T + (1 - mu_c)(I - n n^T), symmetric
    nb = np.einsum("ij,ij->i", n, ba)[:, None]
    Eb = gp * nb * n + (1.0 - mu_c) * (ba - nb * n)
    u_bar[idx] = (1.0 - wgt) * ba + wgt * Eb
    vpt_bar = wgt * (ba - Eb)
    n_bar = wgt * ((gp - (1.0 - mu_c)) * nb * vrel
                   + (gv - (1.0 - mu_c) * vn) * ba)
    w_bar = np.einsum("ij,ij->i", ba, loc["vc"] - loc["u_in"])
    t = loc["t"]
    interior = (t > 0.0) & (t < 1.0)
    s_bar = np.where(interior, w_bar * _smootherstep_d(t) * (-1.0 / h_soft), 0.0)

    d = loc["d"]
    Rm = loc["Rm"]
    # world-frame curvature term: Hw n_bar with H_local = (I - n n^T) diag(P)/r
    nl_bar = n_bar @ Rm          # rotate into the local frame
    hn_l = (loc["P"] * (nl_bar - loc["n_l"]
                        * np.einsum("ij,ij->i", loc["n_l"], nl_bar)[:, None])
            / loc["r"][:, None])
    Hw_nbar = hn_l @ Rm.T
    c_bar = (-s_bar[:, None] * n - Hw_nbar
             + np.cross(loc["omega"], vpt_bar)).sum(axis=0)
    th_bar = (s_bar[:, None] * np.cross(n, d) + np.cross(d, vpt_bar)
              + np.cross(Hw_nbar, d) + np.cross(n, n_bar)).sum(axis=0)
    vm_bar = vpt_bar.sum(axis=0)
    om_bar = np.cross(d, vpt_bar).sum(axis=0)
    return u_bar, c_bar, th_bar, vm_bar, om_bar


def _walls_forward(u, coords, bound, n_grid, mu_wall, trace=None):
    u = u.copy()
    for axis in range(3):
        for side in (0, 1):
            if side == 0:
                m = (coords[:, axis] < bound) & (u[:, axis] < 0.0)
            else:
                m = (coords[:, axis] > n_grid - bound) & (u[:, axis] > 0.0)
            if trace is not None:
                trace.append((axis, side, np.where(m)[0], u[m].copy()))
            if not np.any(m):
                continue
            others = [a for a in range(3) if a != axis]
            vn = np.abs(u[m, axis])
            vt = u[np.ix_(np.where(m)[0], others)]
            vtn = np.linalg.norm(vt, axis=1)
            scale = np.maximum(0.0, 1.0 - mu_wall * vn / np.maximum(vtn, 1e-30))
            u[m, axis] = 0.0
            rows = np.where(m)[0]
            u[np.ix_(rows, others)] = vt * scale[:, None]
    return u


def _walls_backward(b, trace, mu_wall):
    b = b.copy()
    for axis, side, rows, u_in in reversed(trace):
        if len(rows) == 0:
            continue
        others = [a for a in range(3) if a != axis]
        sgn = -1.0 if side == 0 else 1.0
        vn = np.abs(u_in[:, axis])
        vt = u_in[:, others]
        vtn = np.linalg.norm(vt, axis=1)
        raw = 1.0 - mu_wall * vn / np.maximum(vtn, 1e-30)
        scale = np.maximum(0.0, raw)
        live = raw > 0.0
        bt = b[np.ix_(rows, others)]
        new_bt = np.zeros_like(bt)
        new_ba = np.zeros(len(rows))
        if np.any(live):
            th = np.zeros_like(vt)
            th[live] = vt[live] / vtn[live, None]
            tb = np.einsum("ij,ij->i", th, bt)
            new_bt[live] = (scale[live, None] * bt[live]
                            + (1.0 - scale[live, None]) * tb[live, None] * th[live])
            new_ba[live] = -mu_wall * sgn * tb[live]
        b[np.ix_(rows, others)] = new_bt
        b[rows, axis] = new_ba
    return b


# ---------------------------------------------------------------------------
# Substep forward
# ---------------------------------------------------------------------------

def _unpack(params):
    return dict(
        dt=params[P_DT], inv_dx=params[P_INV_DX], mu=params[P_MU],
        lam=params[P_LAM], yield_stress=params[P_YIELD],
        g=np.array([params[P_GX], params[P_GY], params[P_GZ]]),
        p_mass=params[P_MASS], p_vol=params[P_VOL],
        bound=int(params[P_BOUND]), wall_mu=params[P_WALL_FRICTION],
        mu_c=params[P_CONTACT_FRICTION], h_soft=params[P_CONTACT_SOFT],
        v_gate=params[P_GATE_V], margin=params[P_MARGIN],
        n_grid=int(params[P_NGRID]),
    )


def _forward_core(x, v, C, F, mp, params, want_back=False):
    """Shared forward computation; returns everything the adjoint needs."""
    pr = _unpack(params)
    dt, inv_dx = pr["dt"], pr["inv_dx"]
    G = pr["n_grid"] + 1
    n = x.shape[0]

    Ftr = F + dt * (C @ F)
    Fn, tau, mcache = _material_forward(Ftr, pr["mu"], pr["lam"], pr["yield_stress"])
    coef = -dt * 4.0 * inv_dx * inv_dx * pr["p_vol"]
    Q = pr["p_mass"] * C + coef * tau

    base, fx, w, dw = _weights(x, inv_dx)
    flat, w27, gw, dpos = _stencil(base, fx, w, dw, inv_dx, G)

    mom = w27[:, :, None] * (pr["p_mass"] * v[:, None, :]
                             + np.einsum("nij,noj->noi", Q, dpos))
    gm = np.bincount(flat.ravel(), weights=(w27 * pr["p_mass"]).ravel(),
                     minlength=G ** 3)
    gv = np.stack([np.bincount(flat.ravel(), weights=mom[:, :, k].ravel(),
                               minlength=G ** 3) for k in range(3)], axis=1)

    active = np.where(gm > 0.0)[0]
    u0 = gv[active] / gm[active, None] + dt * pr["g"]

    ii = active // (G * G)
    jj = (active // G) % G
    kk = active % G
    coords = np.stack([ii, jj, kk], axis=1)
    X = coords / inv_dx

    u = u0
    clocs = []
    for m in range(mp.shape[0]):
        u, loc = _contact_stage(u, X, mp[m], pr["h_soft"], pr["mu_c"],
                                pr["v_gate"], want_back=want_back)
        clocs.append(loc)
    wtrace = [] if want_back else None
    u = _walls_forward(u, coords, pr["bound"], pr["n_grid"], pr["wall_mu"],
                       trace=wtrace)

    ufull = np.zeros((G ** 3, 3))
    ufull[active] = u

    u27 = ufull[flat]
    v_new = np.einsum("no,noi->ni", w27, u27)
    B = np.einsum("no,noi,noj->nij", w27, u27, dpos)
    C_new = 4.0 * inv_dx * inv_dx * B
    lo, hi = pr["margin"], 1.0 - pr["margin"]
    x_unc = x + dt * v_new
    x_new = np.clip(x_unc, lo, hi)
    clamp_mask = ((x_unc > lo) & (x_unc < hi)).astype(float)

    fwd = dict(pr=pr, G=G, Ftr=Ftr, Fn=Fn, tau=tau, mcache=mcache, coef=coef,
               Q=Q, flat=flat, w27=w27, gw=gw, dpos=dpos, gm=gm, active=active,
               u0=u0, u=u, ufull=ufull, clocs=clocs, wtrace=wtrace, X=X,
               coords=coords, clamp_mask=clamp_mask, u27=u27)
    return x_new, v_new, C_new, Fn, fwd


def substep(x, v, C, F, xo, vo, Co, Fo, mp, params):
    """One forward substep; returns 0, or 1 if any output is non-finite."""
    x_new, v_new, C_new, F_new, _ = _forward_core(x, v, C, F, mp, params,
                                                  want_back=False)
    xo[...] = x_new
    vo[...] = v_new
    Co[...] = C_new
    Fo[...] = F_new
    ok = (np.isfinite(x_new).all() and np.isfinite(v_new).all()
          and np.isfinite(C_new).all() and np.isfinite(F_new).all())
    return 0 if ok else 1


def substep_grad(x, v, C, F, mp, axo, avo, aCo, aFo,
                 axi, avi, aCi, aFi, aman, params):
    """Adjoint of `substep`.

    Inputs are the saved substep inputs plus the adjoints of the outputs;
    writes the adjoints of the inputs and per-manipulator contact adjoints
    aman[m] = (d/center, d/rotation-vector, d/velocity, d/omega).
    """
    _, _, _, _, fwd = _forward_core(x, v, C, F, mp, params, want_back=True)
    pr = fwd["pr"]
    dt, inv_dx = pr["dt"], pr["inv_dx"]
    G = fwd["G"]
    flat, w27, gw, dpos = fwd["flat"], fwd["w27"], fwd["gw"], fwd["dpos"]
    active, gm = fwd["active"], fwd["gm"]
    u27 = fwd["u27"]

    aman[...] = 0.0

    # ---- G2P adjoint: seed grid adjoint, collect position terms
    vbar = avo + dt * fwd["clamp_mask"] * axo
    Bbar = 4.0 * inv_dx * inv_dx * aCo
    contrib = w27[:, :, None] * (vbar[:, None, :]
                                 + np.einsum("nij,noj->noi", Bbar, dpos))
    agrid = np.stack([np.bincount(flat.ravel(), weights=contrib[:, :, k].ravel(),
                                  minlength=G ** 3) for k in range(3)], axis=1)
    x_bar = fwd["clamp_mask"] * axo
    s1 = np.einsum("ni,noi->no", vbar, u27) \
        + np.einsum("noi,nij,noj->no", u27, Bbar, dpos)
    x_bar += np.einsum("no,nok->nk", s1, gw)
    x_bar -= np.einsum("no,nij,noi->nj", w27, Bbar, u27)

    # ---- grid BC chain backward on active nodes
    b = agrid[active]
    if fwd["wtrace"]:
        b = _walls_backward(b, fwd["wtrace"], pr["wall_mu"])
    for m in range(mp.shape[0] - 1, -1, -1):
        loc = fwd["clocs"][m]
        if loc is None:
            continue
        b, c_bar, th_bar, vm_bar, om_bar = _contact_stage_back(
            b, loc, pr["h_soft"], pr["mu_c"])
        aman[m, 0:3] += c_bar
        aman[m, 3:6] += th_bar
        aman[m, 6:9] += vm_bar
        aman[m, 9:12] += om_bar

    # ---- mass/momentum division adjoint
    u0 = fwd["u0"]
    ga = gm[active]
    amv_act = b / ga[:, None]
    am_act = -np.einsum("ij,ij->i", b, u0 - dt * pr["g"]) / ga
    amv = np.zeros((G ** 3, 3))
    amv[active] = amv_act
    am = np.zeros(G ** 3)
    am[active] = am_act

    # ---- P2G adjoint
    amv27 = amv[flat]
    am27 = am[flat]
    v_bar = pr["p_mass"] * np.einsum("no,noi->ni", w27, amv27)
    Q_bar = np.einsum("no,noi,noj->nij", w27, amv27, dpos)
    mom_val = pr["p_mass"] * v[:, None, :] + np.einsum("nij,noj->noi", fwd["Q"], dpos)
    s2 = pr["p_mass"] * am27 + np.einsum("noi,noi->no", amv27, mom_val)
    x_bar += np.einsum("no,nok->nk", s2, gw)
    x_bar -= np.einsum("no,nji,noj->ni", w27, fwd["Q"], amv27)

    # ---- material adjoint back to (F, C)
    tau_bar = fwd["coef"] * Q_bar
    Ftr_bar = _material_backward(fwd["mcache"], tau_bar, aFo, pr["mu"], pr["lam"])
    C_bar = pr["p_mass"] * Q_bar + dt * (Ftr_bar @ np.swapaxes(F, 1, 2))
    eye_dtC = np.broadcast_to(np.eye(3), C.shape) + dt * C
    F_bar = np.einsum("nki,nkj->nij", eye_dtC, Ftr_bar)

    axi[...] = x_bar
    avi[...] = v_bar
    aCi[...] = C_bar
    aFi[...] = F_bar
    return 0
