"""Shared oracles and random-instance generators for the test suite."""

import numpy as np

from blocklm import lie, problems as pb, sparse, trace as tr


def random_quat(rng, n=None):
    shape = (4,) if n is None else (n, 4)
    return lie.quat_normalize(rng.standard_normal(shape))


def random_pose(rng, n=None, scale=1.0):
    shape = (3,) if n is None else (n, 3)
    return np.concatenate([scale * rng.standard_normal(shape), random_quat(rng, n)], axis=-1)


def look_at(center, forward_positive_z):
    """World-to-camera pose looking at the origin along +z (pinhole) or -z (BAL)."""
    z = -center / np.linalg.norm(center)
    if not forward_positive_z:
        z = -z
    x = np.cross([0.0, 0.3, 1.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return np.concatenate([-rot @ center, lie.matrix_to_quat(rot)])


def random_ba(rng, num_cameras, num_points, model="pinhole", extra_obs=0):
    """Random BA instance; every point is seen at least once and all depths are safe."""
    centers = rng.standard_normal((num_cameras, 3))
    centers *= rng.uniform(4.0, 6.0, (num_cameras, 1)) / np.linalg.norm(centers, axis=1, keepdims=True)
    poses = np.array([look_at(c, model == "pinhole") for c in centers])
    poses = lie.retract(poses, 0.05 * rng.standard_normal((num_cameras, 6)))
    points = rng.uniform(-0.5, 0.5, (num_points, 3))
    pidx = np.concatenate([np.arange(num_points), rng.integers(0, num_points, extra_obs)])
    cidx = rng.integers(0, num_cameras, len(pidx))
    if model == "pinhole":
        intr = pb.PinholeIntrinsics(*rng.uniform(150, 300, 2), *rng.uniform(50, 150, 2))
    else:
        intr = pb.BalIntrinsics(rng.uniform(300, 600, num_cameras),
                                rng.uniform(-0.1, 0.1, num_cameras), rng.uniform(-0.05, 0.05, num_cameras))
    pixels = rng.uniform(-50, 50, (len(pidx), 2))
    return pb.build_ba(poses, points, intr, cidx, pidx, pixels)


def random_pgo(rng, num_poses, num_edges=None, anchor=True, whitened=True):
    poses = random_pose(rng, num_poses)
    ei = list(range(num_poses - 1))
    ej = list(range(1, num_poses))
    for _ in range(num_edges if num_edges is not None else num_poses):
        i, j = rng.choice(num_poses, 2, replace=False)
        ei.append(i)
        ej.append(j)
    ei, ej = np.array(ei), np.array(ej)
    meas = lie.retract(lie.compose(lie.inverse(poses[ei]), poses[ej]),
                       0.3 * rng.standard_normal((len(ei), 6)))
    info = None
    if whitened:
        m = rng.standard_normal((len(ei), 6, 6))
        info = m @ np.swapaxes(m, 1, 2) + 6 * np.eye(6)
    init = lie.retract(poses, 0.2 * rng.standard_normal(poses.shape[:-1] + (6,)))
    return pb.build_pgo(init, ei, ej, meas, info, anchor=anchor)


def residuals(problem, params):
    ev = tr.evaluate(problem.model, {g: params[g.name] for g in problem.groups})
    return ev.residuals.ravel()


def sparse_dense_jacobian(problem, params=None):
    params = params or problem.initial
    ev = tr.evaluate(problem.model, {g: params[g.name] for g in problem.groups})
    jac = tr.sparse_jacobian(ev.graph, ev.output)
    return np.hstack([sparse.to_dense(jac.by_group[g.name]) for g in problem.groups])


def fd_jacobian(problem, params=None, h=1e-6):
    """Central differences along each free tangent coordinate (left retraction for poses)."""
    params = params or problem.initial
    cols = []
    for g in problem.groups:
        for e in np.flatnonzero(g.column_map() >= 0):
            for k in range(g.tangent_dim):
                step = np.zeros(g.tangent_dim)
                step[k] = h
                out = []
                for s in (step, -step):
                    moved = {n: v.copy() for n, v in params.items()}
                    if g.kind == tr.POSE:
                        moved[g.name][e] = lie.retract(params[g.name][e], s)
                    else:
                        moved[g.name][e] = params[g.name][e] + s
                    out.append(residuals(problem, moved))
                cols.append((out[0] - out[1]) / (2 * h))
    return np.column_stack(cols)


def block_rel_errors(problem, dense, oracle):
    """Relative Frobenius error of every nonzero block of ``oracle``."""
    bw = problem.residual_width
    offsets = np.cumsum([0] + [g.tangent_dim * g.num_free for g in problem.groups])
    errs = []
    for g, off in zip(problem.groups, offsets):
        d = g.tangent_dim
        for r in range(0, dense.shape[0], bw):
            for c in range(off, off + d * g.num_free, d):
                a, b = dense[r:r + bw, c:c + d], oracle[r:r + bw, c:c + d]
                nb = np.linalg.norm(b)
                if nb > 0 or np.linalg.norm(a) > 0:
                    errs.append(np.linalg.norm(a - b) / max(nb, np.finfo(float).tiny))
    return np.array(errs)


def random_bsr(rng, block_rows, block_cols, block_shape, density=0.3):
    mask = rng.random((block_rows, block_cols)) < density
    r, c = np.nonzero(mask)
    blocks = rng.standard_normal((len(r),) + tuple(block_shape))
    return sparse.from_blocks(r, c, blocks, block_rows, block_cols)


def random_spd(rng, n, density=0.05, spread=1.0):
    m = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    a = m @ m.T + n * 1e-2 * np.eye(n)
    if spread != 1.0:
        d = np.sqrt(np.logspace(0, np.log10(spread), n))
        a = d[:, None] * a * d[None, :]
    return a


def reference_lm_cost(problem, max_nfev=500):
    """Final cost of an independent LM (scipy, finite-difference Jacobian).

    Parameters live in a fixed chart around the initial values:
    ``pose = Exp(delta) * pose0`` and ``point = point0 + delta``.
    """
    from scipy.optimize import least_squares
    import scipy.sparse as sps

    base = {k: np.asarray(v, float) for k, v in problem.initial.items()}
    layout = []
    for g in problem.groups:
        free = np.flatnonzero(g.column_map() >= 0)
        layout.append((g, free, g.tangent_dim * len(free)))

    def unpack(x):
        out, off = {}, 0
        for g, free, size in layout:
            v = base[g.name].copy()
            step = x[off:off + size].reshape(len(free), g.tangent_dim)
            off += size
            v[free] = lie.retract(v[free], step) if g.kind == tr.POSE else v[free] + step
            out[g.name] = v
        return out

    n = sum(size for _, _, size in layout)
    fun = lambda x: residuals(problem, unpack(x))  # noqa: E731
    tol = {"xtol": 1e-15, "ftol": 1e-15, "gtol": 1e-15}
    if n <= 2000:
        sol = least_squares(fun, np.zeros(n), method="lm", **tol)
    else:
        ev = tr.evaluate(problem.model, problem.params())
        jac = tr.sparse_jacobian(ev.graph, ev.output)
        pattern = sps.hstack([sparse.to_csr(jac.by_group[g.name]) for g in problem.groups]).tocsr()
        pattern.data[:] = 1.0
        sol = least_squares(fun, np.zeros(n), jac_sparsity=pattern, method="trf", max_nfev=max_nfev,
                            **tol)
    return float(sol.fun @ sol.fun)
