"""Independent reimplementation of the energy terms for cross-checking.

Everything here is written as plain per-element loops with scalar math,
deliberately sharing no formula code with the package: homographies,
backprojections, norms and weights are all rebuilt from first
principles.  Only the data containers (SceneState fields) are read.
"""

import math

import numpy as np


def _kmat(intr):
    return [[intr.fx, 0.0, intr.cx],
            [0.0, intr.fy, intr.cy],
            [0.0, 0.0, 1.0]]


def _kinv(intr):
    return [[1.0 / intr.fx, 0.0, -intr.cx / intr.fx],
            [0.0, 1.0 / intr.fy, -intr.cy / intr.fy],
            [0.0, 0.0, 1.0]]


def _matmul3(a, b):
    return [[sum(a[r][m] * b[m][c] for m in range(3)) for c in range(3)]
            for r in range(3)]


def _homography(intr, rot, trans, normal, depth):
    inner = [[rot[r][c] - trans[r] * normal[c] / depth for c in range(3)]
             for r in range(3)]
    return _matmul3(_kmat(intr), _matmul3(inner, _kinv(intr)))


def _map_pixel(h, u, v):
    x = h[0][0] * u + h[0][1] * v + h[0][2]
    y = h[1][0] * u + h[1][1] * v + h[1][2]
    w = h[2][0] * u + h[2][1] * v + h[2][2]
    return x / w, y / w


def _ray(intr, u, v):
    return [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]


def _backproject(intr, u, v, normal, depth):
    ray = _ray(intr, u, v)
    den = sum(normal[a] * ray[a] for a in range(3))
    if abs(den) < 1e-12:
        den = -1e-12
    s = -depth / den
    return [s * ray[a] for a in range(3)]


def _dist3(a, b):
    return math.sqrt(sum((a[c] - b[c]) ** 2 for c in range(3)))


def _move(rot, trans, p):
    return [sum(rot[r][c] * p[c] for c in range(3)) + trans[r]
            for r in range(3)]


def _patch_arrays(state, i):
    p = state.patches[i]
    lam = float(state.lam[i])
    rot = [[float(p.motion.rotation[r][c]) for c in range(3)]
           for r in range(3)]
    trans = [lam * float(p.motion.translation[c]) for c in range(3)]
    normal = [float(p.plane.normal[c]) for c in range(3)]
    depth = lam * float(p.plane.depth)
    return rot, trans, normal, depth


def bf_e_arap(state, params):
    graph = state.graph
    diag = math.sqrt(graph.width ** 2 + graph.height ** 2)
    total = 0.0
    for i, k in graph.knn_edges:
        i, k = int(i), int(k)
        pi, pk = state.patches[i], state.patches[k]
        ai = graph.superpixels[i].anchor_pixel
        ak = graph.superpixels[k].anchor_pixel
        dpx = math.sqrt((ai[0] - ak[0]) ** 2 + (ai[1] - ak[1]) ** 2)
        w = math.exp(-params.beta * dpx / diag)

        if pi.reliable and pk.reliable:
            ri, ti, _, _ = _patch_arrays(state, i)
            rk, tk, _, _ = _patch_arrays(state, k)
            sq = 0.0
            for r in range(3):
                for c in range(3):
                    sq += (ri[r][c] - rk[r][c]) ** 2
            bal = params.arap_unit_balance
            for c in range(3):
                sq += (bal * (ti[c] - tk[c])) ** 2
            total += w * math.sqrt(sq)

        scaleful_i = pi.reliable and pi.normal_determined and not pi.static
        scaleful_k = pk.reliable and pk.normal_determined and not pk.static
        if scaleful_i and scaleful_k:
            ri, ti, _, _ = _patch_arrays(state, i)
            rk, tk, _, _ = _patch_arrays(state, k)
            xi = [float(state.lam[i]) * float(pi.anchor3d[c])
                  for c in range(3)]
            xk = [float(state.lam[k]) * float(pk.anchor3d[c])
                  for c in range(3)]
            xi2 = _move(ri, ti, xi)
            xk2 = _move(rk, tk, xk)
            total += w * abs(_dist3(xi, xk) - _dist3(xi2, xk2))
    return total


def bf_e_proj(state, params):
    del params
    total = 0.0
    for i, patch in enumerate(state.patches):
        if not patch.reliable:
            continue
        sp = state.graph.superpixels[i]
        rot, trans, normal, depth = _patch_arrays(state, i)
        h = _homography(state.intr, rot, trans, normal, depth)
        errs = []
        for (u, v) in sp.pixels:
            du, dv = state.flow.uv[int(v), int(u)]
            if not (math.isfinite(float(du)) and math.isfinite(float(dv))):
                continue
            mu, mv = _map_pixel(h, float(u), float(v))
            errs.append(math.sqrt((mu - (u + float(du))) ** 2
                                  + (mv - (v + float(dv))) ** 2))
        if errs:
            total += sum(errs) / len(errs)
    return total


def bf_e_cont(state, params):
    total = 0.0
    for idx, row in enumerate(state.graph.boundary_pairs):
        i, up, vp, k = (int(x) for x in row[:4])
        pi, pk = state.patches[i], state.patches[k]
        if not (pi.reliable and pi.normal_determined
                and pk.reliable and pk.normal_determined):
            continue
        ri, ti, ni, di = _patch_arrays(state, i)
        rk, tk, nk, dk = _patch_arrays(state, k)
        xi = _backproject(state.intr, float(up), float(vp), ni, di)
        xk = _backproject(state.intr, float(up), float(vp), nk, dk)
        xi2 = _move(ri, ti, xi)
        xk2 = _move(rk, tk, xk)
        w4 = math.exp(-params.beta
                      * float(state.graph.pair_color_dist[idx]))
        total += w4 * (_dist3(xi, xk) + min(_dist3(xi2, xk2), params.sigma))
    return total


def bf_e_total(state, params):
    return (bf_e_arap(state, params)
            + params.alpha1 * bf_e_proj(state, params)
            + params.alpha2 * bf_e_cont(state, params))
