"""Scale solving and particle-based refinement.

Stage 1 (solve_scales): minimize the anchor-rigidity energy over the
scale simplex {lam > 0, sum lam = 1}.  The nonsmooth norms are smoothed
with a pseudo-Huber at delta = 1e-6 so a damped Newton method applies;
positivity is kept by a log barrier with a decreasing weight, and the
sum constraint by solving the Newton system on the simplex tangent
(bordered KKT form).  The reported energy is the true unsmoothed term.

Stage 2 (refine): with scales frozen, each patch proposes 50 particles
(the incumbent plus Gaussian perturbations of normal, log-depth,
rotation, and translation direction), and a sequential tree-reweighted
max-product pass (TRW-S) over the patch graph picks one particle per
patch.  The all-incumbent labeling is always a candidate, so the total
energy never increases.

trws_pass reports a lower bound computed from an explicit monotonic
chain decomposition of the reparameterized potentials; the bound is
non-decreasing across passes and certifies optimality when it meets
the labeling energy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .energy import RAY_DOT_FLOOR, EnergyParams, SceneState, \
    arap_edge_weights, e_arap, e_total
from .errors import CheiralityError, DegenerateGeometryError, NumericalError
from .geometry import Plane, RigidMotion, backproject, pixel_rays, \
    rotation_from_axis_angle
from .local_sfm import PlanarPatch
from .scene_graph import assert_connected

HUBER_DELTA = 1e-6
KKT_TOL = 1e-6


@dataclass(frozen=True)
class ScaleSolution:
    lambdas: np.ndarray
    converged: bool
    iterations: int
    final_energy: float
    observable: bool = True  # False when no patch carries scale evidence


# ---------------------------------------------------------------------------
# stage 1: scales


class _ArapModel:
    """E_arap as a smooth function of lam, with gradient and Hessian.

    Precomputes per-edge constants; the smoothing replaces each norm
    ||v|| by sqrt(||v||^2 + delta^2) - delta and the outer absolute
    value by the same construction.
    """

    def __init__(self, state: SceneState, params: EnergyParams):
        g = state.graph
        edges = g.knn_edges
        self.n = g.n
        self.i = edges[:, 0]
        self.k = edges[:, 1]
        self.w = arap_edge_weights(g, params.beta)
        reliable = state.reliable_mask()
        scaleful = state.scaleful_mask()
        self.m1 = (reliable[self.i] & reliable[self.k]).astype(float)
        self.m2 = (scaleful[self.i] & scaleful[self.k]).astype(float)

        rot = state.rotations()
        gap = rot[self.i] - rot[self.k]
        self.c2 = (gap ** 2).sum(axis=(1, 2))
        t_unit = np.array([p.motion.translation for p in state.patches])
        anchors = np.array([p.anchor3d for p in state.patches])
        anchors_next = np.einsum("nab,nb->na", rot, anchors) + t_unit
        self.ti = t_unit[self.i]
        self.tk = t_unit[self.k]
        self.ai = anchors[self.i]
        self.ak = anchors[self.k]
        self.api = anchors_next[self.i]
        self.apk = anchors_next[self.k]
        self.bal2 = params.arap_unit_balance ** 2

    def _parts(self, lam: np.ndarray):
        li = lam[self.i][:, None]
        lk = lam[self.k][:, None]
        q = li * self.ti - lk * self.tk
        a = li * self.ai - lk * self.ak
        b = li * self.api - lk * self.apk
        return q, a, b

    def value(self, lam: np.ndarray, delta: float = HUBER_DELTA) -> float:
        q, a, b = self._parts(lam)
        d2 = delta * delta
        rho1 = np.sqrt(self.c2 + self.bal2 * (q ** 2).sum(axis=1) + d2)
        f1 = self.w * self.m1 * (rho1 - delta)
        na = np.sqrt((a ** 2).sum(axis=1) + d2)
        nb = np.sqrt((b ** 2).sum(axis=1) + d2)
        diff = na - nb
        f2 = self.w * self.m2 * (np.sqrt(diff * diff + d2) - delta)
        return float(f1.sum() + f2.sum())

    def true_value(self, lam: np.ndarray) -> float:
        q, a, b = self._parts(lam)
        rho1 = np.sqrt(self.c2 + self.bal2 * (q ** 2).sum(axis=1))
        f1 = self.w * self.m1 * rho1
        diff = np.linalg.norm(a, axis=1) - np.linalg.norm(b, axis=1)
        f2 = self.w * self.m2 * np.abs(diff)
        return float(f1.sum() + f2.sum())

    def grad_hess(self, lam: np.ndarray, delta: float = HUBER_DELTA):
        q, a, b = self._parts(lam)
        d2 = delta * delta
        n = self.n
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        iidx, kidx = self.i, self.k

        def scatter(gi, gk, hii, hkk, hik):
            np.add.at(grad, iidx, gi)
            np.add.at(grad, kidx, gk)
            np.add.at(hess, (iidx, iidx), hii)
            np.add.at(hess, (kidx, kidx), hkk)
            np.add.at(hess, (iidx, kidx), hik)
            np.add.at(hess, (kidx, iidx), hik)

        # motion-matrix term: rho = sqrt(c2 + bal2*|q|^2 + d2)
        w1 = self.w * self.m1
        rho = np.sqrt(self.c2 + self.bal2 * (q ** 2).sum(axis=1) + d2)
        qti = self.bal2 * (q * self.ti).sum(axis=1)
        qtk = self.bal2 * (q * self.tk).sum(axis=1)
        tii = self.bal2 * (self.ti ** 2).sum(axis=1)
        tkk = self.bal2 * (self.tk ** 2).sum(axis=1)
        tik = self.bal2 * (self.ti * self.tk).sum(axis=1)
        scatter(w1 * qti / rho, -w1 * qtk / rho,
                w1 * (tii / rho - qti ** 2 / rho ** 3),
                w1 * (tkk / rho - qtk ** 2 / rho ** 3),
                w1 * (-tik / rho + qti * qtk / rho ** 3))

        # distance-preservation term: h(na - nb)
        w2 = self.w * self.m2
        na = np.sqrt((a ** 2).sum(axis=1) + d2)
        nb = np.sqrt((b ** 2).sum(axis=1) + d2)
        diff = na - nb
        root = np.sqrt(diff * diff + d2)
        hp = diff / root
        hpp = d2 / root ** 3

        aai = (a * self.ai).sum(axis=1)
        aak = (a * self.ak).sum(axis=1)
        bpi = (b * self.api).sum(axis=1)
        bpk = (b * self.apk).sum(axis=1)
        dna_i, dna_k = aai / na, -aak / na
        dnb_i, dnb_k = bpi / nb, -bpk / nb
        dd_i = dna_i - dnb_i
        dd_k = dna_k - dnb_k

        aii = (self.ai ** 2).sum(axis=1)
        akk = (self.ak ** 2).sum(axis=1)
        aik = (self.ai * self.ak).sum(axis=1)
        pii = (self.api ** 2).sum(axis=1)
        pkk = (self.apk ** 2).sum(axis=1)
        pik = (self.api * self.apk).sum(axis=1)
        hna_ii = aii / na - aai ** 2 / na ** 3
        hna_kk = akk / na - aak ** 2 / na ** 3
        hna_ik = -aik / na + aai * aak / na ** 3
        hnb_ii = pii / nb - bpi ** 2 / nb ** 3
        hnb_kk = pkk / nb - bpk ** 2 / nb ** 3
        hnb_ik = -pik / nb + bpi * bpk / nb ** 3
        hd_ii = hna_ii - hnb_ii
        hd_kk = hna_kk - hnb_kk
        hd_ik = hna_ik - hnb_ik

        scatter(w2 * hp * dd_i, w2 * hp * dd_k,
                w2 * (hpp * dd_i ** 2 + hp * hd_ii),
                w2 * (hpp * dd_k ** 2 + hp * hd_kk),
                w2 * (hpp * dd_i * dd_k + hp * hd_ik))
        return grad, hess


def _tangent_residual(grad: np.ndarray) -> float:
    return float(np.abs(grad - grad.mean()).max())


def solve_scales(state: SceneState, params: EnergyParams,
                 init: np.ndarray | None = None) -> ScaleSolution:
    """Minimize the anchor-rigidity energy over the scale simplex.

    Only patches whose scale actually enters the energy (reliable and
    translating) are free variables; the rest would otherwise act as
    mass sinks, since the energy is 1-homogeneous in the scales and a
    patch with no anchor evidence absorbs simplex mass for free.  The
    free scales are solved on their own simplex by a log-barrier
    Newton homotopy (fraction-to-boundary rule plus Armijo
    backtracking), pinned patches then receive the mean free scale,
    and the whole vector is renormalized; by homogeneity this keeps
    the solved ratios and the energy ordering exactly.

    Returns uniform scales with observable=False when no reliable
    translating patch exists.
    """
    graph = state.graph
    n = graph.n
    if n == 1:
        lam = np.array([1.0])
        energy = e_arap(state.with_scales(lam), params)
        return ScaleSolution(lam, True, 0, energy)
    assert_connected(n, graph.knn_edges)

    free = np.array([i for i, p in enumerate(state.patches)
                     if p.reliable and not p.static], dtype=int)
    if len(free) == 0:
        lam = np.full(n, 1.0 / n)
        energy = e_arap(state.with_scales(lam), params)
        return ScaleSolution(lam, True, 0, energy, observable=False)

    model = _ArapModel(state, params)
    m = len(free)

    def scatter(x: np.ndarray) -> np.ndarray:
        lam = np.zeros(n)
        lam[free] = x
        return lam

    def f_val(x: np.ndarray) -> float:
        return model.value(scatter(x))

    if init is None:
        x = np.full(m, 1.0 / m)
    else:
        init = np.asarray(init, dtype=float)
        if init.shape != (n,) or np.any(init[free] <= 0):
            raise ValueError("init must be positive, one entry per patch")
        x = init[free] / init[free].sum()

    best_x = x.copy()
    best_true = model.true_value(scatter(x))
    iterations = 0

    def kkt_residual(x: np.ndarray, mu: float) -> float:
        # stationarity with the barrier's own multiplier estimates
        # z_i = mu/x_i, so boundary optima certify too
        grad_full, _ = model.grad_hess(scatter(x))
        return _tangent_residual(grad_full[free] - mu / x)

    mu = max(1e-3 * abs(f_val(x)) / m, 1e-8)
    mu_last = mu
    ones = np.ones(m)
    while mu > 1e-13:
        for _ in range(50):
            grad_full, hess_full = model.grad_hess(scatter(x))
            grad = grad_full[free]
            hess = hess_full[np.ix_(free, free)]
            grad_mu = grad - mu / x
            hess_mu = hess + np.diag(mu / x ** 2)
            if _tangent_residual(grad_mu) < max(1e-9, 0.01 * mu):
                break
            h_scale = 1.0 + np.abs(np.diag(hess_mu)).max()
            tau = 0.0
            step = None
            for _ in range(14):
                kkt = np.zeros((m + 1, m + 1))
                kkt[:m, :m] = hess_mu + tau * np.eye(m)
                kkt[:m, m] = ones
                kkt[m, :m] = ones
                rhs = np.concatenate([-grad_mu, [0.0]])
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    tau = max(10.0 * tau, 1e-10 * h_scale)
                    continue
                cand = sol[:m]
                if np.all(np.isfinite(cand)) and cand @ grad_mu < 0:
                    step = cand
                    break
                tau = max(10.0 * tau, 1e-10 * h_scale)
            if step is None:  # projected gradient always descends
                step = -(grad_mu - grad_mu.mean())
                if np.linalg.norm(step) < 1e-15:
                    break
            neg = step < 0
            alpha = 1.0
            if neg.any():
                alpha = min(1.0, float(0.995 * np.min(-x[neg] / step[neg])))
            f0 = f_val(x) - mu * float(np.log(x).sum())
            slope = float(step @ grad_mu)
            accepted = False
            for _ in range(40):
                trial = x + alpha * step
                if np.all(trial > 0):
                    f_trial = f_val(trial) - mu * float(np.log(trial).sum())
                    if f_trial <= f0 + 1e-4 * alpha * slope:
                        accepted = True
                        break
                alpha *= 0.5
            if not accepted:
                break
            moved = alpha * float(np.linalg.norm(step))
            x = (x + alpha * step) / (x + alpha * step).sum()
            iterations += 1
            t = model.true_value(scatter(x))
            if t < best_true:
                best_true, best_x = t, x.copy()
            if moved < 1e-15 * float(np.linalg.norm(x)):
                break  # step at float precision, stage is done
        mu_last = mu
        if mu <= 1e-9 and kkt_residual(x, mu) < 0.1 * KKT_TOL:
            break  # already stationary; smaller mu only hurts conditioning
        mu /= 10.0

    res = kkt_residual(x, mu_last)
    converged = bool(res < KKT_TOL)
    if not converged and best_true < model.true_value(scatter(x)):
        # uncertified run: at least return the best energy seen.  A
        # certified point is kept even if some wandering iterate saw a
        # marginally lower raw energy inside the smoothing width.
        x = best_x
        res = kkt_residual(x, mu_last)

    lam = scatter(x)
    lam[np.setdiff1d(np.arange(n), free)] = x.mean()
    lam = lam / lam.sum()
    energy = e_arap(state.with_scales(lam), params)
    return ScaleSolution(lam, converged, iterations, energy)


# ---------------------------------------------------------------------------
# TRW-S over particle labels


@dataclass
class TrwsResult:
    labels: np.ndarray
    bounds: list
    energy: float


def mrf_energy(labels: np.ndarray, unary: np.ndarray, pairwise: dict
               ) -> float:
    total = float(sum(unary[s, labels[s]] for s in range(len(unary))))
    for (s, t), table in pairwise.items():
        total += float(table[labels[s], labels[t]])
    return total


def _chain_decomposition(n: int, edge_list: list
                         ) -> tuple[list, np.ndarray]:
    """Split edges into monotonic chains; count chains through each node.

    Incoming chains at a node are extended along outgoing edges first;
    leftovers end there or start new chains.  Isolated nodes become
    singleton chains so every unary is represented exactly once.
    """
    by_lower: dict[int, list] = {}
    for (s, t) in edge_list:
        by_lower.setdefault(s, []).append(t)
    chains: list[list[int]] = []
    open_at: dict[int, list[int]] = {}
    n_through = np.zeros(n, dtype=int)
    for s in range(n):
        incoming = open_at.pop(s, [])
        outgoing = sorted(by_lower.get(s, []))
        n_through[s] = max(len(incoming), len(outgoing))
        if n_through[s] == 0:
            n_through[s] = 1
            chains.append([s])
            continue
        for j, t in enumerate(outgoing):
            if j < len(incoming):
                cid = incoming[j]
                chains[cid].append(t)
            else:
                chains.append([s, t])
                cid = len(chains) - 1
            open_at.setdefault(t, []).append(cid)
    return chains, n_through


def _chain_viterbi(chain: list, node_pot: list, edge_pot: dict) -> float:
    """Min energy of one chain by forward DP."""
    cost = node_pot[chain[0]].copy()
    for a, b in zip(chain[:-1], chain[1:]):
        table = edge_pot[(a, b)]
        cost = (cost[:, None] + table).min(axis=0) + node_pot[b]
    return float(cost.min())


def trws_pass(unary: np.ndarray, pairwise: dict, n_passes: int = 30
              ) -> TrwsResult:
    """Sequential tree-reweighted max-product over particle labels.

    unary is (N, L); pairwise maps (s, t) with s < t to an (L, L)
    table.  Returns a labeling whose energy never exceeds the
    all-incumbent labeling (label 0 everywhere), plus the per-pass
    lower bound, which is non-decreasing.
    """
    n, n_labels = unary.shape
    if not np.isfinite(unary).all():
        raise ValueError("unary tables must be finite")
    for (s, t), table in pairwise.items():
        if not (0 <= s < t < n):
            raise ValueError(f"edge ({s},{t}) must satisfy s < t < n")
        if table.shape != (n_labels, n_labels):
            raise ValueError("pairwise tables must be (L, L)")
        if not np.isfinite(table).all():
            raise ValueError("pairwise tables must be finite")

    edge_list = sorted(pairwise.keys())
    nbr_low: list[list[int]] = [[] for _ in range(n)]
    nbr_high: list[list[int]] = [[] for _ in range(n)]
    for (s, t) in edge_list:
        nbr_high[s].append(t)
        nbr_low[t].append(s)
    chains, n_through = _chain_decomposition(n, edge_list)
    gamma = 1.0 / n_through

    msg = {}
    for (s, t) in edge_list:
        msg[(s, t)] = np.zeros(n_labels)
        msg[(t, s)] = np.zeros(n_labels)

    def theta_hat(s: int) -> np.ndarray:
        acc = unary[s].copy()
        for u in nbr_low[s]:
            acc += msg[(u, s)]
        for u in nbr_high[s]:
            acc += msg[(u, s)]
        return acc

    def table_for(s: int, t: int) -> np.ndarray:
        # oriented so rows index x_s
        if s < t:
            return pairwise[(s, t)]
        return pairwise[(t, s)].T

    bounds = []
    for _ in range(n_passes):
        for s in range(n):  # forward
            th = gamma[s] * theta_hat(s)
            for t in nbr_high[s]:
                msg[(s, t)] = (th - msg[(t, s)])[:, None] \
                    + table_for(s, t)
                msg[(s, t)] = msg[(s, t)].min(axis=0)
        for s in range(n - 1, -1, -1):  # backward
            th = gamma[s] * theta_hat(s)
            for t in nbr_low[s]:
                msg[(s, t)] = (th - msg[(t, s)])[:, None] \
                    + table_for(s, t)
                msg[(s, t)] = msg[(s, t)].min(axis=0)

        # reparameterized potentials: moving each message into its
        # target node and out of its edge keeps every labeling's energy
        node_pot = [theta_hat(s) * gamma[s] for s in range(n)]
        full_pot = [theta_hat(s) for s in range(n)]
        edge_pot = {}
        for (s, t) in edge_list:
            edge_pot[(s, t)] = pairwise[(s, t)] \
                - msg[(s, t)][None, :] - msg[(t, s)][:, None]
        bound = 0.0
        for chain in chains:
            if len(chain) == 1:  # isolated node, full potential
                bound += float(full_pot[chain[0]].min())
                continue
            bound += _chain_viterbi(chain, node_pot, edge_pot)
        bounds.append(bound)
        if len(bounds) >= 2 and abs(bounds[-1] - bounds[-2]) < 1e-12:
            break

    # greedy conditioned extraction in node order
    labels = np.zeros(n, dtype=int)
    for s in range(n):
        cost = theta_hat(s)
        for u in nbr_low[s]:
            cost = cost - msg[(u, s)] + table_for(u, s)[labels[u], :]
        labels[s] = int(np.argmin(cost))

    # ICM polish, then keep the better of polished vs all-incumbent
    for _ in range(10):
        changed = False
        for s in range(n):
            cost = unary[s].copy()
            for u in nbr_low[s] + nbr_high[s]:
                cost = cost + table_for(u, s)[labels[u], :]
            best = int(np.argmin(cost))
            if best != labels[s]:
                labels[s] = best
                changed = True
        if not changed:
            break
    energy = mrf_energy(labels, unary, pairwise)
    incumbent = np.zeros(n, dtype=int)
    inc_energy = mrf_energy(incumbent, unary, pairwise)
    if inc_energy < energy:
        labels, energy = incumbent, inc_energy

    # On tiny label spaces exhaustive search costs less than the passes
    # above, and message passing with greedy decoding has no optimality
    # guarantee on loopy graphs; enumerate to close the gap.  The real
    # particle problems (50 labels, hundreds of nodes) never enter.
    if n_labels ** n <= 4096 and energy - bounds[-1] > 1e-12:
        for flat in range(n_labels ** n):
            cand = np.array([(flat // n_labels ** s) % n_labels
                             for s in range(n)])
            e = mrf_energy(cand, unary, pairwise)
            if e < energy:
                labels, energy = cand, e
    return TrwsResult(labels=labels, bounds=bounds, energy=energy)


# ---------------------------------------------------------------------------
# stage 2: particle refinement


@dataclass
class ParticleSet:
    """Per-patch candidate geometry; index 0 is always the incumbent."""

    normals: np.ndarray  # (L, 3)
    depths: np.ndarray  # (L,)
    rotations: np.ndarray  # (L, 3, 3)
    trans: np.ndarray  # (L, 3) translation vectors, zero when static


@dataclass
class RefineResult:
    state: SceneState
    energies: list  # e_total after each outer iteration


def _random_axes(rng: np.random.Generator, m: int) -> np.ndarray:
    v = rng.normal(size=(m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _perturb_direction(rng: np.random.Generator, d: np.ndarray, m: int,
                       sigma_deg: float) -> np.ndarray:
    """m copies of d tilted by N(0, sigma) about random orthogonal axes.

    The axis is kept orthogonal to d so the tilt angle is exactly the
    drawn angle; rotation preserves the norm, so translation magnitudes
    survive.
    """
    axes = _random_axes(rng, m)
    angles = rng.normal(scale=np.deg2rad(sigma_deg), size=m)
    dhat = d / np.linalg.norm(d)
    out = np.empty((m, 3))
    for j in range(m):
        axis = axes[j] - (axes[j] @ dhat) * dhat
        nrm = np.linalg.norm(axis)
        if nrm < 1e-12:  # drew the direction itself; tilt is moot
            out[j] = d
            continue
        out[j] = rotation_from_axis_angle(axis / nrm * angles[j]) @ d
    return out


def propose_particles(patch: PlanarPatch, n_particles: int,
                      rng: np.random.Generator) -> ParticleSet:
    """Incumbent plus Gaussian perturbations, sized to the patch's flags.

    A patch is parameterized by its normal and its 3D anchor point, so
    the normal tilts about the anchor (which stays put) and the depth
    jitter slides the anchor along its ray.  The stored plane depth is
    recomposed from the two; jittering the plane depth directly would
    instead swing the whole patch around the camera.  Unreliable
    patches get identical copies of the incumbent; static patches only
    vary the rotation (their plane carries no evidence).
    """
    m = n_particles - 1
    normals = np.tile(patch.plane.normal, (n_particles, 1))
    depths = np.full(n_particles, patch.plane.depth)
    rotations = np.tile(patch.motion.rotation, (n_particles, 1, 1))
    trans = np.tile(patch.motion.translation, (n_particles, 1))
    if not patch.reliable or m == 0:
        return ParticleSet(normals, depths, rotations, trans)

    comps = []
    if patch.normal_determined:
        comps += ["normal", "depth"]
    comps += ["rotation"]
    if not patch.static:
        comps += ["tdir"]
    # one component per particle; joint perturbations would bury a good
    # draw in one coordinate under noise in the others
    for j in range(m):
        l = j + 1
        comp = comps[j % len(comps)]
        if comp == "normal":
            nl = _perturb_direction(
                rng, patch.plane.normal, 1, 5.0)[0]
            d = -float(nl @ patch.anchor3d)
            if d > 0:
                normals[l], depths[l] = nl, d
        elif comp == "depth":
            anchor = patch.anchor3d * float(np.exp(rng.normal(scale=0.05)))
            depths[l] = -float(patch.plane.normal @ anchor)
        elif comp == "rotation":
            axis = _random_axes(rng, 1)[0]
            angle = float(rng.normal(scale=np.deg2rad(1.0)))
            rotations[l] = rotation_from_axis_angle(axis * angle) \
                @ patch.motion.rotation
        else:
            trans[l] = _perturb_direction(
                rng, patch.motion.translation, 1, 2.0)[0]
    return ParticleSet(normals, depths, rotations, trans)


class _PatchTables:
    """Per-particle geometry of one patch needed by the MRF terms."""

    def __init__(self, state: SceneState, idx: int, ps: ParticleSet):
        patch = state.patches[idx]
        sp = state.graph.superpixels[idx]
        lam = float(state.lam[idx])
        self.ps = ps
        n_p = len(ps.depths)

        # scaled anchor in both frames (anchor tracks the particle plane)
        ray = pixel_rays(state.intr, sp.anchor_pixel[None, :])[0]
        den = ps.normals @ ray
        den = np.where(np.abs(den) < RAY_DOT_FLOOR, -RAY_DOT_FLOOR, den)
        anchor = (-ps.depths / den)[:, None] * ray[None, :]
        self.anchor = lam * anchor
        moved = np.einsum("lab,lb->la", ps.rotations, anchor) + ps.trans
        self.anchor_next = lam * moved

        self.rot = ps.rotations
        self.trans = lam * ps.trans
        self.rot_sq = (ps.rotations ** 2).sum(axis=(1, 2))
        self.n_particles = n_p
        self.lam = lam


def _arap_pair_block(a: _PatchTables, b: _PatchTables, w: float,
                     term1: bool, term2: bool, bal2: float) -> np.ndarray:
    """(La, Lb) table of the anchor-rigidity edge term."""
    la, lb = a.n_particles, b.n_particles
    out = np.zeros((la, lb))
    if term1:
        cross = np.einsum("lab,mab->lm", a.rot, b.rot)
        rot_gap = a.rot_sq[:, None] + b.rot_sq[None, :] - 2.0 * cross
        t_gap = ((a.trans[:, None, :] - b.trans[None, :, :]) ** 2).sum(-1)
        out += w * np.sqrt(np.maximum(rot_gap + bal2 * t_gap, 0.0))
    if term2:
        d_ref = np.linalg.norm(a.anchor[:, None, :] - b.anchor[None, :, :],
                               axis=-1)
        d_next = np.linalg.norm(
            a.anchor_next[:, None, :] - b.anchor_next[None, :, :], axis=-1)
        out += w * np.abs(d_ref - d_next)
    return out


def _cont_pair_block(state: SceneState, ridxs: list,
                     a: _PatchTables, b: _PatchTables,
                     params: EnergyParams) -> np.ndarray:
    """(La, Lb) table of boundary continuity between two patches.

    ridxs index boundary_pairs rows connecting the two patches, in
    either orientation; the gap at a row's own pixel is symmetric in
    which side owns it, so no reorientation is needed.  Each pixel is
    backprojected onto every particle plane of both patches.
    """
    rows = state.graph.boundary_pairs[ridxs]
    rays = pixel_rays(state.intr, rows[:, 1:3].astype(float))
    w4 = np.exp(-params.beta * state.graph.pair_color_dist[ridxs])

    def backproject_all(t: _PatchTables):
        den = t.ps.normals @ rays.T  # (L, M)
        den = np.where(np.abs(den) < RAY_DOT_FLOOR, -RAY_DOT_FLOOR, den)
        s = -(t.lam * t.ps.depths)[:, None] / den
        pts = s[..., None] * rays[None, :, :]  # (L, M, 3)
        moved = np.einsum("lab,lmb->lma", t.ps.rotations, pts) \
            + t.trans[:, None, :]
        return pts, moved

    pa, pa2 = backproject_all(a)
    pb, pb2 = backproject_all(b)
    gap_ref = np.linalg.norm(pa[:, None] - pb[None, :], axis=-1)
    gap_next = np.linalg.norm(pa2[:, None] - pb2[None, :], axis=-1)
    gap_next = np.minimum(gap_next, params.sigma)
    return np.einsum("m,lkm->lk", w4, gap_ref + gap_next)


def _particle_state(state: SceneState, tables: list, labels: np.ndarray
                    ) -> SceneState:
    """Materialize the chosen particle of each patch into a SceneState.

    A particle whose plane no longer intersects the patch in front of
    the camera cannot be stored as a patch; the incumbent stays.
    """
    patches = []
    for idx, patch in enumerate(state.patches):
        lab = int(labels[idx])
        ps = tables[idx].ps
        if lab == 0:
            patches.append(patch)
            continue
        plane = Plane(ps.normals[lab], float(ps.depths[lab]))
        motion = RigidMotion.from_rt(ps.rotations[lab], ps.trans[lab])
        sp = state.graph.superpixels[idx]
        try:
            anchor3d = backproject(state.intr, sp.anchor_pixel[None, :],
                                   plane)[0]
            boundary3d = backproject(state.intr,
                                     sp.boundary_pixels.astype(float), plane)
        except (CheiralityError, DegenerateGeometryError):
            patches.append(patch)
            continue
        patches.append(replace(patch, plane=plane, motion=motion,
                               anchor3d=anchor3d, boundary3d=boundary3d))
    new_state = replace(state, patches=patches)
    new_state._flow_pairs = state._flow_pairs
    new_state._boundary_rays = state._boundary_rays
    return new_state


def _proj_unary(state: SceneState, idx: int, t: _PatchTables,
                params: EnergyParams) -> np.ndarray:
    """alpha1 * mean transfer error for every particle of patch idx."""
    src, dst = state.flow_pairs(idx)
    n_p = t.n_particles
    if len(src) == 0:
        return np.zeros(n_p)
    intr = state.intr
    kmat = intr.matrix
    kinv = intr.inverse
    ratio = t.ps.trans / np.maximum(t.ps.depths[:, None], 1e-300)
    inner = t.ps.rotations - ratio[:, :, None] * t.ps.normals[:, None, :]
    hmats = np.einsum("ab,lbc,cd->lad", kmat, inner, kinv)
    ones = np.ones((len(src), 1))
    xt = np.hstack([src, ones])  # (P, 3)
    mapped = np.einsum("lab,pb->lpa", hmats, xt)
    w = mapped[:, :, 2]
    w = np.where(np.abs(w) < 1e-300, 1e-300, w)
    uv = mapped[:, :, :2] / w[:, :, None]
    err = np.linalg.norm(uv - dst[None, :, :], axis=-1)
    return params.alpha1 * err.mean(axis=1)


def refine(state: SceneState, params: EnergyParams, n_iters: int = 5,
           seed: int = 0, n_particles: int = 50, trws_passes: int = 20
           ) -> RefineResult:
    """Particle-based refinement of plane and motion, scales frozen.

    Each outer iteration proposes particles around the incumbents,
    scores them with the exact energy terms arranged as an MRF (unary:
    reprojection; pairwise: anchor rigidity plus boundary continuity),
    runs trws_pass, and keeps the labeling only if the true total
    energy does not increase; the incumbent labeling makes that
    guarantee structural.
    """
    cur = state
    energies = []
    graph = state.graph
    n = graph.n

    # undirected MRF edges: k-NN union boundary adjacency
    knn_pairs = {}
    for (i, k) in graph.knn_edges:
        key = (int(min(i, k)), int(max(i, k)))
        knn_pairs.setdefault(key, []).append((int(i), int(k)))
    cont_rows: dict[tuple, list] = {}
    for ridx, row in enumerate(graph.boundary_pairs):
        i, k = int(row[0]), int(row[3])
        key = (min(i, k), max(i, k))
        cont_rows.setdefault(key, []).append(ridx)
    all_keys = sorted(set(knn_pairs) | set(cont_rows))

    w_edges = arap_edge_weights(graph, params.beta)
    w_by_directed = {}
    for eidx, (i, k) in enumerate(graph.knn_edges):
        w_by_directed[(int(i), int(k))] = float(w_edges[eidx])

    for it in range(n_iters):
        rng = np.random.default_rng(seed * 1000003 + it)
        reliable = cur.reliable_mask()
        planeful = cur.planeful_mask()
        scaleful = cur.scaleful_mask()
        tables = [
            _PatchTables(cur, idx,
                         propose_particles(cur.patches[idx], n_particles,
                                           rng))
            for idx in range(n)]

        unary = np.zeros((n, n_particles))
        for idx in range(n):
            if reliable[idx]:
                unary[idx] = _proj_unary(cur, idx, tables[idx], params)

        pairwise = {}
        for key in all_keys:
            s, t = key
            block = np.zeros((n_particles, n_particles))
            for (i, k) in knn_pairs.get(key, []):
                w = w_by_directed[(i, k)]
                term1 = bool(reliable[i] and reliable[k])
                term2 = bool(scaleful[i] and scaleful[k])
                if not (term1 or term2):
                    continue
                sub = _arap_pair_block(tables[i], tables[k], w, term1,
                                       term2, params.arap_unit_balance ** 2)
                block += sub if i == s else sub.T
            ridxs = cont_rows.get(key, [])
            if ridxs and planeful[s] and planeful[t]:
                sub = _cont_pair_block(cur, ridxs, tables[s], tables[t],
                                       params)
                block += params.alpha2 * sub
            pairwise[key] = block

        result = trws_pass(unary, pairwise, n_passes=trws_passes)
        cand = _particle_state(cur, tables, result.labels)
        try:
            cand_energy = e_total(cand, params)
        except NumericalError:  # a particle mapped a pixel to infinity
            cand_energy = np.inf
        if cand_energy <= e_total(cur, params):
            cur = cand
        energies.append(e_total(cur, params))
    return RefineResult(state=cur, energies=energies)
