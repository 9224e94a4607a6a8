"""Constructive phase retrieval from phaseless superposition data.

The pipeline executes, as an algorithm, the steps that prove the data
determine the phased fields:

1. extract_correlation   Re{u(x,d) conj(u(x,d0))} from the three moduli,
                         via |a+b|^2 - |a|^2 - |b|^2 = 2 Re{a conj(b)}.
2. principal_relative_phase
                         delta = arccos(c / (r r0)) in [0, pi]: the relative
                         phase is known up to sign.
3. continue_branch       the cosine leaves exactly two globally consistent
                         signed continuations +delta~ and -delta~ (the true
                         relative field and its complex conjugate).
4. anchor_phase          recover the reference phase theta0(x) = arg u(x,d0)
                         by alternating projection between the measured
                         modulus and {u^i + radiating expansion}.
5. disambiguate_branch   only the true branch extends to a radiating field;
                         the conjugate branch leaves a large projection
                         defect, mirroring the contradiction that excludes it.

All stages run on the measurement set; per-direction work is independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (AmbiguousBranchError, AnchoringError, ContinuationError,
                     GeometryError)
from .dataset import PhaselessDataset
from .farfield import (RadiatingExpansion, SegmentProjector, make_projector,
                       truncation_order)
from .parallel import map_parallel
from .scene import Scene, eval_incident, plane_wave

logger = logging.getLogger(__name__)

MASK_REL_TOL = 1e-8          # r * r0 below this fraction of the max is masked
COS_CLAMP_TOL = 1e-9         # rounding slack absorbed outside [-1, 1]
MAX_PRINCIPAL_STEP = np.pi / 2
ANCHOR_TOL = 1e-10
ANCHOR_MAX_ITER = 500
ANCHOR_FAIL_TOL = 1e-2       # final increment above this means the iteration blew up
BRANCH_RATIO = 10.0


@dataclass
class CorrelationField:
    """c(x,d) = Re{u(x,d) conj(u(x,d0))} with a validity mask."""

    values: np.ndarray       # (M, D)
    mask: np.ndarray         # (M, D) bool, True where r * r0 is resolvable
    singles: np.ndarray      # (M, D) r(x, d)
    singles_d0: np.ndarray   # (M,)   r(x, d0)


@dataclass
class RelativePhaseField:
    """Principal relative phase delta in [0, pi] per entry."""

    principal: np.ndarray    # (M, D)
    mask: np.ndarray
    singles: np.ndarray
    singles_d0: np.ndarray
    angles: np.ndarray
    d0_index: int
    k: float
    points: np.ndarray       # (M, 2) measurement points
    cyclic_points: bool = True   # measurement points form a closed loop


@dataclass
class BranchCandidate:
    """One signed continuation: V(x,d) = r(x,d) e^{i sign delta~(x,d)}."""

    sign: int
    signed_phase: np.ndarray     # (M, D), continued, zero at d0
    relative_field: np.ndarray   # (M, D) complex
    mask: np.ndarray
    confident: np.ndarray = None  # entries whose sign decision had margin


@dataclass
class AnchorPhase:
    """Reference phase theta0(x) of u(., d0) on the measurement set."""

    theta0: np.ndarray
    residual: float          # final phase increment of the iteration
    iterations: int
    history: list = field(default_factory=list)


@dataclass
class AnchoredCandidate:
    """Candidate with anchored fields and per-direction radiating defects."""

    candidate: BranchCandidate
    anchor: AnchorPhase
    total_fields: np.ndarray             # (M, D)
    expansions: list                     # RadiatingExpansion per direction
    residual: float                      # worst relative projection defect
    per_direction_residual: np.ndarray   # (D,)


@dataclass
class BranchReport:
    residual_plus: float
    residual_minus: float
    chosen: str

    @property
    def ratio(self) -> float:
        lo = min(self.residual_plus, self.residual_minus)
        hi = max(self.residual_plus, self.residual_minus)
        return np.inf if lo == 0.0 else hi / lo

    def to_jsonable(self) -> dict:
        return {"residual_plus": self.residual_plus,
                "residual_minus": self.residual_minus,
                "chosen": self.chosen}


@dataclass
class RetrievalResult:
    dataset: PhaselessDataset
    total_fields: np.ndarray       # (M, D) phased u(x, d)
    scattered_fields: np.ndarray   # (M, D) u - u^i
    expansions: list
    anchor: AnchorPhase
    report: BranchReport


def extract_correlation(dataset: PhaselessDataset) -> CorrelationField:
    """Correlation c = (|a+b|^2 - |a|^2 - |b|^2)/2 with a = u(x,d), b = u(x,d0)."""
    r = dataset.singles
    r0 = dataset.singles_at_d0()
    c = 0.5 * (dataset.pairs**2 - r**2 - r0[:, None] ** 2)
    prod = r * r0[:, None]
    mask = prod >= MASK_REL_TOL * max(float(np.max(prod)), 1e-300)
    return CorrelationField(values=c, mask=mask, singles=r, singles_d0=r0)


def principal_relative_phase(corr: CorrelationField,
                             dataset: PhaselessDataset) -> RelativePhaseField:
    """delta = arccos(c / (r r0)) on unmasked entries (clamped into [-1, 1])."""
    with np.errstate(divide="ignore", invalid="ignore"):
        cosine = np.where(corr.mask,
                          corr.values / (corr.singles * corr.singles_d0[:, None]),
                          1.0)
    cosine = np.clip(cosine, -1.0, 1.0)
    return RelativePhaseField(principal=np.arccos(cosine), mask=corr.mask,
                              singles=corr.singles, singles_d0=corr.singles_d0,
                              angles=dataset.angles,
                              d0_index=dataset.d0_index(),
                              k=dataset.k,
                              points=dataset.measurement.points(),
                              cyclic_points=dataset.measurement.kind == "circle")


def _cyclic_gap(a_from: float, a_to: float) -> float:
    return (a_to - a_from) % (2 * np.pi)


def _quadratic_predict(history: list, s: float) -> float:
    """Extrapolate the continued phase to arc position s from up to the last
    three accepted (position, value) pairs (Newton divided differences)."""
    if len(history) == 1:
        return history[0][1]
    (s1, v1), (s2, v2) = history[-2], history[-1]
    d12 = (v2 - v1) / (s2 - s1)
    if len(history) == 2:
        return v2 + d12 * (s - s2)
    (s0, v0) = history[-3]
    d01 = (v1 - v0) / (s1 - s0)
    d012 = (d12 - d01) / (s2 - s0)
    return v2 + d12 * (s - s2) + d012 * (s - s2) * (s - s1)


def _continue_row(principal: np.ndarray, mask: np.ndarray, order: np.ndarray,
                  row_index: int, angles: np.ndarray,
                  psi_inc: np.ndarray) -> tuple:
    """Signed continuation of one measurement point along the cyclic grid.

    The unwrapping runs on the reduced phase chi = delta~ - psi_inc, with the
    incident relative phase k x.(d - d0) divided out: chi carries only the
    scattering-induced variation and moves far slower than the raw phase, so
    a quadratic extrapolation of chi decides reliably between the two signed
    representatives of each principal value. (A closest-to-previous rule on
    the raw phase would reflect instead of crossing whenever it passes a
    multiple of pi, and extrapolation of the raw phase loses near zeros of
    the total field where it turns within one grid step.)

    Entries that violate the pi/2 density bound (the phase turning faster
    than the grid resolves, typically beside a near-zero of the total field)
    are deferred: interpolated here and re-decided by the repair stage.
    Returns (signed row delta~, list of deferred (j, step) pairs).
    """
    D = principal.size
    chi = np.zeros(D)
    prev = -psi_inc[order[0]]          # chi at d0: delta~ = 0
    chi[order[0]] = prev
    prev_j = order[0]
    prev_ang = angles[order[0]]
    arc = 0.0
    history = [(0.0, prev)]
    pending = []
    deferred = []
    for j in order[1:]:
        if not mask[j]:
            pending.append(j)
            continue
        delta = principal[j]
        step = abs(delta - principal[prev_j])
        if not pending and step >= MAX_PRINCIPAL_STEP:
            # too fast to unwrap: reclassify as masked, like the amplitude
            # mask islands (the density check applies to contiguous runs)
            deferred.append((j, float(step)))
            pending.append(j)
            continue
        arc = arc + _cyclic_gap(prev_ang, angles[j])
        predict = _quadratic_predict(history, arc)
        base_plus = delta - psi_inc[j]
        base_minus = -delta - psi_inc[j]
        plus = base_plus + 2 * np.pi * np.round((predict - base_plus) / (2 * np.pi))
        minus = base_minus + 2 * np.pi * np.round((predict - base_minus) / (2 * np.pi))
        value = plus if abs(plus - predict) <= abs(minus - predict) else minus
        chi[j] = value
        if pending:
            for idx, jm in enumerate(pending):
                frac = (idx + 1.0) / (len(pending) + 1.0)
                chi[jm] = prev + frac * (value - prev)
            pending = []
        history.append((arc, value))
        prev, prev_j, prev_ang = value, j, angles[j]
    if pending:
        # masked run at the end of the cyclic sweep: relax toward the value
        # matching delta~(d0) = 0 again
        target = -psi_inc[order[0]] + 2 * np.pi * np.round(
            (prev + psi_inc[order[0]]) / (2 * np.pi))
        for idx, jm in enumerate(pending):
            frac = (idx + 1.0) / (len(pending) + 1.0)
            chi[jm] = prev + frac * (target - prev)
    return chi + psi_inc, deferred


def continue_branch(rel: RelativePhaseField) -> tuple:
    """The two globally signed continuations (candidate_plus, candidate_minus).

    Each measurement point is unwrapped along the direction grid starting at
    d0 (where the phase is zero); masked entries are interpolated afterwards.
    The per-point sign freedom left by the cosine is fixed by continuity in x
    along the measurement set, which makes the result one of the two global
    branches; its negation is the other.
    """
    M, D = rel.principal.shape
    if not np.any(rel.mask):
        raise ContinuationError("all dataset entries are masked")
    order = np.roll(np.arange(D), -rel.d0_index)
    d0vec = np.array([np.cos(rel.angles[rel.d0_index]),
                      np.sin(rel.angles[rel.d0_index])])
    dvec = np.stack([np.cos(rel.angles), np.sin(rel.angles)], axis=-1)
    psi_inc = rel.k * (rel.points @ (dvec - d0vec).T)   # (M, D)
    signed = np.zeros((M, D))
    usable = np.ones(M, dtype=bool)
    deferred_total = 0
    worst_defer = None
    for m in range(M):
        if not rel.mask[m, rel.d0_index]:
            # d0 modulus vanishes at this point: the phase relative to d0 is
            # undefined there; fill the row from its neighbors in the repair
            # stage below.
            usable[m] = False
            continue
        signed[m], deferred = _continue_row(rel.principal[m], rel.mask[m],
                                            order, m, rel.angles, psi_inc[m])
        deferred_total += len(deferred)
        for j, step in deferred:
            if worst_defer is None or step > worst_defer[2]:
                worst_defer = (m, j, step)
    if deferred_total > 0.25 * max(1, int(np.sum(rel.mask))):
        m, j, step = worst_defer
        raise ContinuationError(
            f"direction grid too coarse: {deferred_total} relative-phase "
            f"steps >= pi/2 (worst {step:.3f} at measurement point {m}, "
            f"direction angle {rel.angles[j]:.6f})")

    # resolve the per-row sign freedom by continuity along the measurement
    # set, scored on the reduced (incident-free) phase; the trimmed score
    # ignores entries a row may have gotten wrong near a field zero
    prev = None
    for m in range(M):
        if not usable[m]:
            continue
        if prev is not None:
            chi_prev = signed[prev] - psi_inc[prev]
            keep = _trimmed(np.abs(_wrap(signed[m] - psi_inc[m] - chi_prev)))
            flip = _trimmed(np.abs(_wrap(-signed[m] - psi_inc[m] - chi_prev)))
            if flip < keep:
                signed[m] = -signed[m]
        prev = m

    mask_eff = rel.mask & usable[:, None]
    z, confident = _repair_relative_field(rel, signed, mask_eff, psi_inc)

    # continued signed phase consistent with the repaired field (reporting
    # value; the candidates' fields are built from z directly)
    sigma = np.where(z.imag >= 0.0, 1.0, -1.0)
    base = sigma * rel.principal
    signed = base + 2 * np.pi * np.round((signed - base) / (2 * np.pi))

    plus = BranchCandidate(sign=+1, signed_phase=signed,
                           relative_field=rel.singles * z,
                           mask=rel.mask, confident=confident)
    minus = BranchCandidate(sign=-1, signed_phase=-signed,
                            relative_field=rel.singles * np.conj(z),
                            mask=rel.mask, confident=confident)
    return plus, minus


def _wrap(phase: np.ndarray) -> np.ndarray:
    return (phase + np.pi) % (2 * np.pi) - np.pi


def _trimmed(values: np.ndarray, keep: float = 0.5) -> float:
    """Mean of the smallest `keep` fraction (robust row-alignment score)."""
    size = max(1, int(values.size * keep))
    return float(np.mean(np.sort(values)[:size]))


_REFINE_OFFSETS = np.array([-4, -3, -2, -1, 1, 2, 3, 4])
_REFINE_SWEEPS = 64


def _interp_weights(offsets: np.ndarray) -> np.ndarray:
    """Weights of the degree-(len-1) polynomial interpolant evaluated at 0."""
    V = np.vander(offsets.astype(float), increasing=True).T
    rhs = np.zeros(offsets.size)
    rhs[0] = 1.0
    return np.linalg.solve(V, rhs)


def _stencil(M: int, cyclic: bool) -> tuple:
    """Per-row interpolation stencil (indices, weights) over neighbor rows."""
    K = _REFINE_OFFSETS.size
    if cyclic:
        idx = (np.arange(M)[:, None] + _REFINE_OFFSETS[None, :]) % M
        weights = np.tile(_interp_weights(_REFINE_OFFSETS), (M, 1))
        return idx, weights
    # near a segment edge the stencil shifts inward and becomes one-sided
    idx = np.empty((M, K), dtype=int)
    weights = np.empty((M, K))
    for m in range(M):
        lo = int(np.clip(m - K // 2, 0, M - 1 - K))
        window = [i for i in range(lo, lo + K + 1) if i != m][:K]
        idx[m] = window
        weights[m] = _interp_weights(np.asarray(window, dtype=float) - m)
    return idx, weights


CONFIDENCE_MARGIN = 0.1


def _repair_relative_field(rel: RelativePhaseField, signed: np.ndarray,
                           mask: np.ndarray, psi_inc: np.ndarray) -> tuple:
    """Resolve the sign pattern of the relative field by quality-guided
    region growing on the pre-whitened field.

    The unimodular relative field z = e^{i delta~} is single-valued even
    around zeros of the total field (where the unwrapped phase has vortices
    and phase-domain smoothing is invalid). Dividing out the known incident
    relative phase leaves w = z e^{-i k x.(d - d0)}, which varies slowly
    across the (measurement point x direction) grid away from field zeros.
    Each entry admits exactly two data-consistent values
    w+- = (cos d +- i sin d) e^{-i psi}. Starting from the d0 column (where
    w = 1 exactly), entries are decided one at a time in order of decreasing
    decision margin |dist(pred, w+) - dist(pred, w-)|, predicting from
    already-decided 4-neighbors, so settled territory always surrounds an
    ambiguous spot before it is decided. A gated high-order stencil then
    re-decides near-axis entries wherever their whole neighborhood is
    trusted.

    Returns (z, confident) where confident marks entries whose decision
    margin was healthy; the rest (field-zero rings, masked entries) carry
    small moduli or get replaced by the radiating fit during anchoring.
    """
    import heapq

    M, D = signed.shape
    cosd = np.cos(rel.principal)
    sind = np.sin(rel.principal)              # >= 0 by principal range
    white = np.exp(-1j * psi_inc)
    w_plus = (cosd + 1j * sind) * white
    w_minus = (cosd - 1j * sind) * white
    w = np.where(np.sin(signed) >= 0.0, w_plus, w_minus)  # fallback seed

    decided = np.zeros((M, D), dtype=bool)
    margin_at = np.zeros((M, D))
    j0 = rel.d0_index
    seed = mask[:, j0]
    decided[seed, j0] = True
    w[seed, j0] = w_plus[seed, j0]
    margin_at[seed, j0] = 2.0

    def neighbors(m, j):
        if rel.cyclic_points:
            yield (m - 1) % M, j
            yield (m + 1) % M, j
        else:
            if m > 0:
                yield m - 1, j
            if m < M - 1:
                yield m + 1, j
        yield m, (j - 1) % D
        yield m, (j + 1) % D

    def evaluate(m, j):
        acc = 0.0j
        n = 0
        for mm, jj in neighbors(m, j):
            if decided[mm, jj]:
                acc += w[mm, jj]
                n += 1
        if n == 0:
            return None
        pred = acc / n
        dp = abs(w_plus[m, j] - pred)
        dm = abs(w_minus[m, j] - pred)
        value = w_plus[m, j] if dp <= dm else w_minus[m, j]
        return abs(dp - dm), value

    heap = []
    counter = 0
    for m in np.nonzero(seed)[0]:
        for mm, jj in neighbors(int(m), j0):
            if not decided[mm, jj] and mask[mm, jj]:
                got = evaluate(mm, jj)
                if got is not None:
                    counter += 1
                    heapq.heappush(heap, (-got[0], counter, mm, jj))
    while heap:
        _, _, m, j = heapq.heappop(heap)
        if decided[m, j]:
            continue
        got = evaluate(m, j)
        if got is None:
            continue
        decided[m, j] = True
        margin_at[m, j] = got[0]
        w[m, j] = got[1]
        for mm, jj in neighbors(m, j):
            if not decided[mm, jj] and mask[mm, jj]:
                nxt = evaluate(mm, jj)
                if nxt is not None:
                    counter += 1
                    heapq.heappush(heap, (-nxt[0], counter, mm, jj))

    confident = decided & (margin_at >= CONFIDENCE_MARGIN)

    # fill undecided (masked or disconnected) entries from decided neighbors
    for _ in range(max(M, D)):
        todo = mask_undecided = ~decided
        if not np.any(todo):
            break
        acc = np.zeros((M, D), dtype=complex)
        cnt = np.zeros((M, D))
        for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
            acc += np.where(np.roll(decided, shift, axis=axis),
                            np.roll(w, shift, axis=axis), 0.0)
            cnt += np.roll(decided, shift, axis=axis)
        fill = mask_undecided & (cnt > 0)
        if not np.any(fill):
            break
        w[fill] = acc[fill] / cnt[fill]
        decided[fill] = True

    # high-order polish for near-axis entries, gated to trusted neighborhoods
    if M > _REFINE_OFFSETS.size + 1 and D > _REFINE_OFFSETS.size + 1:
        for axis in (0, 1):
            n_axis = M if axis == 0 else D
            idx, weights = _stencil(n_axis, rel.cyclic_points or axis == 1)
            if axis == 0:
                pred = np.einsum("mk,mkd->md", weights, w[idx])
                trusted = np.all(confident[idx], axis=1)
            else:
                pred = np.einsum("dk,mdk->md", weights, w[:, idx])
                trusted = np.all(confident[:, idx], axis=2)
            dp = np.abs(w_plus - pred)
            dm = np.abs(w_minus - pred)
            new = np.where(dp <= dm, w_plus, w_minus)
            gate = trusted & confident & mask
            w = np.where(gate, new, w)

    return w * np.conj(white), confident


def _incident_matrix(dataset: PhaselessDataset, points: np.ndarray) -> np.ndarray:
    return np.stack(
        [eval_incident(plane_wave(dataset.k, a), points) for a in dataset.angles],
        axis=-1)


def _theta0_least_squares(candidate: BranchCandidate, dataset: PhaselessDataset,
                          projector, points: np.ndarray) -> np.ndarray:
    """Linear estimate of the reference phase from all directions at once.

    With g(x) = e^{i theta0(x)}, the radiating-extension requirement for every
    direction reads Q(diag(g) V_d - u^i_d) = 0 with Q the projection onto the
    orthogonal complement of the outgoing span: linear in g. The stacked
    least-squares normal system is

        (Q .* (conj(V) V^T)) g = rowsum(conj(V) .* (Q U^i)),

    an M x M solve. The incident field's beyond-band content is what pins the
    global phase; the moduli |g| are discarded (theta0 = arg g).
    """
    V = candidate.relative_field
    M, D = V.shape
    eye = np.eye(M, dtype=complex)
    Q = eye - np.stack([projector.project(eye[:, j]) for j in range(M)], axis=1)
    Ui = _incident_matrix(dataset, points)
    confident = candidate.confident
    if confident is None or np.all(confident):
        A = Q * (np.conj(V) @ V.T)
        b = np.sum(np.conj(V) * (Q @ Ui), axis=1)
    else:
        # directions with untrusted entries contribute equations restricted
        # to their trusted points (with the projector rebuilt on that subset)
        A = np.zeros((M, M), dtype=complex)
        b = np.zeros(M, dtype=complex)
        full = np.all(confident, axis=0)
        if np.any(full):
            H = np.conj(V[:, full]) @ V[:, full].T
            A += Q * H
            b += np.sum(np.conj(V[:, full]) * (Q @ Ui[:, full]), axis=1)
        for j in np.nonzero(~full)[0]:
            conf = confident[:, j]
            if np.sum(conf) < 8:
                continue
            sub = SegmentProjector(points[conf], dataset.k, projector.nmax)
            Qs = np.eye(int(np.sum(conf)), dtype=complex) - sub.u @ sub.u.conj().T
            ix = np.ix_(np.nonzero(conf)[0], np.nonzero(conf)[0])
            A[ix] += Qs * np.outer(np.conj(V[conf, j]), V[conf, j])
            b[conf] += np.conj(V[conf, j]) * (Qs @ Ui[conf, j])
    ridge = 1e-12 * np.trace(A).real / M
    g = np.linalg.solve(A + ridge * np.eye(M), b)
    return np.angle(g)


def anchor_phase(candidate: BranchCandidate, dataset: PhaselessDataset,
                 scene: Scene, nmax: Optional[int] = None,
                 threads: Optional[int] = None,
                 init: str = "least_squares") -> AnchoredCandidate:
    """Recover theta0 = arg u(., d0) by alternating projection, then expand
    every direction's scattered field in the outgoing basis.

    Iterate: (i) w = r0 e^{i theta0}; (ii) project w - u^i(., d0) onto the
    truncated outgoing span (least squares on the measurement set);
    (iii) keep the projected phase, reset the modulus to r0. Stops when the
    phase increment drops below 1e-10 (at most 500 iterations).

    init = "least_squares" starts from the all-directions linear estimate of
    theta0 (the iteration then only polishes it); init = "incident" starts
    from arg u^i(., d0), which can stall in spurious minima of the modulus
    constraint on strongly scattering scenes.
    """
    points = dataset.measurement.points()
    k = dataset.k
    if nmax is None:
        rho = (dataset.measurement.radius if dataset.measurement.kind == "circle"
               else float(np.max(np.linalg.norm(points, axis=-1))))
        nmax = truncation_order(k, rho)
    projector = make_projector(dataset.measurement, k, nmax)

    r0 = dataset.singles_at_d0()
    ui0 = eval_incident(plane_wave(k, dataset.d0_angle), points)
    angles = dataset.angles
    min_fit_points = 2 * (2 * nmax + 1)

    def polish_theta(theta):
        history = []
        iterations = ANCHOR_MAX_ITER
        for it in range(ANCHOR_MAX_ITER):
            w = r0 * np.exp(1j * theta)
            w_new = ui0 + projector.project(w - ui0)
            theta_new = np.where(np.abs(w_new) > 1e-300, np.angle(w_new), theta)
            inc = float(np.max(np.abs(_wrap(theta_new - theta))))
            history.append(inc)
            theta = theta_new
            if inc < ANCHOR_TOL:
                iterations = it + 1
                break
        else:
            # hitting the cap with a settled increment is a legal stop (the
            # conjugate branch does exactly this: no consistent phase exists
            # and the stagnation level feeds the radiating defect below); a
            # large final increment means the iteration itself is unstable
            if history[-1] > ANCHOR_FAIL_TOL:
                raise AnchoringError(
                    f"phase anchoring unstable after {ANCHOR_MAX_ITER} "
                    f"iterations (last increment {history[-1]:.3e})",
                    history=history)
        return theta, history, iterations

    n_basis = 2 * nmax + 1

    # expected squared field perturbation per entry from the dataset's
    # declared multiplicative noise, propagated through the correlation and
    # arccos chain (the 1/sin amplification capped by |z| <= 2); used to
    # report defects in excess of what the noise itself must produce
    if dataset.noise > 0.0:
        var_eps = dataset.noise**2 / 3.0
        s_all = dataset.singles
        s0_all = dataset.singles_at_d0()[:, None]
        p_all = dataset.pairs
        prod = np.maximum(s_all * s0_all, 1e-300)
        srat = s_all / np.maximum(s0_all, 1e-300)
        cosd = np.clip((p_all**2 - s_all**2 - s0_all**2) / (2 * prod), -1.0, 1.0)
        sin2 = np.maximum(1.0 - cosd**2, 1e-300)
        # dC = (p^2/(s s0)) ep - (s/s0 + C) es - (s0/s + C) e0, all independent
        var_dc = var_eps * ((p_all**2 / prod) ** 2
                            + (srat + cosd) ** 2
                            + (1.0 / np.maximum(srat, 1e-300) + cosd) ** 2)
        # near the axis (sin ~ 0) the arccos amplification saturates:
        # the clamped cosine moves z by ~ sqrt(2 dC), not dC/sin
        dz2 = np.minimum(var_dc / sin2, 2.0 * np.sqrt(var_dc) + 2.0 * var_dc)
        field_noise2 = 1.2 * s_all**2 * (var_eps + dz2)
    else:
        field_noise2 = np.zeros_like(dataset.singles)

    def project_direction(j, totals, confident):
        u_inc = eval_incident(plane_wave(k, angles[j]), points)
        us = totals[:, j] - u_inc
        conf = confident[:, j].copy()
        if np.sum(conf) < min_fit_points:
            conf = np.ones_like(conf)

        # fit the radiating extension on trusted entries, demoting entries
        # that disagree with the fit (sign decisions that slipped through
        # beside a field zero show up as isolated large residuals); at most a
        # few percent may be demoted, so a branch that disagrees wholesale
        # (the conjugate one) keeps its large defect
        budget = max(3, int(0.08 * us.size))
        for _ in range(budget + 2):
            if np.all(conf):
                model = projector.project(us)
                exp = projector.expansion(model)
            else:
                sub = SegmentProjector(points[conf], k, nmax)
                exp = sub.expansion(us[conf])
                model = exp.evaluate(points)
            resid = np.abs(us - model)
            floor = 1e-6 * max(float(np.max(np.abs(us))), 1e-300)
            cut = max(20.0 * float(np.median(resid[conf])), floor)
            outliers = np.nonzero(conf & (resid > cut))[0]
            if outliers.size == 0 or budget <= 0:
                break
            drop = outliers[np.argsort(resid[outliers])][-budget:]
            conf[drop] = False
            budget -= drop.size

        # defect relative to the total field, in excess of what the declared
        # measurement noise must produce: exact data are unaffected, noisy
        # data stop penalizing the true branch for out-of-band content that
        # both branches share
        norm = float(np.linalg.norm(totals[conf, j]))
        n_conf = int(np.sum(conf))
        raw2 = float(np.linalg.norm(us[conf] - model[conf]) ** 2)
        outfrac = max(0.0, 1.0 - n_basis / max(n_conf, 1))
        noise2 = outfrac * float(np.sum(field_noise2[conf, j]))
        defect = (0.0 if norm < 1e-14 else
                  np.sqrt(max(raw2 - noise2, 0.0)) / norm)
        if np.all(conf):
            return exp, defect, totals[:, j]
        # untrusted entries that actually disagree with the fit are replaced
        # by the radiating extension (the discrete counterpart of continuing
        # through isolated zeros by analyticity), with the measured modulus
        # restored afterwards; untrusted entries consistent with the fit keep
        # their data values, which beat the model inside fit gaps
        disagree = ~conf & (resid > np.maximum(
            cut, 5.0 * np.sqrt(field_noise2[:, j])))
        if not np.any(disagree):
            return exp, defect, totals[:, j]
        filled = u_inc + model
        keepmod = np.abs(filled) > 1e-300
        filled = np.where(keepmod,
                          dataset.singles[:, j] * filled / np.abs(filled),
                          filled)
        return exp, defect, np.where(disagree, filled, totals[:, j])

    work = candidate
    anchor = None
    results = None
    # two rounds: the first round's radiating fits replace untrusted entries,
    # after which the gauge least squares reruns on cleaned fields (a gauge
    # error is nearly invisible to the polishing iteration, whose contraction
    # along that direction is governed by the incident out-of-band tail)
    for round_idx in range(2):
        if init == "least_squares":
            theta = _theta0_least_squares(work, dataset, projector, points)
        elif init == "incident" and round_idx == 0:
            theta = np.angle(ui0)
        else:
            raise GeometryError(f"unknown anchoring initialization {init!r}")
        theta, history, iterations = polish_theta(theta)
        anchor = AnchorPhase(theta0=theta % (2 * np.pi), residual=history[-1],
                             iterations=iterations, history=history)
        totals = work.relative_field * np.exp(1j * theta)[:, None]
        confident = work.confident
        if confident is None:
            confident = np.ones(totals.shape, dtype=bool)
        results = map_parallel(lambda j: project_direction(j, totals, confident),
                               range(angles.size), threads=threads)
        cleaned = np.stack([r[2] for r in results], axis=-1)
        if np.all(confident) or init == "incident":
            break
        work = BranchCandidate(
            sign=work.sign, signed_phase=work.signed_phase,
            relative_field=cleaned * np.exp(-1j * theta)[:, None],
            mask=work.mask, confident=None)

    expansions = [r[0] for r in results]
    defects = np.array([r[1] for r in results])
    totals = np.stack([r[2] for r in results], axis=-1)
    # the reference column d0 carries no branch information (both candidates
    # share it verbatim), so the aggregate skips it
    informative = np.ones(angles.size, dtype=bool)
    informative[dataset.d0_index()] = False
    return AnchoredCandidate(candidate=candidate, anchor=anchor,
                             total_fields=totals, expansions=expansions,
                             residual=float(np.max(defects[informative])),
                             per_direction_residual=defects)


def disambiguate_branch(candidates: tuple, dataset: PhaselessDataset,
                        scene: Scene, nmax: Optional[int] = None,
                        threads: Optional[int] = None) -> tuple:
    """Anchor both candidates and keep the one with the (much) smaller
    radiating defect; the conjugate branch admits no radiating extension.

    Returns (chosen AnchoredCandidate, BranchReport); a residual ratio below
    10 raises AmbiguousBranchError.
    """
    plus, minus = candidates
    anchored_plus = anchor_phase(plus, dataset, scene, nmax=nmax, threads=threads)
    anchored_minus = anchor_phase(minus, dataset, scene, nmax=nmax, threads=threads)
    rp, rm = anchored_plus.residual, anchored_minus.residual
    chosen = anchored_plus if rp <= rm else anchored_minus
    report = BranchReport(residual_plus=rp, residual_minus=rm,
                          chosen="plus" if rp <= rm else "minus")
    if report.ratio < BRANCH_RATIO:
        raise AmbiguousBranchError(
            f"branch residuals too close to decide: plus={rp:.3e}, "
            f"minus={rm:.3e} (ratio {report.ratio:.2f} < {BRANCH_RATIO})",
            residual_plus=rp, residual_minus=rm)
    logger.info("branch %s selected: residual_plus=%.3e residual_minus=%.3e",
                report.chosen, rp, rm)
    return chosen, report


def retrieve(dataset: PhaselessDataset, scene: Scene,
             nmax: Optional[int] = None,
             threads: Optional[int] = None) -> RetrievalResult:
    """Full pipeline: phased total and scattered fields for every direction.

    `scene` supplies the wavenumber, measurement geometry and d0; the
    scatterer itself is not consulted (that is the point of the exercise).
    """
    if abs(scene.wavenumber - dataset.k) > 1e-12:
        raise GeometryError("scene and dataset disagree on the wavenumber")
    corr = extract_correlation(dataset)
    rel = principal_relative_phase(corr, dataset)
    candidates = continue_branch(rel)
    chosen, report = disambiguate_branch(candidates, dataset, scene,
                                         nmax=nmax, threads=threads)
    points = dataset.measurement.points()
    incident = np.stack(
        [eval_incident(plane_wave(dataset.k, a), points) for a in dataset.angles],
        axis=-1)
    return RetrievalResult(dataset=dataset,
                           total_fields=chosen.total_fields,
                           scattered_fields=chosen.total_fields - incident,
                           expansions=chosen.expansions,
                           anchor=chosen.anchor,
                           report=report)


def write_fields(result: RetrievalResult, path) -> None:
    """Retrieved fields as CSV: x1, x2, d_angle, re_u, im_u, re_us, im_us,
    with the dataset metadata as a '#' JSON header line."""
    import json

    from .dataset import _meta_dict

    ds = result.dataset
    points = ds.measurement.points()
    meta = _meta_dict(ds)
    meta["columns"] = ["x1", "x2", "d_angle", "re_u", "im_u", "re_us", "im_us"]
    M, D = ds.shape
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        fh.write(",".join(meta["columns"]) + "\n")
        for m in range(M):
            x1, x2 = points[m]
            for j in range(D):
                u = result.total_fields[m, j]
                us = result.scattered_fields[m, j]
                fh.write(f"{x1:.17g},{x2:.17g},{ds.angles[j]:.17g},"
                         f"{u.real:.17g},{u.imag:.17g},"
                         f"{us.real:.17g},{us.imag:.17g}\n")


def read_fields(path):
    """Read a fields CSV back: (meta dict, points (M,2), angles (D,),
    total (M,D), scattered (M,D))."""
    import json

    from .errors import ParseError

    lines = open(path).read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing '#' JSON header", line=1)
    meta = json.loads(lines[0][1:])
    angles = np.asarray(meta["direction_angles"], dtype=float)
    M = int(meta["measurement"]["count"])
    D = angles.size
    if len(lines) - 2 != M * D:
        raise ParseError(f"expected {M * D} records, found {len(lines) - 2}",
                         line=len(lines))
    points = np.empty((M, 2))
    total = np.empty((M, D), dtype=complex)
    scattered = np.empty((M, D), dtype=complex)
    for idx, line in enumerate(lines[2:]):
        parts = line.split(",")
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields, got {len(parts)}", line=idx + 3)
        x1, x2, _, re_u, im_u, re_us, im_us = (float(p) for p in parts)
        m, j = divmod(idx, D)
        points[m] = (x1, x2)
        total[m, j] = re_u + 1j * im_u
        scattered[m, j] = re_us + 1j * im_us
    return meta, points, angles, total, scattered
