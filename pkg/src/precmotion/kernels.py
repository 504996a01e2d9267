"""Compiled inner loops for the planar-arm testbed.

Slot tensors (spheres, fields, out_vec, sphere gradients) may be float32 or
float64; arithmetic is carried out in float64 and rounded on store.
Joint-space quantities are always float64.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def fk(theta, lengths, fracs, radius, spheres, ee):
    B, n = theta.shape
    S = fracs.shape[0]
    for b in range(B):
        x = 0.0
        y = 0.0
        phi = 0.0
        for i in range(n):
            phi += theta[b, i]
            c = math.cos(phi)
            s = math.sin(phi)
            L = lengths[i]
            for k in range(S):
                idx = i * S + k
                spheres[b, idx, 0] = x + fracs[k] * L * c
                spheres[b, idx, 1] = y + fracs[k] * L * s
                spheres[b, idx, 2] = radius
            x += L * c
            y += L * s
        ee[b, 0] = x
        ee[b, 1] = y
        ee[b, 2] = phi


@njit(cache=True)
def bk(theta, lengths, fracs, grad_spheres, grad_ee, use_ee, out):
    """Jacobian-transpose accumulation of sphere (and tip) gradients."""
    B, n = theta.shape
    S = fracs.shape[0]
    px = np.empty(n + 1)
    py = np.empty(n + 1)
    cosv = np.empty(n)
    sinv = np.empty(n)
    for b in range(B):
        x = 0.0
        y = 0.0
        phi = 0.0
        for i in range(n):
            px[i] = x
            py[i] = y
            phi += theta[b, i]
            cosv[i] = math.cos(phi)
            sinv[i] = math.sin(phi)
            x += lengths[i] * cosv[i]
            y += lengths[i] * sinv[i]
        px[n] = x
        py[n] = y
        acc_gx = 0.0
        acc_gy = 0.0
        acc_cross = 0.0
        for j in range(n - 1, -1, -1):
            L = lengths[j]
            for k in range(S):
                idx = j * S + k
                gx = np.float64(grad_spheres[b, idx, 0])
                gy = np.float64(grad_spheres[b, idx, 1])
                if gx == 0.0 and gy == 0.0:
                    continue
                cx = px[j] + fracs[k] * L * cosv[j]
                cy = py[j] + fracs[k] * L * sinv[j]
                acc_gx += gx
                acc_gy += gy
                acc_cross += gy * cx - gx * cy
            g = acc_cross - px[j] * acc_gy + py[j] * acc_gx
            if use_ee:
                g += -grad_ee[b, 0] * (py[n] - py[j]) + grad_ee[b, 1] * (px[n] - px[j])
                g += grad_ee[b, 2]
            out[b, j] = g


# Culling slack; link bounding-box tests only skip work that is provably
# inactive, so results match the brute-force loops exactly.
_SLACK = 1e-9


@njit(cache=True)
def _link_boxes(xs, ys, rs, S, box):
    """Axis-aligned box around each link's spheres (radii included)."""
    for i in range(box.shape[0]):
        x0 = np.inf
        x1 = -np.inf
        y0 = np.inf
        y1 = -np.inf
        for k in range(S):
            s = i * S + k
            r = rs[s]
            x0 = min(x0, xs[s] - r)
            x1 = max(x1, xs[s] + r)
            y0 = min(y0, ys[s] - r)
            y1 = max(y1, ys[s] + r)
        box[i, 0] = x0
        box[i, 1] = x1
        box[i, 2] = y0
        box[i, 3] = y1


@njit(cache=True)
def _box_gap2(box, i, px, py):
    """Squared distance from a point to box i."""
    dx = max(box[i, 0] - px, 0.0, px - box[i, 1])
    dy = max(box[i, 2] - py, 0.0, py - box[i, 3])
    return dx * dx + dy * dy


@njit(cache=True)
def _sample_collision(xs, ys, rs, S, obstacles, margin, box, cand, pv, uxv, uyv):
    """Penetration depth and direction of every sphere against its nearest
    obstacle; writes zeros for inactive spheres and returns sum(depth**2)."""
    _link_boxes(xs, ys, rs, S, box)
    K = obstacles.shape[0]
    total = 0.0
    for i in range(box.shape[0]):
        nc = 0
        for k in range(K):
            reach = margin + obstacles[k, 2] + _SLACK
            if _box_gap2(box, i, obstacles[k, 0], obstacles[k, 1]) < reach * reach:
                cand[nc] = k
                nc += 1
        for m in range(S):
            s = i * S + m
            pv[s] = 0.0
            uxv[s] = 0.0
            uyv[s] = 0.0
            if nc == 0:
                continue
            best = np.inf
            ux = 1.0
            uy = 0.0
            for c in range(nc):
                k = cand[c]
                dx = xs[s] - obstacles[k, 0]
                dy = ys[s] - obstacles[k, 1]
                dist = math.sqrt(dx * dx + dy * dy)
                d = dist - obstacles[k, 2] - rs[s]
                if d < best:
                    best = d
                    if dist > 0.0:
                        ux = -dx / dist
                        uy = -dy / dist
                    else:
                        ux = 1.0
                        uy = 0.0
            p = margin - best
            if p > 0.0:
                total += p * p
                pv[s] = p
                uxv[s] = ux
                uyv[s] = uy
    return total


@njit(cache=True)
def collision(spheres, obstacles, margin, S, cost, field):
    """Per-sphere nearest-obstacle penetration; ``field`` gets (depth, dir)."""
    B, NS = spheres.shape[0], spheres.shape[1]
    n = NS // S
    xs = np.empty(NS)
    ys = np.empty(NS)
    rs = np.empty(NS)
    pv = np.empty(NS)
    uxv = np.empty(NS)
    uyv = np.empty(NS)
    box = np.empty((n, 4))
    cand = np.empty(obstacles.shape[0], dtype=np.int64)
    for b in range(B):
        for s in range(NS):
            xs[s] = spheres[b, s, 0]
            ys[s] = spheres[b, s, 1]
            rs[s] = spheres[b, s, 2]
        cost[b] = _sample_collision(xs, ys, rs, S, obstacles, margin, box, cand, pv, uxv, uyv)
        for s in range(NS):
            field[b, s, 0] = pv[s]
            field[b, s, 1] = uxv[s]
            field[b, s, 2] = uyv[s]


@njit(cache=True)
def collision_cost_only(spheres, obstacles, margin, S, cost):
    B, NS = spheres.shape[0], spheres.shape[1]
    n = NS // S
    xs = np.empty(NS)
    ys = np.empty(NS)
    rs = np.empty(NS)
    pv = np.empty(NS)
    uxv = np.empty(NS)
    uyv = np.empty(NS)
    box = np.empty((n, 4))
    cand = np.empty(obstacles.shape[0], dtype=np.int64)
    for b in range(B):
        for s in range(NS):
            xs[s] = spheres[b, s, 0]
            ys[s] = spheres[b, s, 1]
            rs[s] = spheres[b, s, 2]
        cost[b] = _sample_collision(xs, ys, rs, S, obstacles, margin, box, cand, pv, uxv, uyv)


@njit(cache=True)
def swept(spheres, obstacles, margin, substeps, S, cost, field, need_field):
    """Collision along a waypoint sequence with sphere-space interpolation.

    ``spheres`` is (B, T, NS, 3). Samples between waypoints t and t+1 at
    fraction a contribute (1-a) and a of their penetration vector to the
    bracketing waypoints; ``field`` stores the accumulated vector as
    (norm, unit direction). Interpolated spheres stay inside the union of
    the two waypoint link boxes, so links are culled per segment.
    """
    B, T, NS = spheres.shape[0], spheres.shape[1], spheres.shape[2]
    n = NS // S
    K = obstacles.shape[0]
    acc = np.zeros((T, NS, 2))
    xs = np.empty(NS)
    ys = np.empty(NS)
    rs = np.empty(NS)
    boxes = np.empty((T, n, 4))
    ubox = np.empty((1, 4))
    cand = np.empty(K, dtype=np.int64)
    for b in range(B):
        total = 0.0
        if need_field:
            acc[:] = 0.0
        for t in range(T):
            for s in range(NS):
                xs[s] = spheres[b, t, s, 0]
                ys[s] = spheres[b, t, s, 1]
                rs[s] = spheres[b, t, s, 2]
            _link_boxes(xs, ys, rs, S, boxes[t])
        for t in range(T):
            last = t == T - 1
            for i in range(n):
                ubox[0, 0] = boxes[t, i, 0]
                ubox[0, 1] = boxes[t, i, 1]
                ubox[0, 2] = boxes[t, i, 2]
                ubox[0, 3] = boxes[t, i, 3]
                if not last:
                    ubox[0, 0] = min(ubox[0, 0], boxes[t + 1, i, 0])
                    ubox[0, 1] = max(ubox[0, 1], boxes[t + 1, i, 1])
                    ubox[0, 2] = min(ubox[0, 2], boxes[t + 1, i, 2])
                    ubox[0, 3] = max(ubox[0, 3], boxes[t + 1, i, 3])
                nc = 0
                for k in range(K):
                    reach = margin + obstacles[k, 2] + _SLACK
                    if _box_gap2(ubox, 0, obstacles[k, 0], obstacles[k, 1]) < reach * reach:
                        cand[nc] = k
                        nc += 1
                if nc == 0:
                    continue
                for m in range(S):
                    s = i * S + m
                    x0 = np.float64(spheres[b, t, s, 0])
                    y0 = np.float64(spheres[b, t, s, 1])
                    r0 = np.float64(spheres[b, t, s, 2])
                    if not last:
                        x1 = np.float64(spheres[b, t + 1, s, 0])
                        y1 = np.float64(spheres[b, t + 1, s, 1])
                        r1 = np.float64(spheres[b, t + 1, s, 2])
                    for j in range(1 if last else substeps):
                        a = j / substeps
                        if j == 0:
                            cx, cy, r = x0, y0, r0
                        else:
                            cx = (1.0 - a) * x0 + a * x1
                            cy = (1.0 - a) * y0 + a * y1
                            r = (1.0 - a) * r0 + a * r1
                        best = np.inf
                        ux = 1.0
                        uy = 0.0
                        for c in range(nc):
                            k = cand[c]
                            dx = cx - obstacles[k, 0]
                            dy = cy - obstacles[k, 1]
                            dist = math.sqrt(dx * dx + dy * dy)
                            d = dist - obstacles[k, 2] - r
                            if d < best:
                                best = d
                                if dist > 0.0:
                                    ux = -dx / dist
                                    uy = -dy / dist
                                else:
                                    ux = 1.0
                                    uy = 0.0
                        p = margin - best
                        if p <= 0.0:
                            continue
                        total += p * p
                        if need_field:
                            acc[t, s, 0] += (1.0 - a) * p * ux
                            acc[t, s, 1] += (1.0 - a) * p * uy
                            if j > 0:
                                acc[t + 1, s, 0] += a * p * ux
                                acc[t + 1, s, 1] += a * p * uy
        cost[b] = total
        if need_field:
            for t in range(T):
                for s in range(NS):
                    gx = acc[t, s, 0]
                    gy = acc[t, s, 1]
                    norm = math.sqrt(gx * gx + gy * gy)
                    if norm > 0.0:
                        field[b, t, s, 0] = norm
                        field[b, t, s, 1] = gx / norm
                        field[b, t, s, 2] = gy / norm
                    else:
                        field[b, t, s, 0] = 0.0
                        field[b, t, s, 1] = 0.0
                        field[b, t, s, 2] = 0.0


@njit(cache=True)
def field_to_grad(field, weight, grad):
    """grad[..., :2] += 2 * weight * depth * direction (flattened batch)."""
    for i in range(field.shape[0]):
        p = np.float64(field[i, 0])
        if p == 0.0:
            continue
        grad[i, 0] += 2.0 * weight * p * np.float64(field[i, 1])
        grad[i, 1] += 2.0 * weight * p * np.float64(field[i, 2])


@njit(cache=True)
def self_penetration(spheres, link_pairs, S, out_vec, active):
    """Overlap of sphere pairs, laid out in contiguous S*S blocks per link pair.

    ``out_vec`` must arrive zero-filled; only positive entries are written.
    ``active[b]`` is set when row b has any overlap.
    """
    B, NS = spheres.shape[0], spheres.shape[1]
    n = NS // S
    xs = np.empty(NS)
    ys = np.empty(NS)
    rs = np.empty(NS)
    box = np.empty((n, 4))
    SS = S * S
    for b in range(B):
        for s in range(NS):
            xs[s] = spheres[b, s, 0]
            ys[s] = spheres[b, s, 1]
            rs[s] = spheres[b, s, 2]
        _link_boxes(xs, ys, rs, S, box)
        hit = False
        for q in range(link_pairs.shape[0]):
            li = link_pairs[q, 0]
            lj = link_pairs[q, 1]
            if (
                box[li, 0] > box[lj, 1] + _SLACK
                or box[lj, 0] > box[li, 1] + _SLACK
                or box[li, 2] > box[lj, 3] + _SLACK
                or box[lj, 2] > box[li, 3] + _SLACK
            ):
                continue
            for ka in range(S):
                for kb in range(S):
                    i = li * S + ka
                    j = lj * S + kb
                    ex = xs[i] - xs[j]
                    ey = ys[i] - ys[j]
                    d2 = ex * ex + ey * ey
                    reach = rs[i] + rs[j]
                    if d2 >= reach * reach:
                        continue
                    p = reach - math.sqrt(d2)
                    if p > 0.0:
                        out_vec[b, q * SS + ka * S + kb] = p
                        hit = True
        active[b] = hit


@njit(cache=True)
def self_cost_grad(spheres, pair_a, pair_b, out_vec, active, weight, cost, grad, need_grad):
    """cost[b] = sum(out_vec**2) over active rows; gradient pushes pairs apart."""
    B = spheres.shape[0]
    P = pair_a.shape[0]
    for b in range(B):
        total = 0.0
        if not active[b]:
            cost[b] = 0.0
            continue
        for q in range(P):
            p = np.float64(out_vec[b, q])
            if p == 0.0:
                continue
            total += p * p
            if not need_grad:
                continue
            i = pair_a[q]
            j = pair_b[q]
            dx = np.float64(spheres[b, i, 0]) - np.float64(spheres[b, j, 0])
            dy = np.float64(spheres[b, i, 1]) - np.float64(spheres[b, j, 1])
            d = math.sqrt(dx * dx + dy * dy)
            if d > 0.0:
                ux = dx / d
                uy = dy / d
            else:
                ux = 1.0
                uy = 0.0
            g = 2.0 * weight * p
            grad[b, i, 0] -= g * ux
            grad[b, i, 1] -= g * uy
            grad[b, j, 0] += g * ux
            grad[b, j, 1] += g * uy
        cost[b] = total


@njit(cache=True)
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@njit(cache=True)
def pose(ee, goal, w_pos, w_rot, cost, grad):
    for b in range(ee.shape[0]):
        dx = ee[b, 0] - goal[b, 0]
        dy = ee[b, 1] - goal[b, 1]
        da = wrap_angle(ee[b, 2] - goal[b, 2])
        cost[b] = w_pos * (dx * dx + dy * dy) + w_rot * da * da
        grad[b, 0] = 2.0 * w_pos * dx
        grad[b, 1] = 2.0 * w_pos * dy
        grad[b, 2] = 2.0 * w_rot * da


@njit(cache=True)
def bound(theta, lo, hi, cost, grad):
    B, n = theta.shape
    for b in range(B):
        total = 0.0
        for j in range(n):
            v = theta[b, j]
            if v > hi[j]:
                e = v - hi[j]
                total += e * e
                grad[b, j] = 2.0 * e
            elif v < lo[j]:
                e = v - lo[j]
                total += e * e
                grad[b, j] = 2.0 * e
            else:
                grad[b, j] = 0.0
        cost[b] = total


@njit(cache=True)
def _pose_term(ex, ey, ea, goal, w_pos, w_rot, gout):
    dx = ex - goal[0]
    dy = ey - goal[1]
    da = wrap_angle(ea - goal[2])
    gout[0] = 2.0 * w_pos * dx
    gout[1] = 2.0 * w_pos * dy
    gout[2] = 2.0 * w_rot * da
    return w_pos * (dx * dx + dy * dy) + w_rot * da * da


@njit(cache=True)
def _bound_term(theta, lo, hi, w_bound, grad):
    total = 0.0
    for j in range(theta.shape[0]):
        v = theta[j]
        e = 0.0
        if v > hi[j]:
            e = v - hi[j]
        elif v < lo[j]:
            e = v - lo[j]
        total += e * e
        grad[j] += 2.0 * w_bound * e
    return w_bound * total


@njit(cache=True)
def config_terms(X, ee, lo, hi, goal, w_bound, w_pos, w_rot, terms, grad, grad_ee):
    """Weighted pose and bound terms per configuration.

    terms[:, 0] = pose, terms[:, 1] = bound; ``grad`` (zero-filled) gets the
    bound gradient and ``grad_ee`` the pose gradient.
    """
    for b in range(X.shape[0]):
        terms[b, 0] = _pose_term(ee[b, 0], ee[b, 1], ee[b, 2], goal, w_pos, w_rot, grad_ee[b])
        terms[b, 1] = _bound_term(X[b], lo, hi, w_bound, grad[b])


@njit(cache=True)
def trajectory_terms(traj, ee, lo, hi, goal, w_vel, w_acc, w_bound, w_pos, w_rot, terms, grad, grad_ee):
    """Weighted smoothness, bound and terminal-pose terms per trajectory.

    ``traj`` is (K, T, n) and ``ee`` (K, T, 3). terms[:, 0..2] = smoothness,
    bound, pose. ``grad`` (K, T, n) and ``grad_ee`` (K, T, 3) must arrive
    zero-filled; the pose gradient lands on the last waypoint only.
    """
    K, T, n = traj.shape
    for b in range(K):
        smooth = 0.0
        for t in range(T - 1):
            for j in range(n):
                v = traj[b, t + 1, j] - traj[b, t, j]
                smooth += w_vel * v * v
                gv = 2.0 * w_vel * v
                grad[b, t + 1, j] += gv
                grad[b, t, j] -= gv
        for t in range(T - 2):
            for j in range(n):
                a = traj[b, t + 2, j] - 2.0 * traj[b, t + 1, j] + traj[b, t, j]
                smooth += w_acc * a * a
                ga = 2.0 * w_acc * a
                grad[b, t + 2, j] += ga
                grad[b, t + 1, j] -= 2.0 * ga
                grad[b, t, j] += ga
        bound = 0.0
        for t in range(T):
            bound += _bound_term(traj[b, t], lo, hi, w_bound, grad[b, t])
        terms[b, 0] = smooth
        terms[b, 1] = bound
        terms[b, 2] = _pose_term(ee[b, T - 1, 0], ee[b, T - 1, 1], ee[b, T - 1, 2], goal, w_pos, w_rot, grad_ee[b, T - 1])
