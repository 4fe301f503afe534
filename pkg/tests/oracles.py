"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own helpers (no route_context, no
batch posterior formula, no indexed store) so agreement is meaningful.
"""

import math

WEEK = 604800.0


def brute_select(trajectories, route, i, tau, c, delta, leave_out=None):
    """Scan every stored traversal and apply the three selection conditions directly."""
    n = len(route)

    def ctx_at(r, j, k):
        return r[j + k] if 0 <= j + k < len(r) else "<edge>"

    want = [ctx_at(route, i, k) for k in range(-c, c + 1)]
    out = []
    for tr in trajectories:
        if leave_out is not None and tr.id == leave_out:
            continue
        r = [t.segment for t in tr.traversals]
        for j, trav in enumerate(tr.traversals):
            if trav.speed is None or trav.arrival is None:
                continue
            if [ctx_at(r, j, k) for k in range(-c, c + 1)] != want:
                continue
            d = abs(trav.arrival - tau)
            if min(d, WEEK - d) <= delta / 2:
                out.append(trav.speed)
    assert n == len(route)
    return out


def sequential_posterior(mu, kappa, alpha, beta, records):
    """Fold single-observation normal-gamma updates over the records."""
    for x in records:
        beta = beta + kappa * (x - mu) ** 2 / (2.0 * (kappa + 1.0))
        mu = (kappa * mu + x) / (kappa + 1.0)
        kappa += 1.0
        alpha += 0.5
    return mu, kappa, alpha, beta


def studentt_pdf_direct(nu, loc, scale, t):
    """Student-t density from gamma functions (valid for moderate nu)."""
    z = (t - loc) / scale
    c = math.gamma((nu + 1) / 2) / (math.gamma(nu / 2) * math.sqrt(nu * math.pi) * scale)
    return c * (1 + z * z / nu) ** (-(nu + 1) / 2)


def gaussian_logpdf(mu, sigma, t):
    return -0.5 * ((t - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))
