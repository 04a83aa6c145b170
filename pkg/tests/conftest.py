import numpy as np
import pytest

from voxelkp import autograd as ag
from voxelkp.sparse import SparseTensor, clear_index_cache

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def record_acceptance(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _fresh_index_cache():
    clear_index_cache()
    yield


def rel_err(a, b, floor=1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def random_sparse(rng, shape, occupancy, channels, batch=1, dtype=np.float64, min_active=1):
    """Random canonical sparse tensor with roughly ``occupancy`` of cells active."""
    shape = tuple(shape)
    n_cells = int(np.prod(shape))
    idx = []
    for b in range(batch):
        k = max(min_active, int(round(occupancy * n_cells)))
        flat = rng.choice(n_cells, size=min(k, n_cells), replace=False)
        coords = np.stack(np.unravel_index(flat, shape), axis=1)
        idx.append(np.column_stack([np.full(len(coords), b), coords]))
    idx = np.concatenate(idx).astype(np.int64)
    feats = rng.standard_normal((idx.shape[0], channels)).astype(dtype)
    t = SparseTensor(feats, idx, shape, batch)
    from voxelkp.sparse import canonical_sort
    return canonical_sort(t)


def numeric_grad(loss_fn, arrays, eps=1e-4):
    """Central differences of ``loss_fn()`` (a float) w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = loss_fn()
            a[i] = old - eps
            down = loss_fn()
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def grad_check(build, params, eps=1e-4):
    """Compare tape gradients of ``build()`` against central differences.

    ``build`` returns a scalar Var computed from ``params`` (Params or
    requires_grad Vars whose ``value`` arrays are float64). Returns the
    relative error of the concatenated gradient, so params whose gradient is
    identically zero (e.g. a key bias under softmax) are judged against the
    overall gradient scale rather than their own noise.
    """
    for p in params:
        p.grad = None
    with ag.Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    def value():
        with ag.no_grad():
            return float(build().value)

    numeric = numeric_grad(value, [p.value for p in params], eps)
    return rel_err(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


def _central(build, p, i, eps):
    """(central difference at eps, whether a kink lies inside +-eps).

    Smooth: the central differences at eps and eps / 2 agree to O(eps^2) and
    the second differences scale by 4. A kink off centre breaks the first, a
    kink at the centre the second.
    """
    old = p.value[i]
    vals = []
    for x in (old + eps, old - eps, old + eps / 2, old - eps / 2, old):
        p.value[i] = x
        with ag.no_grad():
            vals.append(float(build().value))
    p.value[i] = old
    up, down, up2, down2, mid = vals
    d, d_half = (up - down) / (2 * eps), (up2 - down2) / eps
    scale = max(abs(d), abs(d_half))
    slope_jump = abs((up - 2 * mid + down) - 4 * (up2 - 2 * mid + down2)) / eps
    kinked = abs(d - d_half) > 1e-3 * scale + 1e-9 or slope_jump > 1e-4 * scale + 1e-9
    return d, kinked


def sampled_grad_check(build, params, n_entries, rng, eps=1e-4, max_kinked=None):
    """``grad_check`` on ``n_entries`` parameter entries; returns (rel err, n kinked).

    Half the entries come from those with a nonzero tape gradient (sparse
    convs leave most kernel taps unused), half uniformly. An entry with a relu
    kink inside +-eps (see ``_central``) has no meaningful central difference
    and is redrawn. The screen uses
    loss values only and cannot mask a wrong analytic gradient.
    """
    for p in params:
        p.grad = None
    with ag.Tape() as tape:
        loss = build()
    tape.backward(loss)
    flat_grad = np.concatenate([np.zeros(p.value.size) if p.grad is None else p.grad.ravel() for p in params])
    bounds = np.cumsum([p.value.size for p in params])
    live = rng.permutation(np.flatnonzero(flat_grad))
    anywhere = rng.permutation(flat_grad.size)
    max_kinked = n_entries if max_kinked is None else max_kinked
    picked, numeric, kinked = [], [], 0
    pools = [iter(live), iter(anywhere)]
    quota = [min(n_entries // 2, len(live)), 0]
    quota[1] = n_entries - quota[0]
    for pool, want in zip(pools, quota):
        got = 0
        for flat in pool:
            if got == want:
                break
            if flat in picked:
                continue
            k = int(np.searchsorted(bounds, flat, side="right"))
            p = params[k]
            i = np.unravel_index(flat - (bounds[k] - p.value.size), p.value.shape)
            d, kink = _central(build, p, i, eps)
            if kink:
                kinked += 1
                if kinked > max_kinked:
                    raise AssertionError(f"{kinked} kinked entries, the loss is not smooth enough to check")
                continue
            picked.append(flat)
            numeric.append(d)
            got += 1
    return rel_err(flat_grad[picked], numeric), kinked


def leaf(value):
    return ag.Var(np.array(value, dtype=np.float64), requires_grad=True)
