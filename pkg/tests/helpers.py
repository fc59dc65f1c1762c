"""Independent oracles shared by several test modules."""

import numpy as np

from splitlora.autodiff import Tensor
from splitlora.checkpoint import POLICY_MODES, Checkpoint
from splitlora.lora import CONTENT, STYLE, ColumnMask, LoraAdapter, LoraSet


def central_diff(f, t, h=1e-4):
    """Central-difference gradient of scalar ``f()`` with respect to tensor ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        up = flat.copy()
        up[i] = old + h
        t.data = up.reshape(t.shape)
        fp = f()
        dn = flat.copy()
        dn[i] = old - h
        t.data = dn.reshape(t.shape)
        fm = f()
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    t.data = flat.reshape(t.shape)
    return g


def grad_mismatch(analytic, numeric, rel=1e-3, floor=1e-6):
    """Entries failing ``|a - n| <= max(rel * max(|a|, |n|), floor)``."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    tol = np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), floor)
    return int(np.sum(np.abs(a - n) > tol))


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def gram_rank(M, tol=1e-10):
    """Rank from the eigenvalues of ``M^T M`` (no SVD), relative to the largest."""
    G = M.T @ M
    ev = np.sort(np.abs(np.linalg.eigvalsh(G)))[::-1]
    if ev[0] == 0:
        return 0
    return int(np.sum(ev > tol * ev[0]))


def random_checkpoint(seed: int) -> Checkpoint:
    rng = np.random.default_rng(seed)
    n_blocks = int(rng.integers(1, 4))
    blocks = [f"blk{i}" for i in range(n_blocks)]
    sets = {CONTENT: LoraSet(CONTENT), STYLE: LoraSet(STYLE)}
    for b in blocks:
        for kind in ("K", "V"):
            d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 7))
            r = int(rng.integers(1, min(d_in, d_out) + 1))
            for role in (CONTENT, STYLE):
                lid = f"{b}.{kind}"
                k = int(rng.integers(0, d_out + 1))
                sup = np.sort(rng.choice(d_out, k, replace=False))
                vals = np.zeros(d_out)
                vals[sup] = rng.standard_normal(k)
                adapter = LoraAdapter(lid, Tensor(rng.standard_normal((d_in, r))), Tensor(rng.standard_normal((r, d_out))))
                sets[role].layers[lid] = (adapter, ColumnMask(Tensor(vals), sup))
    policy = {b: POLICY_MODES[int(rng.integers(0, len(POLICY_MODES)))] for b in blocks}
    return Checkpoint(int(rng.integers(0, 2**63)), int(rng.integers(0, 2**63)), sets[CONTENT], sets[STYLE], policy)


def assert_same(a: Checkpoint, b: Checkpoint):
    assert (a.config_hash, a.vocab_seed, a.policy, a.version) == (b.config_hash, b.vocab_seed, b.policy, b.version)
    for sa, sb in ((a.content, b.content), (a.style, b.style)):
        assert sa.role == sb.role and sa.layer_ids() == sb.layer_ids()
        for lid in sa.layer_ids():
            (xa, ma), (xb, mb) = sa.layers[lid], sb.layers[lid]
            assert xa.B.data.tobytes() == xb.B.data.tobytes()
            assert xa.A.data.tobytes() == xb.A.data.tobytes()
            assert ma.support.tolist() == mb.support.tolist()
            assert ma.values.data.tobytes() == mb.values.data.tobytes()
