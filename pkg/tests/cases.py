"""Random case generators shared by the unit and acceptance suites."""

import numpy as np

from siamface import protocol
from siamface.store import Match


def store_case(rng, max_rows=10_000, max_k=10):
    """A random table (with repeated ids and some exact ties), a query and k.

    Sizes are log-uniform so small and large tables are both common.
    """
    n = int(np.exp(rng.uniform(0, np.log(max_rows))))
    n = max(1, min(n, max_rows))
    ids = rng.integers(0, max(1, n // 4) + 1, n)
    vecs = rng.normal(size=(n, 5))
    if rng.random() < 0.5:
        vecs = np.round(vecs, 1)  # coarse grid: many equal distances
    if rng.random() < 0.3 and n > 10:
        # one id with ten rows near the query
        anchor = rng.normal(size=5)
        rows = rng.choice(n, 10, replace=False)
        ids[rows] = 10
        vecs[rows] = anchor + rng.normal(scale=1e-3, size=(10, 5))
        query = anchor
    else:
        query = rng.normal(size=5)
        if rng.random() < 0.5:
            query = np.round(query, 1)
    k = int(rng.integers(1, max_k + 1))
    rows = [(int(u), tuple(float(x) for x in v)) for u, v in zip(ids, vecs)]
    return rows, [float(x) for x in query], k


def _text(rng, alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_ ", lo=1, hi=12):
    return "".join(rng.choice(list(alphabet), int(rng.integers(lo, hi + 1))))


def _blob(rng):
    return bytes(rng.integers(0, 256, int(rng.integers(1, 64))).astype(np.uint8))


def _float(rng):
    # mix of ordinary, tiny and integral values
    pick = rng.integers(3)
    if pick == 0:
        return float(rng.normal() * 10)
    if pick == 1:
        return float(rng.random() * 1e-12)
    return float(rng.integers(0, 100))


def random_message(rng):
    kind = int(rng.integers(7))
    if kind == 0:
        return protocol.Ping()
    if kind == 1:
        return protocol.Pong()
    if kind == 2:
        return protocol.RegisterRequest(int(rng.integers(0, 2**31)), _blob(rng))
    if kind == 3:
        return protocol.RecognizeRequest(_text(rng), [_blob(rng) for _ in range(int(rng.integers(1, 6)))])
    if kind == 4:
        return protocol.Registered(int(rng.integers(0, 10**6)), [_float(rng) for _ in range(5)])
    if kind == 5:
        matches = [Match(int(rng.integers(0, 1000)), abs(_float(rng))) for _ in range(int(rng.integers(0, 4)))]
        uid = _text(rng) if rng.random() < 0.5 else None
        return protocol.MatchResult(_text(rng), matches, uid, bool(rng.random() < 0.2))
    return protocol.ErrorReply(_text(rng, lo=0, hi=40) + "é\n\"")
