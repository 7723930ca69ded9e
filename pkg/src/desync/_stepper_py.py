"""Pure-Python twin of the compiled stepping loop.

Same arguments and results as ``desync._stepper.advance``; additionally
accepts an arbitrary contention law, which the compiled loop cannot.
"""
from __future__ import annotations

from .model import contention_rate


def advance(rem, pool, b_single, b_cap, dt, max_steps, rate, count, law=contention_rate):
    r_rem = [float(x) for x in rem]
    r_pool = [int(x) for x in pool]
    bs = [float(x) for x in b_single]
    bc = [float(x) for x in b_cap]
    npool = len(count)
    n = len(r_rem)
    rates = [0.0] * n
    taken = max_steps
    for s in range(max_steps):
        cnt = [0] * npool
        for p in r_pool:
            if p >= 0:
                cnt[p] += 1
        crossing = False
        for j in range(n):
            p = r_pool[j]
            r = 1.0 if p < 0 else law(bs[p], bc[p], cnt[p])
            rates[j] = r
            if r_rem[j] <= r * dt:
                crossing = True
        if crossing:
            taken = s
            break
        for j in range(n):
            r_rem[j] -= rates[j] * dt
    for j in range(n):
        rem[j] = r_rem[j]
        rate[j] = rates[j]
    return taken
