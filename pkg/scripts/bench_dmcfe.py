"""Time the DMCFE primitives for one aggregated element on both backends.

    python3 scripts/bench_dmcfe.py [--clients 10] [--trials 20] [--table 16384]
"""

import argparse
import random
import time

import numpy as np

from fedunlearn.crypto import dmcfe as fe


def bench(backend, n, trials, table_size, seed=0):
    pp = fe.setup(256, n, 16, 2 ** 19, backend=backend)
    ids = [f"client-{i:03d}" for i in range(n)]
    boot = fe.TrustedBootstrap(ids, seed=seed)
    keys = [fe.keygen(pp, c, boot) for c in ids]
    t0 = time.perf_counter()
    table = fe.bsgs_table(pp, table_size)
    t_table = time.perf_counter() - t0

    rnd = random.Random(seed)
    t_enc, t_key, t_dec, wrong = [], [], [], 0
    for label in range(trials):
        xs = [rnd.randint(-pp.bound, pp.bound) for _ in ids]
        t0 = time.perf_counter()
        cts = [fe.encrypt(pp, ek, x, label) for (_, ek), x in zip(keys, xs)]
        t1 = time.perf_counter()
        dk = fe.dkey_comb(pp, [fe.dkey_share(pp, sk, fe.SUM, label, ids) for sk, _ in keys], ids)
        t2 = time.perf_counter()
        wrong += fe.decrypt(pp, cts, dk, label, table) != sum(xs)
        t3 = time.perf_counter()
        t_enc.append((t1 - t0) / n)
        t_key.append(t2 - t1)
        t_dec.append(t3 - t2)
    print(
        f"{backend:10s} n={n} table={table_size}: build {t_table:.2f}s | encrypt {np.mean(t_enc) * 1e3:.2f} ms/elem | "
        f"key shares+combine {np.mean(t_key) * 1e3:.1f} ms | decrypt {np.mean(t_dec) * 1e3:.1f} ms | wrong {wrong}/{trials}"
    )


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--table", type=int, default=2 ** 14)
    args = p.parse_args()
    for backend in ("mock", "bls12_381"):
        bench(backend, args.clients, args.trials, args.table)


if __name__ == "__main__":
    main()
