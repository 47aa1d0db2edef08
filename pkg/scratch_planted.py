"""Scratch: tune planted-recovery dynamics (deleted before delivery)."""
import numpy as np
from agentreg.agents import QueryPool, RewardConfig, run_selection_schedule, local_reward
from agentreg.rng import Rng


def unit(v):
    return v / np.linalg.norm(v)


def make_task(m, k, c, rng):
    # k-dim subspace carrying all signal
    basis, _ = np.linalg.qr(rng.normal(size=(c, k)))
    w = unit(rng.normal(size=k))
    f_i = basis @ unit(w + 0.15 * unit(rng.normal(size=k)))
    f_p = basis @ unit(w + 0.15 * unit(rng.normal(size=k)))
    mid = unit(unit(f_i) + unit(f_p))
    planted = np.sort(rng.choice(m, size=k, replace=False))
    queries = rng.normal(size=(m, c))
    for j in planted:
        # rotate the bisector by <=20 deg inside the subspace
        theta = rng.uniform(0.0, np.deg2rad(20.0))
        v = basis @ rng.normal(size=k)
        v = unit(v - (v @ mid) * mid)
        q = np.cos(theta) * mid + np.sin(theta) * v
        assert local_reward(q, f_i, f_p) >= 0.8, local_reward(q, f_i, f_p)
        queries[j] = q
    return queries, f_i, f_p, planted


def trial(seed, tri, samples, lr, epochs=50):
    rng = Rng(seed)
    m, k, c = 32, 12, 32
    queries, f_i, f_p, planted = make_task(m, k, c, rng.derive(0))
    pool = QueryPool(queries=queries, scores=np.zeros(m), k=k)
    res = run_selection_schedule(pool, f_i, f_p, RewardConfig(), epochs,
                                 rng.derive(1), tri_stage=tri,
                                 samples_per_epoch=samples, score_lr=lr)
    return len(set(res.selected.tolist()) & set(planted.tolist()))


if __name__ == "__main__":
    for samples in (8, 16, 32):
        for lr in (0.5, 1.0, 2.0, 4.0):
            recov = [trial(s, True, samples, lr) for s in range(20)]
            ok = sum(1 for r in recov if r >= 10)
            topk = [trial(s, False, samples, lr) for s in range(20)]
            print(f"samples={samples:3d} lr={lr:4.1f}  tri mean={np.mean(recov):5.2f} "
                  f">=10: {ok:2d}/20  min={min(recov)}  topk mean={np.mean(topk):5.2f}")
