"""Scratch calibration script (not part of the package)."""
import json
import sys
import time

import numpy as np

from otfusion.trainer import (
    TrainConfig,
    benchmark_generator_configs,
    kl_concentration_ratio,
    text_only_oracle,
    train,
    variant_config,
)
from otfusion.synthdoc import generate

tc_gen, ev_gen = benchmark_generator_configs()
train_docs, eval_docs = generate(tc_gen), generate(ev_gen)
oracle = text_only_oracle(train_docs, eval_docs)
print("oracle f1:", round(oracle.f1, 4), "token acc:", round(oracle.token_accuracy, 4), flush=True)

which = sys.argv[1] if len(sys.argv) > 1 else "default50"

if which == "default50":
    cfg = TrainConfig(epochs=50, seed=0)
elif which == "bench_full":
    cfg = TrainConfig(epochs=20, seed=0, beta=3e-3)
elif which == "bench_noot":
    cfg = variant_config(TrainConfig(epochs=20, seed=0, beta=3e-3), "no_ot", 0)
else:
    cfg = TrainConfig(**json.loads(which))

t0 = time.perf_counter()
res = train(cfg, train_docs, eval_docs)
dt = time.perf_counter() - t0
for h in res.history:
    print({k: round(v, 4) for k, v in h.items()}, flush=True)
print("wall:", round(dt, 1), "s")
if res.kl_profile is not None:
    prof = np.sort(res.kl_profile)[::-1]
    print("kl profile (sorted desc):", np.round(prof, 4).tolist())
    print("kl ratio:", round(kl_concentration_ratio(res.kl_profile), 2))
