import time
import numpy as np
from embedmask.cli import _gradcheck_cases
from embedmask import autodiff as ad
from embedmask.seeding import rng_for

t0=time.time()
rng = rng_for(0, stream=55)
builder, tol, step, fb = _gradcheck_cases('composite', 20, rng)['composite']
worst = 0; fails = 0
for i in range(20):
    f, pts = builder(rng)
    err = ad.finite_diff_check(f, pts, step=step, fallback_steps=fb)
    worst = max(worst, err)
    flag = 'PASS' if err < tol else 'FAIL'
    if err >= tol: fails += 1
    print('case %d: %.2e %s (%.0fs)' % (i, err, flag, time.time()-t0), flush=True)
print('RELU 20 composite: worst %.2e fails %d/20 in %.0fs' % (worst, fails, time.time()-t0), flush=True)
