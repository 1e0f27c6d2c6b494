"""Robust and nominal planning on the same lossy channel.

The channel drops two packets after every success. The robust controller
plans against every admissible loss pattern and uses acknowledgments. The
nominal one plans as if every packet arrived. Both share the same terminal
ingredients and the same token bucket.

Run with ``python3 demos/robust_vs_nominal.py`` (about a minute). A smaller
word budget than the bundled default keeps the demo quick.
"""
from dataclasses import replace

import numpy as np

from stmpc import cli
from stmpc.closed_loop_sim import sampling_interval_summary
from stmpc.config import load_bundled, make_loss
from stmpc.terminal_design import design_terminal

T = 45

ex = load_bundled()
ex = replace(ex, mpc=replace(ex.mpc, max_words=3))
term = design_terminal(ex.plant, ex.spec, ex.mpc.P)

runs = {}
for nominal in (False, True):
    loss = make_loss(ex.sim["loss"], ex.mpc.P)
    runs["nominal" if nominal else "robust"] = cli.simulate(ex, term, loss, nominal=nominal, T=T)

print(" t   robust |x|_inf   nominal |x|_inf")
for t in range(0, T + 1, 5):
    a, b = (np.abs(runs[k].trace[t].x).max() for k in ("robust", "nominal"))
    print(f"{t:2d}   {a:14.3e}   {b:15.3e}")

for name, res in runs.items():
    s = res.summary
    hist = sampling_interval_summary(res.trace)["histogram"]
    print(f"{name:8s} x_1(30) = {s['x1_at_30']:+.3e}  diverged={s['diverged']}  intervals {hist}")
