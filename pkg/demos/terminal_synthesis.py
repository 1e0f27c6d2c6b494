"""Terminal ingredients for the batch reactor.

Synthesizes a terminal gain and weight by solving the lifted LMI once per
possible number of consecutive losses, then checks the result two ways:
the eigenvalues of the quadratic matrix inequality, and the decrease
condition sampled on random overall states.

Run with ``python3 demos/terminal_synthesis.py``.
"""
import numpy as np

from stmpc.config import load_bundled
from stmpc.lifted_dynamics import lift
from stmpc.terminal_design import design_terminal, verify_decrease, verify_qmi

ex = load_bundled()
plant, spec, P = ex.plant, ex.spec, ex.mpc.P
print(f"bucket g={spec.g} c={spec.c} b={spec.b}: terminal interval M={spec.M}, up to P={P} losses in a row")

term = design_terminal(plant, spec, P)
np.set_printoptions(precision=4, suppress=True)
print("K_f =\n", term.K_f)
print("eig(P_f) =", np.linalg.eigvalsh(term.P_f))

# one block per outcome p = 1..P+1 (success after p-1 losses)
qmi = verify_qmi(term.K_f, term.P_f, plant, term.M, P)
for p, eig in sorted(qmi.max_eigs.items()):
    print(f"  p={p}: largest QMI eigenvalue {eig:+.3e}")

dec = verify_decrease(term, plant, spec, P=P, samples=500)
print(f"decrease checked on {dec.samples} states, worst margin {dec.worst_margin:+.3e}, passed={dec.passed}")

# input K_f x held until the next successful packet, per outcome
for p in range(1, P + 2):
    L = lift(plant, p * term.M)
    rho = np.abs(np.linalg.eigvals(L.A_j + L.B_j @ term.K_f)).max()
    print(f"  p={p}: spectral radius with K_f x held for {p * term.M} steps = {rho:.4f}")
