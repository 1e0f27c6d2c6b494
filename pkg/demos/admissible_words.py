"""Which loss patterns and which sampling schedules the controller plans over.

Two finite sets drive the min-max search. The first is the set of loss
words the adversary may pick, given at most ``P`` consecutive losses and
``r`` losses already in a row. The second is the set of interval words the
token bucket can serve from its current level.

Run with ``python3 demos/admissible_words.py``.
"""
from collections import Counter

from stmpc.config import load_bundled
from stmpc.minmax_controller import bucket_admissible_words
from stmpc.network import enumerate_admissible, split_by_first_bit

ex = load_bundled()
N, P, spec = ex.mpc.N, ex.mpc.P, ex.spec

for r in range(P + 1):
    words = enumerate_admissible(N, P, r)
    print(f"r={r}: {len(words)} admissible loss words of length {N + P}")
    print("   first few:", ["".join(map(str, w.bits)) for w in words[:4]])

# the first bit is what the plant sees now; the rest is the adversary's future
words = enumerate_admissible(N, P, 0)
succ, lost = split_by_first_bit(words, 1), split_by_first_bit(words, 0)
print(f"r=0 split: {len(succ)} start with a success, {len(lost)} with a loss")

print()
for beta0 in (3, 5, 8, 14):
    words = bucket_admissible_words(spec, N, ex.mpc.delta_max, beta0)
    first = Counter(w[0] for w in words)
    print(f"beta0={beta0:2d}: {len(words):5d} interval words; first interval counts {dict(sorted(first.items()))}")
