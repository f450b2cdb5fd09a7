"""
How small can a calibration group be?
=====================================

With ``m`` calibration scores the correction is the ``k``-th smallest,
``k = ceil((1 - alpha)(m + 1))``. When ``k > m`` no finite correction keeps
the guarantee and the interval becomes the whole real line. The exact hit
probability is ``min(k, m + 1) / (m + 1)``, which a simulation reproduces.
"""

from fractions import Fraction

from eqcov import exact_rank_coverage, monte_carlo_coverage, permutation_rank_coverage, quantile_rank

alpha = 0.1
print(" m    k   exact    simulated")
for m in (4, 8, 9, 10, 19, 49, 99):
    k = quantile_rank(m, alpha)
    exact = exact_rank_coverage(m, alpha)
    est = monte_carlo_coverage(m=m, alpha=alpha, trials=40_000, seed=m)
    flag = "  unbounded" if k > m else ""
    print(f"{m:3d}  {k:3d}   {float(exact):.4f}   {est.estimate:.4f} +- {est.se:.4f}{flag}")

# brute force over all orderings agrees with the closed form
for m in range(1, 6):
    assert permutation_rank_coverage(m, Fraction(1, 10)) == exact_rank_coverage(m, Fraction(1, 10))
print("\nsmallest m with a finite correction at alpha=0.1:",
      next(m for m in range(1, 100) if quantile_rank(m, alpha) <= m))
