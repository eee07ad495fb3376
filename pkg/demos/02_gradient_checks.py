"""Check every differentiable op, and both training losses, against finite differences.

The autodiff core is small enough to verify exhaustively: each case draws
ten random float64 inputs away from kinks and compares analytic gradients
with central differences.

    python demos/02_gradient_checks.py
"""
from reftr.harness.gradsuite import run_grad_suite

results, wall = run_grad_suite(points=10)
for r in results:
    print(f"{'ok  ' if r.passed else 'FAIL'} {r.kind:4s} {r.name:20s} max rel err {r.max_error:.1e} (tol {r.tolerance:g})")
print(f"{sum(r.passed for r in results)}/{len(results)} passed in {wall:.1f}s")
