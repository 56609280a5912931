"""Verify every autodiff op against central finite differences.

Each op gets a dense check (every parameter entry perturbed) at float32
and float64; the full model loss is spot-checked on random entries.
"""

from blockmae.cli import run_gradcheck

ok, rows = run_gradcheck(samples=20, seed=0)

width = max(len(name) for name, *_ in rows)
for name, path, err, tol, passed in rows:
    mark = "ok " if passed else "BAD"
    print(f"{mark} {name:<{width}}  {path}  rel_err {err:.3e}  tol {tol:.0e}")

print()
print("all passed" if ok else "SOME CHECKS FAILED")
