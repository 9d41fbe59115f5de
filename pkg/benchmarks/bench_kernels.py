"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--n 257] [--repeat 20]

Prints per-kernel best-of timings and the speedup, and checks that both
backends agree.
"""
import argparse
import timeit

import numpy as np

from concentra import kernels
from concentra.discretization import DiscreteEnergy, ProblemSpec, build_grid
from concentra.fields import QuadraticWell, identity_diffusion
from concentra.penalty import make_penalty


def _cases(n):
    grid = build_grid(2, 1.6, n)
    V = QuadraticWell(1.0, [0.2, 0.1], base=4.0)
    cfg = make_penalty([[-1.1, 1.5], [-1.2, 1.4]], 3.0, V.alpha)
    energy = DiscreteEnergy(ProblemSpec(grid, V, identity_diffusion(2), 3.0, cfg), 0.1, "penalized", penalty=cfg)
    K = kernels.pure.as_csr(energy.K)
    x = grid.points()
    u = 3.0 * np.exp(-np.sum((x - [0.2, 0.1]) ** 2, axis=1) / 0.02)
    inside = cfg.inside(x).astype(np.uint8)
    wv = grid.cell_volume * V.value(x)
    w = grid.cell_volume
    args = (cfg.p, cfg.ell, cfg.slope)
    out = np.empty_like(u)

    def fused(mod):
        return lambda: mod.fused_energy_gradient(K, u, wv, w, inside, True, *args, out)

    def curvature(mod):
        return lambda: mod.nonlinear_curvature(u, w, inside, True, *args, out)

    def moment(mod):
        return lambda: mod.nonlinear_moment(u, inside, True, *args, 1.3)

    def shoot(mod):
        def run():
            status, count, U, Up = mod.shoot(2.2062, 2, 3.0, 0.02, 1000)
            # samples past ``count`` are unused buffer space
            return status, count, np.asarray(U)[:count], np.asarray(Up)[:count]
        return run

    return {"fused_energy_gradient": fused, "nonlinear_curvature": curvature,
            "nonlinear_moment": moment, "shoot": shoot}


def _result(call):
    """Flattened return value plus the shared output buffer."""
    r = call()
    parts = [np.ravel(np.asarray(x, dtype=float)) for x in (r if isinstance(r, tuple) else (r,)) if x is not None]
    cell = call.__closure__ or ()
    bufs = [c.cell_contents for c in cell if isinstance(c.cell_contents, np.ndarray)]
    return np.concatenate(parts + [np.ravel(b).copy() for b in bufs]) if parts or bufs else np.zeros(0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=257, help="grid points per axis (2D)")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernels are not built; only the fallback is available")
    print(f"grid {args.n}x{args.n}, best of {args.repeat}")
    print(f"{'kernel':24s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}")
    for name, make in _cases(args.n).items():
        t_py = min(timeit.repeat(make(kernels.pure), number=1, repeat=args.repeat)) * 1e3
        if kernels.compiled is None:
            print(f"{name:24s} {t_py:12.3f} {'-':>14s} {'-':>8s}")
            continue
        same = np.allclose(_result(make(kernels.pure)), _result(make(kernels.compiled)), rtol=1e-10)
        t_c = min(timeit.repeat(make(kernels.compiled), number=1, repeat=args.repeat)) * 1e3
        flag = "" if same else "  MISMATCH"
        print(f"{name:24s} {t_py:12.3f} {t_c:14.3f} {t_py / t_c:8.1f}{flag}")


if __name__ == "__main__":
    main()
