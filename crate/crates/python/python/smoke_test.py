"""Smoke test for the kcascade_py extension. Run after `maturin develop`."""

import math
import pathlib

import kcascade_py as kc


def main():
    k = kc.GaussianKernel.isotropic(2, 0.5)
    assert k([1.0, 0.0], [0.0, 0.0]) == math.exp(-0.5)
    assert k.precision == [[0.5, 0.0], [0.0, 0.5]]

    series = kc.lorenz(1200)
    assert len(series) == 1200 and len(series[0]) == 3

    f = kc.KernelFilter(kc.GaussianKernel.isotropic(3, 0.003), nu=0.05, lam=1e-6)
    errs = [f.step(series[n], series[n + 5][1]) for n in range(len(series) - 5)]
    late = sum(e * e for e in errs[-200:]) / 200
    early = sum(e * e for e in errs[:200]) / 200
    print(f"filter: {len(f)} centres, early MSE {early:.4f}, late MSE {late:.4f}")
    assert late < early

    x, fx, evals = kc.cmaes_minimize(lambda v: sum(t * t for t in v), [1.0] * 4, 0.5, generations=150, seed=3)
    print(f"cmaes: f={fx:.3e} after {evals} evaluations")
    assert fx < 1e-10

    try:
        kc.cmaes_minimize(lambda v: 1 / 0, [0.0], 1.0, generations=2)
    except ZeroDivisionError:
        pass
    else:
        raise AssertionError("objective errors must propagate")

    rlc = kc.rlc(10)
    assert rlc[0] == [0.0, 0.3]
    cfg = pathlib.Path(__file__).resolve().parents[3] / "configs" / "rlc_ald_krls.toml"
    r = kc.run_experiment(str(cfg))
    print("rlc run: depth MSEs", ", ".join(f"{m:.4g}" for m in r["mse"]), "best", r["best_depth"])
    assert r["mse"][r["best_depth"] - 1] < r["mse"][0]
    print("ok")


if __name__ == "__main__":
    main()
