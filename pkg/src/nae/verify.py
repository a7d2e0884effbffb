"""Brute-force oracle suites behind ``nae verify``.

Each suite returns a list of :class:`Check`. The oracles never call the
closed-form penalty or gradient code they are checking: expectations come from
exhaustive mask enumeration or Monte Carlo over the noisy forward pass, and
derivatives from central finite differences.
"""

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import model as nm
from . import noise as nz
from . import penalties as pn
from . import training as tr
from .numeric import Rng, activate

MC_DRAWS = 10**6
TAYLOR_VARIANCES = (1e-2, 1e-3, 1e-4)


@dataclass
class Check:
    name: str
    passed: bool
    max_error: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max error {self.max_error:.3e} {self.detail}".rstrip()


# --- helpers ---------------------------------------------------------------------

def random_model(rng, n_in=3, n_hidden=5, enc="sigmoid", dec="linear", tied=False, scale=1.0):
    p = nm.NaeParams.init(n_in, n_hidden, rng, enc=enc, dec=dec, tied=tied)
    p.W *= scale * np.sqrt(n_in)
    if not tied:
        p.Wdec[...] *= scale * np.sqrt(n_hidden)
    p.b[:] = 0.5 * rng.normal(n_hidden)
    p.d[:] = 0.5 * rng.normal(n_in)
    return p


def zero_residual(params, x):
    """Shift the decoder bias so that the clean reconstruction of ``x`` is exact."""
    params.d[:] = x - params.Wdec @ nm.encode_clean(params, x)
    return params


def moment_matched_normal(rng, n, k):
    """Standard normal draws whose sample mean is 0 and sample covariance is exactly I."""
    e = rng.normal((n, k))
    e -= e.mean(axis=0)
    L = np.linalg.cholesky(e.T @ e / n)
    return np.linalg.solve(L, e.T).T


def enumerate_dropout_excess(params, x, p):
    """Expected squared-error excess over all ``2**d`` dropout masks on the hidden units.

    The reference reconstruction uses the mean activation ``p * h``.
    """
    h = nm.encode_clean(params, x)
    d = h.size
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
    k = masks.sum(axis=1)
    prob = p**k * (1.0 - p) ** (d - k)
    R = (masks * h) @ params.Wdec.T + params.d
    expected = np.sum(prob * np.sum((x - R) ** 2, axis=1))
    ref = np.sum((x - (params.Wdec @ (p * h) + params.d)) ** 2)
    return expected - ref


def mc_prenoise_excess(params, x, var, E):
    u = params.W @ x + params.b
    R = activate(params.enc, u + np.sqrt(var) * E) @ params.Wdec.T + params.d
    clean = params.Wdec @ activate(params.enc, u) + params.d
    return np.mean(np.sum((x - R) ** 2, axis=1)) - np.sum((x - clean) ** 2)


def mc_input_excess(params, x, var, E):
    R = activate(params.enc, (x + np.sqrt(var) * E) @ params.W.T + params.b) @ params.Wdec.T + params.d
    clean = params.Wdec @ activate(params.enc, params.W @ x + params.b) + params.d
    return np.mean(np.sum((x - R) ** 2, axis=1)) - np.sum((x - clean) ** 2)


def fd_gradient(f, arrays, step=1e-5):
    out = {}
    for k, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + step
            fp = f()
            a[idx] = old - step
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        out[k] = g
    return out


def fd_mismatch(analytic, numeric, rtol=1e-5, atol=1e-6):
    """Largest violation ratio of ``|a - n| <= max(atol, rtol * |n|)``; <= 1 passes."""
    worst = 0.0
    for k in numeric:
        err = np.abs(analytic[k] - numeric[k])
        allowed = np.maximum(atol, rtol * np.abs(numeric[k]))
        worst = max(worst, float(np.max(err / allowed)) if err.size else 0.0)
    return worst


def fd_jacobian_frobenius2(params, x, step=1e-5):
    J = np.empty((params.hidden_dim, params.input_dim))
    for j in range(params.input_dim):
        e = np.zeros_like(x)
        e[j] = step
        J[:, j] = (nm.encode_clean(params, x + e) - nm.encode_clean(params, x - e)) / (2 * step)
    return float(np.sum(J**2))


# --- suites -----------------------------------------------------------------------

def check_exact_marginalization(seed=0, sizes=(4, 8, 12), models=5, tol=1e-12):
    rng = Rng(seed)
    worst = 0.0
    for d in sizes:
        for m in range(models):
            r = rng.child(d, m)
            params = random_model(r, n_in=6, n_hidden=d, scale=0.5)
            x = r.normal(6)
            p = float(r.uniform(0.1, 0.9))
            h = nm.encode_clean(params, x)
            oracle = enumerate_dropout_excess(params, x, p)
            worst = max(worst, abs(oracle - pn.penalty_hidden(params, h, p * (1 - p) * h**2)))
            worst = max(worst, abs(oracle - pn.penalty_dropout_pf(params, h, p)))
    return Check("exact dropout marginalization (2^d masks, d<=12)", worst <= tol, worst, f"tol {tol:g}")


def _taylor_penalty_check(name, penalty, excess, tol, seed, models, draws, input_site):
    rng = Rng(seed)
    at_smallest = 0.0
    monotone = True
    for m in range(models):
        r = rng.child(m)
        params = random_model(r)
        x = r.normal(params.input_dim)
        zero_residual(params, x)
        k = params.input_dim if input_site else params.hidden_dim
        E = moment_matched_normal(r.child(1), draws, k)
        errs = []
        for var in TAYLOR_VARIANCES:
            analytic = penalty(params, x, var)
            errs.append(abs(excess(params, x, var, E) - analytic) / analytic)
        monotone &= all(a > b for a, b in zip(errs, errs[1:]))
        at_smallest = max(at_smallest, errs[-1])
    ok = monotone and at_smallest <= tol
    return Check(name, ok, at_smallest,
                 f"rel. tol {tol:g} at var {TAYLOR_VARIANCES[-1]:g}; monotone over {TAYLOR_VARIANCES}: {monotone}")


def check_prenoise_penalty(seed=1, models=3, draws=MC_DRAWS):
    return _taylor_penalty_check("pre-activation noise penalty vs Monte Carlo", pn.penalty_prenoise,
                                 mc_prenoise_excess, 0.05, seed, models, draws, input_site=False)


def check_input_penalty(seed=2, models=3, draws=MC_DRAWS):
    return _taylor_penalty_check("input noise penalty vs Monte Carlo", pn.penalty_input,
                                 mc_input_excess, 0.10, seed, models, draws, input_site=True)


def check_poisson_penalty(seed=3, models=3, draws=MC_DRAWS, tol=0.02):
    rng = Rng(seed)
    worst = 0.0
    for m in range(models):
        r = rng.child(m)
        params = random_model(r)
        x = r.normal(params.input_dim)
        h = nm.encode_clean(params, x)
        E = r.normal((draws, h.size)) * np.sqrt(h)
        R = (h + E) @ params.Wdec.T + params.d
        clean = params.Wdec @ h + params.d
        mc = np.mean(np.sum((x - R) ** 2, axis=1)) - np.sum((x - clean) ** 2)
        pen = pn.penalty_poisson_sparse(params, h)
        worst = max(worst, abs(mc - pen) / pen)
    return Check("poisson sparsity penalty vs Monte Carlo", worst <= tol, worst, f"rel. tol {tol:g}")


def check_correspondences(seed=4, models=20):
    rng = Rng(seed)
    worst_cae = worst_tied = worst_sub = 0.0
    for m in range(models):
        r = rng.child(m)
        params = random_model(r, n_in=3, n_hidden=5)
        x = r.normal(3)
        worst_cae = max(worst_cae, abs(pn.penalty_contractive(params, x) - fd_jacobian_frobenius2(params, x)))
        tied = random_model(r.child(1), n_in=4, n_hidden=5, tied=True)
        xt = r.normal(4)
        var = float(r.uniform(0.01, 0.5))
        worst_tied = max(worst_tied, abs(pn.penalty_tied_gaussian(tied, xt, var) - pn.penalty_input(tied, xt, var)))
        h = nm.encode_clean(params, x)
        p = float(r.uniform(0, 1))
        worst_sub = max(worst_sub,
                        abs(pn.penalty_dropout_pf(params, h, p) - pn.penalty_hidden(params, h, p * (1 - p) * h**2)),
                        abs(pn.penalty_poisson_sparse(params, h) - pn.penalty_hidden(params, h, h)))
    return [
        Check("contractive penalty vs finite-difference Jacobian", worst_cae <= 1e-6, worst_cae, "tol 1e-6"),
        Check("tied Gaussian penalty vs tied input penalty", worst_tied <= 1e-10, worst_tied, "tol 1e-10"),
        Check("dropout/poisson substitution identities", worst_sub <= 1e-14, worst_sub, "tol 1e-14"),
    ]


def suite_penalties(draws=MC_DRAWS):
    return [
        check_exact_marginalization(),
        check_prenoise_penalty(draws=draws),
        check_input_penalty(draws=draws),
        check_poisson_penalty(draws=draws),
        *check_correspondences(),
    ]


GRAD_NOISES = {
    "none": nz.NoiseSpec(),
    "input-gaussian": nz.NoiseSpec(input=nz.gaussian(0.1)),
    "input-mgaussian": nz.NoiseSpec(input=nz.mgaussian(0.1)),
    "input-dropout": nz.NoiseSpec(input=nz.dropout(0.7)),
    "pre-gaussian": nz.NoiseSpec(pre_activation=nz.gaussian(0.2)),
    "pre-mgaussian": nz.NoiseSpec(pre_activation=nz.mgaussian(0.2)),
    "pre-dropout": nz.NoiseSpec(pre_activation=nz.dropout(0.7)),
    "act-gaussian": nz.NoiseSpec(activation=nz.gaussian(0.05)),
    "act-mgaussian": nz.NoiseSpec(activation=nz.mgaussian(0.2)),
    "act-dropout": nz.NoiseSpec(activation=nz.dropout(0.5)),
    "act-poisson": nz.NoiseSpec(activation=nz.poisson()),
    "all": nz.NoiseSpec(input=nz.gaussian(0.1), pre_activation=nz.gaussian(0.1), activation=nz.dropout(0.5)),
}


def _gradcheck_model(r, enc, dec, loss, tied):
    params = random_model(r, n_in=3, n_hidden=5, enc=enc, dec=dec, tied=tied, scale=0.6)
    X = r.uniform(0.05, 0.95, size=(4, 3)) if loss == "cross_entropy" else r.normal((4, 3))
    if dec == "linear" and loss == "cross_entropy":
        # keep the linear reconstruction inside (0, 1)
        params.W *= 0.2
        if not tied:
            params._Wdec *= 0.2
        params.d[:] = 0.5
    return params, X


def _relu_safe(params, X, noise):
    z = nm.encode_noisy(params, X, noise).z
    # a unit zeroed by a multiplicative mask stays at exactly 0 under any perturbation, so it is no kink
    live = np.abs(z[z != 0])
    return params.enc != "relu" or live.size == 0 or np.min(live) > 1e-3


def check_nae_gradients(seeds=20):
    worst = 0.0
    failures = []
    count = 0
    combos = itertools.product(nm.ENCODER_NONLINEARITIES, nm.DECODER_NONLINEARITIES, nm.LOSSES, (False, True))
    for combo, (enc, dec, loss, tied) in enumerate(combos):
        for noise_index, (noise_name, spec) in enumerate(GRAD_NOISES.items()):
            for seed in range(seeds):
                # redraw model, data and noise together: noise after the pre-activation
                # cannot move a relu input away from its kink
                for attempt in range(20):
                    r = Rng(seed).child(combo, noise_index, attempt)
                    params, X = _gradcheck_model(r, enc, dec, loss, tied)
                    noise = nm.sample_noise(params, X, spec, r.child(0))
                    if _relu_safe(params, X, noise):
                        break

                def f():
                    return float(np.mean(nm.loss(X, nm.encode_noisy(params, X, noise).r, loss)))

                ana = nm.gradients(params, nm.encode_noisy(params, X, noise), loss_kind=loss)
                ratio = fd_mismatch(ana, fd_gradient(f, params.arrays()))
                count += 1
                worst = max(worst, ratio)
                if ratio > 1:
                    failures.append(f"{enc}/{dec}/{loss}/tied={tied}/{noise_name}/seed{seed}")
    return Check(f"NAE noisy-loss gradients ({count} models)", not failures, worst,
                 "(error/tolerance ratio, tol 1e-5 rel or 1e-6 abs)" + (f" failing: {failures[:3]}" if failures else ""))


def check_penalty_gradients(seeds=20):
    worst = 0.0
    failures = []
    count = 0
    for tied, enc in itertools.product((False, True), nm.ENCODER_NONLINEARITIES):
        names = [n for n in pn.PENALTY_NAMES if tied or n != "tied_gaussian"]
        for seed in range(seeds):
            r = Rng(seed).child(int(tied), nm.ENCODER_NONLINEARITIES.index(enc))
            params = random_model(r, n_in=3, n_hidden=5, enc=enc, tied=tied, scale=0.6)
            X = r.normal((4, 3))
            if enc == "relu" and np.min(np.abs(X @ params.W.T + params.b)) < 1e-3:
                continue
            weights = {n: float(r.uniform(0.2, 2.0)) for n in names}
            cfg = pn.PenaltyConfig(weights, hidden_noise=nz.dropout(0.6), var_z=0.2, var_x=0.3, p=0.7)
            ana = pn.analytic_gradients(cfg, params, X)
            num = fd_gradient(lambda: pn.analytic_objective(cfg, params, X), params.arrays())
            ratio = fd_mismatch(ana, num)
            count += 1
            worst = max(worst, ratio)
            if ratio > 1:
                failures.append(f"{enc}/tied={tied}/seed{seed}")
    return Check(f"analytic-penalty objective gradients ({count} models)", not failures, worst,
                 "(error/tolerance ratio)" + (f" failing: {failures[:3]}" if failures else ""))


MLP_NOISES = {
    "none": nz.NoiseSpec(),
    "dropout": nz.NoiseSpec(input=nz.dropout(0.8), activation=nz.dropout(0.5)),
    "gaussian": nz.NoiseSpec(input=nz.gaussian(0.1), activation=nz.gaussian(0.05)),
    "mgaussian": nz.NoiseSpec(input=nz.mgaussian(0.1), pre_activation=nz.mgaussian(0.1), activation=nz.mgaussian(0.1)),
    "poisson": nz.NoiseSpec(input=nz.gaussian(0.1), activation=nz.poisson()),
    "pre-dropout": nz.NoiseSpec(pre_activation=nz.dropout(0.6)),
}


def check_mlp_gradients(seeds=20):
    worst = 0.0
    failures = []
    count = 0
    for sizes, act in itertools.product(([4, 3], [4, 5, 3], [4, 5, 4, 3]), ("relu", "sigmoid")):
        for noise_name, spec in MLP_NOISES.items():
            for seed in range(seeds):
                r = Rng(seed).child(len(sizes), int(act == "relu"), list(MLP_NOISES).index(noise_name))
                mlp = tr.MlpParams.init(sizes, r, hidden_act=act)
                for layer in mlp.layers:
                    layer.b[:] = 0.3 * r.normal(layer.b.shape)
                X = r.normal((6, sizes[0]))
                y = r.integers(0, sizes[-1], size=6)
                noise_rng_key = 0
                for attempt in range(10):
                    _, cache = tr.mlp_forward(mlp, X, spec, r.child(100 + attempt))
                    if act != "relu" or all(np.min(np.abs(z)) > 1e-3 for z in cache.pre):
                        noise_rng_key = 100 + attempt
                        break

                probs, cache = tr.mlp_forward(mlp, X, spec, r.child(noise_rng_key))

                def f():
                    probs, _ = tr.mlp_forward(mlp, X, spec, replay=cache)
                    return tr.cross_entropy(probs, y)

                ana = tr.mlp_gradients(mlp, cache, y, spec)
                ratio = fd_mismatch(ana, fd_gradient(f, mlp.arrays()))
                count += 1
                worst = max(worst, ratio)
                if ratio > 1:
                    failures.append(f"{sizes}/{act}/{noise_name}/seed{seed}")
    return Check(f"MLP supervised gradients ({count} models)", not failures, worst,
                 "(error/tolerance ratio)" + (f" failing: {failures[:3]}" if failures else ""))


def suite_gradients(seeds=20):
    return [check_nae_gradients(seeds), check_penalty_gradients(seeds), check_mlp_gradients(seeds)]


def check_mean_preservation(seed=5, n=10**5):
    rng = Rng(seed)
    value = np.array([0.3, -1.2, 2.0, 0.7])
    worst = 0.0
    for dist in (nz.gaussian(0.1), nz.mgaussian(0.2), nz.none()):
        draws = nz.apply(np.broadcast_to(value, (n, 4)), nz.sample_site(dist, rng, (n, 4)), dist.mode)
        # floor keeps the noise-free case at rounding level instead of 0/0
        se = np.maximum(draws.std(axis=0) / np.sqrt(n), 1e-9)
        z = np.abs(draws.mean(axis=0) - value) / se
        worst = max(worst, float(z.max()))
    p = 0.3
    draws = nz.apply(np.broadcast_to(value, (n, 4)), nz.sample_site(nz.dropout(p), rng, (n, 4)), nz.MULTIPLICATIVE)
    se = draws.std(axis=0) / np.sqrt(n)
    worst = max(worst, float(np.max(np.abs(draws.mean(axis=0) - p * value) / se)))
    h = np.array([0.25, 1.0, 0.6, 0.05])
    draws = nz.apply(np.broadcast_to(h, (n, 4)), nz.sample_site(nz.poisson(), rng, (n, 4), clean=np.broadcast_to(h, (n, 4))), nz.ADDITIVE)
    se = draws.std(axis=0) / np.sqrt(n)
    worst = max(worst, float(np.max(np.abs(draws.mean(axis=0) - h) / se)))
    return Check("noise means (mean-preserving kinds; dropout -> p*value)", worst <= 5.0, worst,
                 "(standard errors, tol 5)")


def check_poisson_variance(seed=6, n=10**5, tol=0.03):
    rng = Rng(seed)
    clean = np.array([0.25, 1.0])
    s = nz.sample(nz.NoiseSpec(activation=nz.poisson()), rng, 1, 2, clean_h=np.broadcast_to(clean, (n, 2)), n=n)
    err = float(np.max(np.abs(s.eps_h.var(axis=0) - clean) / clean))
    return Check("poisson-like per-unit variance equals clean activation", err <= tol, err, f"rel. tol {tol:g}")


def suite_noise():
    return [check_mean_preservation(), check_poisson_variance()]


def check_taylor_hidden(seed=7, draws=MC_DRAWS, tol=0.02):
    rng = Rng(seed)
    W = rng.normal((5, 4))
    x = 0.5 * rng.normal(4)
    z = W @ x
    E = rng.normal((draws, 5))
    E = (E - E.mean(axis=0)) / E.std(axis=0)
    errs = []
    for var in TAYLOR_VARIANCES:
        pred = nz.equivalent_hidden_noise_from_prenoise(W, x, nz.gaussian(var), "sigmoid")
        delta = activate("sigmoid", z + np.sqrt(var) * E) - activate("sigmoid", z)
        errs.append(float(np.max(np.abs(delta.var(axis=0) - pred) / pred)))
    monotone = all(a > b for a, b in zip(errs, errs[1:]))
    return Check("Taylor hidden-noise equivalence vs Monte Carlo", monotone and errs[-1] <= tol, errs[-1],
                 f"rel. tol {tol:g} at var 1e-4; errors {['%.2e' % e for e in errs]}")


def check_input_covariance(seed=8, draws=MC_DRAWS, tol=0.02):
    rng = Rng(seed)
    W = rng.normal((4, 6))
    diag = rng.uniform(0.1, 1.0, size=6)
    pred = nz.equivalent_prenoise_covariance_from_input(W, np.diag(diag))
    E = rng.normal((draws, 6)) * np.sqrt(diag)
    emp = np.cov(E @ W.T, rowvar=False)
    err = float(np.linalg.norm(emp - pred) / np.linalg.norm(pred))
    return Check("input-noise covariance W S W^T vs Monte Carlo", err <= tol, err, f"rel. Frobenius tol {tol:g}")


def suite_taylor(draws=MC_DRAWS):
    return [check_taylor_hidden(draws=draws), check_input_covariance(draws=draws)]


SUITES = {
    "penalties": suite_penalties,
    "gradients": suite_gradients,
    "noise": suite_noise,
    "taylor": suite_taylor,
}


def run_suite(name, out=print):
    if name not in SUITES:
        raise KeyError(name)
    t0 = time.perf_counter()
    checks = SUITES[name]()
    for c in checks:
        out(c.line())
    out(f"{name}: {sum(c.passed for c in checks)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return checks
