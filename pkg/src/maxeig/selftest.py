"""Self-contained property suite wired to ``maxeig selftest``.

Each check is an independent oracle: gradients are compared against
central finite differences, the contrastive bound against its analytic
ceiling and against brute-force mutual information on a fully discretised
toy joint, and the importance-sampling posterior against dense grid
quadrature.  The suite is deterministic and runs in well under five
minutes on one core.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .critic import SeparableCritic, infonce
from .deployment import EvalConfig, run_deployment, snis_posterior
from .models import ContextPair, Dataset, DiscreteQuadraticModel
from .rng import RngStream
from .trainer import FixedDiscreteDesign, gumbel_softmax

REL_TOL_FD = 1e-6
FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# Finite-difference harness (shared with the test suite)
# ---------------------------------------------------------------------------


def fd_gradient(func, arrays, h: float = FD_STEP):
    """Central-difference gradients of a scalar function of ndarrays.

    ``func`` must be pure; arrays are perturbed in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = func(arrays)
            flat[i] = orig - h
            f_minus = func(arrays)
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def check_gradients(build, arrays, h: float = FD_STEP) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``build(leaves)`` composes a scalar ValueNode from leaf nodes.
    """
    def evaluate(arrs):
        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in arrs]
        return float(build(leaves).data)

    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    grads = tape.backward(build(leaves))
    numeric = fd_gradient(evaluate, arrays, h)
    return max(relative_error(grads[leaf], num) for leaf, num in zip(leaves, numeric))


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def _check_autodiff_finite_differences():
    stream = RngStream(20_240_001, "selftest-fd")

    worst = 0.0
    # Per-primitive battery on small random operands.
    x = stream.uniform(-2.0, 2.0, (3, 4))
    y = stream.uniform(0.5, 2.5, (3, 4))
    w = stream.uniform(-1.0, 1.0, (4, 5))
    v = stream.uniform(-1.0, 1.0, (5, 3))
    row = stream.uniform(-1.0, 1.0, (4,))
    sq = stream.uniform(-1.0, 1.0, (4, 4))

    cases = [
        ([x, y], lambda ls: ad.reduce_mean(ad.mul(ad.add(ls[0], ls[1]), ad.sub(ls[0], ls[1])))),
        ([x, y], lambda ls: ad.reduce_mean(ad.div(ls[0], ls[1]))),
        ([x], lambda ls: ad.reduce_sum(ad.exp(ad.mul(ls[0], 0.3)))),
        ([y], lambda ls: ad.reduce_sum(ad.log(ls[0]))),
        ([x], lambda ls: ad.reduce_mean(ad.square(ls[0]))),
        ([x], lambda ls: ad.reduce_sum(ad.relu(ls[0]))),
        ([x, w], lambda ls: ad.reduce_mean(ad.matmul(ls[0], ls[1]))),
        ([w, v], lambda ls: ad.reduce_sum(ad.matmul(ad.transpose(ls[1]), ad.transpose(ls[0])))),
        ([x], lambda ls: ad.reduce_mean(ad.logsumexp(ls[0], axis=1))),
        ([x], lambda ls: ad.reduce_mean(ad.mul(ad.softmax(ls[0], axis=1), ls[0]))),
        ([x, row], lambda ls: ad.reduce_mean(ad.add(ls[0], ls[1]))),
        ([x], lambda ls: ad.reduce_sum(ad.gather_rows(ls[0], np.array([2, 0, 2])))),
        ([x, y], lambda ls: ad.reduce_mean(ad.concat([ls[0], ls[1]], axis=0))),
        ([sq], lambda ls: ad.reduce_sum(ad.diag_part(ls[0]))),
        ([x], lambda ls: ad.reduce_mean(ad.neg(ls[0]))),
    ]
    for arrays, build in cases:
        worst = max(worst, check_gradients(build, arrays))

    # Batch norm, both modes, including gamma/beta gradients.
    bx = stream.uniform(-1.5, 1.5, (6, 3))
    gamma = stream.uniform(0.5, 1.5, (3,))
    beta = stream.uniform(-0.5, 0.5, (3,))
    for training in (True, False):
        rm, rv = np.zeros(3), np.ones(3)

        def bn_build(ls, train=training, rm=rm, rv=rv):
            out = ad.batch_norm(ls[0], ls[1], ls[2], rm, rv, training=train)
            return ad.reduce_mean(ad.square(out))

        worst = max(worst, check_gradients(bn_build, [bx, gamma, beta]))

    # Random 5-op composite graphs: value-safe unary/binary chain.
    def composite(op_ids, consts):
        def build(ls):
            node = ls[0]
            for op_id, const in zip(op_ids, consts):
                if op_id == 0:
                    node = ad.exp(ad.mul(node, 0.2))
                elif op_id == 1:
                    node = ad.log(ad.add(ad.square(node), 1.0))
                elif op_id == 2:
                    node = ad.relu(ad.sub(node, const))
                elif op_id == 3:
                    node = ad.softmax(node, axis=1)
                elif op_id == 4:
                    node = ad.mul(ad.add(node, const), 0.7)
                else:
                    node = ad.div(node, ad.add(ad.square(node), 2.0))
            return ad.reduce_mean(node)
        return build

    for rep in range(12):
        g_stream = stream.split(f"graph-{rep}")
        ops = g_stream.integers(6, (5,)).tolist()
        consts = g_stream.uniform(-0.5, 0.5, (5,))
        base = g_stream.uniform(-1.5, 1.5, (3, 4))
        worst = max(worst, check_gradients(composite(ops, consts), [base]))

    # Closed-form oracle: d logsumexp / dx == softmax.
    z = stream.uniform(-3.0, 3.0, (5, 7))
    tape = ad.Tape()
    leaf = tape.leaf(z)
    grads = tape.backward(ad.reduce_sum(ad.logsumexp(leaf, axis=1)))
    worst = max(worst, relative_error(grads[leaf], ad.softmax(z, axis=1)))

    return worst < REL_TOL_FD, f"worst relative error {worst:.3e}"


def _check_infonce_ceiling():
    stream = RngStream(20_240_002, "selftest-ceiling")
    worst_excess = -math.inf
    for i in range(1000):
        b = int(stream.integers(63, ()) + 2)
        scale = [1.0, 10.0, 1e3][i % 3]
        scores = stream.uniform(-scale, scale, (b, b))
        worst_excess = max(worst_excess, float(infonce(scores)) - math.log(b))
    return worst_excess <= 1e-9, f"max(value - log B) = {worst_excess:.3e}"


def _check_constant_critic_zero():
    stream = RngStream(20_240_003, "selftest-zero")
    critic = SeparableCritic("continuous", 6, 5, stream).zero_parameters()
    y = stream.uniform(-1.0, 1.0, (16, 6))
    m = stream.uniform(-1.0, 1.0, (16, 5))
    value = float(infonce(critic.score_matrix(y, m, training=False)))
    const = float(infonce(np.full((32, 32), 3.7)))
    ok = value == 0.0 and const == 0.0
    return ok, f"zero-critic bound {value!r}, constant-matrix bound {const!r}"


def _check_endpoint_identities():
    stream = RngStream(20_240_004, "selftest-endpoints")
    model = DiscreteQuadraticModel()
    psi = model.sample_prior(stream, 10_000)
    anchors = psi.reshape(-1, 4, 2)
    worst = 0.0
    for k in range(4):
        f_lo = model.mean_reward(psi, np.full(1, k), np.array([-3.0]))[:, 0]
        f_hi = model.mean_reward(psi, np.full(1, k), np.array([3.0]))[:, 0]
        worst = max(worst, float(np.max(np.abs(f_lo - anchors[:, k, 0]))))
        worst = max(worst, float(np.max(np.abs(f_hi - anchors[:, k, 1]))))
    return worst < 1e-12, f"max |f(+-3) - anchor| = {worst:.3e}"


def _check_gumbel_softmax_frequencies():
    stream = RngStream(20_240_005, "selftest-gumbel")
    n = 100_000
    worst = 0.0
    for tau in (0.3, 1.0, 3.0):
        logits = np.array([0.7, -0.4, 1.5, 0.0])
        target = ad.softmax(logits, axis=0)
        tiled = np.tile(logits, (n, 1))
        weights = gumbel_softmax(tiled, tau, stream.split(f"tau-{tau}"), hard=False)
        counts = np.bincount(weights.argmax(axis=1), minlength=4) / n
        worst = max(worst, float(np.max(np.abs(counts - target))))
    return worst < 0.02, f"max |freq - softmax| = {worst:.4f} over {n} draws"


@dataclass
class _ToyLocationModel:
    """One-parameter location model: theta ~ U[0.1, 1.1], y ~ N(theta, var)."""

    noise_var: float = 0.1
    param_dim: int = 1
    action_kind: str = "continuous"

    def sample_prior(self, stream: RngStream, n: int) -> np.ndarray:
        return stream.uniform(0.1, 1.1, (n, 1))

    def log_likelihood(self, dataset: Dataset, psi: np.ndarray) -> np.ndarray:
        resid = dataset.outcomes[None, :] - psi  # [N, D]
        var = self.noise_var
        return (-0.5 * (math.log(2 * math.pi * var) + resid * resid / var)).sum(axis=1)


def _check_snis_vs_quadrature():
    model = _ToyLocationModel()
    obs = np.array([0.52, 0.71, 0.66])
    dataset = Dataset(np.zeros(3), np.zeros(3), obs)

    theta = np.linspace(0.1, 1.1, 20_001)
    log_post = model.log_likelihood(dataset, theta[:, None])
    post = np.exp(log_post - log_post.max())
    post /= post.sum()
    quad_mean = float((post * theta).sum())

    stream = RngStream(20_240_006, "selftest-snis")
    posterior = snis_posterior(model, dataset, 100_000, stream)
    snis_mean = float((posterior.weights * posterior.particles[:, 0]).sum())
    dev = abs(snis_mean - quad_mean)
    return dev < 0.05, f"|snis - quadrature| = {dev:.5f} (quadrature mean {quad_mean:.5f})"


def _toy_joint():
    """Discretised two-treatment joint for the brute-force MI oracle.

    One experiment (treatment 0 at context -2), one evaluation context +2,
    parameters on a 5-point-per-dimension grid of the quadratic model's
    first two treatment priors.
    """
    model = DiscreteQuadraticModel()
    offsets = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    pdf = np.exp(-0.5 * offsets ** 2)
    pdf /= pdf.sum()

    means = model.PRIOR_MEANS[:2].ravel()  # (5, 15, 5, 15)
    sds = np.sqrt(np.repeat(model.PRIOR_VARIANCES[:2], 2))
    axes = [m + s * offsets for m, s in zip(means, sds)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    weights = np.ones(len(grid))
    for dim in range(4):
        idx = np.searchsorted(axes[dim], grid[:, dim])
        weights *= pdf[idx]
    weights /= weights.sum()

    psi_full = np.zeros((len(grid), 8))
    psi_full[:, :4] = grid
    mu_y = model.mean_reward(psi_full, np.array([0]), np.array([-2.0]))[:, 0]
    rewards_eval = model.mean_reward_all(psi_full, np.array([2.0]))[:, 0, :2]
    m_star = rewards_eval.max(axis=1)
    return weights, mu_y, m_star, math.sqrt(model.noise_variance)


def _gaussian_pdf(x, mean, sd):
    z = (x - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))


def brute_force_toy_mi(n_grid: int = 4001) -> float:
    """Trapezoid-quadrature mutual information of the discretised toy joint."""
    weights, mu_y, m_star, sd = _toy_joint()
    values, group_idx = np.unique(np.round(m_star, 9), return_inverse=True)
    y = np.linspace(mu_y.min() - 6 * sd, mu_y.max() + 6 * sd, n_grid)
    lik = _gaussian_pdf(y[:, None], mu_y[None, :], sd)  # [G, atoms]
    p_y = lik @ weights
    mi = 0.0
    for g in range(len(values)):
        mask = group_idx == g
        w_group = weights[mask].sum()
        p_y_given = lik[:, mask] @ (weights[mask] / w_group)
        integrand = np.zeros_like(p_y_given)
        pos = p_y_given > 0
        integrand[pos] = p_y_given[pos] * np.log(p_y_given[pos] / p_y[pos])
        mi += w_group * np.trapezoid(integrand, y)
    return float(mi)


def infonce_with_optimal_critic(batch: int = 4096, seed: int = 20_240_007) -> float:
    """One-batch bound estimate scoring pairs with U* = log p(y | m*)."""
    weights, mu_y, m_star, sd = _toy_joint()
    values, group_idx = np.unique(np.round(m_star, 9), return_inverse=True)
    n_groups = len(values)
    member = np.zeros((len(weights), n_groups))
    member[np.arange(len(weights)), group_idx] = weights
    member /= member.sum(axis=0, keepdims=True)  # column g: p(atom | m* group g)

    stream = RngStream(seed, "selftest-mi")
    u = stream.uniform01((batch,))
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    atoms = np.searchsorted(cumulative, u, side="right")
    y = mu_y[atoms] + sd * stream.standard_normal((batch,))
    lik = _gaussian_pdf(y[:, None], mu_y[None, :], sd)  # [B, atoms]
    cond = lik @ member  # [B, groups]: p(y_i | m* group g)
    scores = np.log(np.maximum(cond, 1e-300))[:, group_idx[atoms]]
    return float(infonce(scores))


def _check_optimal_critic_tightness():
    mi = brute_force_toy_mi()
    est = infonce_with_optimal_critic()
    gap = mi - est
    ok = abs(gap) < 0.1
    return ok, f"brute-force MI {mi:.4f}, bound {est:.4f}, gap {gap:+.4f}"


def _check_numeric_invariants():
    stream = RngStream(20_240_008, "selftest-numeric")
    msgs = []

    x = stream.uniform(-1.0, 1.0, (64, 9)) + 1e3
    sums = ad.softmax(x, axis=1).sum(axis=1)
    ok = bool(np.all(np.abs(sums - 1.0) < 1e-12))
    msgs.append(f"softmax row sums off by {np.max(np.abs(sums - 1.0)):.1e}")

    base = stream.uniform(-2.0, 2.0, (32, 5))
    shift_err = np.max(np.abs(
        ad.logsumexp(base + 1e3, axis=1) - (ad.logsumexp(base, axis=1) + 1e3)
    ))
    ok = ok and shift_err < 1e-9
    msgs.append(f"logsumexp +-1e3 shift error {shift_err:.1e}")

    tape = ad.Tape()
    leaf = tape.leaf(stream.uniform(-1.0, 1.0, (4, 4)))
    loss = ad.reduce_mean(ad.square(ad.softmax(leaf, axis=1)))
    first = tape.backward(loss)[leaf].copy()
    second = tape.backward(loss)[leaf]
    ok = ok and bool(np.array_equal(first, second))
    msgs.append("backward repeatable" if np.array_equal(first, second) else "backward drift")

    return ok, "; ".join(msgs)


def _check_snis_and_regret_invariants():
    stream = RngStream(20_240_009, "selftest-deploy")
    model = DiscreteQuadraticModel()
    contexts = ContextPair.mirrored(10)
    design = FixedDiscreteDesign(stream.integers(4, (10,)))
    y = model.sample_outcomes(model.sample_prior(stream.split("truth"), 1),
                              design.treatments, contexts.experimental,
                              stream.split("noise"))[0]
    posterior = snis_posterior(model, Dataset(contexts.experimental, design.treatments, y),
                               4000, stream.split("snis"))
    weight_err = abs(posterior.weights.sum() - 1.0)
    ess = posterior.effective_sample_size
    ok = weight_err < 1e-12 and 1.0 <= ess <= posterior.n_particles

    report = run_deployment(model, contexts, design,
                            EvalConfig(n_envs=20, snis_particles=2000, posterior_draws=500),
                            stream.split("deploy"))
    ok = ok and report["regret_mean"] >= 0.0 and report["n_failed"] == 0
    return ok, (f"weight sum error {weight_err:.1e}, ESS {ess:.1f}, "
                f"regret mean {report['regret_mean']:.3f}")


CHECKS = [
    ("autodiff_finite_differences", _check_autodiff_finite_differences),
    ("infonce_ceiling", _check_infonce_ceiling),
    ("constant_critic_zero", _check_constant_critic_zero),
    ("discrete_endpoint_identities", _check_endpoint_identities),
    ("gumbel_softmax_frequencies", _check_gumbel_softmax_frequencies),
    ("snis_vs_grid_quadrature", _check_snis_vs_quadrature),
    ("infonce_optimal_critic_tightness", _check_optimal_critic_tightness),
    ("numeric_invariants", _check_numeric_invariants),
    ("snis_and_regret_invariants", _check_snis_and_regret_invariants),
]


def run_selftest(print_fn=print) -> bool:
    start = time.perf_counter()
    all_ok = True
    for name, check in CHECKS:
        t0 = time.perf_counter()
        ok, detail = check()
        all_ok = all_ok and ok
        status = "PASS" if ok else "FAIL"
        print_fn(f"{status} {name}: {detail} [{time.perf_counter() - t0:.1f}s]")
    print_fn(f"selftest {'passed' if all_ok else 'FAILED'} "
             f"in {time.perf_counter() - start:.1f}s")
    return all_ok
