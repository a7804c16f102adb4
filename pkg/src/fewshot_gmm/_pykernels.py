"""Pure numpy implementation of the diagonal-Gaussian mixture kernels.

Reference backend and fallback for ``_ckernels``. Every function takes and
returns float64 arrays; callers are responsible for conversion.
"""
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def component_logpdf(X, means, sigmas, log_w):
    """Weighted per-component log density, ``log w_j + log N(x_i | mu_j, sigma_j)``.

    X is (N, T); means and sigmas are (J, T); returns (N, J).
    """
    T = X.shape[1]
    z = (X[:, None, :] - means[None, :, :]) / sigmas[None, :, :]
    const = log_w - np.log(sigmas).sum(axis=1) - 0.5 * T * LOG_2PI
    return const[None, :] - 0.5 * np.einsum("njt,njt->nj", z, z)


def loglik_resp(X, means, sigmas, log_w):
    """Per-sample mixture log density (N,) and responsibilities (N, J)."""
    lp = component_logpdf(X, means, sigmas, log_w)
    top = lp.max(axis=1, keepdims=True)
    shifted = np.exp(lp - top)
    total = shifted.sum(axis=1, keepdims=True)
    logp = (top + np.log(total))[:, 0]
    return logp, shifted / total


def weighted_moments(X, resp):
    """Responsibility mass (J,), weighted means (J, T) and variances (J, T).

    Components with zero mass get zero mean and variance; the caller decides
    what to keep for them.
    """
    mass = resp.sum(axis=0)
    safe = np.where(mass > 0.0, mass, 1.0)
    means = (resp.T @ X) / safe[:, None]
    var = np.empty_like(means)
    for j in range(resp.shape[1]):
        d = X - means[j]
        var[j] = (resp[:, j] @ (d * d)) / safe[j]
    return mass, means, var


def batched_nll_grad(X, means, sigmas, log_w):
    """Sum negative log-likelihood per batch element and its parameter gradients.

    X is (B, N, T); means and sigmas (B, J, T). Returns ``nll`` (B,) and the
    gradients of ``nll`` with respect to means and sigmas, both (B, J, T).
    """
    B, N, T = X.shape
    inv = 1.0 / sigmas
    z = (X[:, :, None, :] - means[:, None, :, :]) * inv[:, None, :, :]
    const = log_w[None, :] - np.log(sigmas).sum(axis=2) - 0.5 * T * LOG_2PI
    lp = const[:, None, :] - 0.5 * np.einsum("bnjt,bnjt->bnj", z, z)
    top = lp.max(axis=2, keepdims=True)
    shifted = np.exp(lp - top)
    total = shifted.sum(axis=2, keepdims=True)
    nll = -(top + np.log(total))[:, :, 0].sum(axis=1)
    gamma = shifted / total
    gz = gamma[:, :, :, None] * z
    dmu = -np.einsum("bnjt->bjt", gz) * inv
    dsig = (gamma.sum(axis=1)[:, :, None] - np.einsum("bnjt,bnjt->bjt", gz, z)) * inv
    return nll, dmu, dsig
