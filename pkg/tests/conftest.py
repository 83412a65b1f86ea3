import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def sample_batch_service(rng, service, batch_mix, n):
    """n i.i.d. total-service draws from a batch mixture of shifted exponentials."""
    weights = np.array([w for w, _ in batch_mix])
    lens = np.array([k for _, k in batch_mix])
    pick = rng.choice(len(lens), size=n, p=weights / weights.sum())
    k = lens[pick]
    # sum of k shifted exponentials = k*shift + Gamma(k, 1/rate); k may be 0
    out = k * service.shift
    pos = k > 0
    out = out.astype(float)
    out[pos] += rng.gamma(shape=k[pos], scale=1.0 / service.rate)
    return out


def mg1_waiting_times(rng, queue, n_jobs, warmup=20000):
    """Stationary M/G/1 waiting times via the Lindley random-walk identity:
    W_n = X_n - min_{k<=n} X_k with X the cumulative (service - interarrival) walk."""
    total = n_jobs + warmup
    service = sample_batch_service(rng, queue.service, queue.batch_mix, total)
    gaps = rng.exponential(1.0 / queue.agg_rate, size=total)
    x = np.concatenate([[0.0], np.cumsum(service - gaps)])
    w = x - np.minimum.accumulate(x)
    return w[warmup + 1 :]


def batch_mean_stderr(samples, n_batches=200):
    """Std error of the mean from batch means (robust to serial correlation)."""
    n = len(samples) // n_batches * n_batches
    means = samples[:n].reshape(n_batches, -1).mean(axis=1)
    return means.mean(), means.std(ddof=1) / np.sqrt(n_batches)
