"""Central finite-difference check of discriminator objectives against analytic gradients."""
import numpy as np

from puail.mdp import gridworld
from puail.scorer import init_scorer
from puail.trainer import TrainConfig, discriminator_objective

LOSS_METHODS = ("uid_gail", "gail", "uid_wail", "pu_gail")
GRAD_ARCHS = (("tabular", "onehot"), ("mlp", "onehot"), ("mlp", "grid"))


def fd_relative_error(method, architecture, feature_map, seed, h=1e-5):
    """Relative L2 error between the analytic weight gradient and central differences."""
    rng = np.random.default_rng(seed)
    mdp = gridworld("S..\n.#.\n..G", slip=0.1)
    S, A = mdp.n_states, mdp.n_actions
    scorer = init_scorer(architecture, S, A, rng, feature_map, hidden=6, coords=mdp.coords, scale=0.8)
    eb = np.stack([rng.integers(0, S, 12), rng.integers(0, A, 12)], 1)
    ab = np.stack([rng.integers(0, S, 10), rng.integers(0, A, 10)], 1)
    alpha = float(rng.uniform(0.2, 0.9))
    cfg = TrainConfig(method=method, alpha=alpha, lambda_gp=float(rng.uniform(0.5, 2.0)))
    pen_seed = int(rng.integers(1 << 30))

    def value(w):
        return discriminator_objective(scorer.replace_weights(w), eb, ab, cfg, pen_seed)[0]

    _, grad, _ = discriminator_objective(scorer, eb, ab, cfg, pen_seed)
    w0 = scorer.weights
    fd = np.zeros_like(w0)
    for i in range(len(w0)):
        e = np.zeros_like(w0)
        e[i] = h
        fd[i] = (value(w0 + e) - value(w0 - e)) / (2 * h)
    return float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
