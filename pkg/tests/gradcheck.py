"""Central finite-difference oracle for the training gradients."""

import numpy as np

from adm.training import episode_loss, get_params, set_params

STEP = 1e-5


def finite_difference(episode, embedding, head, config, step=STEP):
    params = get_params(embedding, head, config.trainable)
    out = {}
    for name, p in params.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][idx] += sign * step
                emb, hd = set_params(embedding, head, shifted)
                vals.append(episode_loss(episode, emb, hd, config)[0])
            fd[idx] = (vals[0] - vals[1]) / (2 * step)
        out[name] = fd
    return out


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-wise relative error; groups whose gradient is below ``floor`` compare absolutely."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return diff if scale < floor else diff / scale
