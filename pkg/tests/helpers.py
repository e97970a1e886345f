"""Small shared builders for the unit tests."""

import numpy as np
import torch

from gsmark.cloud import GaussianCloud
from gsmark.render import Camera, GaussianTensors, render_tensors


def random_cloud(n=5, seed=0, sh_degree=0, spread=0.6, scale=(0.08, 0.25)):
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    q = rng.normal(size=(n, 4))
    return GaussianCloud(
        rng.uniform(-spread, spread, size=(n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        np.log(rng.uniform(*scale, size=(n, 3))),
        rng.normal(scale=0.8, size=(n, k, 3)),
        rng.uniform(-1.0, 2.0, size=n),
        sh_degree=sh_degree,
    )


def front_camera(res=8, dist=3.0, focal=1.2):
    """Camera on the -z axis looking at the origin."""
    return Camera(focal * res, focal * res, res / 2, res / 2, res, res, np.eye(3), (0.0, 0.0, dist))


def fd_fisher(cloud, cam, h=1e-5):
    """Oracle: sum over pixels and channels of squared central differences."""
    base = GaussianTensors.from_cloud(cloud, dtype=torch.float64)
    out = []
    for gi in range(len(cloud)):
        row = []
        for t_idx, t in enumerate(base):
            for j in range(t[gi].numel()):
                imgs = []
                for sign in (1, -1):
                    ts = [x.clone() for x in base]
                    ts[t_idx].view(len(cloud), -1)[gi, j] += sign * h
                    imgs.append(render_tensors(GaussianTensors(*ts), cam).numpy())
                row.append(float((((imgs[0] - imgs[1]) / (2 * h)) ** 2).sum()))
        out.append(row)
    return np.array(out)
