"""Small randomly perturbed models shared by the decoding tests."""

import numpy as np

from reslm.fusion import ModelBundle
from reslm.models import AsrModel, NeuralLm, ResidualNet
from reslm.numerics import Tensor


def perturb(model, seed, scale):
    rng = np.random.default_rng(seed)
    return model.with_params({k: Tensor(v.data + scale * rng.normal(size=v.shape)) for k, v in model.params.items()})


def toy_bundle(K=3, seed=0, scale=0.8):
    asr = perturb(AsrModel.create(K, feat_dim=4, H=8, emb_dim=4, att_dim=6, seed=seed), seed + 1, scale)
    ext = perturb(NeuralLm.create(K, H=6, emb_dim=4, seed=seed + 2), seed + 3, scale)
    src = perturb(NeuralLm.create(K, H=6, emb_dim=4, seed=seed + 4), seed + 5, scale)
    res = perturb(ResidualNet.create(K, H=6, emb_dim=4, seed=seed + 6), seed + 7, scale)
    return ModelBundle(asr, ext, src, res)


def toy_frames(n=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 4))
