"""Prediction heads and the weighted training objective.

Three sigmoid heads share the extracted representations: the plain IID
head reads both ``H^S`` and ``H^T``; the two interventional heads each
read one representation plus an attention-weighted expectation over the
confounder dictionary, which realizes the backdoor adjustment after the
normalized-weighted-geometric-mean approximation moves the expectation
inside the sigmoid.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7


def init_head_params(params: ad.ParameterSet, rng: np.random.Generator,
                     struct_in: int, temp_in: int, hidden: int,
                     emb_dim: int) -> None:
    """Register weights for the three heads and the confounder attention.

    ``emb_dim`` is the link-embedding width (confounder dictionary rows).
    """

    def xavier(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    def out_layer(fan_in):
        # start predictions near 0.5: important at small learning rates,
        # where escaping a saturated sigmoid costs many steps
        return 0.1 * xavier(fan_in, 1)

    def two_layer(prefix, d_in):
        params.add(f"{prefix}.l1_w", xavier(d_in, hidden))
        params.add(f"{prefix}.l1_b", np.zeros(hidden))
        params.add(f"{prefix}.l2_w", xavier(hidden, hidden))
        params.add(f"{prefix}.l2_b", np.zeros(hidden))

    two_layer("head_iid.struct", struct_in)
    two_layer("head_iid.temp", temp_in)
    params.add("head_iid.struct_out", out_layer(hidden))
    params.add("head_iid.temp_out", out_layer(hidden))

    two_layer("head_struct.net", struct_in)
    params.add("head_struct.out", out_layer(hidden))
    params.add("head_struct.conf_out", out_layer(emb_dim))

    two_layer("head_temp.net", temp_in)
    params.add("head_temp.out", out_layer(hidden))
    params.add("head_temp.conf_out", out_layer(emb_dim))

    params.add("conf_attn.dict_w", xavier(emb_dim, hidden))
    params.add("conf_attn.q_struct_w", xavier(struct_in, hidden))
    params.add("conf_attn.q_temp_w", xavier(temp_in, hidden))


def _rows(x: Tensor) -> Tensor:
    return ad.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def apply_two_layer(params: ad.ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{prefix}.l1_w"], params[f"{prefix}.l1_b"]))
    return ad.linear(h, params[f"{prefix}.l2_w"], params[f"{prefix}.l2_b"])


def _squeeze_col(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0],))


def predict_iid(h_s: Tensor, h_t: Tensor, params: ad.ParameterSet) -> Tensor:
    """IID head: sigmoid of the summed projections of both representations."""
    s = ad.matmul(apply_two_layer(params, "head_iid.struct", _rows(h_s)),
                  params["head_iid.struct_out"])
    t = ad.matmul(apply_two_layer(params, "head_iid.temp", _rows(h_t)),
                  params["head_iid.temp_out"])
    return _squeeze_col(ad.sigmoid(s + t))


def predict_struct_intervention(h_s: Tensor, e_d: Tensor,
                                params: ad.ParameterSet) -> Tensor:
    """Structural interventional head: the confounder expectation enters as
    an additive term, blocking the backdoor path through shortcut context."""
    s = ad.matmul(apply_two_layer(params, "head_struct.net", _rows(h_s)),
                  params["head_struct.out"])
    c = ad.matmul(_rows(e_d), params["head_struct.conf_out"])
    return _squeeze_col(ad.sigmoid(s + c))


def predict_temporal_intervention(h_t: Tensor, e_d: Tensor,
                                  params: ad.ParameterSet) -> Tensor:
    t = ad.matmul(apply_two_layer(params, "head_temp.net", _rows(h_t)),
                  params["head_temp.out"])
    c = ad.matmul(_rows(e_d), params["head_temp.conf_out"])
    return _squeeze_col(ad.sigmoid(t + c))


def risk_ce(y_pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=np.float64)
    p = ad.clip(_as_flat(y_pred), PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(Tensor(y), ad.log(p))
    neg = ad.mul(Tensor(1.0 - y), ad.log(ad.sub(Tensor(np.ones_like(y)), p)))
    return ad.scale(ad.mean(pos + neg), -1.0)


def _as_flat(x: Tensor) -> Tensor:
    return x if x.ndim == 1 else ad.reshape(x, (x.size,))


def total_loss(y_i: Tensor | None, y_t: Tensor | None, y_s: Tensor | None,
               labels: np.ndarray, weights: tuple[float, float, float]) -> Tensor:
    """Weighted sum of the three mean risks; zero-weight terms are skipped."""
    li, lt, ls = weights
    if li == lt == ls == 0.0:
        raise ValueError("loss weights must not all be zero")
    terms = []
    if li != 0.0:
        terms.append(ad.scale(risk_ce(y_i, labels), li))
    if lt != 0.0:
        terms.append(ad.scale(risk_ce(y_t, labels), lt))
    if ls != 0.0:
        terms.append(ad.scale(risk_ce(y_s, labels), ls))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
