"""Global description head: NetVLAD aggregation followed by context gating."""

from collections.abc import Mapping

import numpy as np

from scanloop.common.config import RetrievalSettings
from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore, he_normal
from scanloop.compute.tensor import Tensor

Params = Mapping[str, Tensor] | ParameterStore

HEAD_PREFIX = "retrieval."


def init_retrieval(
    store: ParameterStore,
    cfg: RetrievalSettings,
    width: int,
    rng: np.random.Generator,
) -> None:
    K, G = cfg.clusters, cfg.descriptor_dim
    store.add("retrieval.cluster.W", rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, K)))
    store.add("retrieval.cluster.b", np.zeros(K))
    store.add("retrieval.centers", rng.normal(0.0, 1.0 / np.sqrt(width), size=(K, width)))
    store.add("retrieval.mlp.W1", he_normal(rng, (K * width, G), K * width))
    store.add("retrieval.mlp.b1", np.zeros(G))
    store.add("retrieval.mlp.W2", rng.normal(0.0, 1.0 / np.sqrt(G), size=(G, G)))
    store.add("retrieval.mlp.b2", np.zeros(G))
    store.add("retrieval.gate.W", rng.normal(0.0, 1.0 / np.sqrt(G), size=(G, G)))
    store.add("retrieval.gate.b", np.zeros(G))


def cluster_residuals(
    features: Tensor,
    centers: Tensor,
    cluster_W: Tensor,
    cluster_b: Tensor,
) -> Tensor:
    """FR_k = sum_i a_k(F_i) (F_i - c_k), with a = softmax over cluster logits (K x d)."""
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError(f"NetVLAD needs a non-empty feature matrix, got {features.shape}")
    if centers.shape != (cluster_W.shape[1], features.shape[1]):
        raise DimensionError(
            f"centers {centers.shape} do not match {cluster_W.shape[1]} clusters "
            f"of width {features.shape[1]}"
        )
    assign = ops.softmax_rows(ops.linear(features, cluster_W, cluster_b))
    mass = ops.reshape(ops.reduce_sum(assign, axis=0), (centers.shape[0], 1))
    return assign.T @ features - mass * centers


def netvlad(features: Tensor, params: Params) -> Tensor:
    """Cluster residuals flattened and compressed to X (1 x G) by a two-layer MLP."""
    residuals = cluster_residuals(
        features,
        params["retrieval.centers"],
        params["retrieval.cluster.W"],
        params["retrieval.cluster.b"],
    )
    flat = ops.reshape(residuals, (1, residuals.size))
    hidden = ops.relu(ops.linear(flat, params["retrieval.mlp.W1"], params["retrieval.mlp.b1"]))
    return ops.linear(hidden, params["retrieval.mlp.W2"], params["retrieval.mlp.b2"])


def context_gate(X: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """V = sigmoid(XW + b) * X, channel by channel."""
    if X.ndim == 1:
        X = ops.reshape(X, (1, X.shape[0]))
    gate = ops.sigmoid(ops.linear(X, W, b))
    return ops.reshape(gate * X, (X.shape[1],))


def describe_global(features: Tensor, params: Params, cfg: RetrievalSettings) -> Tensor:
    """Global descriptor V (G,) of the coarsest encoder features."""
    X = netvlad(features, params)
    V = context_gate(X, params["retrieval.gate.W"], params["retrieval.gate.b"])
    if cfg.normalize:
        norm = ops.row_norms(ops.reshape(V, (1, V.shape[0])))
        # a zero descriptor stays zero
        if norm.item() > 0:
            V = V * ops.exp(-ops.log(norm))
    return V
