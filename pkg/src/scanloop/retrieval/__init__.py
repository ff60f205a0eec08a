"""Global descriptors, their database, and place-recognition metrics."""

from scanloop.retrieval.database import DescriptorDatabase, QueryResult, db_query
from scanloop.retrieval.head import (
    HEAD_PREFIX,
    cluster_residuals,
    context_gate,
    describe_global,
    init_retrieval,
    netvlad,
)
from scanloop.retrieval.metrics import (
    RetrievalReport,
    f1_max,
    recall_at,
    retrieval_metrics,
    roc_auc,
)

__all__ = [
    "HEAD_PREFIX",
    "DescriptorDatabase",
    "QueryResult",
    "RetrievalReport",
    "cluster_residuals",
    "context_gate",
    "db_query",
    "describe_global",
    "f1_max",
    "init_retrieval",
    "netvlad",
    "recall_at",
    "retrieval_metrics",
    "roc_auc",
]
