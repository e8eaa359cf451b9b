"""The propagate / train / re-embed outer loop.

Round 1 always diffuses over the input embeddings. Each later round first
trains the classifier on true labels plus confidence-weighted pseudo-labels
from the previous round, swaps the graph's embeddings for the classifier's
hidden activations, and re-propagates. The loop stops early once the
pseudo-labeling stabilizes: consecutive rounds agreeing on at least 99.5%
of items.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf
from .classifier import ClassifierParams, TrainConfig
from .dataset import DatasetManifest, EmbeddingMatrix
from .errors import ParamError
from .graph import GraphConfig, build_affinity, knn_search, normalize
from .propagation import PropagationConfig, PropagationResult, build_label_matrix, propagate_cg

AGREEMENT_STOP = 0.995


@dataclass
class RoundRecord:
    round_index: int               # 1-based
    agreement_with_previous: float | None
    n_unassigned: int
    mean_confidence: float
    train_loss: list[float] = field(default_factory=list)


@dataclass
class PipelineResult:
    result: PropagationResult
    rounds: list[RoundRecord]
    params: ClassifierParams | None
    degrees: np.ndarray

    @property
    def agreements(self) -> list[float]:
        return [r.agreement_with_previous for r in self.rounds if r.agreement_with_previous is not None]


def iterate_propagation(
    emb: EmbeddingMatrix,
    manifest: DatasetManifest,
    graph_cfg: GraphConfig,
    prop_cfg: PropagationConfig,
    train_cfg: TrainConfig,
    rounds: int,
    hidden: int = clf.DEFAULT_HIDDEN,
    threads: int = 1,
    pretrain_labeled_only: bool = True,
    params: ClassifierParams | None = None,
) -> PipelineResult:
    """Run `rounds` alternations of diffusion and classifier refinement.

    With rounds=1 this reduces to a single propagation over the input
    embeddings. The first training pass drops the pseudo-label loss term
    (labeled-only warm-up) unless pretrain_labeled_only is off. Classifier
    parameters persist across rounds; pass `params` to resume from a
    checkpoint instead of a fresh seeded initialization.
    """
    if rounds < 1:
        raise ParamError(f"rounds must be at least 1, got {rounds}")
    if emb.n != manifest.n:
        raise ParamError(f"embedding rows ({emb.n}) != manifest items ({manifest.n})")
    y = build_label_matrix(manifest)
    current = emb
    previous_labels: np.ndarray | None = None
    records: list[RoundRecord] = []
    result: PropagationResult | None = None
    degrees = np.zeros(emb.n)

    for round_index in range(1, rounds + 1):
        neighbors = knn_search(current, graph_cfg, threads=threads)
        w = build_affinity(neighbors, graph_cfg)
        s, degrees = normalize(w)
        result = propagate_cg(s, y, prop_cfg, threads=threads)

        agreement = None
        if previous_labels is not None:
            agreement = float((previous_labels == result.pseudo_labels).mean())
        record = RoundRecord(
            round_index=round_index,
            agreement_with_previous=agreement,
            n_unassigned=int((result.pseudo_labels < 0).sum()),
            mean_confidence=float(result.confidence.mean()),
        )
        records.append(record)
        previous_labels = result.pseudo_labels

        if agreement is not None and agreement >= AGREEMENT_STOP:
            break
        if round_index == rounds:
            break

        round_cfg = train_cfg
        if round_index == 1 and pretrain_labeled_only:
            round_cfg = clf.pretrain_config(train_cfg)
        if params is None:
            params = clf.init_params(emb.d, hidden, manifest.c, train_cfg.seed)
        params, loss_trace = clf.train(params, emb, manifest, result, round_cfg)
        record.train_loss = loss_trace
        current = clf.reembed(params, emb)

    assert result is not None
    return PipelineResult(result=result, rounds=records, params=params, degrees=degrees)
