"""Hierarchical multi-agent radiology report generation with retrieval and stance-based consensus."""

from .core import (
    ABNORMALITIES,
    REGIONS,
    AbnormalityId,
    CaseDatabase,
    CaseRecord,
    RegionId,
    Report,
    load_database,
    parse_report,
    serialize_report,
    write_database,
)
from .consensus import ConsensusConfig, ConsensusTranscript, RoundRecord, Termination, run_consensus
from .estimators import MarchReportGenerator
from .evaluation import MetricsTable, bleu_n, ce_metrics, evaluate, keyword_labeler, rouge_l
from .pipeline import CaseResult, PipelineConfig, PipelineMode, run_batch, run_case, sweep_fellows
from .retrieval import CaseRetriever, Neighbor, RetrievalParadigm, assemble_evidence, cosine_similarity, query

__version__ = "0.1.0"

__all__ = [
    "ABNORMALITIES",
    "REGIONS",
    "AbnormalityId",
    "CaseDatabase",
    "CaseRecord",
    "CaseResult",
    "CaseRetriever",
    "ConsensusConfig",
    "ConsensusTranscript",
    "MarchReportGenerator",
    "MetricsTable",
    "Neighbor",
    "PipelineConfig",
    "PipelineMode",
    "RegionId",
    "Report",
    "RetrievalParadigm",
    "RoundRecord",
    "Termination",
    "assemble_evidence",
    "bleu_n",
    "ce_metrics",
    "cosine_similarity",
    "evaluate",
    "keyword_labeler",
    "load_database",
    "parse_report",
    "query",
    "rouge_l",
    "run_batch",
    "run_case",
    "run_consensus",
    "serialize_report",
    "sweep_fellows",
    "write_database",
]
