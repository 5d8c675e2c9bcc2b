"""scikit-learn style facade over the pipeline.

``MarchReportGenerator`` is fitted on a training case database (the retrieval
corpus) and predicts final reports for new cases. Parameters are plain
constructor arguments, so ``get_params``/``set_params``/``clone`` work as for
any estimator.
"""

from __future__ import annotations

from collections.abc import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .consensus import ConsensusConfig
from .core import CaseDatabase, CaseRecord, Report
from .evaluation import Labeler, MetricsTable, evaluate
from .pipeline import BackendFactory, CaseResult, PipelineConfig, PipelineMode, run_batch
from .retrieval import DEFAULT_K, PARADIGMS, CaseRetriever, RetrievalParadigm


def check_cases(cases: CaseDatabase | Sequence[CaseRecord]) -> list[CaseRecord]:
    """Validate an input collection of cases: records only, unique ids."""
    cases = list(cases)
    seen = set()
    for case in cases:
        if not isinstance(case, CaseRecord):
            raise TypeError(f"expected CaseRecord, got {type(case).__name__}")
        if case.case_id in seen:
            raise ValueError(f"duplicate case_id {case.case_id!r}")
        seen.add(case.case_id)
    return cases


class MarchReportGenerator(BaseEstimator):
    def __init__(
        self,
        backends: BackendFactory | None = None,
        mode: str = "full",
        n_fellows: int = 3,
        max_rounds: int = 3,
        k: int = DEFAULT_K,
        paradigms: Sequence[str] | None = None,
        unanimity_short_circuit: bool = True,
        degraded_mode: bool = False,
        max_repairs: int = 1,
        parallelism: int = 1,
        transcript_dir: str | None = None,
    ):
        self.backends = backends
        self.mode = mode
        self.n_fellows = n_fellows
        self.max_rounds = max_rounds
        self.k = k
        self.paradigms = paradigms
        self.unanimity_short_circuit = unanimity_short_circuit
        self.degraded_mode = degraded_mode
        self.max_repairs = max_repairs
        self.parallelism = parallelism
        self.transcript_dir = transcript_dir

    def _config(self) -> PipelineConfig:
        paradigms = (
            PARADIGMS
            if self.paradigms is None
            else tuple(p for p in PARADIGMS if p in {RetrievalParadigm.parse(x) for x in self.paradigms})
        )
        return PipelineConfig(
            mode=PipelineMode.parse(self.mode),
            consensus=ConsensusConfig(
                num_fellows=self.n_fellows,
                max_rounds=self.max_rounds,
                unanimity_short_circuit=self.unanimity_short_circuit,
                degraded_mode=self.degraded_mode,
                max_repairs=self.max_repairs,
            ),
            retrieval_k=self.k,
            paradigms=paradigms,
            backends=self.backends,
            transcript_dir=self.transcript_dir,
        )

    def fit(self, db: CaseDatabase, y=None) -> "MarchReportGenerator":
        if not isinstance(db, CaseDatabase):
            db = CaseDatabase(tuple(check_cases(db)))
        self.config_ = self._config()
        self.database_ = db
        self.retriever_ = CaseRetriever(k=self.k, paradigms=self.paradigms).fit(db)
        return self

    def run(self, cases: CaseDatabase | Sequence[CaseRecord]) -> list[CaseResult]:
        check_is_fitted(self, "config_")
        return run_batch(check_cases(cases), self.database_, self.config_, self.parallelism, retriever=self.retriever_)

    def predict(self, cases: CaseDatabase | Sequence[CaseRecord]) -> list[Report | None]:
        """Final reports in input order; ``None`` where a case failed."""
        cases = check_cases(cases)
        by_id = {r.case_id: r for r in self.run(cases)}
        return [by_id[c.case_id].final for c in cases]

    def evaluate(self, cases: CaseDatabase | Sequence[CaseRecord], labeler: Labeler | None = None) -> MetricsTable:
        cases = check_cases(cases)
        return evaluate(self.run(cases), cases, labeler)

    def score(self, cases: CaseDatabase | Sequence[CaseRecord], y=None) -> float:
        """Micro-averaged clinical-efficacy F1 against the cases' reference reports."""
        return self.evaluate(cases).ce_f1
