# services/evaluation.py
"""Listening and viewing test bookkeeping: stimulus plans, attention-check
filtering, mean opinion scores with confidence intervals and pairwise t-tests."""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from statsmodels.stats.multitest import multipletests

from .error_handler import ArtifactIOError, EvaluationError

logger = logging.getLogger(__name__)

Scale = Literal['mos', 'mismatch']

MOS_LABELS: Dict[str, int] = {
    'Completely unnatural': 1,
    'Mostly unnatural': 2,
    'Equally natural and unnatural': 3,
    'Mostly natural': 4,
    'Completely natural': 5,
}
# Values are from the point of view of the left stimulus
MISMATCH_LABELS: Dict[str, int] = {
    'Left is much better': 2,
    'Left is slightly better': 1,
    'They are equal': 0,
    'Right is slightly better': -1,
    'Right is much better': -2,
}

RESPONSE_COLUMNS = ['participant', 'segment', 'condition', 'label', 'is_check', 'expected']
_TRUE = {'true', '1', 'yes', 'y', 't'}


@dataclass(frozen=True)
class StimulusPair:
    segment: str
    condition: str
    matched_video: str
    mismatched_video: str
    mismatch_segment: str


@dataclass
class StimulusPlan:
    segments: List[str]          # analysed segments
    conditions: List[str]
    check_segment: Optional[str]
    pairs: List[StimulusPair] = field(default_factory=list)

    def lookup(self, segment: str, condition: str) -> StimulusPair:
        for pair in self.pairs:
            if pair.segment == segment and pair.condition == condition:
                return pair
        raise KeyError((segment, condition))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([pair.__dict__ for pair in self.pairs])


@dataclass(frozen=True)
class SummaryRow:
    condition: str
    mean: float
    ci95_halfwidth: float
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise EvaluationError(f"Summary for {self.condition} needs at least one response")
        if not self.ci95_halfwidth >= 0:
            raise EvaluationError(f"Negative confidence halfwidth for {self.condition}")

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ± {self.ci95_halfwidth:.{digits}f}"


@dataclass(frozen=True)
class PairwiseTest:
    condition_a: str
    condition_b: str
    t: float
    p: float
    significant: bool
    paired: bool
    p_corrected: Optional[float] = None


def _video_id(condition: str, audio_segment: str, motion_segment: str) -> str:
    if audio_segment == motion_segment:
        return f"{condition}_{audio_segment}"
    return f"{condition}_{audio_segment}_motion_{motion_segment}"


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    # Rejection sampling gives a uniform derangement in about e draws
    while True:
        permutation = rng.permutation(n)
        if not np.any(permutation == np.arange(n)):
            return permutation


def build_plan(segments: Sequence[str], conditions: Sequence[str], seed: int = 0,
               reserve_check_segment: bool = True) -> StimulusPlan:
    """Matched and mismatched video per (segment, condition).

    The mismatched stimulus keeps the segment's audio and borrows the motion of
    another segment in the same condition. With three or more segments the last
    one is held back for attention checks.
    """
    segments = [str(s) for s in segments]
    conditions = [str(c) for c in conditions]
    if len(set(segments)) != len(segments):
        raise EvaluationError("Segment names must be unique")
    if not conditions:
        raise EvaluationError("At least one condition is required")
    if len(segments) < 2:
        raise EvaluationError(f"Mismatching needs at least 2 segments, got {len(segments)}")

    check_segment = None
    analysed = list(segments)
    if reserve_check_segment and len(segments) >= 3:
        check_segment = analysed.pop()

    rng = np.random.default_rng(seed)
    pairs = []
    for condition in conditions:
        sources = _derangement(len(analysed), rng)
        for index, segment in enumerate(analysed):
            source = analysed[sources[index]]
            pairs.append(StimulusPair(
                segment=segment,
                condition=condition,
                matched_video=_video_id(condition, segment, segment),
                mismatched_video=_video_id(condition, segment, source),
                mismatch_segment=source,
            ))

    logger.info(f"Built stimulus plan: {len(analysed)} segments x {len(conditions)} conditions"
                + (f", check segment {check_segment}" if check_segment else ""))
    return StimulusPlan(segments=analysed, conditions=conditions, check_segment=check_segment, pairs=pairs)


def schedule_sessions(plan: StimulusPlan, participants: Sequence[str], segments_per_participant: int = 7,
                      seed: int = 0, checks_per_participant: int = 4) -> pd.DataFrame:
    """Presentation list per participant with random left/right placement of the matched video"""
    if segments_per_participant > len(plan.segments):
        raise EvaluationError(f"Only {len(plan.segments)} segments available, "
                              f"{segments_per_participant} requested per participant")
    if checks_per_participant and plan.check_segment is None:
        raise EvaluationError("Plan has no reserved segment for attention checks")

    rng = np.random.default_rng(seed)
    labels = list(MISMATCH_LABELS)
    rows = []
    for participant in participants:
        trials = []
        chosen = rng.choice(len(plan.segments), size=segments_per_participant, replace=False)
        for segment in (plan.segments[i] for i in sorted(chosen)):
            for condition in plan.conditions:
                pair = plan.lookup(segment, condition)
                side = 'left' if rng.random() < 0.5 else 'right'
                left, right = ((pair.matched_video, pair.mismatched_video) if side == 'left'
                               else (pair.mismatched_video, pair.matched_video))
                trials.append({'segment': segment, 'condition': condition, 'left_video': left,
                               'right_video': right, 'matched_side': side, 'is_check': False, 'expected': ''})
        for _ in range(checks_per_participant):
            condition = plan.conditions[int(rng.integers(len(plan.conditions)))]
            video = _video_id(condition, plan.check_segment, plan.check_segment)
            trials.append({'segment': plan.check_segment, 'condition': condition, 'left_video': video,
                           'right_video': video, 'matched_side': 'left', 'is_check': True,
                           'expected': labels[int(rng.integers(len(labels)))]})

        for order, index in enumerate(rng.permutation(len(trials))):
            rows.append({'participant': participant, 'order': order, **trials[index]})

    return pd.DataFrame(rows)


def _as_bool(value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return False
    return str(value).strip().lower() in _TRUE


class ResponseSet:
    """Immutable table of ratings: participant, segment, condition, label, is_check, expected
    plus optional matched_side (left by default) and study columns"""

    def __init__(self, frame: pd.DataFrame):
        missing = [column for column in RESPONSE_COLUMNS if column not in frame.columns]
        if missing:
            raise EvaluationError(f"Response table lacks columns {missing}")

        frame = frame.copy()
        for column in ('participant', 'segment', 'condition', 'label'):
            frame[column] = frame[column].astype(str).str.strip()
        frame['expected'] = frame['expected'].fillna('').astype(str).str.strip()
        frame['is_check'] = frame['is_check'].map(_as_bool).astype(bool)
        if 'matched_side' not in frame.columns:
            frame['matched_side'] = 'left'
        frame['matched_side'] = frame['matched_side'].fillna('left').astype(str).str.strip().str.lower()
        bad_sides = sorted(set(frame['matched_side']) - {'left', 'right'})
        if bad_sides:
            raise EvaluationError(f"matched_side must be left or right, got {bad_sides}")
        if 'study' not in frame.columns:
            frame['study'] = ''
        self._frame = frame.reset_index(drop=True)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> 'ResponseSet':
        return cls(pd.DataFrame.from_records(list(records), columns=None))

    @classmethod
    def from_csv(cls, path: str) -> 'ResponseSet':
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        except (OSError, pd.errors.ParserError) as e:
            raise ArtifactIOError(f"Failed to read responses {path}: {e}", path=path) from e
        return cls(frame)

    def to_csv(self, path: str) -> None:
        try:
            self._frame.to_csv(path, index=False)
        except OSError as e:
            raise ArtifactIOError(f"Failed to write responses {path}: {e}", path=path) from e

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def ratings(self) -> pd.DataFrame:
        return self._frame[~self._frame['is_check']]

    def values(self, scale: Scale) -> pd.DataFrame:
        """Non-check rows with an integer 'value' column on the given scale"""
        ratings = self.ratings().copy()
        ratings['value'] = [score_label(label, scale, side)
                            for label, side in zip(ratings['label'], ratings['matched_side'])]
        return ratings


def score_label(label: str, scale: Scale, matched_side: str = 'left') -> int:
    if scale == 'mos':
        if label in MOS_LABELS:
            return MOS_LABELS[label]
        if label.isdigit() and 1 <= int(label) <= 5:
            return int(label)
        raise EvaluationError(f"'{label}' is not a label of the 1-5 rating scale")
    if scale == 'mismatch':
        if label not in MISMATCH_LABELS:
            raise EvaluationError(f"'{label}' is not one of the mismatch options {list(MISMATCH_LABELS)}")
        value = MISMATCH_LABELS[label]
        return value if matched_side == 'left' else -value
    raise EvaluationError(f"Unknown scale '{scale}'")


def filter_participants(responses: ResponseSet, max_failed: int = 1) -> ResponseSet:
    """Drop participants failing more than max_failed attention checks, then drop all check rows"""
    frame = responses.frame
    checks = frame[frame['is_check']]
    failed = (checks['label'] != checks['expected']).groupby(checks['participant']).sum()
    excluded = sorted(failed[failed > max_failed].index)
    if excluded:
        logger.info(f"Excluding {len(excluded)} participants failing more than {max_failed} checks: {excluded}")

    kept = frame[~frame['participant'].isin(excluded) & ~frame['is_check']]
    return ResponseSet(kept)


def summarize_values(condition: str, values: Sequence[float]) -> SummaryRow:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise EvaluationError(f"No responses for condition {condition}")
    mean = float(values.mean())
    if n == 1:
        logger.warning(f"Condition {condition} has a single response; confidence interval is undefined")
        return SummaryRow(condition, mean, math.inf, 1)
    sd = float(values.std(ddof=1))
    halfwidth = float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n))
    return SummaryRow(condition, mean, halfwidth, n)


def _summaries(responses: ResponseSet, scale: Scale) -> List[SummaryRow]:
    table = responses.values(scale)
    if table.empty:
        raise EvaluationError("No rating responses to summarize")
    return [summarize_values(condition, group['value'])
            for condition, group in table.groupby('condition', sort=False)]


def mos_summary(responses: ResponseSet, scale: Scale = 'mos') -> List[SummaryRow]:
    return _summaries(responses, scale)


def mismatch_scores(responses: ResponseSet) -> List[SummaryRow]:
    """Per condition, positive values mean the matched stimulus was preferred"""
    return _summaries(responses, 'mismatch')


def _t_test(a: np.ndarray, b: np.ndarray, paired: bool) -> Tuple[float, float]:
    if paired:
        diffs = a - b
        if np.all(diffs == 0):
            return 0.0, 1.0
        if np.all(diffs == diffs[0]):
            return math.copysign(math.inf, diffs[0]), 0.0
        result = stats.ttest_rel(a, b)
    else:
        if np.ptp(a) == 0 and np.ptp(b) == 0:
            if a[0] == b[0]:
                return 0.0, 1.0
            return math.copysign(math.inf, a[0] - b[0]), 0.0
        result = stats.ttest_ind(a, b)
    return float(result.statistic), float(result.pvalue)


def pairwise_tests(responses: ResponseSet, scale: Scale = 'mos', alpha: float = 0.05,
                   holm: bool = False) -> List[PairwiseTest]:
    """Two-sided t-test for every condition pair, paired on (participant, segment) when possible"""
    table = responses.values(scale)
    conditions = list(dict.fromkeys(table['condition']))
    if len(conditions) < 2:
        raise EvaluationError("Pairwise tests need at least two conditions")

    keyed = {condition: group.set_index(['participant', 'segment'])['value']
             for condition, group in table.groupby('condition', sort=False)}

    results = []
    for condition_a, condition_b in itertools.combinations(conditions, 2):
        a, b = keyed[condition_a], keyed[condition_b]
        paired = (a.index.is_unique and b.index.is_unique and len(a) == len(b)
                  and set(a.index) == set(b.index))
        if paired:
            values_a = a.to_numpy(dtype=np.float64)
            values_b = b.reindex(a.index).to_numpy(dtype=np.float64)
        else:
            logger.warning(f"Responses for {condition_a} and {condition_b} do not pair up; using an unpaired test")
            values_a = a.to_numpy(dtype=np.float64)
            values_b = b.to_numpy(dtype=np.float64)

        t, p = _t_test(values_a, values_b, paired)
        results.append(PairwiseTest(condition_a, condition_b, t, p, bool(p < alpha), paired))

    if holm and results:
        reject, corrected, _, _ = multipletests([r.p for r in results], alpha=alpha, method='holm')
        results = [PairwiseTest(r.condition_a, r.condition_b, r.t, r.p, bool(flag), r.paired, float(pc))
                   for r, flag, pc in zip(results, reject, corrected)]
    return results


def significance_matrix(tests: Sequence[PairwiseTest]) -> pd.DataFrame:
    """Square table of '*' (significant), '' (not) and '-' on the diagonal"""
    conditions = list(dict.fromkeys([t.condition_a for t in tests] + [t.condition_b for t in tests]))
    matrix = pd.DataFrame('', index=conditions, columns=conditions)
    for condition in conditions:
        matrix.loc[condition, condition] = '-'
    for test in tests:
        mark = '*' if test.significant else ''
        matrix.loc[test.condition_a, test.condition_b] = mark
        matrix.loc[test.condition_b, test.condition_a] = mark
    return matrix


def results_table(columns: Dict[str, Sequence[SummaryRow]], digits: int = 2) -> str:
    """Aligned text table: one row per condition, one column per study, '-' where a study lacks the condition"""
    conditions: List[str] = []
    for rows in columns.values():
        for row in rows:
            if row.condition not in conditions:
                conditions.append(row.condition)

    cells = {study: {row.condition: row.format(digits) for row in rows} for study, rows in columns.items()}
    frame = pd.DataFrame({study: [cells[study].get(c, '-') for c in conditions] for study in columns},
                         index=pd.Index(conditions, name='Condition'))
    return frame.to_string()
