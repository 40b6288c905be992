import math
from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ACTION_DIM = 7
LOOKAHEAD = 3


class SDMode(str, Enum):
    RETRIEVAL_SD = "retrieval_sd"
    DRAFTER_SD = "drafter_sd"
    AUTOREGRESSIVE = "autoregressive"


class EngineMode(str, Enum):
    HYBRID = "hybrid"
    PURE_RETRIEVAL = "pure_retrieval"
    PURE_DRAFTER = "pure_drafter"
    AUTOREGRESSIVE = "autoregressive"
    RETRIEVAL_ONLY = "retrieval_only"


class UpdateDirection(str, Enum):
    AS_WRITTEN = "as_written"
    INVERTED = "inverted"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---- configuration sections ----

def _default_low() -> List[float]:
    return [-0.02, -0.02, -0.02, -0.1, -0.1, -0.1, 0.0]


def _default_high() -> List[float]:
    return [0.02, 0.02, 0.02, 0.1, 0.1, 0.1, 1.0]


class ActionSpaceBounds(_Section):
    low: List[float] = Field(default_factory=_default_low, min_length=ACTION_DIM, max_length=ACTION_DIM)
    high: List[float] = Field(default_factory=_default_high, min_length=ACTION_DIM, max_length=ACTION_DIM)

    @model_validator(mode="after")
    def _ordered(self) -> "ActionSpaceBounds":
        for i, (lo, hi) in enumerate(zip(self.low, self.high)):
            if not lo < hi:
                raise ValueError(f"dimension {i}: low ({lo}) must be below high ({hi})")
        return self


class ActionsConfig(_Section):
    n_bins: int = Field(256, ge=2)
    bounds: ActionSpaceBounds = Field(default_factory=ActionSpaceBounds)


class NormalizationBounds(_Section):
    d_min: float = Field(0.0, ge=0)
    d_max95: float = Field(0.14, ge=0)
    r_min: float = Field(0.0, ge=0)
    r_max95: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "NormalizationBounds":
        if self.d_min > self.d_max95:
            raise ValueError("d_min must not exceed d_max95")
        if self.r_min > self.r_max95:
            raise ValueError("r_min must not exceed r_max95")
        return self


class FusedMetricParams(_Section):
    alpha: float = Field(0.5, ge=0, le=1)
    window: int = Field(15, ge=3)
    threshold: float = Field(0.5, ge=0, le=1)
    r_cap: float = Field(1.0, gt=0)


class MetricConfig(FusedMetricParams):
    suite: str = "toy-suite"
    bounds: NormalizationBounds = Field(default_factory=NormalizationBounds)
    bounds_file: Optional[str] = None


class RelaxedAcceptanceParams(_Section):
    bias_seq_max: int = Field(30, ge=0)
    bias_token_max: int = Field(15, ge=0)
    gripper_bias_max: Literal[0] = 0
    enabled: bool = True

    @model_validator(mode="after")
    def _token_within_sequence(self) -> "RelaxedAcceptanceParams":
        if self.bias_token_max > self.bias_seq_max:
            raise ValueError("bias_token_max must not exceed bias_seq_max")
        return self


class SkipConfig(_Section):
    enabled: bool = True
    T: float = Field(0.9, ge=-1, le=1)
    delta: float = Field(0.1, ge=0)
    update_direction: UpdateDirection = UpdateDirection.AS_WRITTEN


class RetrievalConfig(_Section):
    k_top: int = Field(3, ge=1)
    dim: int = Field(64, ge=1)
    hnsw: bool = False
    m: int = Field(16, ge=2)
    ef_construct: int = Field(100, ge=1)
    ef_search: int = Field(100, ge=1)


class DrafterConfig(_Section):
    accuracy: float = Field(0.85, ge=0, le=1)
    draft_length: int = Field(7, ge=1)
    seed: int = 0


class CostModel(_Section):
    verifier_call: float = Field(1.0, ge=0)
    drafter_token: float = Field(0.1, ge=0)
    retrieval_query: float = Field(0.37, ge=0)
    skip: float = Field(0.0, ge=0)


class EnvConfig(_Section):
    n_tasks: int = Field(4, ge=1)
    suite_seed: int = 7
    horizon: int = Field(650, ge=0)
    success_tol: float = Field(0.02, gt=0)
    approach_tol: float = Field(0.004, gt=0)
    fast_speed: float = Field(0.01, gt=0)
    fine_radius: float = Field(0.1, gt=0)
    spiral_inner_radius: float = Field(0.02, gt=0)
    spiral_turn: float = Field(0.08, gt=0, lt=math.pi / 2)
    spiral_shrink: float = Field(0.991, gt=0, lt=1)
    rot_gain: float = Field(0.5, gt=0, le=1)
    rot_step: float = Field(0.05, gt=0)
    object_radius: float = Field(0.7, gt=0)
    feature_scale: float = Field(10.0, gt=0)
    demo_episodes: int = Field(25, ge=1)
    demo_perturb_radius: float = Field(0.02, ge=0)
    eval_perturb_radius: float = Field(0.02, ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "EnvConfig":
        if self.approach_tol >= self.success_tol:
            raise ValueError("approach_tol must be below success_tol")
        if not self.approach_tol < self.spiral_inner_radius < self.fine_radius:
            raise ValueError("expected approach_tol < spiral_inner_radius < fine_radius")
        if self.fine_radius <= self.fast_speed:
            raise ValueError("fine_radius must exceed fast_speed")
        return self


class EvalConfig(_Section):
    trials: int = Field(5, ge=1)
    jobs: int = Field(1, ge=1)
    tasks: Optional[List[str]] = None


class EngineConfig(_Section):
    mode: EngineMode = EngineMode.HYBRID
    chain_cap: int = Field(64, ge=1)
    seed: int = 0
    actions: ActionsConfig = Field(default_factory=ActionsConfig)
    metric: MetricConfig = Field(default_factory=MetricConfig)
    acceptance: RelaxedAcceptanceParams = Field(default_factory=RelaxedAcceptanceParams)
    skip: SkipConfig = Field(default_factory=SkipConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    drafter: DrafterConfig = Field(default_factory=DrafterConfig)
    cost: CostModel = Field(default_factory=CostModel)
    env: EnvConfig = Field(default_factory=EnvConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _cross_section(self) -> "EngineConfig":
        needed = max(15, 9 + self.env.n_tasks)
        if self.retrieval.dim < needed:
            raise ValueError(f"retrieval.dim must be at least {needed} for {self.env.n_tasks} tasks")
        low, high = self.actions.bounds.low, self.actions.bounds.high
        if not all(lo < 0 < hi for lo, hi in zip(low[:6], high[:6])):
            raise ValueError("position and rotation action bounds must contain zero")
        if self.env.fast_speed > min(min(-v for v in low[:3]), min(high[:3])):
            raise ValueError("env.fast_speed exceeds the position action bounds")
        if self.env.rot_step > min(min(-v for v in low[3:6]), min(high[3:6])):
            raise ValueError("env.rot_step exceeds the rotation action bounds")
        return self


# ---- retrieval records ----

class Payload(BaseModel):
    dataset_name: str
    episode_idx: int = Field(ge=0)
    step_idx: int = Field(ge=0)
    current_action: List[float] = Field(min_length=ACTION_DIM, max_length=ACTION_DIM)
    next_actions: List[List[float]] = Field(min_length=LOOKAHEAD, max_length=LOOKAHEAD)
    language_instruction: str

    @field_validator("next_actions")
    @classmethod
    def _rows_are_actions(cls, rows: List[List[float]]) -> List[List[float]]:
        for row in rows:
            if len(row) != ACTION_DIM:
                raise ValueError(f"next_actions rows must have {ACTION_DIM} values")
        return rows


class SearchHit(BaseModel):
    score: float
    payload: Payload
    record_id: int


class ShardSummary(BaseModel):
    name: str
    records: int
    embedding_bytes: int
    payload_bytes: int


# ---- verification ----

class VerifyOutcome(BaseModel):
    accepted_tokens: List[int]
    accept_length: int = Field(ge=0)
    verifier_calls: int = Field(ge=0)
    skipped: bool = False
    fallback_used: bool = False
    bonus_token: Optional[int] = None


class VerifySkipState(_Section):
    T: float = Field(ge=-1, le=1)
    min_S: float = Field(ge=-1, le=1)
    O_dist: int = Field(ge=1)
    delta: float = Field(0.1, ge=0)
    update_direction: UpdateDirection = UpdateDirection.AS_WRITTEN
    historical_min_S: Optional[float] = None

    @model_validator(mode="after")
    def _ordered(self) -> "VerifySkipState":
        if self.min_S < self.T:
            raise ValueError("min_S must not be below T")
        return self


class CalibrationResult(BaseModel):
    T: float = Field(ge=-1, le=1)
    min_S: float = Field(ge=-1, le=1)
    O_dist: int = Field(ge=1)
    delta: float = Field(ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "CalibrationResult":
        if self.min_S < self.T:
            raise ValueError("min_S must not be below T")
        return self


# ---- decoding traces and reports ----

class WindowFeatures(BaseModel):
    R: float = Field(ge=0)
    D: float = Field(ge=0)
    F: float = Field(ge=0, le=1)
    w: int


class StepRecord(BaseModel):
    step_index: int
    decision: SDMode
    F: Optional[float] = None
    R: Optional[float] = None
    D: Optional[float] = None
    tokens_emitted: int
    slices: int
    accept_length: int
    draft_rounds: int
    skipped: bool = False
    verifier_calls: int
    cost: float
    top_score: Optional[float] = None
    degraded: bool = False


class EpisodeReport(BaseModel):
    task_id: str
    trial: int
    seed: int
    success: bool
    steps: int
    mean_AL: float
    mean_AL_per_call: float = 0.0
    cost_units: float
    ar_cost_units: float
    speedup: float
    decision_mix: dict[str, float]
    retrieval_rounds: int = 0
    mean_top_score: Optional[float] = None
    confident_fraction: Optional[float] = None


class TaskSummary(BaseModel):
    task_id: str
    episodes: int
    SR: float = Field(ge=0, le=1)
    mean_AL: float
    mean_AL_per_call: float = 0.0
    speedup: float
    mean_steps: float
    decision_mix: dict[str, float]
    mean_top_score: Optional[float] = None
    confident_fraction: Optional[float] = None


class EvalReport(BaseModel):
    mode: EngineMode
    seed: int
    tasks: List[TaskSummary]
    aggregate: Optional[TaskSummary] = None
    episodes: List[EpisodeReport] = Field(default_factory=list)
