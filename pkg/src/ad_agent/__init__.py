"""Multi-agent assistant that turns anomaly-detection requests into runnable pipelines."""

from ad_agent.cli import SessionOptions, run_benchmark, run_session
from ad_agent.codegen import GeneratedScript, ReviewResult, generate_validated
from ad_agent.evaluation import compute_auprc, compute_auroc, compute_f1, optimize
from ad_agent.gateway import Gateway, LLMRequest, LLMResponse, PriceTable, ReplayBackend, TokenLedger
from ad_agent.info_miner import InfoMiner, ModelDocSummary, ParamSpec
from ad_agent.memory import LongTermCache, SessionWorkspace
from ad_agent.processor import DatasetProfile, ExperimentConfig, load_dataset, parse_instruction
from ad_agent.registry import Registry, default_registry

__version__ = "0.1.0"
