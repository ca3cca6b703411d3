"""Exception hierarchy shared by every agent stage."""


class ADAgentError(Exception):
    """Base class for all errors raised by the pipeline."""


# gateway
class GatewayError(ADAgentError):
    pass


class BackendUnavailable(GatewayError):
    pass


class ReplayMiss(GatewayError):
    pass


class CorruptTranscript(GatewayError):
    pass


class SearchUnavailable(GatewayError):
    pass


class EmptyResult(GatewayError):
    pass


# memory
class StageOrderViolation(ADAgentError):
    pass


class TypeMismatch(ADAgentError, TypeError):
    pass


# registry
class AmbiguousName(ADAgentError):
    pass


class UnknownModel(ADAgentError):
    pass


# processor
class UnparseableInstruction(ADAgentError):
    pass


class MissingDataset(ADAgentError):
    pass


class UnsupportedFormat(ADAgentError):
    pass


class CorruptFile(ADAgentError):
    pass


class EmptyDataset(ADAgentError):
    pass


class AmbiguousModality(ADAgentError):
    pass


class FeatureMismatch(ADAgentError):
    pass


# selector
class NoResolvableVote(ADAgentError):
    def __init__(self, raw_answers):
        self.raw_answers = list(raw_answers)
        super().__init__(f"no recommendation resolved to a roster model: {self.raw_answers!r}")


class ModelLibraryMismatch(ADAgentError):
    pass


# info miner
class NoParameterBlock(ADAgentError):
    pass


class DocumentationUnavailable(ADAgentError):
    pass


# codegen
class PromptBudgetExceeded(ADAgentError):
    pass


class SandboxFailure(ADAgentError):
    pass


class PipelineFailure(ADAgentError):
    """The repair loop ran out of iterations; ``reviews`` holds every verdict."""

    def __init__(self, model, reviews, scripts=()):
        self.model = model
        self.reviews = list(reviews)
        self.scripts = list(scripts)
        last = self.reviews[-1].error_category if self.reviews else "sandbox"
        super().__init__(f"no executable pipeline for {model} after {len(self.reviews)} dry run(s) (last: {last})")


# evaluation / optimisation
class RuntimeFailure(ADAgentError):
    def __init__(self, message, stderr="", kind="runtime_error"):
        self.stderr = stderr
        self.kind = kind
        super().__init__(message)


class DegenerateLabels(ADAgentError, ValueError):
    pass


class ProposerFailure(ADAgentError):
    pass


class MissingMetric(ADAgentError, KeyError):
    pass
