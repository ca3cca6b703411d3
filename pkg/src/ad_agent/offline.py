"""Rule-based stand-in for the language model.

:class:`OfflineResponder` answers every agent prompt from a small built-in
catalogue of model cards, so whole sessions can run (and be recorded into
replay transcripts) without network access. Its answers are plausible, not
clever: it recommends by simple dataset heuristics and writes the textbook
fit/score code for each library.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from ad_agent import info_miner, processor
from ad_agent.gateway import LLMRequest, LLMResponse
from ad_agent.info_miner import DEFAULTS_HEADING, LIBRARY_TITLES


@dataclass(frozen=True)
class Param:
    name: str
    type_text: str
    default: Any
    description: str
    required: bool = False


@dataclass(frozen=True)
class ModelCard:
    library: str
    model: str
    import_line: str
    class_name: str
    description: str
    params: tuple[Param, ...]
    supervised: bool = False
    attributes: tuple[tuple[str, str, str], ...] = field(default=(
        ("decision_scores_", "numpy array of shape (n_samples,)", "Outlier scores of the training data."),
        ("threshold_", "float", "Score cut-off derived from contamination."),
    ))


_CONTAM = Param("contamination", "float in (0., 0.5)", 0.1, "The proportion of outliers in the data set.")
_EPOCH_PYGOD = Param("epoch", "int", 100, "Number of training epochs.")
_LR_PYGOD = Param("lr", "float", 0.004, "Learning rate.")
_HID = Param("hid_dim", "int", 64, "Hidden dimension of the encoder.")
_LAYERS = Param("num_layers", "int", 4, "Number of network layers.")
_GPU = Param("gpu", "int", -1, "GPU index, -1 for CPU.")

_TS_COMMON = (
    Param("seq_len", "int", 100, "Length of the sliding input window."),
    Param("d_model", "int", 64, "Model width."),
    Param("e_layers", "int", 2, "Number of encoder layers."),
    Param("train_epochs", "int", 10, "Number of training epochs."),
    Param("batch_size", "int", 128, "Mini-batch size."),
    Param("learning_rate", "float", 0.0001, "Optimizer learning rate."),
    Param("anomaly_ratio", "float", 1.0, "Percentage of time steps flagged as anomalous."),
)


def _pyod(model, module, cls, desc, params, supervised=False):
    return ModelCard("pyod", model, f"from pyod.models.{module} import {cls}", cls, desc, (_CONTAM, *params),
                     supervised)


def _pygod(model, desc, params):
    return ModelCard("pygod", model, f"from pygod.detector import {model}", model, desc,
                     (*params, _CONTAM, _GPU))


def _tslib(model, desc, extra=()):
    return ModelCard("tslib", model, f"from tslib.detectors import {model}", model, desc, (*_TS_COMMON, *extra))


CATALOG: dict[tuple[str, str], ModelCard] = {(c.library, c.model): c for c in [
    _pyod("ALAD", "alad", "ALAD", "Adversarially Learned Anomaly Detection scores samples by reconstruction "
          "through a bidirectional GAN.", (
              Param("epochs", "int", 200, "Number of training epochs."),
              Param("batch_size", "int", 32, "Mini-batch size."),
              Param("latent_dim", "int", 2, "Dimension of the latent space."),
              Param("learning_rate_gen", "float", 0.0001, "Generator learning rate."))),
    _pyod("AnoGAN", "anogan", "AnoGAN", "AnoGAN trains a GAN on normal data and scores samples by how well the "
          "generator can reproduce them.", (
              Param("epochs", "int", 500, "Number of training epochs."),
              Param("batch_size", "int", 32, "Mini-batch size."),
              Param("G_layers", "list of int", [20, 10, 3, 10, 20], "Generator layer sizes."))),
    _pyod("AE", "auto_encoder", "AutoEncoder", "A fully connected AutoEncoder; the reconstruction error is the "
          "outlier score.", (
              Param("lr", "float", 0.001, "Learning rate."),
              Param("epoch_num", "int", 10, "Number of training epochs."),
              Param("batch_size", "int", 32, "Mini-batch size."),
              Param("hidden_neuron_list", "list of int", [64, 32], "Hidden layer sizes."),
              Param("dropout_rate", "float", 0.2, "Dropout rate."))),
    _pyod("AE1SVM", "ae1svm", "AE1SVM", "An autoencoder jointly trained with a one-class SVM on its embedding.", (
        Param("hidden_neurons", "list of int", [64, 32], "Hidden layer sizes."),
        Param("epochs", "int", 50, "Number of training epochs."),
        Param("batch_size", "int", 32, "Mini-batch size."),
        Param("alpha", "float", 1.0, "Weight of the SVM loss."))),
    _pyod("DeepSVDD", "deep_svdd", "DeepSVDD", "Deep Support Vector Data Description maps data into a hypersphere; "
          "the distance to its centre is the outlier score.", (
              Param("n_features", "int", None, "Number of input features.", required=True),
              Param("use_ae", "bool", False, "Use an autoencoder-style network."),
              Param("epochs", "int", 100, "Number of training epochs."),
              Param("batch_size", "int", 32, "Mini-batch size."))),
    _pyod("DevNet", "devnet", "DevNet", "Deviation Networks learn anomaly scores end to end from a few labelled "
          "anomalies; fit needs both X and y.", (
              Param("epochs", "int", 50, "Number of training epochs."),
              Param("batch_size", "int", 512, "Mini-batch size."),
              Param("margin", "float", 5.0, "Deviation loss margin.")), supervised=True),
    _pyod("LUNAR", "lunar", "LUNAR", "LUNAR learns to score nearest-neighbour distances with a graph neural "
          "network.", (
              Param("model_type", "str", "WEIGHT", "Either 'WEIGHT' or 'SCORE'."),
              Param("n_neighbours", "int", 5, "Number of neighbours."),
              Param("n_epochs", "int", 200, "Number of training epochs."),
              Param("lr", "float", 0.001, "Learning rate."))),
    _pyod("MO-GAAL", "mo_gaal", "MO_GAAL", "Multiple-Objective Generative Adversarial Active Learning trains several "
          "generators to surround the normal data.", (
              Param("k", "int", 10, "Number of sub-generators."),
              Param("stop_epochs", "int", 20, "Number of training epochs."),
              Param("lr_d", "float", 0.01, "Discriminator learning rate."),
              Param("lr_g", "float", 0.0001, "Generator learning rate."))),
    _pyod("SO-GAAL", "so_gaal", "SO_GAAL", "Single-Objective Generative Adversarial Active Learning generates "
          "informative potential outliers.", (
              Param("stop_epochs", "int", 20, "Number of training epochs."),
              Param("lr_d", "float", 0.01, "Discriminator learning rate."),
              Param("lr_g", "float", 0.0001, "Generator learning rate."))),
    _pyod("VAE", "vae", "VAE", "The Variational Autoencoder (VAE) in PyOD detects outliers by their reconstruction "
          "error under a probabilistic encoder and decoder.", (
              Param("lr", "float", 0.001, "Learning rate."),
              Param("epoch_num", "int", 30, "Number of training epochs."),
              Param("batch_size", "int", 32, "Mini-batch size."),
              Param("encoder_neuron_list", "list of int", [128, 64, 32], "Encoder layer sizes."),
              Param("decoder_neuron_list", "list of int", [32, 64, 128], "Decoder layer sizes."),
              Param("latent_dim", "int", 2, "Dimension of the latent space."),
              Param("dropout_rate", "float", 0.2, "Dropout rate."),
              Param("beta", "float", 1.0, "Weight of the KL term."))),
    _pygod("AdONE", "AdONE learns structure and attribute embeddings while down-weighting outlying nodes.",
           (_HID, _LAYERS, _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("ANOMALOUS", "ANOMALOUS performs joint attribute selection and residual analysis on the graph.",
           (Param("gamma", "float", 1.0, "Regularisation weight."), _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("AnomalyDAE", "AnomalyDAE reconstructs structure and attributes with dual autoencoders.",
           (_HID, Param("alpha", "float", 0.5, "Balance between structure and attribute errors."),
            _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("CONAD", "CONAD applies contrastive learning with knowledge-guided graph augmentation.",
           (_HID, _LAYERS, _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("DONE", "DONE jointly embeds structure and attributes while learning node outlier weights.",
           (_HID, _LAYERS, _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("GAAN", "Generative Adversarial Attributed Network detector: a GAN over node attributes scored by "
           "the discriminator.", (Param("noise_dim", "int", 16, "Dimension of the generator noise."), _HID,
                                  _LAYERS, _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("GUIDE", "GUIDE uses higher-order structure (motif counts) alongside attributes.",
           (Param("hid_a", "int", 32, "Attribute hidden size."), Param("hid_s", "int", 4, "Structure hidden size."),
            _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("Radar", "Radar scores nodes by attribute residuals regularised by the graph Laplacian.",
           (Param("gamma", "float", 1.0, "Regularisation weight."), _EPOCH_PYGOD, _LR_PYGOD)),
    _pygod("SCAN", "SCAN is a structural clustering algorithm; nodes left outside every cluster are outliers.",
           (Param("eps", "float", 0.5, "Neighbourhood similarity threshold."),
            Param("mu", "int", 2, "Minimum cluster size."))),
    _tslib("Autoformer", "Autoformer uses series decomposition with auto-correlation attention."),
    _tslib("DLinear", "DLinear decomposes the series and fits linear layers to trend and remainder."),
    _tslib("FEDformer", "FEDformer applies attention in the frequency domain."),
    _tslib("Informer", "Informer uses ProbSparse self-attention for long sequences."),
    _tslib("iTransformer", "iTransformer attends across variates instead of time steps."),
    _tslib("LightTS", "LightTS is a light MLP sampling the series at two scales."),
    _tslib("PatchTST", "PatchTST splits each channel into patches fed to a Transformer.",
           (Param("patch_len", "int", 16, "Patch length."),)),
    _tslib("Pyraformer", "Pyraformer uses pyramidal attention over multiple resolutions.",
           (Param("window_size", "list of int", [4, 4], "Coarsening windows of the pyramid."),)),
    _tslib("TimesNet", "TimesNet reshapes the series into 2-D periods and applies inception blocks.",
           (Param("top_k", "int", 5, "Number of dominant periods."),)),
    _tslib("Transformer", "The vanilla Transformer encoder reconstructs each window."),
]}


def doc_text(card: ModelCard) -> str:
    """Documentation summary in the layout the web-search summariser is asked for."""
    lines = [card.description, "",
             "**Initialization Function (`__init__`):**",
             f"The `__init__` method initializes the {card.model} model with the following parameters.", "",
             "**Parameters:**"]
    for p in card.params:
        lines.append(f"- `{p.name}`:")
        lines.append(f"  - **Type**: {p.type_text}")
        if not p.required:
            lines.append(f"  - **Default**: {p.default!r}")
        lines.append(f"  - **Description**: {p.description}")
    lines += ["", "**Attributes:**"]
    for name, type_text, desc in card.attributes:
        lines += [f"- `{name}`:", f"  - **Type**: {type_text}", f"  - **Description**: {desc}"]
    lines += ["", "**Usage:**", f"`{card.import_line}`, then {usage_text(card)}", "", DEFAULTS_HEADING, "```python",
              "{"]
    lines += [f'    "{p.name}": {json.dumps(p.default) if not isinstance(p.default, float) else repr(p.default)},'
              for p in card.params if not p.required]
    lines += ["}", "```"]
    return "\n".join(lines)


def usage_text(card: ModelCard) -> str:
    if card.library == "pygod":
        return "`fit(data)` on a torch_geometric `Data` graph and `predict(data, return_score=True)`."
    fit = "fit(X, y)" if card.supervised else "fit(X)"
    return f"`{fit}`, `decision_function(X)` for scores and `predict(X)` for 0/1 labels."


def model_body(card: ModelCard) -> str:
    """The straightforward model section for ``card``."""
    lines = [card.import_line, ""]
    for p in card.params:
        if p.required and p.name == "n_features":
            lines.append('PARAMS["n_features"] = X_train.shape[1]')
    if card.library == "tslib":
        lines.append('PARAMS["seq_len"] = min(PARAMS["seq_len"], len(X_train))')
    if card.library == "pygod":
        lines[0:0] = ["import torch", "from torch_geometric.data import Data"]
        lines += [
            "train_graph = Data(x=torch.tensor(X_train, dtype=torch.float),",
            "                   edge_index=torch.tensor(edge_index_train, dtype=torch.long))",
            "test_graph = Data(x=torch.tensor(X_test, dtype=torch.float),",
            "                  edge_index=torch.tensor(edge_index_test, dtype=torch.long))",
            f"detector = {card.class_name}(**PARAMS)",
            "detector.fit(train_graph)",
            "labels_pred, scores = detector.predict(test_graph, return_pred=True, return_score=True)",
        ]
        return "\n".join(lines)
    lines.append(f"detector = {card.class_name}(**PARAMS)")
    lines.append("detector.fit(X_train, y_train)" if card.supervised else "detector.fit(X_train)")
    lines += ["scores = detector.decision_function(X_test)", "labels_pred = detector.predict(X_test)"]
    return "\n".join(lines)


def fenced(code: str) -> str:
    return f"```python\n{code}\n```"


def estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


_PREFERRED = {
    "pyod": ("VAE", "AE", "LUNAR"),
    "pygod": ("GAAN", "DONE", "AnomalyDAE"),
    "tslib": ("TimesNet", "PatchTST", "DLinear"),
}


def _field(text: str, label: str) -> str | None:
    m = re.search(rf"^{re.escape(label)}:\s*(.+)$", text, re.MULTILINE)
    return m.group(1).strip() if m else None


class OfflineResponder:
    """Callable ``LLMRequest -> LLMResponse`` for :class:`~ad_agent.gateway.CallableBackend`.

    ``overrides`` maps an agent name to a function that may return a reply
    (or ``None`` to fall through to the default rule).
    """

    def __init__(self, search_latency: float = 0.0, chat_latency: float = 0.0,
                 overrides: dict[str, Callable[[LLMRequest], str | None]] | None = None):
        self.search_latency = search_latency
        self.chat_latency = chat_latency
        self.overrides = overrides or {}

    def __call__(self, request: LLMRequest) -> LLMResponse:
        system = request.messages[0][1]
        user = request.messages[-1][1]
        reply = None
        if request.agent_name in self.overrides:
            reply = self.overrides[request.agent_name](request)
        if reply is None:
            reply = self.reply(request.agent_name, system, user, request)
        searching = "web_search" in request.tools_enabled
        prompt = "".join(c for _, c in request.messages)
        return LLMResponse(reply, estimate_tokens(prompt), estimate_tokens(reply),
                           self.search_latency if searching else self.chat_latency, 1 if searching else 0)

    def reply(self, agent: str, system: str, user: str, request: LLMRequest) -> str:
        if agent == "processor":
            if system == processor.MODALITY_SYSTEM:
                return "time_series" if "timestamps: yes" in user else "multivariate"
            return json.dumps(processor.rule_parse(user))
        if agent == "selector":
            return self.recommend(user)
        if agent == "info_miner":
            return self.document(user)
        if agent == "generator":
            return self.generate(system, user)
        if agent == "reviewer":
            return self.review_hint(user)
        if agent == "optimizer":
            return self.propose(user)
        return ""

    def recommend(self, user: str) -> str:
        library = _field(user, "Library") or "pyod"
        roster = [m.strip() for m in (_field(user, "Available models") or "").split(",") if m.strip()]
        for name in _PREFERRED.get(library, ()):
            if not roster or name in roster:
                return name
        return roster[0] if roster else ""

    def document(self, query: str) -> str:
        title_to_lib = {v: k for k, v in LIBRARY_TITLES.items()}
        parts = query.split()
        library = title_to_lib.get(parts[0], parts[0].lower()) if parts else ""
        model = parts[1] if len(parts) > 1 else ""
        card = CATALOG.get((library, model))
        if card is None:
            return f"No documentation found for {model}."
        return doc_text(card)

    def generate(self, system: str, user: str) -> str:
        model = _field(user, "Model")
        library = _field(user, "Library")
        if model is None or library is None:
            # repair prompts carry the failing script; recover the model from its header comment
            m = re.search(r"# Anomaly-detection pipeline: (\S+) \((\w+)\)", user)
            if m:
                model, library = m.group(1), m.group(2)
        card = CATALOG.get((library or "", model or ""))
        if card is None:
            return fenced("raise NotImplementedError('unknown model')")
        return fenced(model_body(card))

    def review_hint(self, user: str) -> str:
        category = _field(user, "Failure category") or "runtime_error"
        hints = {
            "import_error": "The import path is wrong; import the class from the module the documentation names.",
            "missing_or_bad_argument": "The constructor arguments do not match the documented __init__ signature; "
                                       "pass every required argument and drop unknown ones.",
            "data_constraint_violation": "The data violates a model requirement; adapt the inputs or parameters "
                                         "to the data shape.",
            "timeout": "The dry run is too slow; reduce epochs or model size for the sample run.",
        }
        return hints.get(category, "Fix the exception shown in the error output.")

    def propose(self, user: str) -> str:
        """Halve or double the first tunable numeric parameter, one step per completed trial."""
        params = re.findall(r"^- (\w+): ([^,\n]+), default (.+)$", user, re.MULTILINE)
        trials = len(re.findall(r"^- trial \d+:", user, re.MULTILINE))
        for name, _type, default in params:
            value = info_miner.parse_default_text(default)
            if name == "contamination" or isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            factor = 2 ** (trials if trials % 2 else -trials)
            new = value * factor
            return json.dumps({name: max(1, round(new)) if isinstance(value, int) else new})
        return "{}"


__all__ = ["CATALOG", "ModelCard", "OfflineResponder", "doc_text", "model_body"]
