"""View repair, frontal-guided resampling, token-sensitive loss weighting and
prior-sentence filtering for chest X-ray report generation."""

__version__ = "0.1.0"

from .cef import FilterConfig, FilterMode, cosine_sim, filter_prior, split_sentences, vanished_findings
from .core import (
    FindingLabel,
    ImageRecord,
    LabelVector,
    Report,
    Study,
    ViewTag,
    has_positive_finding,
    is_key_sentence,
    parse_label_vector,
)
from .favr import GradOp, InitScheme, cross_attend, favr_fuse, grad_check, init_params
from .tsl import FreqTable, TierConfig, build_weight_plan, label_frequencies, normalize_weights, raw_weight, tsl_loss
from .views import RepairPolicy, repair_view, split_views
