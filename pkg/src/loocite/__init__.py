"""Leave-one-out context attribution for autoregressive language models,
with KV-cache reuse, hierarchical attribution and proxy-model acceleration."""
from .accel import (HierParams, PipelineSpec, PruneParams, fill_unretained, hierarchical, proxy_attribute,
                    proxy_prune, run_pipeline)
from .backends import BackendCapabilities, CapabilityError, ReferenceBackend, SurrogateBackend, TokenizerMismatch
from .baselines import (ContextCiteParams, ReferenceEmbedder, attention_attribution, contextcite,
                        embed_sim_attribution, gradnorm_attribution, lasso_fit)
from .context import (DEFAULT_TEMPLATE, ContextPartition, Example, PromptLayout, ablate_prompt, build_prompt,
                      detokenize, tokenize)
from .core import AttributionScores, BaseCache, CostRecord, leave_group_out, loo_exact, loo_kv
from .evaluation import (EsdConfig, FlopsParams, average_precision, counted_flops, esd_outliers, mean_ap, pearson,
                         theoretical_flops)
from .model import ModelConfig, ModelWeights, init_reference_model, load_model, save_model

__version__ = "0.1.0"
