"""Tree-based speculative decoding with a regressive draft model, on numpy."""

from .speculator import DraftState, Speculator, SpeculatorConfig, attention_decoder, init_weights
from .target import KvCache, TargetConfig, TargetModel, rollback_cache, vanilla_decode
from .tensor import Graph, Tensor
from .tree import CompressedMask, TokenTree, build_mask, compress_mask, expand, leaf_paths
from .verify import OracleDrafter, StepTrace, VerifyOutcome, spec_decode_loop, verify_greedy, verify_sampled

__version__ = "0.1.0"
