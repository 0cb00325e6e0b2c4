"""Adaptive-length tokenization: prefix-code theory, routing, FSQ, token streams and a toy tokenizer."""

from .code_tree import (CodeTree, Objective, SearchMode, check_theorem3_bound, depth_profile,
                        expected_length, huffman, objective_value, search_optimal_tree, theorem2_gap,
                        tree_loss)
from .codec import TokenStream, bpp16, deserialize, psnr, serialize, serialize_indices
from .compressor import TokenMask, build_mask, keep_top
from .estimator import AdaptiveTokenizer, detokenize, tokenize
from .exceptions import (AdaptokError, BudgetTooSmallError, DivergenceError, StreamError,
                         ValidationError)
from .fsq import DEFAULT_LEVELS, FsqConfig, TokenCode, dequantize, quantize
from .router import RouterState, beta_from_bpp16, route, route_by_search
from .source import DiscreteSource, SignalSet, entropy, make_dataset

__version__ = "0.1.0"

__all__ = [
    "AdaptiveTokenizer", "AdaptokError", "BudgetTooSmallError", "CodeTree", "DiscreteSource",
    "DivergenceError", "FsqConfig", "Objective", "DEFAULT_LEVELS", "RouterState", "SearchMode",
    "SignalSet", "StreamError", "TokenCode", "TokenMask", "TokenStream", "ValidationError",
    "beta_from_bpp16", "bpp16", "build_mask", "check_theorem3_bound", "depth_profile",
    "dequantize", "deserialize", "detokenize", "entropy", "expected_length", "huffman",
    "keep_top", "make_dataset", "objective_value", "psnr", "quantize", "route", "route_by_search",
    "search_optimal_tree", "serialize", "serialize_indices", "theorem2_gap", "tokenize", "tree_loss",
]
