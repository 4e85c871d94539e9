from stainbridge.generator.config import GeneratorConfig
from stainbridge.generator.fusion import (
    CrossAttention,
    FeatureAligner,
    FeatureMapFusion,
    GatingLayer,
    SelectedSet,
    align_features,
    compute_gating_map,
    gated_cross_attention,
    gather_positions,
    reintegrate,
    select_top_k,
)
from stainbridge.generator.model import DualBranchGenerator, generator_forward
from stainbridge.generator.residual import ResidualBlock, ResidualBranch, residual_branch_stage
from stainbridge.generator.swin import (
    ShiftedWindowMSA,
    SwinBlock,
    SwinBranch,
    SwinStageOutput,
    WindowAttention,
    swin_block,
    window_attention,
)

__all__ = [
    "CrossAttention", "DualBranchGenerator", "FeatureAligner", "FeatureMapFusion",
    "GatingLayer", "GeneratorConfig", "ResidualBlock", "ResidualBranch", "SelectedSet",
    "ShiftedWindowMSA", "SwinBlock", "SwinBranch", "SwinStageOutput", "WindowAttention",
    "align_features", "compute_gating_map", "gated_cross_attention", "gather_positions",
    "generator_forward", "reintegrate", "residual_branch_stage", "select_top_k",
    "swin_block", "window_attention",
]
