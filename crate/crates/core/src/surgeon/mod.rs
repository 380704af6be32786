//! Structural edits on models: channel and head pruning, block removal,
//! validation and cost accounting.

mod blocks;
mod channels;
mod cost;
mod progressive;
mod recipe;
mod validate;

pub use blocks::{canonicalize, remove_block, remove_hybrid, with_flags};
pub use channels::{
    head_drop_set, lowest, prune_channels, prune_heads, prune_to_targets, survivors, HeadStrategy, Targets,
};
pub use cost::{cost_report, CostReport, ModuleCost};
pub use progressive::{oneshot_block_prune, pick_min, progressive_block_prune, BlockStep};
pub use recipe::{apply_edit, apply_edits, replay, Edit, PruneRecipe, RECIPE_MAGIC, RECIPE_VERSION};
pub use validate::{ensure_valid, validate, Diagnostic, DiagnosticCode};
