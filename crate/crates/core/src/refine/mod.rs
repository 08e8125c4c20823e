//! From filtered 2D masks to 3D instances: lifting, density splitting,
//! feature-guided growing and progressive multi-view merging.

pub mod grow;
pub mod lift;
pub mod merge;

pub use grow::{affinity, grow_seed, grow_seeds, seed_feature, GrowConfig, GrowContext, OverlapMode};
pub use lift::{lift_masks, split_seeds, unsplit_seeds};
pub use merge::{merge_views, point_iou, MergeSchedule};
