//! Training-free 3D instance segmentation from multi-view 2D masks.
//!
//! The pipeline maps points into views, drops masks that disagree with their
//! peers, lifts the survivors to 3D, splits them by spatial density, grows the
//! resulting seeds over superpoints and merges proposals across views.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask_filter;
pub mod overseg;
pub mod pipeline;
pub mod projection;
pub mod refine;
pub mod scene;
pub mod semantic;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use scene::{
    CameraView, FeatureTable, Mask2D, MaskSet, MaskSource, PointCloud, PointSetInstance, ProposalSet, Provenance,
    SceneBundle, Stage, SuperpointPartition,
};
