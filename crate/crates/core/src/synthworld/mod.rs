//! Procedural head world: parametric proxies, rasterized renders, and
//! expression trajectories with known ground truth.

pub mod dataset;
pub mod proxy;
pub mod render;
pub mod trajectory;

pub use dataset::{
    read_manifest, render_frame, synth_dataset, Dataset, DatasetManifest, DatasetSpec, FrameBundle, Sequence,
    SequenceEntry,
};
pub use proxy::{deform_mesh, make_head_proxy, make_head_proxy_with, HeadProxy, Mesh, ProceduralTexture, ProxyOptions};
pub use render::{phong_shade, rasterize, render_appearance, Camera, Fragments, PhongMaterial};
pub use trajectory::{sample_trajectory, sample_trajectory_with, SampledTrajectory, TrajectoryStyle};
