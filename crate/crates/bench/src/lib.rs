//! Shared fixtures for the benchmarks.

use hsfusion::io::{generate_scene, SceneSpec, SyntheticScene};

/// Deterministic square scene for timing runs.
pub fn scene(side: usize, bands: usize, msi_bands: usize, scale: usize) -> SyntheticScene {
    generate_scene(&SceneSpec {
        width: side,
        height: side,
        bands,
        msi_bands,
        scale,
        psf_size: 2 * scale,
        psf_sigma: 0.5 * scale as f64,
        seed: 7,
    })
    .expect("valid bench scene")
}
