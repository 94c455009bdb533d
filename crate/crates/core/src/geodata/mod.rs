//! Dataset construction: tile math, vector rasterization, synthetic scenes,
//! pseudo-label corruption and dataset manifests.

mod corrupt;
mod manifest;
mod synth;
mod tiles;
mod vector;

pub use corrupt::corrupt_labels;
pub use manifest::{
    write_pseudo_labels, write_synthetic_dataset, DatasetManifest, LoadedEntry, ManifestEntry,
    Provenance, MANIFEST_FILE,
};
pub use synth::{layout, synth_scene, RoadLine, SceneLayout, SceneSpec};
pub use tiles::{stitch, tile_index, tile_origin, TileCoord, MAX_LATITUDE};
pub use vector::{
    features_to_json, load_features, parse_features, rasterize, GeoBounds, Geometry, VectorFeature,
    METERS_PER_DEGREE,
};
