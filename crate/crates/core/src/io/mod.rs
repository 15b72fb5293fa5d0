//! Dataset and image file formats, resolution policy, the synthetic stereo
//! world and scene manifests.

mod image;
mod manifest;
mod pfm;
mod png;
mod synthetic;

pub use image::{
    area_resize, center_crop, compose_output, crop_disparity, fit_disparity, fit_to_working,
    image_from_ppm, image_to_ppm, read_image, resize_disparity, to_rgb, write_image, Layout,
};
pub use manifest::{
    load_corpus, load_scene, parse_manifest, read_disparity, read_manifest, write_corpus,
    CorpusInfo, ManifestEntry, GT_SMOOTH_RADIUS, MANIFEST_HEADER,
};
pub use pfm::{parse_pfm, write_pfm, PfmImage};
pub use png::{
    decode_png, encode_png, image_from_png, image_to_png, parse_kitti_disparity,
    write_kitti_disparity, RawPng,
};
pub use synthetic::{
    generate_corpus, generate_synthetic_scene, scene_token, synthetic_shapes, training_pairs,
    SceneMeta, SceneRecord, Shape, ShapeKind, SyntheticWorldSpec, SCENE_TOKENS, TRAIN_SEED_OFFSET,
};
