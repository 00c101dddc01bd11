//! Synthetic shape-world data and its on-disk representation.

pub mod io;
pub mod shapeworld;

pub use io::{
    read_annotations, write_annotations, write_dataset, AnnotationRow, Dataset, Manifest,
};
pub use shapeworld::{
    generate, generate_videos, nth_video, samples_of, Action, Actor, AnnotatedSample, Color, Pair,
    Shape, ShapeWorldSpec, Split, Variant, Video,
};
