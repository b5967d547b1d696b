//! Synthetic referring-expression scenes and their on-disk form.

pub mod generate;
pub mod io;
pub mod scene;

pub use generate::{
    generate_sample, object_box, unique_expressions, Expression, Extreme, Family, GeneratedSample,
    GeneratorConfig, Relation, Sample,
};
pub use io::{generate_dataset, read_ppm, write_dataset, write_ppm, Dataset, Record, Split, SplitCounts};
pub use scene::{render_scene, Color, Scene, SceneObject, ShapeKind, SizeClass};
