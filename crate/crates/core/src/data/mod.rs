//! Synthetic labeled scenes, their annotations and the on-disk format.

pub mod annotations;
pub mod io;
pub mod lexicon;
pub mod scene;
mod vocab;

pub use annotations::{generate_annotations, Relation, VIEW_CONVENTION};
pub use io::{
    build_dataset, generate_labeled, load_dataset, load_index, load_scene, save_scene, DatasetIndex, DatasetSpec,
    LoadedScene, Split,
};
pub use lexicon::{CategorySpec, Shape, LEXICON};
pub use scene::{generate_scene, Scene, SceneObject, SceneSpec};
pub use vocab::standard_vocabulary;
