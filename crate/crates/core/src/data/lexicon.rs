//! Category lexicon of the synthetic scenes.

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Cylinder,
    Sphere,
    Cone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategorySpec {
    pub name: &'static str,
    pub plural: &'static str,
    pub shape: Shape,
    /// Extent ranges in meters: x, y (footprint) and z (height). Round
    /// shapes use x as the diameter and ignore y.
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub color: [f32; 3],
    /// Functional description used by implicit instructions.
    pub riddle: &'static str,
}

pub const LEXICON_VERSION: u32 = 1;
pub const FLOOR: usize = 0;

const fn cat(
    name: &'static str,
    plural: &'static str,
    shape: Shape,
    size_min: [f64; 3],
    size_max: [f64; 3],
    color: [f32; 3],
    riddle: &'static str,
) -> CategorySpec {
    CategorySpec {
        name,
        plural,
        shape,
        size_min,
        size_max,
        color,
        riddle,
    }
}

pub const LEXICON: [CategorySpec; 20] = [
    cat("floor", "floors", Shape::Box, [0.0; 3], [0.0; 3], [0.55, 0.5, 0.45], "something to walk on"),
    cat("chair", "chairs", Shape::Box, [0.4, 0.4, 0.8], [0.55, 0.55, 1.0], [0.7, 0.35, 0.15], "something that is used for sitting"),
    cat("table", "tables", Shape::Box, [0.9, 0.6, 0.7], [1.6, 1.0, 0.8], [0.45, 0.3, 0.2], "something to eat a meal at"),
    cat("bed", "beds", Shape::Box, [1.4, 1.9, 0.4], [1.8, 2.1, 0.6], [0.85, 0.85, 0.95], "something that is used for sleeping"),
    cat("sofa", "sofas", Shape::Box, [1.6, 0.8, 0.7], [2.2, 1.0, 0.9], [0.2, 0.35, 0.6], "something soft where several people can sit together"),
    cat("cabinet", "cabinets", Shape::Box, [0.5, 0.4, 0.8], [1.0, 0.6, 1.2], [0.6, 0.6, 0.55], "something to store things behind closed doors"),
    cat("lamp", "lamps", Shape::Cylinder, [0.2, 0.2, 1.2], [0.35, 0.35, 1.7], [0.95, 0.9, 0.4], "something that gives light"),
    cat("trash can", "trash cans", Shape::Cylinder, [0.25, 0.25, 0.35], [0.4, 0.4, 0.6], [0.3, 0.3, 0.3], "something to throw waste into"),
    cat("bookshelf", "bookshelves", Shape::Box, [0.8, 0.3, 1.5], [1.2, 0.4, 2.0], [0.55, 0.4, 0.25], "something to keep books on"),
    cat("desk", "desks", Shape::Box, [1.0, 0.5, 0.7], [1.4, 0.7, 0.8], [0.75, 0.65, 0.5], "something to work or study at"),
    cat("toilet", "toilets", Shape::Box, [0.4, 0.6, 0.7], [0.45, 0.7, 0.8], [0.97, 0.97, 0.97], "something to use in the bathroom when nature calls"),
    cat("sink", "sinks", Shape::Box, [0.5, 0.4, 0.8], [0.7, 0.5, 0.9], [0.8, 0.85, 0.9], "something to wash hands in"),
    cat("bathtub", "bathtubs", Shape::Box, [1.5, 0.7, 0.5], [1.8, 0.8, 0.6], [0.9, 0.95, 1.0], "something to take a bath in"),
    cat("coffee table", "coffee tables", Shape::Box, [0.8, 0.5, 0.35], [1.2, 0.7, 0.45], [0.35, 0.2, 0.1], "something low to put drinks on in front of a sofa"),
    cat("monitor", "monitors", Shape::Box, [0.5, 0.1, 0.35], [0.7, 0.15, 0.5], [0.1, 0.1, 0.12], "something that shows the picture of a computer"),
    cat("box", "boxes", Shape::Box, [0.3, 0.3, 0.25], [0.6, 0.5, 0.5], [0.7, 0.55, 0.35], "something to pack things in"),
    cat("plant", "plants", Shape::Cone, [0.3, 0.3, 0.6], [0.6, 0.6, 1.2], [0.2, 0.6, 0.2], "something green that needs water to grow"),
    cat("stool", "stools", Shape::Cylinder, [0.3, 0.3, 0.45], [0.4, 0.4, 0.7], [0.6, 0.2, 0.2], "something small without a back to sit on"),
    cat("microwave", "microwaves", Shape::Box, [0.45, 0.35, 0.28], [0.55, 0.4, 0.32], [0.85, 0.85, 0.85], "something to heat food quickly"),
    cat("ball", "balls", Shape::Sphere, [0.2, 0.2, 0.2], [0.35, 0.35, 0.35], [0.95, 0.45, 0.1], "something round to play with"),
];

pub fn category_names() -> Vec<String> {
    LEXICON.iter().map(|c| c.name.to_string()).collect()
}

pub fn category_index(name: &str) -> Option<usize> {
    LEXICON.iter().position(|c| c.name == name)
}
