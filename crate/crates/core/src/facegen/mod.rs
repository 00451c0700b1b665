//! Synthetic face oracle, the toy graffiti style operator, the prompt
//! embedder, and PPM output.

mod ppm;
mod prompt;
mod render;
mod stylize;

pub use ppm::{read_ppm, write_gray_ppm, write_ppm};
pub use prompt::{embed_prompt, normalize_prompt};
pub use render::{
    face_grid, image_size, measure, render_face, render_structure, structure_channel, with_structure, FaceParams,
    CHANNELS, FEATURE_WEIGHT, HEAD_WEIGHT, MIN_SIZE, SKIN_PALETTE,
};
pub use stylize::{
    graffiti_stylize, image_hash, jittered_attributes, palette_histogram, palette_mass, StyleOp, DEFAULT_INTENSITY,
    GRAFFITI_PALETTE, JITTER_SCALE,
};
