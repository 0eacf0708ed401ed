//! Synthetic captioned glyph scenes, their degraded counterparts and a toy
//! OCR used to score text fidelity.

pub mod dataset;
pub mod degrade;
pub mod font;
pub mod ocr;
pub mod scene;

pub use dataset::{
    generate_dataset, generate_items, item_seeds, read_dataset, read_ppm, write_dataset, write_ppm,
    Dataset, DatasetItem, Manifest,
};
pub use degrade::{degrade, degrade_with_draw, DegradationConfig, DegradationDraw, DownKernel, FACTOR};
pub use font::{parse_glyphs, vocab, GlyphId, PromptTemplate, NUM_GLYPHS};
pub use ocr::toy_ocr;
pub use scene::{render_scene, Background, GlyphScene, Lattice, Placement, SceneConfig, Texture};
