//! Synthetic overhead scenes, instruction records and the word-level
//! tokenizer.

mod bbox;
mod corpus;
mod image;
mod instruct;
mod scene;
mod tokenizer;

pub use bbox::{parse_bbox, serialize_bbox, BBox};
pub use corpus::{
    build_corpus, read_corpus, read_jsonl, read_split, record_rng, write_corpus, write_jsonl,
    write_split, Corpus, CorpusConfig, Manifest, Sample, Split, SplitData, SplitManifest,
};
pub use image::RgbImage;
pub use instruct::{
    caption, counting_prompt, counting_record, grounding_prompt, grounding_record, to_instruction,
    Granularity, InstructionRecord, Provenance, Task, CAPTION_PROMPTS, SCENE_PROMPT,
};
pub use scene::{
    generate_scene, render_background, render_object, Background, Cell, Color, ObjectClass,
    ObjectInstance, PixelBox, SceneAnnotation, SceneSpec,
};
pub use tokenizer::{Tokenizer, BOS, EOS, MAX_NUMBER, PAD, SEP};
