//! Tokenization, synthetic corpora, rendered text images, the OCR noise
//! channel and dataset file formats.

pub mod corpus;
mod image;
pub mod noise;
pub mod render;
pub mod tit;
pub mod vocab;

pub use corpus::{gen_parallel_corpus, Language, LanguageSpec};
pub use image::GrayImage;
pub use noise::{corrupt_ocr, NoiseSpec};
pub use render::{render_text_image, RenderSpec};
pub use tit::{examples, gen_tit_images, load_tit_jsonl, write_tit_jsonl, TitExample, TitGenSpec, TitImage, TitLine};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
