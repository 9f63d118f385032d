//! The desk-scale synthetic setup: one language, a parallel corpus, short
//! OCR pairs and multi-line translation images, split and tokenized the
//! same way for every consumer.

use serde::{Deserialize, Serialize};

use crate::data::tit::split;
use crate::data::{
    examples, gen_parallel_corpus, gen_tit_images, Language, LanguageSpec, NoiseSpec, RenderSpec, TitGenSpec, TitImage,
    Vocab,
};
use crate::error::Result;
use crate::eval::ablation::AblationData;
use crate::model::ModelConfig;
use crate::pipeline::batching::TrainExample;
use crate::pipeline::config::StageConfig;

/// Characters per rendered line.
pub const LINE_CHARS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSpec {
    pub seed: u64,
    pub language: LanguageSpec,
    pub pairs: usize,
    pub ocr_images: usize,
    /// Words per OCR line.
    pub ocr_words: (usize, usize),
    pub tit_images: usize,
    /// Lines per translation image.
    pub tit_lines: (usize, usize),
    /// Total OCR error rate of the translation images.
    pub noise: f64,
}

impl DeskSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            language: LanguageSpec {
                seed,
                ..LanguageSpec::default()
            },
            pairs: 12_000,
            ocr_images: 2000,
            ocr_words: (1, 2),
            tit_images: 1500,
            tit_lines: (1, 3),
            noise: 0.15,
        }
    }

    pub fn language(&self) -> Result<Language> {
        Language::new(self.language.clone())
    }

    pub fn ocr_spec(&self) -> TitGenSpec {
        TitGenSpec {
            render: RenderSpec::strip(LINE_CHARS),
            noise: NoiseSpec::clean(self.seed),
            min_lines: 1,
            max_lines: 1,
            translate: false,
            recognize: false,
        }
    }

    pub fn tit_spec(&self) -> TitGenSpec {
        TitGenSpec {
            render: RenderSpec::strip(LINE_CHARS),
            noise: NoiseSpec::with_rate(self.noise, self.seed),
            min_lines: self.tit_lines.0,
            max_lines: self.tit_lines.1,
            translate: true,
            recognize: true,
        }
    }

    pub fn generate(&self) -> Result<RawData> {
        let lang = self.language()?;
        let ocr_lang = lang.with_sentence_lengths(self.ocr_words.0, self.ocr_words.1)?;
        Ok(RawData {
            pairs: gen_parallel_corpus(&lang, self.pairs, self.seed)?,
            ocr: gen_tit_images(&ocr_lang, &self.ocr_spec(), self.ocr_images, self.seed.wrapping_add(100))?,
            tit: gen_tit_images(&lang, &self.tit_spec(), self.tit_images, self.seed.wrapping_add(200))?,
        })
    }

    /// Stage configs with this spec's seed.
    pub fn stages(&self) -> Result<[StageConfig; 4]> {
        let mut out = [
            StageConfig::desk(1)?,
            StageConfig::desk(2)?,
            StageConfig::desk(3)?,
            StageConfig::desk(4)?,
        ];
        for c in &mut out {
            c.seed = self.seed;
        }
        Ok(out)
    }
}

/// Generated corpora before splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawData {
    pub pairs: Vec<(String, String)>,
    pub ocr: Vec<TitImage>,
    pub tit: Vec<TitImage>,
}

/// Train, dev and test examples with the image id of every example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TrainExample>,
    pub dev: Vec<TrainExample>,
    pub test: Vec<TrainExample>,
    pub dev_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeskData {
    pub text: Splits,
    pub ocr: Splits,
    pub tit: Splits,
}

/// Pairs split by the 1,000/1,000/rest rule (a tenth each for small sets).
pub fn text_splits(vocab: &Vocab, pairs: &[(String, String)]) -> Splits {
    let (train, dev, test) = split(pairs);
    let tok = |p: &[(String, String)]| p.iter().map(|(s, t)| TrainExample::from_pair(vocab, s, t)).collect();
    Splits {
        train: tok(&train),
        dev: tok(&dev),
        test: tok(&test),
        ..Splits::default()
    }
}

/// Images split like [`text_splits`], then cut into per-line examples at
/// the model's input size.
pub fn image_splits(vocab: &Vocab, images: &[TitImage], cfg: &ModelConfig) -> Result<Splits> {
    let (train, dev, test) = split(images);
    let convert = |imgs: &[TitImage]| -> Result<(Vec<TrainExample>, Vec<String>)> {
        let ex = examples(imgs, cfg.image_w, cfg.image_h)?;
        let ids = ex.iter().map(|e| e.image_id.clone()).collect();
        Ok((ex.iter().map(|e| TrainExample::from_tit(vocab, e)).collect(), ids))
    };
    let (train, _) = convert(&train)?;
    let (dev, dev_ids) = convert(&dev)?;
    let (test, test_ids) = convert(&test)?;
    Ok(Splits {
        train,
        dev,
        test,
        dev_ids,
        test_ids,
    })
}

impl DeskData {
    pub fn from_raw(vocab: &Vocab, raw: &RawData, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            text: text_splits(vocab, &raw.pairs),
            ocr: image_splits(vocab, &raw.ocr, cfg)?,
            tit: image_splits(vocab, &raw.tit, cfg)?,
        })
    }

    pub fn ablation(&self) -> AblationData<'_> {
        AblationData {
            text_train: &self.text.train,
            text_dev: &self.text.dev,
            ocr_train: &self.ocr.train,
            ocr_dev: &self.ocr.dev,
            tit_train: &self.tit.train,
            tit_dev: &self.tit.dev,
        }
    }
}
