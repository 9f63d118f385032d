//! Ablation harness: trains each variant from shared stage prefixes with
//! identical seeds and data, then scores it on the dev set.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeOptions};
use crate::model::{ModelConfig, VisualMode};
use crate::pipeline::{run_stage1, run_stage2, run_stage3, run_stage4, Checkpoint, StageConfig, StageReport, TrainExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All four stages.
    Full,
    /// The decoder reads uniformly sampled codes instead of the nearest ones.
    RandomCodes,
    /// Unquantized visual states replace the codes; no codebook stage.
    NoCodebook,
    NoStage2,
    NoStage3,
    /// Stage 4 without the alignment and image-commitment terms.
    NoL3,
    /// The stage-1 text model decoding recognized text.
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::RandomCodes,
        Variant::NoCodebook,
        Variant::NoStage2,
        Variant::NoStage3,
        Variant::NoL3,
        Variant::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomCodes => "random_codes",
            Variant::NoCodebook => "no_codebook",
            Variant::NoStage2 => "no_stage2",
            Variant::NoStage3 => "no_stage3",
            Variant::NoL3 => "no_l3",
            Variant::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("ablation", format!("unknown variant `{s}`")))
    }
}

/// Datasets of every stage.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'d> {
    pub text_train: &'d [TrainExample],
    pub text_dev: &'d [TrainExample],
    pub ocr_train: &'d [TrainExample],
    pub ocr_dev: &'d [TrainExample],
    pub tit_train: &'d [TrainExample],
    pub tit_dev: &'d [TrainExample],
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Stage configs in order; variants adjust modes and skip flags.
    pub stages: [StageConfig; 4],
    pub beam: usize,
    /// Seed of the random-code draws.
    pub random_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub bleu: f64,
    pub nll: f64,
    pub dead_codes: usize,
    /// Batch stream hash of the last training stage run.
    pub batch_hash: u64,
}

/// Stage prefixes shared between variants.
struct Prefixes<'d> {
    data: AblationData<'d>,
    cfg: &'d AblationConfig,
    s1: Option<Checkpoint>,
    s2: Option<Checkpoint>,
    s3: Option<Checkpoint>,
    reports: Vec<StageReport>,
    seconds: Vec<f64>,
}

impl Prefixes<'_> {
    fn stage1(&mut self) -> Result<Checkpoint> {
        if self.s1.is_none() {
            let mut ck = Checkpoint::new(self.cfg.model.clone(), self.cfg.model_seed)?;
            let start = Instant::now();
            let r = run_stage1(&mut ck, self.data.text_train, self.data.text_dev, &self.cfg.stages[0])?;
            self.seconds.push(start.elapsed().as_secs_f64());
            self.reports.push(r);
            self.s1 = Some(ck);
        }
        Ok(self.s1.clone().expect("stage 1 computed"))
    }

    fn stage2(&mut self) -> Result<Checkpoint> {
        if self.s2.is_none() {
            let mut ck = self.stage1()?;
            let start = Instant::now();
            let r = run_stage2(&mut ck, self.data.text_train, self.data.text_dev, &self.cfg.stages[1])?;
            self.seconds.push(start.elapsed().as_secs_f64());
            self.reports.push(r);
            self.s2 = Some(ck);
        }
        Ok(self.s2.clone().expect("stage 2 computed"))
    }

    fn stage3(&mut self) -> Result<Checkpoint> {
        if self.s3.is_none() {
            let mut ck = self.stage2()?;
            let start = Instant::now();
            let r = run_stage3(&mut ck, self.data.ocr_train, self.data.ocr_dev, &self.cfg.stages[2])?;
            self.seconds.push(start.elapsed().as_secs_f64());
            self.reports.push(r);
            self.s3 = Some(ck);
        }
        Ok(self.s3.clone().expect("stage 3 computed"))
    }

    fn stage3_from(&mut self, mut ck: Checkpoint, mode: VisualMode) -> Result<Checkpoint> {
        let cfg = StageConfig {
            visual_mode: mode,
            allow_skip: true,
            ..self.cfg.stages[2].clone()
        };
        run_stage3(&mut ck, self.data.ocr_train, self.data.ocr_dev, &cfg)?;
        Ok(ck)
    }

    fn stage4(&mut self, mut ck: Checkpoint, cfg: StageConfig) -> Result<(Checkpoint, u64)> {
        let r = run_stage4(&mut ck, self.data.tit_train, self.data.tit_dev, &cfg)?;
        Ok((ck, r.batch_hash))
    }
}

/// Rows of every variant and the reports of the shared stage prefixes in
/// the order they trained.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub prefixes: Vec<StageReport>,
    /// Wall time of each prefix run.
    pub prefix_seconds: Vec<f64>,
    /// Wall time of each row, including the prefixes it trained first.
    pub row_seconds: Vec<f64>,
}

impl AblationOutcome {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Wall time of the row of `v`.
    pub fn seconds(&self, v: Variant) -> Option<f64> {
        self.rows.iter().position(|r| r.variant == v).map(|i| self.row_seconds[i])
    }

    /// Report and wall time of the shared run of `stage`, if one trained.
    pub fn prefix(&self, stage: u8) -> Option<(&StageReport, f64)> {
        let i = self.prefixes.iter().position(|r| r.stage == stage)?;
        Some((&self.prefixes[i], self.prefix_seconds[i]))
    }
}

/// Trains and scores each variant. Variants reuse the stage checkpoints
/// they have in common, so the shared prefixes train once.
pub fn run_ablation(
    variants: &[Variant],
    data: AblationData<'_>,
    vocab: &Vocab,
    cfg: &AblationConfig,
) -> Result<AblationOutcome> {
    for (i, s) in cfg.stages.iter().enumerate() {
        if s.stage as usize != i + 1 {
            return Err(Error::invalid("ablation", "stage configs must be in order 1..4"));
        }
    }
    let mut p = Prefixes {
        data,
        cfg,
        s1: None,
        s2: None,
        s3: None,
        reports: Vec::new(),
        seconds: Vec::new(),
    };
    let s4 = &cfg.stages[3];
    let mut rows = Vec::with_capacity(variants.len());
    let mut row_seconds = Vec::with_capacity(variants.len());
    for &v in variants {
        let start = Instant::now();
        let with_mode = |mode: VisualMode| StageConfig {
            visual_mode: mode,
            ..s4.clone()
        };
        let (ck, hash, opts) = match v {
            Variant::TextOnly => {
                let ck = p.stage1()?;
                let h = p.reports[0].batch_hash;
                (ck, h, DecodeOptions::text_only(cfg.beam))
            }
            Variant::Full => {
                let ck = p.stage3()?;
                let (ck, h) = p.stage4(ck, s4.clone())?;
                (ck, h, DecodeOptions::with_image(cfg.beam, VisualMode::Codebook))
            }
            Variant::RandomCodes => {
                let mode = VisualMode::RandomCodes { seed: cfg.random_seed };
                let ck = p.stage3()?;
                let (ck, h) = p.stage4(ck, with_mode(mode))?;
                (ck, h, DecodeOptions::with_image(cfg.beam, mode))
            }
            Variant::NoCodebook => {
                let ck = p.stage1()?;
                let ck = p.stage3_from(ck, VisualMode::Continuous)?;
                let c = StageConfig {
                    allow_skip: true,
                    ..with_mode(VisualMode::Continuous)
                };
                let (ck, h) = p.stage4(ck, c)?;
                (ck, h, DecodeOptions::with_image(cfg.beam, VisualMode::Continuous))
            }
            Variant::NoStage2 => {
                let ck = p.stage1()?;
                let ck = p.stage3_from(ck, VisualMode::Codebook)?;
                let (ck, h) = p.stage4(ck, s4.clone())?;
                (ck, h, DecodeOptions::with_image(cfg.beam, VisualMode::Codebook))
            }
            Variant::NoStage3 => {
                let ck = p.stage2()?;
                let c = StageConfig {
                    allow_skip: true,
                    ..s4.clone()
                };
                let (ck, h) = p.stage4(ck, c)?;
                (ck, h, DecodeOptions::with_image(cfg.beam, VisualMode::Codebook))
            }
            Variant::NoL3 => {
                let ck = p.stage3()?;
                let c = StageConfig {
                    include_l3: false,
                    ..s4.clone()
                };
                let (ck, h) = p.stage4(ck, c)?;
                (ck, h, DecodeOptions::with_image(cfg.beam, VisualMode::Codebook))
            }
        };
        let (m, _) = evaluate(&ck.params, &ck.codebook, vocab, data.tit_dev, None, &opts, true)?;
        rows.push(AblationRow {
            variant: v,
            bleu: m.bleu,
            nll: m.nll.unwrap_or(f64::NAN),
            dead_codes: ck.codebook.dead_codes(),
            batch_hash: hash,
        });
        row_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(AblationOutcome {
        rows,
        prefixes: p.reports,
        prefix_seconds: p.seconds,
        row_seconds,
    })
}

/// `variant,bleu,nll,dead_codes` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,bleu,nll,dead_codes\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4},{}\n", r.variant, r.bleu, r.nll, r.dead_codes));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o everything".parse::<Variant>().is_err());
    }
}
