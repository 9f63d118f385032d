//! Command implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use tit_core::data::corpus::{read_tsv, write_tsv};
use tit_core::data::tit::split_sizes;
use tit_core::data::{load_tit_jsonl, write_tit_jsonl, TitImage, Vocab};
use tit_core::eval::ablation::{ablation_csv, run_ablation, AblationConfig, Variant};
use tit_core::eval::inspect::{codebook_csv, inspect_code, text_assignments};
use tit_core::eval::{
    corpus_bleu, evaluate as evaluate_examples, group_by_image, recognition_accuracy, translate_examples, DecodeOptions,
    MetricReport,
};
use tit_core::pipeline::{
    image_splits, run_stage1, run_stage2, run_stage3, run_stage4, text_splits, Checkpoint, DeskData, RawData, Splits,
    StageConfig, TrainExample,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{AblateArgs, EvaluateArgs, GenDataArgs, InspectArgs, TrainArgs, TranslateArgs};

const PARALLEL: &str = "parallel.tsv";
const OCR: &str = "ocr.jsonl";
const TIT: &str = "tit.jsonl";

pub struct Context {
    pub workdir: PathBuf,
    pub run: RunConfig,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn vocab(&self) -> Vocab {
        Vocab::latin()
    }

    fn text(&self, dir: &Path) -> Result<Splits, CliError> {
        let pairs = read_tsv(&self.path(dir).join(PARALLEL))?;
        Ok(text_splits(&self.vocab(), &pairs))
    }

    fn images(&self, dir: &Path, file: &str) -> Result<Splits, CliError> {
        let images = load_tit_jsonl(&self.path(dir).join(file))?;
        Ok(image_splits(&self.vocab(), &images, &self.run.model)?)
    }

    /// Examples and image ids of one translation split.
    fn split(&self, dir: &Path, name: &str) -> Result<(Vec<TrainExample>, Vec<String>), CliError> {
        let s = self.images(dir, TIT)?;
        match name {
            "dev" => Ok((s.dev, s.dev_ids)),
            "test" => Ok((s.test, s.test_ids)),
            other => Err(CliError::Usage(format!("split must be dev or test, got `{other}`"))),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit(ctx: &Context, out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(&ctx.path(p), text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Data(format!("stdout: {e}")))
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Data(e.to_string()))
}

fn split_counts(n: usize) -> [usize; 3] {
    let (d, t) = split_sizes(n);
    [n - d - t, d, t]
}

fn lines(images: &[TitImage]) -> usize {
    images.iter().map(|i| i.lines.len()).sum()
}

pub fn gen_data(ctx: &Context, a: &GenDataArgs) -> Result<(), CliError> {
    let mut run = ctx.run.clone();
    let d = &mut run.data;
    d.pairs = a.pairs.unwrap_or(d.pairs);
    d.ocr_images = a.ocr_size.unwrap_or(d.ocr_images);
    d.tit_images = a.tit_size.unwrap_or(d.tit_images);
    d.noise = a.noise.unwrap_or(d.noise);
    if d.pairs == 0 || d.ocr_images == 0 || d.tit_images == 0 {
        return Err(CliError::Usage("dataset sizes must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&d.noise) {
        return Err(CliError::Usage(format!("noise must lie in [0, 1], got {}", d.noise)));
    }
    let raw = run.data.generate()?;
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_tsv(&out.join(PARALLEL), &raw.pairs)?;
    let pgm = |dir: &'static str| a.pgm.then_some(Path::new(dir));
    write_tit_jsonl(&out.join(OCR), &raw.ocr, pgm("ocr_images"))?;
    write_tit_jsonl(&out.join(TIT), &raw.tit, pgm("tit_images"))?;
    let manifest = json!({
        "run": run,
        "files": {
            "parallel": {"path": PARALLEL, "pairs": raw.pairs.len(), "splits": split_counts(raw.pairs.len())},
            "ocr": {"path": OCR, "images": raw.ocr.len(), "lines": lines(&raw.ocr), "splits": split_counts(raw.ocr.len())},
            "tit": {"path": TIT, "images": raw.tit.len(), "lines": lines(&raw.tit), "splits": split_counts(raw.tit.len())},
        },
        "images": if a.pgm { "pgm" } else { "inline" },
    });
    write_text(&out.join("manifest.json"), &pretty(&manifest)?)?;
    println!(
        "wrote {} pairs, {} OCR images, {} translation images to {}",
        raw.pairs.len(),
        raw.ocr.len(),
        raw.tit.len(),
        out.display()
    );
    Ok(())
}

fn stage_config(ctx: &Context, stage: u8, a: &TrainArgs) -> Result<StageConfig, CliError> {
    let mut c = ctx.run.stage(stage).clone();
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c.beta = a.beta.unwrap_or(c.beta);
    c.gamma = a.gamma.unwrap_or(c.gamma);
    c.dropout = a.dropout.unwrap_or(c.dropout);
    c.max_steps = a.max_steps.unwrap_or(c.max_steps);
    c.lr_scale = a.lr_scale.unwrap_or(c.lr_scale);
    c.warmup = a.warmup.unwrap_or(c.warmup);
    c.batch_tokens = a.batch_tokens.unwrap_or(c.batch_tokens);
    c.eval_every = a.eval_every.unwrap_or(c.eval_every);
    c.patience = a.patience.unwrap_or(c.patience);
    c.allow_skip |= a.allow_skip;
    c.stop_after = a.stop_after;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn starting_checkpoint(ctx: &Context, stage: u8, a: &TrainArgs, out: &Path) -> Result<Checkpoint, CliError> {
    if a.resume {
        let ck = Checkpoint::load(out)?;
        if ck.resume.is_none() {
            return Err(CliError::Lineage(format!(
                "{} holds no interrupted stage-{stage} run to resume",
                out.display()
            )));
        }
        return Ok(ck);
    }
    match (stage, &a.ckpt) {
        (1, None) => Ok(Checkpoint::new(ctx.run.model.clone(), ctx.run.seed)?),
        (1, Some(_)) => Err(CliError::Usage("stage 1 starts from scratch; drop --ckpt".into())),
        (_, Some(p)) => Ok(Checkpoint::load(&ctx.path(p))?),
        (_, None) => Err(CliError::Lineage(format!(
            "stage {stage} continues from a stage-{} checkpoint; pass it with --ckpt",
            stage - 1
        ))),
    }
}

pub fn train(ctx: &Context, stage: u8, a: &TrainArgs) -> Result<(), CliError> {
    let out = ctx.path(a.out.as_deref().unwrap_or(Path::new(&format!("stage{stage}.ckpt"))));
    let cfg = stage_config(ctx, stage, a)?;
    let mut ck = starting_checkpoint(ctx, stage, a, &out)?;
    let mut run = ctx.run.clone();
    match stage {
        1 => run.stage1 = cfg.without_stop(),
        2 => run.stage2 = cfg.without_stop(),
        3 => run.stage3 = cfg.without_stop(),
        _ => run.stage4 = cfg.without_stop(),
    }
    ck.run = serde_json::to_value(&run).map_err(|e| CliError::Data(e.to_string()))?;
    let report = match stage {
        1 => {
            let s = ctx.text(&a.data)?;
            run_stage1(&mut ck, &s.train, &s.dev, &cfg)?
        }
        2 => {
            let s = ctx.text(&a.data)?;
            run_stage2(&mut ck, &s.train, &s.dev, &cfg)?
        }
        3 => {
            let s = ctx.images(&a.data, OCR)?;
            run_stage3(&mut ck, &s.train, &s.dev, &cfg)?
        }
        _ => {
            let s = ctx.images(&a.data, TIT)?;
            run_stage4(&mut ck, &s.train, &s.dev, &cfg)?
        }
    };
    ck.save(&out)?;
    let mut log = String::new();
    for entry in &report.log {
        log.push_str(&serde_json::to_string(entry).map_err(|e| CliError::Data(e.to_string()))?);
        log.push('\n');
    }
    write_text(&PathBuf::from(format!("{}.log.jsonl", out.display())), &log)?;
    let manifest = json!({
        "command": format!("train-stage{stage}"),
        "run": run,
        "data": a.data,
        "ckpt": a.ckpt,
        "out": a.out,
        "resume": a.resume,
        "stop_after": a.stop_after,
        "steps": report.steps,
        "completed": report.completed,
        "best_step": report.best_step,
        "best_score": report.best_score,
        "batch_hash": report.batch_hash,
        "dead_codes": report.dead_codes,
    });
    write_text(&PathBuf::from(format!("{}.run.json", out.display())), &pretty(&manifest)?)?;
    println!(
        "stage {stage}: {} after {} steps, best step {}, best dev score {}, {} dead codes -> {}",
        if report.completed { "completed" } else { "interrupted" },
        report.steps,
        report.best_step,
        report.best_score.map_or("n/a".into(), |s| format!("{s:.6}")),
        report.dead_codes,
        out.display()
    );
    Ok(())
}

/// Decode with the image path when the checkpoint went through the
/// alignment stage, in the visual mode it was trained with.
fn decode_options(ck: &Checkpoint, beam: usize, text_only: bool) -> Result<DecodeOptions, CliError> {
    if beam == 0 {
        return Err(CliError::Usage("beam must be at least 1".into()));
    }
    let visual = ck.lineage.iter().rev().find(|r| r.stage >= 3);
    Ok(match visual {
        Some(r) if !text_only => DecodeOptions::with_image(beam, r.config.visual_mode),
        _ => DecodeOptions::text_only(beam),
    })
}

pub fn translate(ctx: &Context, a: &TranslateArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.path(&a.ckpt))?;
    let (examples, _) = ctx.split(&a.data, &a.split)?;
    let opts = decode_options(&ck, a.beam.unwrap_or(ctx.run.beam), a.text_only)?;
    let vocab = ctx.vocab();
    let mut text = String::new();
    for r in translate_examples(&ck.params, &ck.codebook, &examples, &opts)? {
        text.push_str(&vocab.detokenize(r.best.output()));
        text.push('\n');
    }
    emit(ctx, a.out.as_deref(), &text)
}

fn score_file(ctx: &Context, hyps: &Path, examples: &[TrainExample], ids: &[String]) -> Result<MetricReport, CliError> {
    let path = ctx.path(hyps);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let hyps: Vec<&str> = text.lines().collect();
    if hyps.len() != examples.len() {
        return Err(CliError::Data(format!(
            "{} holds {} translations for {} references",
            path.display(),
            hyps.len(),
            examples.len()
        )));
    }
    let vocab = ctx.vocab();
    let refs: Vec<String> = examples.iter().map(|e| vocab.detokenize(&e.target)).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let pred: Vec<String> = examples
        .iter()
        .map(|e| vocab.detokenize(e.recognized.as_deref().unwrap_or_default()))
        .collect();
    let gold: Vec<String> = examples.iter().map(|e| vocab.detokenize(&e.source)).collect();
    let (image_acc, sent_acc) = recognition_accuracy(&pred, &gold, &group_by_image(ids))?;
    Ok(MetricReport {
        bleu: bleu.bleu,
        precisions: bleu.precisions,
        bp: bleu.bp,
        image_acc: Some(image_acc),
        sent_acc: Some(sent_acc),
        n: examples.len(),
        nll: None,
    })
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<(), CliError> {
    let (examples, ids) = ctx.split(&a.data, &a.split)?;
    let report = match (&a.hyps, &a.ckpt) {
        (Some(h), _) => score_file(ctx, h, &examples, &ids)?,
        (None, Some(c)) => {
            let ck = Checkpoint::load(&ctx.path(c))?;
            let opts = decode_options(&ck, a.beam.unwrap_or(ctx.run.beam), a.text_only)?;
            let vocab = ctx.vocab();
            evaluate_examples(&ck.params, &ck.codebook, &vocab, &examples, Some(&ids), &opts, true)?.0
        }
        (None, None) => return Err(CliError::Usage("evaluate needs --ckpt or --hyps".into())),
    };
    emit(ctx, a.out.as_deref(), &pretty(&report)?)
}

pub fn inspect(ctx: &Context, a: &InspectArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.path(&a.ckpt))?;
    let (examples, ids) = ctx.split(&a.data, &a.split)?;
    let vocab = ctx.vocab();
    let top = a.top.unwrap_or(ctx.run.top_n);
    let text = match a.code {
        Some(code) => {
            if code >= ck.codebook.k() {
                return Err(CliError::Usage(format!(
                    "code {code} is outside the codebook of {} codes",
                    ck.codebook.k()
                )));
            }
            let r = inspect_code(code, &ck.params, &ck.codebook, &vocab, &examples, &ids, top, ctx.run.seed)?;
            if r.used {
                let tokens: Vec<String> = r.tokens.iter().map(|(t, c)| format!("{t} ({c})")).collect();
                format!(
                    "latent code {code}: n_k {:.4}, {} text positions\ntop tokens: {}\nimages: {}\n",
                    r.cluster_size,
                    r.assignments,
                    tokens.join(", "),
                    r.image_ids.join(", ")
                )
            } else {
                format!("latent code {code}: unused\n")
            }
        }
        None => {
            let assignments = text_assignments(&ck.params, &ck.codebook, &examples)?;
            codebook_csv(&ck.codebook, &vocab, &examples, &assignments, top)
        }
    };
    emit(ctx, a.out.as_deref(), &text)
}

pub fn ablate(ctx: &Context, a: &AblateArgs) -> Result<(), CliError> {
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants
            .iter()
            .map(|v| v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?
    };
    let dir = ctx.path(&a.data);
    let raw = RawData {
        pairs: read_tsv(&dir.join(PARALLEL))?,
        ocr: load_tit_jsonl(&dir.join(OCR))?,
        tit: load_tit_jsonl(&dir.join(TIT))?,
    };
    let vocab = ctx.vocab();
    let data = DeskData::from_raw(&vocab, &raw, &ctx.run.model)?;
    let cfg = AblationConfig {
        model: ctx.run.model.clone(),
        model_seed: ctx.run.seed,
        stages: ctx.run.stages(),
        beam: a.beam.unwrap_or(ctx.run.beam),
        random_seed: ctx.run.seed,
    };
    let rows = run_ablation(&variants, data.ablation(), &vocab, &cfg)?.rows;
    let csv = ablation_csv(&rows);
    write_text(&ctx.path(&a.out), &csv)?;
    print!("{csv}");
    Ok(())
}
