//! Binary checkpoints.
//!
//! Layout: `MMCB`, format version (u32 LE), CRC-32 of everything after the
//! checksum (u32 LE), section count (u32 LE), then sections of
//! `name length (u8), name, byte length (u64 LE), bytes`. Real numbers are
//! little-endian f64; metadata sections are JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookState, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::OptimizerState;
use crate::pipeline::config::StageConfig;
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 4] = b"MMCB";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub config: StageConfig,
    pub steps: u64,
    /// Step whose parameters were kept.
    pub best_step: u64,
    pub best_score: Option<f64>,
    /// Hash of the training examples.
    pub data_hash: u64,
    /// Hash of the batch index stream.
    pub batch_hash: u64,
}

/// One evaluation row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub stage: u8,
    /// Mean of each loss component since the previous evaluation.
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub dead_codes: usize,
    pub dev: BTreeMap<String, f64>,
}

/// Parameters and codebook at one point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: Vec<Tensor2D>,
    pub codebook: CodebookState,
}

/// Where an interrupted stage stands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub config: StageConfig,
    pub step: u64,
    pub epoch: u64,
    /// Next batch within the epoch.
    pub cursor: usize,
    pub best_score: Option<f64>,
    pub best_step: u64,
    pub bad_evals: usize,
    /// Total loss of every step so far.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    /// Component sums since the last evaluation.
    pub pending: BTreeMap<String, f64>,
    pub pending_steps: u64,
    pub data_hash: u64,
    pub batch_hash: u64,
    #[serde(skip)]
    pub best: Option<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub codebook: CodebookState,
    /// Optimizer of the last gradient stage.
    pub optimizer: Option<OptimizerState>,
    pub lineage: Vec<StageRecord>,
    pub resume: Option<ResumeState>,
    /// Run configuration echoed by the caller.
    pub run: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    lineage: Vec<StageRecord>,
    run: serde_json::Value,
}

impl Checkpoint {
    /// Freshly initialized parameters and a random codebook.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::new(config.clone(), seed)?;
        let codebook = CodebookState::random(config.codebook_size, config.d_model, DEFAULT_GAMMA, seed ^ 0xC0DE)?;
        Ok(Self {
            params,
            codebook,
            optimizer: None,
            lineage: Vec::new(),
            resume: None,
            run: serde_json::Value::Null,
        })
    }

    pub fn stages(&self) -> Vec<u8> {
        self.lineage.iter().map(|r| r.stage).collect()
    }

    /// Checks that `cfg` may run on this checkpoint.
    pub fn check_lineage(&self, cfg: &StageConfig) -> Result<()> {
        if let Some(r) = &self.resume {
            if r.config.stage != cfg.stage {
                return Err(Error::Lineage(format!(
                    "checkpoint holds an interrupted stage {}; resume that stage before running stage {}",
                    r.config.stage, cfg.stage
                )));
            }
            if r.config != cfg.without_stop() {
                return Err(Error::Lineage(format!(
                    "stage {} was interrupted under a different configuration",
                    cfg.stage
                )));
            }
        }
        let last = self.lineage.last().map(|r| r.stage);
        let ok = match cfg.stage {
            1 => last.is_none(),
            2 => last == Some(1),
            3 => last == Some(2) || (cfg.allow_skip && last == Some(1)),
            _ => last == Some(3) || (cfg.allow_skip && matches!(last, Some(1 | 2))),
        };
        if ok {
            return Ok(());
        }
        let need = match cfg.stage {
            1 => "a fresh checkpoint".to_string(),
            s => format!("a stage-{} checkpoint", s - 1),
        };
        Err(Error::Lineage(format!(
            "stage {} needs {need}; this checkpoint has completed stages {:?}",
            cfg.stage,
            self.stages()
        )))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
        let meta = Meta {
            model: self.params.config().clone(),
            lineage: self.lineage.clone(),
            run: self.run.clone(),
        };
        sections.push(("meta", serde_json::to_vec(&meta)?));
        let values: Vec<&Tensor2D> = self.params.store().iter().map(|(_, p)| &p.value).collect();
        sections.push(("params", encode_tensors(&values)));
        sections.push(("codebook", encode_codebook(&self.codebook)));
        if let Some(opt) = &self.optimizer {
            sections.push(("optimizer", encode_optimizer(opt)));
        }
        if let Some(r) = &self.resume {
            sections.push(("resume", serde_json::to_vec(r)?));
            if let Some(best) = &r.best {
                sections.push(("best_params", encode_tensors(&best.params.iter().collect::<Vec<_>>())));
                sections.push(("best_codebook", encode_codebook(&best.codebook)));
            }
        }
        let mut body = Vec::new();
        body.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, bytes) in &sections {
            body.push(name.len() as u8);
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            body.extend_from_slice(bytes);
        }
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let body = &bytes[12..];
        if crc32fast::hash(body) != crc {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader::new(body);
        let count = r.u32()? as usize;
        let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
        for _ in 0..count {
            let n = r.take(1)?[0] as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Integrity("section name".into()))?;
            let len = r.u64()? as usize;
            sections.insert(name, r.take(len)?);
        }
        r.finish()?;
        let get = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| Error::Integrity(format!("missing section `{name}`")))
        };
        let meta: Meta = serde_json::from_slice(get("meta")?)?;
        let params = ModelParams::from_values(meta.model, decode_tensors(get("params")?)?)?;
        let codebook = decode_codebook(get("codebook")?)?;
        if codebook.dim() != params.config().d_model {
            return Err(Error::Integrity("codebook width differs from the model width".into()));
        }
        let optimizer = sections.get("optimizer").map(|b| decode_optimizer(b)).transpose()?;
        let resume = match sections.get("resume") {
            Some(b) => {
                let mut state: ResumeState = serde_json::from_slice(b)?;
                if let (Some(p), Some(c)) = (sections.get("best_params"), sections.get("best_codebook")) {
                    state.best = Some(Snapshot {
                        params: decode_tensors(p)?,
                        codebook: decode_codebook(c)?,
                    });
                }
                Some(state)
            }
            None => None,
        };
        Ok(Self {
            params,
            codebook,
            optimizer,
            lineage: meta.lineage,
            resume,
            run: meta.run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Current parameters and codebook.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self.params.store().iter().map(|(_, p)| p.value.clone()).collect(),
            codebook: self.codebook.clone(),
        }
    }

    pub fn restore(&mut self, snap: &Snapshot) -> Result<()> {
        if snap.params.len() != self.params.store().len() {
            return Err(Error::Integrity("snapshot does not match the model layout".into()));
        }
        let ids: Vec<_> = self.params.store().ids().collect();
        for (id, v) in ids.into_iter().zip(&snap.params) {
            *self.params.store_mut().value_mut(id) = v.clone();
        }
        self.codebook = snap.codebook.clone();
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor2D) {
    put_u64(out, t.rows() as u64);
    put_u64(out, t.cols() as u64);
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_tensors(ts: &[&Tensor2D]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, ts.len() as u64);
    for t in ts {
        put_tensor(&mut out, t);
    }
    out
}

fn encode_codebook(cb: &CodebookState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&cb.gamma().to_le_bytes());
    put_tensor(&mut out, cb.codes());
    put_f64s(&mut out, cb.counts());
    put_tensor(&mut out, cb.sums());
    out
}

fn encode_optimizer(opt: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, opt.step);
    put_u64(&mut out, opt.warmup);
    put_u64(&mut out, opt.d_model as u64);
    put_u64(&mut out, opt.first.len() as u64);
    for moments in [&opt.first, &opt.second] {
        for m in moments {
            match m {
                Some(t) => {
                    out.push(1);
                    put_tensor(&mut out, t);
                }
                None => out.push(0),
            }
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn new(bytes: &'b [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("unexpected end of section".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(Error::Integrity("length field exceeds the section".into()));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor2D> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n * 8 <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Integrity("tensor larger than its section".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2D::from_vec(rows, cols, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity("trailing bytes".into()));
        }
        Ok(())
    }
}

fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor2D>> {
    let mut r = Reader::new(bytes);
    let n = r.len()?;
    let out = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

fn decode_codebook(bytes: &[u8]) -> Result<CodebookState> {
    let mut r = Reader::new(bytes);
    let gamma = r.f64()?;
    let codes = r.tensor()?;
    let counts = r.f64s()?;
    let sums = r.tensor()?;
    r.finish()?;
    CodebookState::from_parts(gamma, codes, counts, sums)
}

fn decode_optimizer(bytes: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader::new(bytes);
    let step = r.u64()?;
    let warmup = r.u64()?;
    let d_model = r.u64()? as usize;
    let n = r.len()?;
    let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for m in &mut moments {
        for _ in 0..n {
            let present = r.take(1)?[0];
            m.push(match present {
                0 => None,
                1 => Some(r.tensor()?),
                _ => return Err(Error::Integrity("bad optimizer moment flag".into())),
            });
        }
    }
    r.finish()?;
    let [first, second] = moments;
    Ok(OptimizerState {
        step,
        warmup,
        d_model,
        first,
        second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let mut c = Checkpoint::new(ModelConfig::tiny(12), 5).unwrap();
        let mut opt = OptimizerState::new(c.params.store().len(), 32, 10);
        opt.step = 3;
        opt.first[0] = Some(Tensor2D::filled(12, 32, 0.5));
        c.optimizer = Some(opt);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.snapshot(), c.snapshot());
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = ckpt().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
        let short = &ckpt().to_bytes().unwrap()[..100];
        assert!(matches!(Checkpoint::from_bytes(short), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn lineage_rules() {
        let mut c = ckpt();
        let s4 = StageConfig::desk(4).unwrap();
        assert!(matches!(c.check_lineage(&s4), Err(Error::Lineage(_))));
        assert!(c.check_lineage(&StageConfig::desk(1).unwrap()).is_ok());
        c.lineage.push(StageRecord {
            stage: 1,
            config: StageConfig::desk(1).unwrap(),
            steps: 1,
            best_step: 1,
            best_score: None,
            data_hash: 0,
            batch_hash: 0,
        });
        assert!(c.check_lineage(&s4).is_err());
        assert!(c.check_lineage(&StageConfig::desk(2).unwrap()).is_ok());
        let skip = StageConfig {
            allow_skip: true,
            ..StageConfig::desk(3).unwrap()
        };
        assert!(c.check_lineage(&skip).is_ok());
    }
}
