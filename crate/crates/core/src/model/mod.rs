//! Text encoder, patch image encoder with text-query fusion, decoder over
//! `[recognized-text states; quantized visual codes]`, and output head.
//!
//! Parameters live in one [`ParamStore`] whose insertion order is fixed by
//! the [`ModelConfig`], so a checkpoint only needs the config plus the raw
//! values to rebuild the layout.

mod forward;
mod infer;

pub use forward::{
    alignment_loss, decode_logits, encode_backbone, encode_text, fuse_visual, memory_with_visual, text_commitment,
    pooled_text_codes, tit_loss, translation_loss, Batch, ImageBatch, Memory, QuantizeRecord, Quantized, Quantizer,
    VisualMode,
};
pub use infer::{DecoderCache, EncodedSource, Inference};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Partition};
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vis_layers: usize,
    pub vis_dim: usize,
    pub vis_heads: usize,
    pub vis_ffn_dim: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub codebook_size: usize,
    /// Longest text sequence (source or target, including BOS/EOS).
    pub max_len: usize,
    /// Pass decoder gradients through the quantizer as identity.
    pub straight_through: bool,
}

impl ModelConfig {
    /// Full-size settings: 6+6 layers of width 512, 8 heads, 2048 codes,
    /// a 4-layer 128-wide patch backbone over 8×8 patches of 64×256.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            enc_layers: 6,
            dec_layers: 6,
            vis_layers: 4,
            vis_dim: 128,
            vis_heads: 4,
            vis_ffn_dim: 512,
            patch_h: 8,
            patch_w: 8,
            image_h: 64,
            image_w: 256,
            codebook_size: 2048,
            max_len: 64,
            straight_through: true,
        }
    }

    /// Small settings that train in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            vis_layers: 1,
            vis_dim: 32,
            vis_heads: 2,
            vis_ffn_dim: 64,
            patch_h: 8,
            patch_w: 6,
            image_h: 8,
            image_w: 240,
            codebook_size: 64,
            max_len: 64,
            straight_through: true,
        }
    }

    /// Width 32, two layers everywhere: the gradient-check configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            heads: 2,
            ffn_dim: 48,
            enc_layers: 2,
            dec_layers: 2,
            vis_layers: 2,
            vis_dim: 16,
            vis_heads: 2,
            vis_ffn_dim: 24,
            patch_h: 4,
            patch_w: 4,
            image_h: 8,
            image_w: 16,
            codebook_size: 16,
            max_len: 32,
            straight_through: true,
        }
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch_h) * (self.image_w / self.patch_w)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vis_dim == 0 || self.vis_heads == 0 || self.vis_dim % self.vis_heads != 0 {
            return bad(format!("vis_dim {} not divisible by {} heads", self.vis_dim, self.vis_heads));
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.image_h % self.patch_h != 0 || self.image_w % self.patch_w != 0 {
            return bad(format!(
                "image {}x{} not divisible into {}x{} patches",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            ));
        }
        if self.codebook_size == 0 {
            return bad("codebook needs at least one code".into());
        }
        if self.vocab_size < 5 || self.max_len < 2 || self.ffn_dim == 0 || self.vis_ffn_dim == 0 {
            return bad("vocabulary, length and feed-forward sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub positions: ParamId,
    pub enc: Vec<EncLayer>,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub patch_pos: ParamId,
    /// Pre-norm blocks reuse the encoder layer shape with norms first.
    pub vis: Vec<EncLayer>,
    pub vis_norm: NormIds,
    pub w_v: ParamId,
    pub fuse: AttnIds,
    pub dec: Vec<DecLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// All trainable parameters of the model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    pub(crate) layout: Layout,
    store: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn xavier(&mut self, name: String, part: Partition, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, part, Tensor2D::from_vec(fan_in, fan_out, data).expect("xavier shape"))
    }

    fn normal(&mut self, name: String, part: Partition, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, part, Tensor2D::from_vec(rows, cols, data).expect("normal shape"))
    }

    fn zeros(&mut self, name: String, part: Partition, cols: usize) -> ParamId {
        self.store.add(name, part, Tensor2D::zeros(1, cols))
    }

    fn norm(&mut self, name: &str, part: Partition, d: usize) -> NormIds {
        NormIds {
            gamma: self.store.add(format!("{name}.gamma"), part, Tensor2D::filled(1, d, 1.0)),
            beta: self.zeros(format!("{name}.beta"), part, d),
        }
    }

    fn attn(&mut self, name: &str, part: Partition, d_q: usize, d_kv: usize, d: usize) -> AttnIds {
        AttnIds {
            wq: self.xavier(format!("{name}.wq"), part, d_q, d),
            bq: self.zeros(format!("{name}.bq"), part, d),
            wk: self.xavier(format!("{name}.wk"), part, d_kv, d),
            bk: self.zeros(format!("{name}.bk"), part, d),
            wv: self.xavier(format!("{name}.wv"), part, d_kv, d),
            bv: self.zeros(format!("{name}.bv"), part, d),
            wo: self.xavier(format!("{name}.wo"), part, d, d_q),
            bo: self.zeros(format!("{name}.bo"), part, d_q),
        }
    }

    fn ffn(&mut self, name: &str, part: Partition, d: usize, hidden: usize) -> FfnIds {
        FfnIds {
            w1: self.xavier(format!("{name}.w1"), part, d, hidden),
            b1: self.zeros(format!("{name}.b1"), part, hidden),
            w2: self.xavier(format!("{name}.w2"), part, hidden, d),
            b2: self.zeros(format!("{name}.b2"), part, d),
        }
    }

    fn enc_layer(&mut self, name: &str, part: Partition, d: usize, hidden: usize) -> EncLayer {
        EncLayer {
            attn: self.attn(&format!("{name}.attn"), part, d, d, d),
            norm1: self.norm(&format!("{name}.norm1"), part, d),
            ffn: self.ffn(&format!("{name}.ffn"), part, d, hidden),
            norm2: self.norm(&format!("{name}.norm2"), part, d),
        }
    }
}

impl ModelParams {
    /// Xavier-uniform matrices, zero biases, unit norms and `N(0, d^-1/2)`
    /// embeddings, all from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, dv) = (c.d_model, c.vis_dim);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        };
        let emb_std = (d as f64).powf(-0.5);
        let embed = init.normal("embed".into(), Partition::Embedding, c.vocab_size, d, emb_std);
        let positions = init.normal("positions".into(), Partition::Embedding, c.max_len, d, emb_std);
        let enc = (0..c.enc_layers)
            .map(|l| init.enc_layer(&format!("enc.{l}"), Partition::TextEncoder, d, c.ffn_dim))
            .collect();
        let patch_w = init.xavier("patch.w".into(), Partition::Backbone, c.patch_len(), dv);
        let patch_b = init.zeros("patch.b".into(), Partition::Backbone, dv);
        let patch_pos = init.normal("patch.pos".into(), Partition::Backbone, c.patches(), dv, (dv as f64).powf(-0.5));
        let vis = (0..c.vis_layers)
            .map(|l| init.enc_layer(&format!("vis.{l}"), Partition::Backbone, dv, c.vis_ffn_dim))
            .collect();
        let vis_norm = init.norm("vis.norm", Partition::Backbone, dv);
        let w_v = init.xavier("image.w_v".into(), Partition::ImageEncoder, dv, d);
        let fuse = init.attn("image.fuse", Partition::ImageEncoder, d, d, d);
        let dec = (0..c.dec_layers)
            .map(|l| {
                let name = format!("dec.{l}");
                DecLayer {
                    self_attn: init.attn(&format!("{name}.self"), Partition::Decoder, d, d, d),
                    norm1: init.norm(&format!("{name}.norm1"), Partition::Decoder, d),
                    cross: init.attn(&format!("{name}.cross"), Partition::Decoder, d, d, d),
                    norm2: init.norm(&format!("{name}.norm2"), Partition::Decoder, d),
                    ffn: init.ffn(&format!("{name}.ffn"), Partition::Decoder, d, c.ffn_dim),
                    norm3: init.norm(&format!("{name}.norm3"), Partition::Decoder, d),
                }
            })
            .collect();
        let out_w = init.xavier("head.w".into(), Partition::Head, d, c.vocab_size);
        let out_b = init.zeros("head.b".into(), Partition::Head, c.vocab_size);
        let layout = Layout {
            embed,
            positions,
            enc,
            patch_w,
            patch_b,
            patch_pos,
            vis,
            vis_norm,
            w_v,
            fuse,
            dec,
            out_w,
            out_b,
        };
        Ok(Self {
            config,
            layout,
            store: init.store,
        })
    }

    /// Rebuild from a config and values in store order.
    pub fn from_values(config: ModelConfig, values: Vec<Tensor2D>) -> Result<Self> {
        let mut mp = Self::new(config, 0)?;
        if values.len() != mp.store.len() {
            return Err(Error::Integrity(format!(
                "{} parameter tensors for a layout of {}",
                values.len(),
                mp.store.len()
            )));
        }
        for (id, v) in mp.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            if v.shape() != mp.store.value(id).shape() {
                return Err(Error::Integrity(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    mp.store.get(id).name,
                    v.shape(),
                    mp.store.value(id).shape()
                )));
            }
            v.ensure_finite("load parameters")?;
            *mp.store.value_mut(id) = v;
        }
        Ok(mp)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_straight_through(&mut self, on: bool) {
        self.config.straight_through = on;
    }
}
