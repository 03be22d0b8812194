use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::softmax_rows;
use super::{Dense, Gradients, ParamSet};
use crate::{Error, Result};

/// Shape of the request encoder: the `input_dim` embedding is cut into
/// `num_patches` equal patches that form the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_patches: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub output_dim: usize,
    /// Adds the fixed sinusoidal position table to the patch embeddings.
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            num_patches: 8,
            layers: 2,
            heads: 4,
            model_dim: 64,
            output_dim: 32,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_patches", self.num_patches),
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be at least 1")));
            }
        }
        if !self.input_dim.is_multiple_of(self.num_patches) {
            return Err(Error::config(format!(
                "encoder input_dim {} is not divisible by num_patches {}",
                self.input_dim, self.num_patches
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "encoder model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.input_dim / self.num_patches
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Debug)]
struct Block {
    qkv: Dense,
    out: Dense,
}

/// Patch-sequence self-attention encoder: patch embedding, sinusoidal
/// positions, `layers` residual multi-head attention blocks, mean pooling and
/// a final projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: Dense,
    blocks: Vec<Block>,
    head: Dense,
    positions: Array2<f64>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// Post-softmax weights, indexed `sample * heads + head`.
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array2<f64>,
}

impl EncoderCache {
    /// Attention weight matrices of one block, one `C×C` matrix per
    /// (sample, head).
    pub fn attention(&self, block: usize) -> &[Array2<f64>] {
        &self.blocks[block].attn
    }
}

pub(crate) fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let md = cfg.model_dim;
        let embed = Dense::new(
            params,
            &format!("{prefix}.embed"),
            cfg.patch_size(),
            md,
            1.0,
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                qkv: Dense::new(
                    params,
                    &format!("{prefix}.block{l}.qkv"),
                    md,
                    3 * md,
                    1.0,
                    rng,
                ),
                out: Dense::new(params, &format!("{prefix}.block{l}.out"), md, md, 1.0, rng),
            })
            .collect();
        let head = Dense::new(
            params,
            &format!("{prefix}.proj"),
            md,
            cfg.output_dim,
            1.0,
            rng,
        );
        let positions = if cfg.positional {
            sinusoidal_positions(cfg.num_patches, md)
        } else {
            Array2::zeros((cfg.num_patches, md))
        };
        Ok(Encoder {
            cfg,
            embed,
            blocks,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes a batch of embeddings (`B×H`) into `B×D_f`.
    pub fn forward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        crate::linalg::check_dim(self.cfg.input_dim, x.ncols())?;
        let batch = x.nrows();
        let c = self.cfg.num_patches;
        let md = self.cfg.model_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let patches = Array2::from_shape_vec(
            (batch * c, self.cfg.patch_size()),
            x.iter().copied().collect(),
        )
        .expect("patch reshape");
        let mut e = self.embed.forward(params, patches.view());
        for b in 0..batch {
            let mut rows = e.slice_mut(s![b * c..(b + 1) * c, ..]);
            rows += &self.positions;
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let qkv = block.qkv.forward(params, e.view());
            let mut concat = Array2::zeros((batch * c, md));
            let mut attn = Vec::with_capacity(batch * self.cfg.heads);
            for b in 0..batch {
                let rows = b * c..(b + 1) * c;
                for h in 0..self.cfg.heads {
                    let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                    let k = qkv.slice(s![rows.clone(), md + h * dh..md + (h + 1) * dh]);
                    let v = qkv.slice(s![rows.clone(), 2 * md + h * dh..2 * md + (h + 1) * dh]);
                    let a = softmax_rows(&(q.dot(&k.t()) * scale));
                    concat
                        .slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                        .assign(&a.dot(&v));
                    attn.push(a);
                }
            }
            let y = block.out.forward(params, concat.view());
            let next = &e + &y;
            caches.push(BlockCache {
                input: e,
                qkv,
                attn,
                concat,
            });
            e = next;
        }

        let mut pooled = Array2::zeros((batch, md));
        for b in 0..batch {
            let mean = e
                .slice(s![b * c..(b + 1) * c, ..])
                .mean_axis(Axis(0))
                .expect("non-empty patch set");
            pooled.row_mut(b).assign(&mean);
        }
        let out = self.head.forward(params, pooled.view());
        Ok((
            out,
            EncoderCache {
                patches,
                blocks: caches,
                pooled,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/d output` (`B×D_f`).
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &EncoderCache,
        dout: ArrayView2<f64>,
        grads: &mut Gradients,
    ) {
        let batch = dout.nrows();
        let c = self.cfg.num_patches;
        let md = self.cfg.model_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let dpooled = self.head.backward(params, cache.pooled.view(), dout, grads);
        let mut de = Array2::zeros((batch * c, md));
        for b in 0..batch {
            let share = &dpooled.row(b) / c as f64;
            for r in b * c..(b + 1) * c {
                de.row_mut(r).assign(&share);
            }
        }

        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dconcat = block
                .out
                .backward(params, bc.concat.view(), de.view(), grads);
            let mut dqkv = Array2::zeros((batch * c, 3 * md));
            for b in 0..batch {
                let rows = b * c..(b + 1) * c;
                for h in 0..self.cfg.heads {
                    let qc = h * dh..(h + 1) * dh;
                    let kc = md + h * dh..md + (h + 1) * dh;
                    let vc = 2 * md + h * dh..2 * md + (h + 1) * dh;
                    let a = &bc.attn[b * self.cfg.heads + h];
                    let q = bc.qkv.slice(s![rows.clone(), qc.clone()]);
                    let k = bc.qkv.slice(s![rows.clone(), kc.clone()]);
                    let v = bc.qkv.slice(s![rows.clone(), vc.clone()]);
                    let d_o = dconcat.slice(s![rows.clone(), qc.clone()]);

                    let da = d_o.dot(&v.t());
                    let dv = a.t().dot(&d_o);
                    let inner = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ds = (a * &(&da - &inner)) * scale;
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![rows.clone(), qc]).assign(&dq);
                    dqkv.slice_mut(s![rows.clone(), kc]).assign(&dk);
                    dqkv.slice_mut(s![rows.clone(), vc]).assign(&dv);
                }
            }
            let dinput = block
                .qkv
                .backward(params, bc.input.view(), dqkv.view(), grads);
            de += &dinput;
        }
        self.embed
            .backward_params(cache.patches.view(), de.view(), grads);
    }
}
