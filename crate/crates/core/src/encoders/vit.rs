//! A compact transformer patch encoder. Stands in for foundation-model
//! backbones behind the [`Encoder`](super::Encoder) interface; external
//! weights with the same layout can be loaded through the checkpoint
//! machinery.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Param, Var};
use crate::patchgroup::Patch;
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

use super::{BatchOutput, Encoder};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub d_enc: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub input_side: usize,
    /// post-block outputs exposed as intermediates (0-based block indices);
    /// empty = final quarter of blocks, evenly spaced
    pub layer_ids: Vec<usize>,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            d_enc: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 14,
            input_side: 70,
            layer_ids: vec![],
        }
    }
}

impl VitConfig {
    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch
    }

    pub fn seq_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Defaulting rule for exposed intermediates: the final quarter of
    /// blocks, evenly spaced, at least one.
    pub fn resolved_layer_ids(&self) -> Vec<usize> {
        if !self.layer_ids.is_empty() {
            return self.layer_ids.clone();
        }
        let count = (self.blocks / 4).max(1);
        let first = self.blocks - count;
        (first..self.blocks).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(CoreError::Config("vit dims must be positive".into()));
        }
        if self.d_enc % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_enc {} not divisible by heads {}",
                self.d_enc, self.heads
            )));
        }
        if self.input_side % self.patch != 0 {
            return Err(CoreError::Config(format!(
                "input side {} not divisible by patch {}",
                self.input_side, self.patch
            )));
        }
        for &l in &self.layer_ids {
            if l >= self.blocks {
                return Err(CoreError::Config(format!(
                    "layer id {l} out of range for {} blocks",
                    self.blocks
                )));
            }
        }
        Ok(())
    }
}

struct Block {
    ln1_g: Param,
    ln1_b: Param,
    qkv_w: Param,
    qkv_b: Param,
    proj_w: Param,
    proj_b: Param,
    ln2_g: Param,
    ln2_b: Param,
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
}

pub struct ToyVit {
    pub cfg: VitConfig,
    pub frozen: bool,
    patch_w: Param,
    patch_b: Param,
    pos: Param,
    blocks: Vec<Block>,
    final_g: Param,
    final_b: Param,
}

impl ToyVit {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::substream(seed, 0x7669_7431); // "vit1"
        let d = cfg.d_enc;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let hidden = d * cfg.mlp_ratio;
        let s = cfg.seq_len();

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for bi in 0..cfg.blocks {
            blocks.push(Block {
                ln1_g: Param::new(format!("block{bi}.ln1.g"), ones(1, d)),
                ln1_b: Param::new(format!("block{bi}.ln1.b"), Matrix::zeros(1, d)),
                qkv_w: Param::new(
                    format!("block{bi}.qkv.w"),
                    Matrix::randn_scaled(d, 3 * d, d, &mut rng),
                ),
                qkv_b: Param::new(format!("block{bi}.qkv.b"), Matrix::zeros(1, 3 * d)),
                proj_w: Param::new(
                    format!("block{bi}.proj.w"),
                    Matrix::randn_scaled(d, d, d, &mut rng),
                ),
                proj_b: Param::new(format!("block{bi}.proj.b"), Matrix::zeros(1, d)),
                ln2_g: Param::new(format!("block{bi}.ln2.g"), ones(1, d)),
                ln2_b: Param::new(format!("block{bi}.ln2.b"), Matrix::zeros(1, d)),
                fc1_w: Param::new(
                    format!("block{bi}.fc1.w"),
                    Matrix::randn_scaled(d, hidden, d, &mut rng),
                ),
                fc1_b: Param::new(format!("block{bi}.fc1.b"), Matrix::zeros(1, hidden)),
                fc2_w: Param::new(
                    format!("block{bi}.fc2.w"),
                    Matrix::randn_scaled(hidden, d, hidden, &mut rng),
                ),
                fc2_b: Param::new(format!("block{bi}.fc2.b"), Matrix::zeros(1, d)),
            });
        }
        let mut pos = Matrix::randn_scaled(s, d, 1, &mut rng);
        pos.scale_assign(0.02);
        Ok(ToyVit {
            frozen: false,
            patch_w: Param::new(
                "patch_embed.w",
                Matrix::randn_scaled(patch_dim, d, patch_dim, &mut rng),
            ),
            patch_b: Param::new("patch_embed.b", Matrix::zeros(1, d)),
            pos: Param::new("pos_embed", pos),
            blocks,
            final_g: Param::new("final_norm.g", ones(1, d)),
            final_b: Param::new("final_norm.b", Matrix::zeros(1, d)),
            cfg,
        })
    }

    pub fn frozen_copy(&self) -> ToyVit
    where
        Self: Sized,
    {
        ToyVit {
            cfg: self.cfg.clone(),
            frozen: true,
            patch_w: self.patch_w.clone(),
            patch_b: self.patch_b.clone(),
            pos: self.pos.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: b.ln1_g.clone(),
                    ln1_b: b.ln1_b.clone(),
                    qkv_w: b.qkv_w.clone(),
                    qkv_b: b.qkv_b.clone(),
                    proj_w: b.proj_w.clone(),
                    proj_b: b.proj_b.clone(),
                    ln2_g: b.ln2_g.clone(),
                    ln2_b: b.ln2_b.clone(),
                    fc1_w: b.fc1_w.clone(),
                    fc1_b: b.fc1_b.clone(),
                    fc2_w: b.fc2_w.clone(),
                    fc2_b: b.fc2_b.clone(),
                })
                .collect(),
            final_g: self.final_g.clone(),
            final_b: self.final_b.clone(),
        }
    }

    fn bind(&self, g: &mut Graph, p: &Param) -> Var {
        if self.frozen {
            g.constant_arc(p.value.clone())
        } else {
            g.param(p)
        }
    }

    /// Flattens patch pixels into the (b*s) x (3*patch^2) token input matrix.
    fn tokenize(&self, patches: &[Patch]) -> Result<Matrix> {
        let p = self.cfg.patch;
        let gs = self.cfg.grid_side();
        let s = self.cfg.seq_len();
        let pd = p * p * 3;
        let mut m = Matrix::zeros(patches.len() * s, pd);
        for (bi, patch) in patches.iter().enumerate() {
            if patch.side != self.cfg.input_side {
                return Err(CoreError::InvalidArgument(format!(
                    "patch side {} does not match encoder input {}",
                    patch.side, self.cfg.input_side
                )));
            }
            for u in 0..gs {
                for v in 0..gs {
                    let row = m.row_mut(bi * s + u * gs + v);
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            let py = u * p + dy;
                            let px = v * p + dx;
                            let base = (py * patch.side + px) * 3;
                            row[k] = patch.pixels[base] as f64;
                            row[k + 1] = patch.pixels[base + 1] as f64;
                            row[k + 2] = patch.pixels[base + 2] as f64;
                            k += 3;
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

fn ones(r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, vec![1.0; r * c])
}

impl Encoder for ToyVit {
    fn d_enc(&self) -> usize {
        self.cfg.d_enc
    }

    fn patch_size(&self) -> usize {
        self.cfg.patch
    }

    fn input_side(&self) -> usize {
        self.cfg.input_side
    }

    fn forward_batch(&self, g: &mut Graph, patches: &[Patch]) -> Result<BatchOutput> {
        let s = self.cfg.seq_len();
        let b = patches.len();
        let tokens_in = g.constant(self.tokenize(patches)?);
        let pw = self.bind(g, &self.patch_w);
        let pb = self.bind(g, &self.patch_b);
        let pos = self.bind(g, &self.pos);
        let embedded = g.matmul(tokens_in, pw);
        let embedded = g.add_row_broadcast(embedded, pb);
        let mut x = g.add_tile_rows(embedded, pos);

        let wanted = self.cfg.resolved_layer_ids();
        let mut intermediates = vec![Var(0); wanted.len()];
        for (bi, blk) in self.blocks.iter().enumerate() {
            let ln1g = self.bind(g, &blk.ln1_g);
            let ln1b = self.bind(g, &blk.ln1_b);
            let normed = g.layer_norm_rows(x, ln1g, ln1b, 1e-5);
            let qkvw = self.bind(g, &blk.qkv_w);
            let qkvb = self.bind(g, &blk.qkv_b);
            let qkv = g.matmul(normed, qkvw);
            let qkv = g.add_row_broadcast(qkv, qkvb);
            let att = g.mha(qkv, b, s, self.cfg.heads);
            let projw = self.bind(g, &blk.proj_w);
            let projb = self.bind(g, &blk.proj_b);
            let att = g.matmul(att, projw);
            let att = g.add_row_broadcast(att, projb);
            x = g.add(x, att);

            let ln2g = self.bind(g, &blk.ln2_g);
            let ln2b = self.bind(g, &blk.ln2_b);
            let normed = g.layer_norm_rows(x, ln2g, ln2b, 1e-5);
            let fc1w = self.bind(g, &blk.fc1_w);
            let fc1b = self.bind(g, &blk.fc1_b);
            let h = g.matmul(normed, fc1w);
            let h = g.add_row_broadcast(h, fc1b);
            let h = g.gelu(h);
            let fc2w = self.bind(g, &blk.fc2_w);
            let fc2b = self.bind(g, &blk.fc2_b);
            let h = g.matmul(h, fc2w);
            let h = g.add_row_broadcast(h, fc2b);
            x = g.add(x, h);

            for (slot, &want) in wanted.iter().enumerate() {
                if want == bi {
                    intermediates[slot] = x;
                }
            }
        }
        let fg = self.bind(g, &self.final_g);
        let fb = self.bind(g, &self.final_b);
        let tokens = g.layer_norm_rows(x, fg, fb, 1e-5);
        let pooled = g.segment_mean_rows(tokens, s);
        Ok(BatchOutput {
            tokens,
            pooled,
            intermediates,
            seq: s,
        })
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b,
                &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b,
            ]);
        }
        out.push(&self.final_g);
        out.push(&self.final_b);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(&mut b.qkv_w);
            out.push(&mut b.qkv_b);
            out.push(&mut b.proj_w);
            out.push(&mut b.proj_b);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(&mut b.fc1_w);
            out.push(&mut b.fc1_b);
            out.push(&mut b.fc2_w);
            out.push(&mut b.fc2_b);
        }
        out.push(&mut self.final_g);
        out.push(&mut self.final_b);
        out
    }
}
