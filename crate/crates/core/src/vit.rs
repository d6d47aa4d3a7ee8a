//! Vision Transformer force regressor.
//!
//! Frames are cut into non-overlapping square patches, each patch is
//! projected to a token, a learned regression token is prepended and learned
//! position embeddings are added. A stack of pre-norm encoder blocks follows;
//! the regression token's final state goes through a layer norm and a linear
//! head to give one force per frame.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    decode_params, encode_params, Graph, ParamError, ParamIndex, ParamSet, Real, Tensor,
    TensorError, Var, LAYER_NORM_EPS,
};
use crate::seed::sub_seed;

/// Standard deviation of weight, token and position-embedding init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head_output: usize,
}

impl Default for ViTConfig {
    /// Desk-scale regressor for 2-channel 64x64 frames.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 2,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            head_output: 1,
        }
    }
}

impl ViTConfig {
    /// Patch 8 at 224 pixels, base width and depth.
    pub fn base_224(in_channels: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 8,
            in_channels,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            head_output: 1,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let bad = |key: &'static str, reason: String| Err(VitError::Config { key, reason });
        for (key, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(
                "image_size",
                format!(
                    "{} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(
                "num_heads",
                format!(
                    "embed_dim {} is not divisible by {}",
                    self.embed_dim, self.num_heads
                ),
            );
        }
        if self.head_output != 1 {
            return bad(
                "head_output",
                format!("only a scalar head is supported, got {}", self.head_output),
            );
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per sample, regression token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Name and shape of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.embed_dim, self.mlp_dim());
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("reg_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.seq_len(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.gamma"), vec![d]),
                (p("norm1.beta"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.gamma"), vec![d]),
                (p("norm2.beta"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, m]),
                (p("mlp.fc1.bias"), vec![m]),
                (p("mlp.fc2.weight"), vec![m, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.head_output]),
            ("head.bias".to_string(), vec![self.head_output]),
        ]);
        out
    }
}

const PARAMS_PER_BLOCK: usize = 16;
const LEADING_PARAMS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum VitError {
    #[error("invalid model config: {key} {reason}")]
    Config { key: &'static str, reason: String },
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path} not found")]
    CheckpointNotFound { path: PathBuf },
    #[error("malformed checkpoint {path}: {reason}")]
    MalformedCheckpoint { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Regressor parameters together with the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel<T> {
    pub config: ViTConfig,
    pub params: ParamSet<T>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Seeded initialization: projections and the regression token from a
/// normal truncated at two standard deviations, position embeddings from a
/// plain normal, biases zero, layer norms at identity.
pub fn init_params<T: Real>(config: &ViTConfig, seed: u64) -> Result<ViTModel<T>, VitError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "vit.init"));
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".gamma") {
            vec![T::one(); n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![T::zero(); n]
        } else if name == "pos_embed" {
            (0..n)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect()
        } else {
            (0..n)
                .map(|_| T::from_f64(truncated_normal(&mut rng, INIT_STD)))
                .collect()
        };
        params.push(name, Tensor::new(&shape, data)?);
    }
    Ok(ViTModel {
        config: config.clone(),
        params,
    })
}

/// Graph handles of one encoder block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// Graph handles of every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// All parameters in storage order.
    pub all: Vec<Var>,
    pub patch_embed: (Var, Var),
    pub reg_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub head: (Var, Var),
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[B, 1]` predictions.
    pub output: Var,
    /// `[seq, seq]` attention matrices, ordered block, sample, head.
    pub attention: Vec<Var>,
}

impl<T: Real> ViTModel<T> {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Puts every parameter on `g`; gradients are tracked when `g` records.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        let all: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect();
        self.vars_from(all)
    }

    /// Wraps existing graph handles, one per parameter in storage order.
    ///
    /// Panics if `all` does not hold exactly one handle per parameter.
    pub fn vars_from(&self, all: Vec<Var>) -> ModelVars {
        assert_eq!(all.len(), self.params.len(), "one handle per parameter");
        let pair = |i: usize| (all[i], all[i + 1]);
        let blocks = (0..self.config.depth)
            .map(|b| {
                let o = LEADING_PARAMS + b * PARAMS_PER_BLOCK;
                BlockVars {
                    norm1: pair(o),
                    q: pair(o + 2),
                    k: pair(o + 4),
                    v: pair(o + 6),
                    proj: pair(o + 8),
                    norm2: pair(o + 10),
                    fc1: pair(o + 12),
                    fc2: pair(o + 14),
                }
            })
            .collect();
        let tail = LEADING_PARAMS + self.config.depth * PARAMS_PER_BLOCK;
        ModelVars {
            patch_embed: pair(0),
            reg_token: all[2],
            pos_embed: all[3],
            blocks,
            norm: pair(tail),
            head: pair(tail + 2),
            all,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize, VitError> {
        let c = &self.config;
        match x.shape() {
            [b, ch, h, w] if *ch == c.in_channels && *h == c.image_size && *w == c.image_size => {
                Ok(*b)
            }
            _ => Err(VitError::InputShape {
                expected: vec![0, c.in_channels, c.image_size, c.image_size],
                got: x.shape().to_vec(),
            }),
        }
    }

    /// Patch tokens `[B * num_patches, embed_dim]` for a `[B, C, H, W]` batch.
    pub fn patch_embed_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        x: &Tensor<T>,
    ) -> Result<Var, VitError> {
        self.check_input(x)?;
        let patches = g.constant(patchify(x, self.config.patch_size)?);
        let tokens = g.matmul(patches, vars.patch_embed.0)?;
        Ok(g.add_bias(tokens, vars.patch_embed.1)?)
    }

    /// Patch tokens `[num_patches, embed_dim]` of a single `[C, H, W]` frame.
    pub fn patch_embed(&self, frame: &Tensor<T>) -> Result<Tensor<T>, VitError> {
        let mut shape = vec![1];
        shape.extend_from_slice(frame.shape());
        let batch = frame.clone().reshape(&shape)?;
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g);
        let tokens = self.patch_embed_graph(&mut g, &vars, &batch)?;
        Ok(g.value(tokens).clone())
    }

    /// Records the full forward pass of a `[B, C, H, W]` batch on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        x: &Tensor<T>,
    ) -> Result<ForwardTrace, VitError> {
        let b = self.check_input(x)?;
        let c = &self.config;
        let (n, seq) = (c.num_patches(), c.seq_len());
        let tokens = self.patch_embed_graph(g, vars, x)?;

        let mut rows = Vec::with_capacity(b);
        for s in 0..b {
            let patch_rows = g.slice_rows(tokens, s * n, n)?;
            let with_reg = g.concat_rows(&[vars.reg_token, patch_rows])?;
            rows.push(g.add(with_reg, vars.pos_embed)?);
        }
        let mut h = g.concat_rows(&rows)?;

        let mut attention = Vec::new();
        for block in &vars.blocks {
            let (out, att) = encoder_block(g, h, block, seq, c.num_heads)?;
            h = out;
            attention.extend(att);
        }

        let reg_rows = (0..b)
            .map(|s| g.slice_rows(h, s * seq, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let reg = g.concat_rows(&reg_rows)?;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let normed = g.layer_norm(reg, vars.norm.0, vars.norm.1, eps)?;
        let out = g.matmul(normed, vars.head.0)?;
        let output = g.add_bias(out, vars.head.1)?;
        Ok(ForwardTrace { output, attention })
    }

    /// `[B, 1]` predicted forces without gradient recording.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, VitError> {
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g);
        let trace = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(trace.output).clone())
    }
}

/// One pre-norm encoder block over `x = [B * seq, D]`.
///
/// Returns the new tokens and the per-sample, per-head attention matrices.
pub fn encoder_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    seq: usize,
    num_heads: usize,
) -> Result<(Var, Vec<Var>), TensorError> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let shape = g.value(x).shape().to_vec();
    let (total, dim) = match shape[..] {
        [r, d] if seq > 0 && r % seq == 0 && num_heads > 0 && d % num_heads == 0 => (r, d),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "encoder_block",
                left: shape,
                right: vec![seq, num_heads],
            })
        }
    };
    let batch = total / seq;
    let dh = dim / num_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let h = g.layer_norm(x, p.norm1.0, p.norm1.1, eps)?;
    let linear = |g: &mut Graph<T>, v: Var, (w, b): (Var, Var)| -> Result<Var, TensorError> {
        let y = g.matmul(v, w)?;
        g.add_bias(y, b)
    };
    let q = linear(g, h, p.q)?;
    let k = linear(g, h, p.k)?;
    let v = linear(g, h, p.v)?;

    let mut attention = Vec::with_capacity(batch * num_heads);
    let mut per_sample = Vec::with_capacity(batch);
    for s in 0..batch {
        let (qs, ks, vs) = (
            g.slice_rows(q, s * seq, seq)?,
            g.slice_rows(k, s * seq, seq)?,
            g.slice_rows(v, s * seq, seq)?,
        );
        let mut heads = Vec::with_capacity(num_heads);
        for hd in 0..num_heads {
            let qh = g.slice_cols(qs, hd * dh, dh)?;
            let kh = g.slice_cols(ks, hd * dh, dh)?;
            let vh = g.slice_cols(vs, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            attention.push(att);
            heads.push(g.matmul(att, vh)?);
        }
        per_sample.push(g.concat_cols(&heads)?);
    }
    let mixed = g.concat_rows(&per_sample)?;
    let projected = linear(g, mixed, p.proj)?;
    let x = g.add(x, projected)?;

    let h = g.layer_norm(x, p.norm2.0, p.norm2.1, eps)?;
    let h = linear(g, h, p.fc1)?;
    let h = g.gelu(h);
    let h = linear(g, h, p.fc2)?;
    Ok((g.add(x, h)?, attention))
}

/// Rearranges `[B, C, H, W]` into `[B * num_patches, C * P * P]`.
///
/// Patches are taken row-major over the image; each patch is flattened in
/// channel, row, column order.
pub fn patchify<T: Real>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>, VitError> {
    let (b, c, h, w) = match x.shape() {
        &[b, c, h, w] => (b, c, h, w),
        other => {
            return Err(VitError::InputShape {
                expected: vec![0, 0, 0, 0],
                got: other.to_vec(),
            })
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(VitError::Config {
            key: "patch_size",
            reason: format!("{h}x{w} input is not divisible into {patch}-pixel patches"),
        });
    }
    let (ph, pw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for s in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for dy in 0..patch {
                        let row = ((s * c + ch) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b * ph * pw, pd], out)?)
}

/// Index document stored next to a checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub config: ViTConfig,
    pub params: ParamIndex,
}

pub const CHECKPOINT_FORMAT: &str = "evtforce-vit-v1";

/// Path of the JSON index belonging to the blob at `path`.
pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the parameter blob to `path` and its index to `<path>.json`.
pub fn save_checkpoint<T: Real>(model: &ViTModel<T>, path: &Path) -> Result<(), VitError> {
    let (blob, params) =
        encode_params(&model.params).map_err(|e| VitError::MalformedCheckpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        params,
    };
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| VitError::Io { path: p, source }
    };
    fs::write(path, blob).map_err(io_err(path))?;
    let ip = index_path(path);
    fs::write(&ip, json + "\n").map_err(io_err(&ip))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ViTModel<T>, VitError> {
    let read = |p: &Path| -> Result<Vec<u8>, VitError> {
        fs::read(p).map_err(|source| match source.kind() {
            io::ErrorKind::NotFound => VitError::CheckpointNotFound {
                path: p.to_path_buf(),
            },
            _ => VitError::Io {
                path: p.to_path_buf(),
                source,
            },
        })
    };
    let ip = index_path(path);
    let malformed = |reason: String| VitError::MalformedCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let index: CheckpointIndex =
        serde_json::from_slice(&read(&ip)?).map_err(|e| malformed(e.to_string()))?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(malformed(format!("unknown format {:?}", index.format)));
    }
    index
        .config
        .validate()
        .map_err(|e| malformed(e.to_string()))?;
    let blob = read(path)?;
    let loaded: ParamSet<T> =
        decode_params(&blob, &index.params).map_err(|e: ParamError| malformed(e.to_string()))?;

    let expected = index.config.param_shapes();
    let total: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(malformed(format!(
            "blob has {} bytes, config needs {}",
            blob.len(),
            total * 4
        )));
    }
    let mut params = ParamSet::new();
    for (name, shape) in expected {
        let t = loaded
            .get(&name)
            .ok_or_else(|| malformed(format!("missing parameter {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(malformed(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        params.push(name, t.clone());
    }
    Ok(ViTModel {
        config: index.config,
        params,
    })
}
