//! Bilateral asymmetry encoder.
//!
//! Two bias-free 1×1 attention branches score every spatial location of a
//! `B×C×H×W` feature map; a softmax over the flattened `H·W` grid turns each
//! score map into a distribution. Each branch pools the map into a
//! `C`-vector, the absolute difference of the two descriptors encodes
//! asymmetry, and a Linear → LayerNorm → GELU → Dropout block fuses the
//! three into the embedding `h`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape, Var};
use crate::seed::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaeError {
    #[error("feature map needs shape B×C×H×W with C ≥ 1 and H·W ≥ 2, got {0:?}")]
    BadFeatureShape(Vec<usize>),
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Backbone activations, `B×C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array);

impl FeatureMap {
    pub fn new(values: Array) -> Result<Self, BaeError> {
        match *values.shape() {
            [_, c, h, w] if c >= 1 && h * w >= 2 => {}
            _ => return Err(BaeError::BadFeatureShape(values.shape().to_vec())),
        }
        if !values.is_finite() {
            return Err(BaeError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// Spatial attention distributions of the two branches, each `B×1×H×W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPair {
    pub alpha_m: Array,
    pub alpha_lat: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaeEmbedding {
    pub z_m: Array,
    pub z_lat: Array,
    pub f_asym: Array,
    pub h: Array,
}

/// Learnable encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaeParams {
    /// Medial-branch 1×1 attention weights, length `C`.
    pub w_m: Array,
    /// Lateral-branch 1×1 attention weights, length `C`.
    pub w_lat: Array,
    /// Fusion projection `3C → C`.
    pub fuse_w: Array,
    pub fuse_b: Array,
    pub ln_gain: Array,
    pub ln_bias: Array,
}

impl BaeParams {
    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        let attn_bound = 1.0 / (channels as f64).sqrt();
        let fuse_bound = (6.0 / (4 * channels) as f64).sqrt();
        let mut uniform = |n: usize, bound: f64| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        Self {
            w_m: Array::from_vec(uniform(channels, attn_bound)),
            w_lat: Array::from_vec(uniform(channels, attn_bound)),
            fuse_w: Array::new(vec![3 * channels, channels], uniform(3 * channels * channels, fuse_bound)).expect("shape"),
            fuse_b: Array::zeros(&[channels]),
            ln_gain: Array::full(&[channels], 1.0),
            ln_bias: Array::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_m.len()
    }
}

/// [`BaeParams`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BaeVars {
    pub w_m: Var,
    pub w_lat: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl BaeVars {
    pub fn leaves(tape: &mut Tape, p: &BaeParams) -> Self {
        Self {
            w_m: tape.leaf(p.w_m.clone()),
            w_lat: tape.leaf(p.w_lat.clone()),
            fuse_w: tape.leaf(p.fuse_w.clone()),
            fuse_b: tape.leaf(p.fuse_b.clone()),
            ln_gain: tape.leaf(p.ln_gain.clone()),
            ln_bias: tape.leaf(p.ln_bias.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, p: &BaeParams) -> Self {
        Self {
            w_m: tape.constant(p.w_m.clone()),
            w_lat: tape.constant(p.w_lat.clone()),
            fuse_w: tape.constant(p.fuse_w.clone()),
            fuse_b: tape.constant(p.fuse_b.clone()),
            ln_gain: tape.constant(p.ln_gain.clone()),
            ln_bias: tape.constant(p.ln_bias.clone()),
        }
    }
}

/// Tape nodes produced by one encoder pass. Attention maps are `[B, H·W]`.
#[derive(Debug, Clone, Copy)]
pub struct BaeNodes {
    pub att_m: Var,
    pub att_lat: Var,
    pub z_m: Var,
    pub z_lat: Var,
    pub f_asym: Var,
    pub h: Var,
}

/// Dual spatial-softmax attention over a `[B, C, H, W]` node.
pub fn attention_nodes(tape: &mut Tape, f: Var, w_m: Var, w_lat: Var) -> Result<(Var, Var), DiffError> {
    let s_m = tape.channel_dot(f, w_m)?;
    let s_lat = tape.channel_dot(f, w_lat)?;
    Ok((tape.softmax_rows(s_m)?, tape.softmax_rows(s_lat)?))
}

/// Attention pooling of both branches plus the asymmetry feature.
pub fn pool_nodes(tape: &mut Tape, f: Var, att_m: Var, att_lat: Var) -> Result<(Var, Var, Var), DiffError> {
    let z_m = tape.attn_pool(f, att_m)?;
    let z_lat = tape.attn_pool(f, att_lat)?;
    let diff = tape.sub(z_m, z_lat)?;
    let f_asym = tape.abs(diff);
    Ok((z_m, z_lat, f_asym))
}

/// `φ([z_M; z_Lat; F_asym])`. `dropout_mask`, when given, is an already
/// scaled keep-mask of shape `[B, C]` (training mode).
pub fn fuse_nodes(
    tape: &mut Tape,
    vars: &BaeVars,
    z_m: Var,
    z_lat: Var,
    f_asym: Var,
    dropout_mask: Option<Array>,
) -> Result<Var, DiffError> {
    let cat = tape.concat_cols(&[z_m, z_lat, f_asym])?;
    let lin = tape.matmul(cat, vars.fuse_w)?;
    let lin = tape.add_bias(lin, vars.fuse_b)?;
    let normed = tape.layer_norm(lin, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?;
    let act = tape.gelu(normed);
    match dropout_mask {
        Some(mask) => {
            let m = tape.constant(mask);
            tape.mul(act, m)
        }
        None => Ok(act),
    }
}

/// Full encoder pass on the tape.
pub fn encode(tape: &mut Tape, f: Var, vars: &BaeVars, dropout_mask: Option<Array>) -> Result<BaeNodes, DiffError> {
    let (att_m, att_lat) = attention_nodes(tape, f, vars.w_m, vars.w_lat)?;
    let (z_m, z_lat, f_asym) = pool_nodes(tape, f, att_m, att_lat)?;
    let h = fuse_nodes(tape, vars, z_m, z_lat, f_asym, dropout_mask)?;
    Ok(BaeNodes { att_m, att_lat, z_m, z_lat, f_asym, h })
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Array {
    let mut mask = Array::zeros(shape);
    let keep = 1.0 / (1.0 - rate);
    for v in mask.data_mut() {
        if rng.random::<f64>() >= rate {
            *v = keep;
        }
    }
    mask
}

fn reshape_attention(att: &Array, f: &FeatureMap) -> Array {
    att.clone().reshape(&[f.batch(), 1, f.height(), f.width()]).expect("attention covers H·W")
}

/// Spatial attention maps for weights of length `C`.
pub fn attention_maps(f: &FeatureMap, w_m: &[f64], w_lat: &[f64]) -> Result<AttentionPair, BaeError> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.array().clone());
    let wm = tape.constant(Array::from_vec(w_m.to_vec()));
    let wl = tape.constant(Array::from_vec(w_lat.to_vec()));
    let (am, al) = attention_nodes(&mut tape, fv, wm, wl)?;
    Ok(AttentionPair {
        alpha_m: reshape_attention(tape.value(am), f),
        alpha_lat: reshape_attention(tape.value(al), f),
    })
}

/// Pooled descriptors `(z_m, z_lat, f_asym)`, each `[B, C]`.
pub fn pool_and_asym(f: &FeatureMap, att: &AttentionPair) -> Result<(Array, Array, Array), BaeError> {
    let hw = f.height() * f.width();
    let flat = |a: &Array| a.clone().reshape(&[f.batch(), hw]);
    let mut tape = Tape::new();
    let fv = tape.constant(f.array().clone());
    let am = tape.constant(flat(&att.alpha_m)?);
    let al = tape.constant(flat(&att.alpha_lat)?);
    let (z_m, z_lat, f_asym) = pool_nodes(&mut tape, fv, am, al)?;
    Ok((tape.value(z_m).clone(), tape.value(z_lat).clone(), tape.value(f_asym).clone()))
}

/// Fusion MLP. Dropout is applied only when `train_rng` is given.
pub fn fuse(
    params: &BaeParams,
    z_m: &Array,
    z_lat: &Array,
    f_asym: &Array,
    dropout: f64,
    train_rng: Option<&mut Rng>,
) -> Result<Array, BaeError> {
    let mut tape = Tape::new();
    let vars = BaeVars::constants(&mut tape, params);
    let zm = tape.constant(z_m.clone());
    let zl = tape.constant(z_lat.clone());
    let fa = tape.constant(f_asym.clone());
    let mask = train_rng.map(|rng| dropout_mask(z_m.shape(), dropout, rng));
    let h = fuse_nodes(&mut tape, &vars, zm, zl, fa, mask)?;
    Ok(tape.value(h).clone())
}

/// Full encoder on plain arrays (evaluation mode).
pub fn embed(params: &BaeParams, f: &FeatureMap) -> Result<(AttentionPair, BaeEmbedding), BaeError> {
    let mut tape = Tape::new();
    let vars = BaeVars::constants(&mut tape, params);
    let fv = tape.constant(f.array().clone());
    let nodes = encode(&mut tape, fv, &vars, None)?;
    let att = AttentionPair {
        alpha_m: reshape_attention(tape.value(nodes.att_m), f),
        alpha_lat: reshape_attention(tape.value(nodes.att_lat), f),
    };
    let emb = BaeEmbedding {
        z_m: tape.value(nodes.z_m).clone(),
        z_lat: tape.value(nodes.z_lat).clone(),
        f_asym: tape.value(nodes.f_asym).clone(),
        h: tape.value(nodes.h).clone(),
    };
    Ok((att, emb))
}

/// Left-half mass of the medial map minus left-half mass of the lateral map,
/// per batch item. The left half is the columns `v < W/2`.
pub fn asymmetry_index(att: &AttentionPair) -> Result<Vec<f64>, BaeError> {
    let shape = att.alpha_m.shape();
    let [b, _, h, w] = *shape else {
        return Err(BaeError::BadFeatureShape(shape.to_vec()));
    };
    if att.alpha_lat.shape() != shape {
        return Err(DiffError::Shape { op: "asymmetry_index", lhs: shape.to_vec(), rhs: att.alpha_lat.shape().to_vec() }.into());
    }
    let left = |a: &Array, bi: usize| -> f64 {
        let grid = &a.data()[bi * h * w..(bi + 1) * h * w];
        grid.chunks(w).map(|row| row[..w / 2].iter().sum::<f64>()).sum()
    };
    Ok((0..b).map(|bi| left(&att.alpha_m, bi) - left(&att.alpha_lat, bi)).collect())
}
