//! Network parameters and the forward pass.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::synth::Image;
use super::{discretize, ModelConfig, ModelError};
use crate::bae::{self, AttentionPair, BaeEmbedding, BaeNodes, BaeParams, BaeVars};
use crate::diffcore::{Array, Tape, Var};
use crate::nig::{self, graph, NigParams, OA_THRESHOLD};
use crate::par::Exec;
use crate::seed::Rng;

/// Images per tape during evaluation.
const EVAL_CHUNK: usize = 50;

/// Initial bias of the raw head output: γ starts mid-scale.
const HEAD_BIAS_INIT: [f64; 4] = [2.0, 0.0, 0.0, 0.0];

/// All learnable arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    /// `(weight [c_out, c_in, 3, 3], bias [c_out])` per stage.
    pub convs: Vec<(Array, Array)>,
    pub bae: BaeParams,
    pub head1_w: Array,
    pub head1_b: Array,
    pub head2_w: Array,
    pub head2_b: Array,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

impl NetParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut c_in = 1;
        for &c_out in &cfg.channels {
            let fan_in = (c_in * 9) as f64;
            convs.push((uniform(rng, &[c_out, c_in, 3, 3], (6.0 / fan_in).sqrt()), Array::zeros(&[c_out])));
            c_in = c_out;
        }
        let c = cfg.embed_dim();
        let bae = BaeParams::init(c, rng);
        let head1_w = uniform(rng, &[c, cfg.head_hidden], (6.0 / c as f64).sqrt());
        let head2_w = uniform(rng, &[cfg.head_hidden, 4], 1.0 / (cfg.head_hidden as f64).sqrt());
        Self {
            convs,
            bae,
            head1_w,
            head1_b: Array::zeros(&[cfg.head_hidden]),
            head2_w,
            head2_b: Array::from_vec(HEAD_BIAS_INIT.to_vec()),
        }
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.w"));
            names.push(format!("conv{i}.b"));
        }
        for n in ["bae.w_m", "bae.w_lat", "bae.fuse_w", "bae.fuse_b", "bae.ln_gain", "bae.ln_bias"] {
            names.push(n.to_string());
        }
        for n in ["head1.w", "head1.b", "head2.w", "head2.b"] {
            names.push(n.to_string());
        }
        names
    }

    /// Arrays in canonical order (matching [`Self::names`]).
    pub fn arrays(&self) -> Vec<&Array> {
        let mut out: Vec<&Array> = Vec::new();
        for (w, b) in &self.convs {
            out.push(w);
            out.push(b);
        }
        let p = &self.bae;
        out.extend([&p.w_m, &p.w_lat, &p.fuse_w, &p.fuse_b, &p.ln_gain, &p.ln_bias]);
        out.extend([&self.head1_w, &self.head1_b, &self.head2_w, &self.head2_b]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut out: Vec<&mut Array> = Vec::new();
        for (w, b) in &mut self.convs {
            out.push(w);
            out.push(b);
        }
        let p = &mut self.bae;
        out.extend([&mut p.w_m, &mut p.w_lat, &mut p.fuse_w, &mut p.fuse_b, &mut p.ln_gain, &mut p.ln_bias]);
        out.extend([&mut self.head1_w, &mut self.head1_b, &mut self.head2_w, &mut self.head2_b]);
        out
    }

    /// Number of leading arrays that belong to the backbone.
    pub fn backbone_len(&self) -> usize {
        2 * self.convs.len()
    }

    pub fn count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Parameter nodes in canonical order.
    pub params: Vec<Var>,
    pub features: Var,
    pub bae: BaeNodes,
    pub raw: Var,
    pub nig: graph::NigVars,
}

/// Plain-array result of an evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub nig: Vec<NigParams>,
    pub embedding: BaeEmbedding,
    pub attention: AttentionPair,
}

/// Per-image prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub nig: NigParams,
    pub gamma: f64,
    pub grade: usize,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub prob_oa: f64,
}

impl Prediction {
    pub fn from_nig(nig: NigParams) -> Result<Self, ModelError> {
        let u = nig::uncertainty(&nig)?;
        Ok(Self {
            nig,
            gamma: nig.gamma,
            grade: discretize(nig.gamma),
            epistemic: u.epistemic,
            aleatoric: u.aleatoric,
            prob_oa: nig::prob_grade_geq(&nig, OA_THRESHOLD)?,
        })
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: NetParams,
}

/// Stack images into a `[B, 1, H, W]` batch.
pub fn stack_images(images: &[&Image]) -> Result<Array, ModelError> {
    let first = images.first().ok_or_else(|| ModelError::Shape { expected: "at least one image".into(), got: vec![0] })?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(ModelError::Shape { expected: format!("{h}×{w} images"), got: vec![im.height, im.width] });
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Array::new(vec![images.len(), 1, h, w], data)?)
}

impl Network {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let params = NetParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Record the forward pass of a `[B, 1, H, W]` batch. Parameters become
    /// leaves when `trainable`, constants otherwise. A dropout keep-mask of
    /// shape `[B, C]` switches on training-mode dropout.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        images: Array,
        trainable: bool,
        dropout_mask: Option<Array>,
    ) -> Result<ForwardNodes, ModelError> {
        match *images.shape() {
            [_, 1, h, w] if h >= 8 && w >= 8 => {}
            _ => return Err(ModelError::Shape { expected: "B×1×H×W with H, W ≥ 8".into(), got: images.shape().to_vec() }),
        }
        let register = |tape: &mut Tape, a: &Array| if trainable { tape.leaf(a.clone()) } else { tape.constant(a.clone()) };
        let mut params = Vec::new();
        let mut x = tape.constant(images);
        for (w, b) in &self.params.convs {
            let wv = register(tape, w);
            let bv = register(tape, b);
            params.push(wv);
            params.push(bv);
            let y = tape.conv2d(x, wv, bv, 2, 1, Exec::Sequential)?;
            x = tape.gelu(y);
        }
        let features = x;
        let vars = if trainable { BaeVars::leaves(tape, &self.params.bae) } else { BaeVars::constants(tape, &self.params.bae) };
        params.extend([vars.w_m, vars.w_lat, vars.fuse_w, vars.fuse_b, vars.ln_gain, vars.ln_bias]);
        let bae_nodes = bae::encode(tape, features, &vars, dropout_mask)?;
        let h1w = register(tape, &self.params.head1_w);
        let h1b = register(tape, &self.params.head1_b);
        let h2w = register(tape, &self.params.head2_w);
        let h2b = register(tape, &self.params.head2_b);
        params.extend([h1w, h1b, h2w, h2b]);
        let z = tape.matmul(bae_nodes.h, h1w)?;
        let z = tape.add_bias(z, h1b)?;
        let z = tape.gelu(z);
        let raw = tape.matmul(z, h2w)?;
        let raw = tape.add_bias(raw, h2b)?;
        let nig_vars = graph::activate(tape, raw)?;
        Ok(ForwardNodes { params, features, bae: bae_nodes, raw, nig: nig_vars })
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, images: &[&Image]) -> Result<ForwardOutput, ModelError> {
        let batch = stack_images(images)?;
        let mut tape = Tape::new();
        let nodes = self.forward_nodes(&mut tape, batch, false, None)?;
        let raw = tape.value(nodes.raw).data();
        let nig = raw
            .chunks(4)
            .map(|r| nig::activate([r[0], r[1], r[2], r[3]]))
            .collect::<Result<Vec<_>, _>>()?;
        let fshape = tape.value(nodes.features).shape().to_vec();
        let att_shape = [fshape[0], 1, fshape[2], fshape[3]];
        let attention = AttentionPair {
            alpha_m: tape.value(nodes.bae.att_m).clone().reshape(&att_shape)?,
            alpha_lat: tape.value(nodes.bae.att_lat).clone().reshape(&att_shape)?,
        };
        let embedding = BaeEmbedding {
            z_m: tape.value(nodes.bae.z_m).clone(),
            z_lat: tape.value(nodes.bae.z_lat).clone(),
            f_asym: tape.value(nodes.bae.f_asym).clone(),
            h: tape.value(nodes.bae.h).clone(),
        };
        Ok(ForwardOutput { nig, embedding, attention })
    }

    /// NIG parameters for many images, evaluated in fixed-size chunks.
    pub fn predict_nig(&self, images: &[&Image], exec: Exec) -> Result<Vec<NigParams>, ModelError> {
        let chunks: Vec<&[&Image]> = images.chunks(EVAL_CHUNK).collect();
        let parts = exec.map_slice(&chunks, |c| self.forward(c).map(|o| o.nig));
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image], exec: Exec) -> Result<Vec<Prediction>, ModelError> {
        self.predict_nig(images, exec)?.into_iter().map(Prediction::from_nig).collect()
    }
}
