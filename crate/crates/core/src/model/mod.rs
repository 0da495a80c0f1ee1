//! Tiny conditional token model `π(y | image, query)`.
//!
//! For response position `t` the model reads the previous token (or `BOS`),
//! a learned position vector, the mean query embedding and one conditioning
//! vector: either the projected image or the learned null-image vector. The
//! sum passes through `tanh` mixing layers and an output projection, and the
//! per-token log-probabilities come from a row-wise log-softmax.
//!
//! The same [`ModelParams`] type plays both the policy and the frozen
//! reference; the trainer deep-copies the initial policy into the reference.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::objectives::LogProbBundle;
use crate::synth::ContrastPair;

/// Token id prepended to every response for next-token prediction.
pub const BOS: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },
    #[error("response is empty")]
    EmptyResponse,
    #[error("response length {len} exceeds the model maximum {max}")]
    ResponseTooLong { len: usize, max: usize },
    #[error("image vector has {got} entries, expected {expected}")]
    ImageDim { expected: usize, got: usize },
    #[error("image vector contains a non-finite value")]
    NonFiniteImage,
    #[error("invalid model dimensions: {0}")]
    Dims(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub width: usize,
    pub image_dim: usize,
    pub max_len: usize,
    pub hidden_layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 64,
            width: 32,
            image_dim: 24,
            max_len: 12,
            hidden_layers: 1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.width == 0 || self.image_dim == 0 || self.max_len == 0 {
            return Err(ModelError::Dims(format!("{self:?}")));
        }
        if !(1..=2).contains(&self.hidden_layers) {
            return Err(ModelError::Dims(format!(
                "hidden_layers must be 1 or 2, got {}",
                self.hidden_layers
            )));
        }
        Ok(())
    }
}

/// Conditioning input: an image embedding or nothing.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageCondition {
    Image(Vec<f64>),
    NoImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    /// `V×d` token embeddings.
    pub embed: Tensor,
    /// `max_len×d` position embeddings.
    pub position: Tensor,
    /// `m×d` image projection.
    pub image_proj: Tensor,
    /// `1×d` learned stand-in for "no image".
    pub null_image: Tensor,
    pub hidden: Vec<HiddenLayer>,
    /// `d×V` output projection.
    pub output: Tensor,
}

/// Per-tensor init scales (standard deviations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScale {
    pub embed: f64,
    pub image_proj: f64,
    pub hidden: f64,
    pub output: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            embed: 0.5,
            image_proj: 0.5,
            hidden: 0.3,
            output: 0.3,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl ModelParams {
    /// Seeded Gaussian initialisation.
    pub fn init(dims: ModelDims, scale: InitScale, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.width;
        let embed = gaussian(&mut rng, &[dims.vocab, d], scale.embed);
        let position = gaussian(&mut rng, &[dims.max_len, d], scale.embed);
        let image_proj = gaussian(&mut rng, &[dims.image_dim, d], scale.image_proj);
        let null_image = gaussian(&mut rng, &[1, d], scale.image_proj);
        let hidden = (0..dims.hidden_layers)
            .map(|_| HiddenLayer {
                weight: gaussian(&mut rng, &[d, d], scale.hidden),
                bias: Tensor::zeros(&[1, d]),
            })
            .collect();
        let output = gaussian(&mut rng, &[d, dims.vocab], scale.output);
        Ok(Self {
            dims,
            embed,
            position,
            image_proj,
            null_image,
            hidden,
            output,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// Parameter tensors in canonical order: embed, position, image_proj,
    /// null_image, (weight, bias) per hidden layer, output.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.position, &self.image_proj, &self.null_image];
        for layer in &self.hidden {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embed,
            &mut self.position,
            &mut self.image_proj,
            &mut self.null_image,
        ];
        for layer in &mut self.hidden {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.output);
        out
    }

    /// Expected tensor shapes for `dims`, in canonical order.
    pub fn expected_shapes(dims: &ModelDims) -> Vec<Vec<usize>> {
        let d = dims.width;
        let mut out = vec![
            vec![dims.vocab, d],
            vec![dims.max_len, d],
            vec![dims.image_dim, d],
            vec![1, d],
        ];
        for _ in 0..dims.hidden_layers {
            out.push(vec![d, d]);
            out.push(vec![1, d]);
        }
        out.push(vec![d, dims.vocab]);
        out
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        let shapes = Self::expected_shapes(&dims);
        if tensors.len() != shapes.len() {
            return Err(ModelError::Dims(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Dims(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let position = it.next().unwrap();
        let image_proj = it.next().unwrap();
        let null_image = it.next().unwrap();
        let hidden = (0..dims.hidden_layers)
            .map(|_| HiddenLayer {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        let output = it.next().unwrap();
        Ok(Self {
            dims,
            embed,
            position,
            image_proj,
            null_image,
            hidden,
            output,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Places every tensor on `tape`, as leaves when `trainable`, else as constants.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            dims: self.dims,
            embed: put(&self.embed),
            position: put(&self.position),
            image_proj: put(&self.image_proj),
            null_image: put(&self.null_image),
            hidden: self
                .hidden
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect(),
            output: put(&self.output),
        }
    }
}

/// Tape handles for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    dims: ModelDims,
    pub embed: Var,
    pub position: Var,
    pub image_proj: Var,
    pub null_image: Var,
    pub hidden: Vec<(Var, Var)>,
    pub output: Var,
}

impl ParamVars {
    /// Handles in the same canonical order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.position, self.image_proj, self.null_image];
        for &(w, b) in &self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(self.output);
        out
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }
}

/// Log-likelihood of one response.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

fn check_tokens(dims: &ModelDims, query: &[usize], response: &[usize]) -> Result<()> {
    if response.is_empty() {
        return Err(ModelError::EmptyResponse);
    }
    if response.len() > dims.max_len {
        return Err(ModelError::ResponseTooLong {
            len: response.len(),
            max: dims.max_len,
        });
    }
    if let Some(&token) = query.iter().chain(response).find(|&&t| t >= dims.vocab) {
        return Err(ModelError::OutOfVocab {
            token,
            vocab: dims.vocab,
        });
    }
    Ok(())
}

/// Builds the teacher-forced graph; returns `(total, per_token)` handles.
pub fn log_prob_on_tape(
    tape: &mut Tape,
    params: &ParamVars,
    cond: &ImageCondition,
    query: &[usize],
    response: &[usize],
) -> Result<(Var, Var)> {
    let dims = params.dims;
    check_tokens(&dims, query, response)?;

    let ctx = match cond {
        ImageCondition::Image(v) => {
            if v.len() != dims.image_dim {
                return Err(ModelError::ImageDim {
                    expected: dims.image_dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteImage);
            }
            let img = tape.constant(Tensor::row(v.clone()));
            tape.matmul(img, params.image_proj)?
        }
        ImageCondition::NoImage => params.null_image,
    };
    let ctx = if query.is_empty() {
        ctx
    } else {
        let q = tape.gather_rows(params.embed, query)?;
        let qsum = tape.sum_rows(q)?;
        let qmean = tape.scale(qsum, 1.0 / query.len() as f64);
        tape.add(ctx, qmean)?
    };

    let t = response.len();
    let mut prev = Vec::with_capacity(t);
    prev.push(BOS);
    prev.extend_from_slice(&response[..t - 1]);
    let positions: Vec<usize> = (0..t).collect();

    let tok = tape.gather_rows(params.embed, &prev)?;
    let pos = tape.gather_rows(params.position, &positions)?;
    let x = tape.add(tok, pos)?;
    let mut h = tape.add_row(x, ctx)?;
    for &(w, b) in &params.hidden {
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        h = tape.tanh(z);
    }
    let logits = tape.matmul(h, params.output)?;
    let logp = tape.log_softmax(logits, 1)?;
    let per_token = tape.pick_per_row(logp, response)?;
    let total = tape.sum(per_token);
    Ok((total, per_token))
}

/// `log π(response | cond, query)` with per-token terms.
pub fn log_prob(
    params: &ModelParams,
    cond: &ImageCondition,
    query: &[usize],
    response: &[usize],
) -> Result<LogProb> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let (total, per_token) = log_prob_on_tape(&mut tape, &vars, cond, query, response)?;
    Ok(LogProb {
        total: tape.value(total).item(),
        per_token: tape.value(per_token).data().to_vec(),
    })
}

/// Which response of a pair a bundle scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    W,
    L,
}

impl ContrastPair {
    pub fn response(&self, which: Which) -> &[usize] {
        match which {
            Which::W => &self.y_w,
            Which::L => &self.y_l,
        }
    }

    /// The three conditions in bundle slot order: `i_w`, `i_l`, no image.
    pub fn conditions(&self) -> [ImageCondition; 3] {
        [
            ImageCondition::Image(self.img_w.clone()),
            ImageCondition::Image(self.img_l.clone()),
            ImageCondition::NoImage,
        ]
    }
}

/// The three conditional log-likelihoods of one response under one model.
pub fn condition_triple(
    params: &ModelParams,
    pair: &ContrastPair,
    which: Which,
) -> Result<[f64; 3]> {
    let y = pair.response(which);
    let [iw, il, none] = pair.conditions();
    Ok([
        log_prob(params, &iw, &pair.query, y)?.total,
        log_prob(params, &il, &pair.query, y)?.total,
        log_prob(params, &none, &pair.query, y)?.total,
    ])
}

/// Gathers the six conditionals the contrastive objectives consume.
pub fn make_bundle(
    policy: &ModelParams,
    reference: &ModelParams,
    pair: &ContrastPair,
    which: Which,
) -> Result<LogProbBundle> {
    let [pol_iw, pol_il, pol_noimg] = condition_triple(policy, pair, which)?;
    let [ref_iw, ref_il, ref_noimg] = condition_triple(reference, pair, which)?;
    Ok(LogProbBundle {
        pol_iw,
        pol_il,
        pol_noimg,
        ref_iw,
        ref_il,
        ref_noimg,
    })
}
