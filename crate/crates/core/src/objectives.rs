//! Preference and visual-contrastive objectives over conditional log-probabilities.
//!
//! Every pairwise loss has the form `-log σ(β · (Δ_a - Δ_b))` where
//! `Δ = log π_θ - log π_ref` for one (response, condition), and is evaluated as
//! `softplus(-β · (Δ_a - Δ_b))`:
//!
//! | loss      | `Δ_a`            | `Δ_b`            | β     |
//! |-----------|------------------|------------------|-------|
//! | DPO       | `(y_w, i)`       | `(y_l, i)`       | `beta`  |
//! | VisCon    | `(y_w, i_w)`     | `(y_w, i_l)`     | `beta`  |
//! | Attend    | `(y, i_match)`   | `(y, ∅)`         | `beta1` |
//! | Reject    | `(y, ∅)`         | `(y, i_contra)`  | `beta2` |
//!
//! VCO is Attend + Reject for one response; S-VCO adds the VCO of the losing
//! response with the image roles flipped. Reference entries always enter the
//! graph as constants so they never receive a gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("log-probability {name} = {value} is not a finite value <= 0")]
    BadLogProb { name: &'static str, value: f64 },
    #[error("beta values must be > 0, got {0:?}")]
    BadBetas(Betas),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Six conditional log-probabilities (nats) of one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbBundle {
    pub pol_iw: f64,
    pub pol_il: f64,
    pub pol_noimg: f64,
    pub ref_iw: f64,
    pub ref_il: f64,
    pub ref_noimg: f64,
}

impl LogProbBundle {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("pol_iw", self.pol_iw),
            ("pol_il", self.pol_il),
            ("pol_noimg", self.pol_noimg),
            ("ref_iw", self.ref_iw),
            ("ref_il", self.ref_il),
            ("ref_noimg", self.ref_noimg),
        ] {
            if !value.is_finite() || value > 0.0 {
                return Err(ObjectiveError::BadLogProb { name, value });
            }
        }
        Ok(())
    }

    /// Exchanges the two image slots.
    pub fn flip(&self) -> Self {
        Self {
            pol_iw: self.pol_il,
            pol_il: self.pol_iw,
            ref_iw: self.ref_il,
            ref_il: self.ref_iw,
            ..*self
        }
    }

    pub fn delta_iw(&self) -> f64 {
        self.pol_iw - self.ref_iw
    }

    pub fn delta_il(&self) -> f64 {
        self.pol_il - self.ref_il
    }

    pub fn delta_noimg(&self) -> f64 {
        self.pol_noimg - self.ref_noimg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Self {
            beta: 0.1,
            beta1: 0.1,
            beta2: 0.1,
        }
    }
}

impl Betas {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b.is_finite() && b > 0.0;
        if ok(self.beta) && ok(self.beta1) && ok(self.beta2) {
            Ok(())
        } else {
            Err(ObjectiveError::BadBetas(*self))
        }
    }
}

/// Tape handles for a bundle. Reference slots are constants or detached.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub pol_iw: Var,
    pub pol_il: Var,
    pub pol_noimg: Var,
    pub ref_iw: Var,
    pub ref_il: Var,
    pub ref_noimg: Var,
}

impl BundleVars {
    /// Policy entries become leaves, reference entries constants.
    pub fn leaves(tape: &mut Tape, b: &LogProbBundle) -> Self {
        Self {
            pol_iw: tape.leaf(Tensor::scalar(b.pol_iw)),
            pol_il: tape.leaf(Tensor::scalar(b.pol_il)),
            pol_noimg: tape.leaf(Tensor::scalar(b.pol_noimg)),
            ref_iw: tape.constant(Tensor::scalar(b.ref_iw)),
            ref_il: tape.constant(Tensor::scalar(b.ref_il)),
            ref_noimg: tape.constant(Tensor::scalar(b.ref_noimg)),
        }
    }

    pub fn flip(&self) -> Self {
        Self {
            pol_iw: self.pol_il,
            pol_il: self.pol_iw,
            ref_iw: self.ref_il,
            ref_il: self.ref_iw,
            ..*self
        }
    }
}

/// `softplus(-β((a_pol - a_ref) - (b_pol - b_ref)))`.
fn pairwise(
    tape: &mut Tape,
    beta: f64,
    (a_pol, a_ref): (Var, Var),
    (b_pol, b_ref): (Var, Var),
) -> Result<Var> {
    let da = tape.sub(a_pol, a_ref)?;
    let db = tape.sub(b_pol, b_ref)?;
    let margin = tape.sub(da, db)?;
    let neg = tape.scale(margin, -beta);
    Ok(tape.softplus(neg))
}

/// DPO: both responses under the image in the `iw` slot.
pub fn dpo_on(tape: &mut Tape, w: &BundleVars, l: &BundleVars, betas: &Betas) -> Result<Var> {
    pairwise(tape, betas.beta, (w.pol_iw, w.ref_iw), (l.pol_iw, l.ref_iw))
}

pub fn viscon_on(tape: &mut Tape, w: &BundleVars, betas: &Betas) -> Result<Var> {
    pairwise(tape, betas.beta, (w.pol_iw, w.ref_iw), (w.pol_il, w.ref_il))
}

pub fn attend_on(tape: &mut Tape, b: &BundleVars, betas: &Betas) -> Result<Var> {
    pairwise(tape, betas.beta1, (b.pol_iw, b.ref_iw), (b.pol_noimg, b.ref_noimg))
}

pub fn reject_on(tape: &mut Tape, b: &BundleVars, betas: &Betas) -> Result<Var> {
    pairwise(tape, betas.beta2, (b.pol_noimg, b.ref_noimg), (b.pol_il, b.ref_il))
}

pub fn vco_on(tape: &mut Tape, b: &BundleVars, betas: &Betas) -> Result<Var> {
    let a = attend_on(tape, b, betas)?;
    let r = reject_on(tape, b, betas)?;
    Ok(tape.add(a, r)?)
}

/// `bundle_l` holds `y_l` with the literal image slots; it is flipped here so
/// that `i_l` is attended and `i_w` rejected.
pub fn svco_on(tape: &mut Tape, w: &BundleVars, l: &BundleVars, betas: &Betas) -> Result<Var> {
    let first = vco_on(tape, w, betas)?;
    let second = vco_on(tape, &l.flip(), betas)?;
    Ok(tape.add(first, second)?)
}

/// Extra term added to the mDPO baseline, e.g. an absolute-reward anchor.
pub trait RewardAnchor: Send + Sync {
    fn term(&self, tape: &mut Tape, w: &BundleVars, l: &BundleVars, betas: &Betas) -> Result<Var>;
}

pub fn mdpo_on(
    tape: &mut Tape,
    w: &BundleVars,
    l: &BundleVars,
    betas: &Betas,
    anchor: Option<&dyn RewardAnchor>,
) -> Result<Var> {
    let d = dpo_on(tape, w, l, betas)?;
    let v = viscon_on(tape, w, betas)?;
    let mut total = tape.add(d, v)?;
    if let Some(anchor) = anchor {
        let a = anchor.term(tape, w, l, betas)?;
        total = tape.add(total, a)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SftSide {
    /// `y_w` under `i_w`; reads the `iw` slot of a `y_w` bundle.
    WOnIw,
    /// `y_l` under `i_l`; reads the `il` slot of a `y_l` bundle.
    LOnIl,
}

pub fn sft_on(tape: &mut Tape, b: &BundleVars, side: SftSide) -> Var {
    match side {
        SftSide::WOnIw => tape.neg(b.pol_iw),
        SftSide::LOnIl => tape.neg(b.pol_il),
    }
}

/// Arithmetic mean of scalar terms, accumulated in index order.
pub fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.stack(terms)?;
    Ok(tape.mean(stacked))
}

fn eval1(f: impl FnOnce(&mut Tape, &BundleVars) -> Result<Var>, b: &LogProbBundle) -> f64 {
    let mut tape = Tape::new();
    let v = BundleVars::leaves(&mut tape, b);
    let out = f(&mut tape, &v).expect("scalar graph");
    tape.value(out).item()
}

fn eval2(
    f: impl FnOnce(&mut Tape, &BundleVars, &BundleVars) -> Result<Var>,
    w: &LogProbBundle,
    l: &LogProbBundle,
) -> f64 {
    let mut tape = Tape::new();
    let vw = BundleVars::leaves(&mut tape, w);
    let vl = BundleVars::leaves(&mut tape, l);
    let out = f(&mut tape, &vw, &vl).expect("scalar graph");
    tape.value(out).item()
}

pub fn dpo_loss(w: &LogProbBundle, l: &LogProbBundle, betas: &Betas) -> f64 {
    eval2(|t, a, b| dpo_on(t, a, b, betas), w, l)
}

pub fn viscon_loss(w: &LogProbBundle, betas: &Betas) -> f64 {
    eval1(|t, a| viscon_on(t, a, betas), w)
}

pub fn attend_loss(b: &LogProbBundle, betas: &Betas) -> f64 {
    eval1(|t, a| attend_on(t, a, betas), b)
}

pub fn reject_loss(b: &LogProbBundle, betas: &Betas) -> f64 {
    eval1(|t, a| reject_on(t, a, betas), b)
}

pub fn vco_loss(b: &LogProbBundle, betas: &Betas) -> f64 {
    eval1(|t, a| vco_on(t, a, betas), b)
}

pub fn svco_loss(w: &LogProbBundle, l: &LogProbBundle, betas: &Betas) -> f64 {
    eval2(|t, a, b| svco_on(t, a, b, betas), w, l)
}

pub fn mdpo_loss(w: &LogProbBundle, l: &LogProbBundle, betas: &Betas) -> f64 {
    eval2(|t, a, b| mdpo_on(t, a, b, betas, None), w, l)
}

pub fn sft_loss(b: &LogProbBundle, side: SftSide) -> f64 {
    eval1(|t, a| Ok(sft_on(t, a, side)), b)
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Svco,
    Vco,
    Dpo,
    Viscon,
    Mdpo,
    Sft2,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Svco,
        Objective::Vco,
        Objective::Dpo,
        Objective::Viscon,
        Objective::Mdpo,
        Objective::Sft2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Svco => "svco",
            Objective::Vco => "vco",
            Objective::Dpo => "dpo",
            Objective::Viscon => "viscon",
            Objective::Mdpo => "mdpo",
            Objective::Sft2 => "sft2",
        }
    }

    /// Whether the loss reads the `y_l` bundle.
    pub fn needs_losing_response(self) -> bool {
        !matches!(self, Objective::Vco | Objective::Viscon)
    }

    /// Loss terms contributed by one pair; `sft2` contributes two.
    pub fn pair_terms(
        self,
        tape: &mut Tape,
        w: &BundleVars,
        l: &BundleVars,
        betas: &Betas,
        anchor: Option<&dyn RewardAnchor>,
    ) -> Result<Vec<Var>> {
        Ok(match self {
            Objective::Svco => vec![svco_on(tape, w, l, betas)?],
            Objective::Vco => vec![vco_on(tape, w, betas)?],
            Objective::Dpo => vec![dpo_on(tape, w, l, betas)?],
            Objective::Viscon => vec![viscon_on(tape, w, betas)?],
            Objective::Mdpo => vec![mdpo_on(tape, w, l, betas, anchor)?],
            Objective::Sft2 => vec![
                sft_on(tape, w, SftSide::WOnIw),
                sft_on(tape, l, SftSide::LOnIl),
            ],
        })
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Objective::ALL.iter().map(|o| o.name()).collect();
                format!("unknown objective `{s}`; valid: {}", valid.join(", "))
            })
    }
}
