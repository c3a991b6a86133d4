//! Ensembles derived from a single checkpoint without training.
//!
//! Four member generators are supported: Bernoulli stochastic rounding onto
//! per-channel INT-B grids (`bsr`), a single rounding-to-nearest model
//! (`rtn`), isotropic Gaussian weight noise (`gaussian`) and weight-level
//! dropout masks (`mcd`). Only layers flagged in the model's `quantize_mask`
//! are touched; the rest are shared by every member.
//!
//! Member `s` draws from `CounterRng::new(derive_seed(base_seed, s), layer)`
//! at stream position = row-major entry index, so generation can run in
//! parallel and still be bit-reproducible.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Dataset, EvalReport, ECE_BINS};
use crate::nn::{self, Checkpoint};
use crate::quantizer::{self, QuantGridSet, QuantizedTensor};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;

pub const MAX_ENSEMBLE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Bsr,
    Rtn,
    Gaussian,
    Mcd,
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsr" | "lpe_bsr" => Ok(MethodKind::Bsr),
            "rtn" => Ok(MethodKind::Rtn),
            "gaussian" => Ok(MethodKind::Gaussian),
            "mcd" => Ok(MethodKind::Mcd),
            other => Err(Error::Config(format!(
                "unknown ensemble method {other:?} (expected bsr, rtn, gaussian or mcd)"
            ))),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::Bsr => "bsr",
            MethodKind::Rtn => "rtn",
            MethodKind::Gaussian => "gaussian",
            MethodKind::Mcd => "mcd",
        })
    }
}

/// How members are derived, with the parameter each method needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Bsr { bits: u8 },
    Rtn { bits: u8 },
    Gaussian { sigma2: f64 },
    Mcd { drop_p: f64 },
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Bsr { .. } => MethodKind::Bsr,
            Method::Rtn { .. } => MethodKind::Rtn,
            Method::Gaussian { .. } => MethodKind::Gaussian,
            Method::Mcd { .. } => MethodKind::Mcd,
        }
    }

    /// Assembles a method from optional flag values, requiring exactly the
    /// parameter the method uses.
    pub fn from_parts(
        kind: MethodKind,
        bits: Option<u8>,
        sigma2: Option<f64>,
        drop_p: Option<f64>,
    ) -> Result<Self> {
        let unexpected =
            |name: &str| Error::Config(format!("method {kind} does not take a {name} parameter"));
        let missing = |name: &str| Error::Config(format!("method {kind} requires {name}"));
        let method = match kind {
            MethodKind::Bsr | MethodKind::Rtn => {
                if sigma2.is_some() {
                    return Err(unexpected("sigma2"));
                }
                if drop_p.is_some() {
                    return Err(unexpected("drop-p"));
                }
                let bits = bits.ok_or_else(|| missing("bits"))?;
                if kind == MethodKind::Bsr {
                    Method::Bsr { bits }
                } else {
                    Method::Rtn { bits }
                }
            }
            MethodKind::Gaussian => {
                if bits.is_some() {
                    return Err(unexpected("bits"));
                }
                if drop_p.is_some() {
                    return Err(unexpected("drop-p"));
                }
                Method::Gaussian {
                    sigma2: sigma2.ok_or_else(|| missing("sigma2"))?,
                }
            }
            MethodKind::Mcd => {
                if bits.is_some() {
                    return Err(unexpected("bits"));
                }
                if sigma2.is_some() {
                    return Err(unexpected("sigma2"));
                }
                Method::Mcd {
                    drop_p: drop_p.ok_or_else(|| missing("drop-p"))?,
                }
            }
        };
        method.validate()?;
        Ok(method)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Bsr { bits } | Method::Rtn { bits } => quantizer::check_bits(bits),
            Method::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => Err(
                Error::Config(format!("sigma2 must be positive and finite, got {sigma2}")),
            ),
            Method::Mcd { drop_p } if !(drop_p > 0.0 && drop_p < 1.0) => Err(Error::Config(
                format!("drop probability must lie in (0, 1), got {drop_p}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    #[serde(flatten)]
    pub method: Method,
    pub size: usize,
    pub base_seed: u64,
}

impl EnsembleSpec {
    pub fn new(method: Method, size: usize, base_seed: u64) -> Result<Self> {
        let spec = Self {
            method,
            size,
            base_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if self.size == 0 || self.size > MAX_ENSEMBLE_SIZE {
            return Err(Error::Config(format!(
                "ensemble size must be in [1, {MAX_ENSEMBLE_SIZE}], got {}",
                self.size
            )));
        }
        if matches!(self.method, Method::Rtn { .. }) && self.size != 1 {
            return Err(Error::Config(format!(
                "rtn is deterministic, ensemble size must be 1 (got {})",
                self.size
            )));
        }
        Ok(())
    }

    pub fn member_seed(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, index as u64)
    }
}

/// Replacement for one weight matrix in a member.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberLayer {
    Quantized(QuantizedTensor),
    Dense(Tensor),
    /// Binary keep-mask applied to the base weight.
    Mask(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub index: usize,
    pub seed: u64,
    /// `(layer index, replacement)` for every masked layer, in layer order.
    pub layers: Vec<(usize, MemberLayer)>,
}

impl Member {
    /// Full checkpoint for this member on top of `base`.
    pub fn checkpoint(&self, base: &Checkpoint) -> Result<Checkpoint> {
        let mut ckpt = base.clone();
        for (i, layer) in &self.layers {
            let w = match layer {
                MemberLayer::Quantized(q) => quantizer::dequantize(q),
                MemberLayer::Dense(w) => w.clone(),
                MemberLayer::Mask(m) => {
                    base.layer(*i)
                        .w
                        .zip_with(m, |w, m| if m == 0.0 { 0.0 } else { w })?
                }
            };
            ckpt = ckpt.with_weight(*i, w)?;
        }
        Ok(ckpt)
    }

    /// Member logits `N×K`.
    pub fn logits(&self, base: &Checkpoint, x: &Tensor) -> Result<Tensor> {
        if self
            .layers
            .iter()
            .all(|(_, l)| matches!(l, MemberLayer::Mask(_)))
            && !self.layers.is_empty()
        {
            let mut masks = vec![None; base.layers().len()];
            for (i, l) in &self.layers {
                if let MemberLayer::Mask(m) = l {
                    masks[*i] = Some(m.clone());
                }
            }
            return nn::forward_masked(base, x, &masks);
        }
        nn::forward(&self.checkpoint(base)?, x)
    }
}

/// The members of one ensemble plus the checkpoint they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberSet {
    spec: EnsembleSpec,
    base: Checkpoint,
    members: Vec<Member>,
}

impl MemberSet {
    /// Validates and orders members by index.
    pub fn new(spec: EnsembleSpec, base: Checkpoint, mut members: Vec<Member>) -> Result<Self> {
        spec.validate()?;
        members.sort_by_key(|m| m.index);
        if members.len() != spec.size || members.iter().enumerate().any(|(i, m)| m.index != i) {
            return Err(Error::Config(format!(
                "expected members 0..{}, got indices {:?}",
                spec.size,
                members.iter().map(|m| m.index).collect::<Vec<_>>()
            )));
        }
        let mask = &base.spec().quantize_mask;
        for m in &members {
            let touched: Vec<usize> = m.layers.iter().map(|(i, _)| *i).collect();
            let expected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            if touched != expected {
                return Err(Error::Config(format!(
                    "member {} replaces layers {touched:?}, quantize_mask selects {expected:?}",
                    m.index
                )));
            }
            for (i, l) in &m.layers {
                let shape = base.layer(*i).w.shape();
                let ok = match l {
                    MemberLayer::Quantized(q) => q.shape() == shape,
                    MemberLayer::Dense(t) | MemberLayer::Mask(t) => t.shape() == shape,
                };
                if !ok {
                    return Err(Error::Dimension(format!(
                        "member {} layer {} does not match weight shape {shape:?}",
                        m.index,
                        i + 1
                    )));
                }
            }
        }
        Ok(Self {
            spec,
            base,
            members,
        })
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_checkpoint(&self, index: usize) -> Result<Checkpoint> {
        self.members[index].checkpoint(&self.base)
    }
}

fn masked_layers(ckpt: &Checkpoint) -> Vec<usize> {
    let mask = &ckpt.spec().quantize_mask;
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

pub fn generate_members(ckpt: &Checkpoint, spec: &EnsembleSpec) -> Result<MemberSet> {
    spec.validate()?;
    let layers = masked_layers(ckpt);

    let grids: Vec<QuantGridSet> = match spec.method {
        Method::Bsr { bits } | Method::Rtn { bits } => layers
            .iter()
            .map(|&i| quantizer::build_grids(&ckpt.layer(i).w, bits))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let members = (0..spec.size)
        .into_par_iter()
        .map(|s| {
            let seed = spec.member_seed(s);
            let replaced = layers
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let w = &ckpt.layer(i).w;
                    let rng = CounterRng::new(seed, i as u64);
                    let layer = match spec.method {
                        Method::Bsr { .. } => {
                            MemberLayer::Quantized(quantizer::bsr_sample(w, &grids[slot], &rng)?)
                        }
                        Method::Rtn { .. } => {
                            MemberLayer::Quantized(quantizer::rtn(w, &grids[slot])?)
                        }
                        Method::Gaussian { sigma2 } => {
                            let sigma = sigma2.sqrt();
                            let data = w
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(k, &v)| (v as f64 + sigma * rng.normal(k as u64)) as f32)
                                .collect();
                            MemberLayer::Dense(Tensor::new(w.shape().to_vec(), data)?)
                        }
                        Method::Mcd { drop_p } => {
                            let data = (0..w.len())
                                .map(|k| {
                                    if rng.uniform(k as u64) < drop_p {
                                        0.0
                                    } else {
                                        1.0
                                    }
                                })
                                .collect();
                            MemberLayer::Mask(Tensor::new(w.shape().to_vec(), data)?)
                        }
                    };
                    Ok((i, layer))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Member {
                index: s,
                seed,
                layers: replaced,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    MemberSet::new(*spec, ckpt.clone(), members)
}

/// Ensemble output on a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    /// `N×K` predictive distribution.
    pub probs: Tensor,
    /// `S×N×K` raw member logits.
    pub member_logits: Option<Tensor>,
}

/// Stacked member logits `S×N×K`, members in index order.
pub fn member_logits(ms: &MemberSet, x: &Tensor) -> Result<Tensor> {
    let per_member = ms
        .members
        .par_iter()
        .map(|m| m.logits(&ms.base, x))
        .collect::<Result<Vec<_>>>()?;
    let shape = per_member[0].shape().to_vec();
    let mut data = Vec::with_capacity(per_member.len() * per_member[0].len());
    for t in per_member {
        data.extend(t.into_data());
    }
    Tensor::new(vec![ms.len(), shape[0], shape[1]], data)
}

fn split_members(logits: &Tensor) -> impl Iterator<Item = &[f32]> {
    let stride = logits.shape()[1] * logits.shape()[2];
    logits.data().chunks_exact(stride)
}

/// Arithmetic mean of the member softmax outputs.
pub fn predict_prob_ensemble(ms: &MemberSet, x: &Tensor) -> Result<PredictionBatch> {
    let logits = member_logits(ms, x)?;
    let probs = average_probs(&logits)?;
    Ok(PredictionBatch {
        probs,
        member_logits: Some(logits),
    })
}

/// Probability ensemble of stacked `S×N×K` logits.
pub fn average_probs(logits: &Tensor) -> Result<Tensor> {
    let &[s, n, k] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "expected S×N×K logits, got {:?}",
            logits.shape()
        )));
    };
    let mut acc = vec![0.0f64; n * k];
    for member in split_members(logits) {
        let p = Tensor::new(vec![n, k], member.to_vec())?.softmax();
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    Tensor::new(
        vec![n, k],
        acc.iter().map(|a| (a / s as f64) as f32).collect(),
    )
}

/// Softmax of the arithmetic mean of member logits.
pub fn predict_logit_mean(ms: &MemberSet, x: &Tensor) -> Result<PredictionBatch> {
    let logits = member_logits(ms, x)?;
    let &[s, n, k] = logits.shape() else {
        unreachable!()
    };
    let mut acc = vec![0.0f64; n * k];
    for member in split_members(&logits) {
        for (a, &v) in acc.iter_mut().zip(member) {
            *a += v as f64;
        }
    }
    let mean = Tensor::new(
        vec![n, k],
        acc.iter().map(|a| (a / s as f64) as f32).collect(),
    )?;
    Ok(PredictionBatch {
        probs: mean.softmax(),
        member_logits: Some(logits),
    })
}

/// Logical bits needed to store the whole ensemble.
///
/// Quantized member layers cost `B` bits per entry plus a 32-bit scale per
/// channel; full-precision member layers cost 32 bits per entry; everything
/// the members share (unmasked layers and all biases) is counted once.
pub fn memory_budget(ms: &MemberSet) -> u64 {
    let mask = &ms.base.spec().quantize_mask;
    let shared: u64 = ms
        .base
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| l.b.len() as u64 + if mask[i] { 0 } else { l.w.len() as u64 })
        .sum();
    let members: u64 = ms
        .members
        .iter()
        .flat_map(|m| &m.layers)
        .map(|(_, l)| match l {
            MemberLayer::Quantized(q) => {
                q.len() as u64 * q.grids().bits() as u64 + q.grids().channels() as u64 * 32
            }
            MemberLayer::Dense(t) | MemberLayer::Mask(t) => t.len() as u64 * 32,
        })
        .sum();
    members + shared * 32
}

/// Probability-ensemble metrics plus the logit-ensemble ambiguity
/// decomposition.
pub fn evaluate(ms: &MemberSet, data: &Dataset) -> Result<EvalReport> {
    data.check_labels(ms.base.spec().num_classes())?;
    let batch = predict_prob_ensemble(ms, data.features())?;
    let logits = batch.member_logits.as_ref().expect("retained");
    report_from_logits(logits, &batch.probs, data, memory_budget(ms), true)
}

/// Single full-precision model: no ambiguity, 32 bits per parameter.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<EvalReport> {
    data.check_labels(ckpt.spec().num_classes())?;
    let logits = nn::forward(ckpt, data.features())?;
    let shape = logits.shape().to_vec();
    let stacked = logits.reshape(vec![1, shape[0], shape[1]])?;
    let probs = average_probs(&stacked)?;
    report_from_logits(
        &stacked,
        &probs,
        data,
        32 * ckpt.param_count() as u64,
        false,
    )
}

fn report_from_logits(
    logits: &Tensor,
    probs: &Tensor,
    data: &Dataset,
    memory_bits: u64,
    with_ambiguity: bool,
) -> Result<EvalReport> {
    let labels = data.labels();
    let decomposition = metrics::ambiguity_decomposition(logits, labels)?;
    let [n, k] = [logits.shape()[1], logits.shape()[2]];
    let per_member_nll = split_members(logits)
        .map(|z| metrics::logit_nll(&Tensor::new(vec![n, k], z.to_vec())?, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        nll: metrics::ensemble_nll(logits, labels)?,
        err: metrics::err(probs, labels)?,
        ece: metrics::ece(probs, labels, ECE_BINS)?,
        avg_loss: decomposition.avg_loss,
        ambiguity: with_ambiguity.then_some(decomposition.ambiguity),
        ensemble_loss: decomposition.ensemble_loss,
        memory_bits,
        per_member_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Linear, ModelSpec};
    use crate::storage::make_blobs;

    fn model() -> Checkpoint {
        let spec = ModelSpec::new(vec![2, 6, 5, 3], Activation::Relu).unwrap();
        Checkpoint::random_init(spec, 17).unwrap()
    }

    fn x() -> Tensor {
        Tensor::new(vec![4, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, -0.2, 1.1, 1.9]).unwrap()
    }

    fn bsr(bits: u8, size: usize, seed: u64) -> EnsembleSpec {
        EnsembleSpec::new(Method::Bsr { bits }, size, seed).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(EnsembleSpec::new(Method::Rtn { bits: 5 }, 3, 0).is_err());
        assert!(EnsembleSpec::new(Method::Bsr { bits: 5 }, 0, 0).is_err());
        assert!(EnsembleSpec::new(Method::Bsr { bits: 5 }, 65, 0).is_err());
        assert!(EnsembleSpec::new(Method::Bsr { bits: 9 }, 2, 0).is_err());
        assert!(EnsembleSpec::new(Method::Gaussian { sigma2: 0.0 }, 2, 0).is_err());
        assert!(EnsembleSpec::new(Method::Mcd { drop_p: 1.0 }, 2, 0).is_err());
        assert!("swag".parse::<MethodKind>().is_err());
        assert!(Method::from_parts(MethodKind::Gaussian, Some(4), Some(0.1), None).is_err());
        assert!(Method::from_parts(MethodKind::Mcd, None, None, None).is_err());
        assert_eq!(
            Method::from_parts(MethodKind::Bsr, Some(4), None, None).unwrap(),
            Method::Bsr { bits: 4 }
        );
    }

    #[test]
    fn rtn_member_equals_rtn_quantization() {
        let ckpt = model();
        let ms = generate_members(
            &ckpt,
            &EnsembleSpec::new(Method::Rtn { bits: 5 }, 1, 0).unwrap(),
        )
        .unwrap();
        assert_eq!(ms.len(), 1);
        let member = ms.member_checkpoint(0).unwrap();
        for i in 0..2 {
            let w = &ckpt.layer(i).w;
            let g = quantizer::build_grids(w, 5).unwrap();
            assert_eq!(
                member.layer(i).w,
                quantizer::dequantize(&quantizer::rtn(w, &g).unwrap())
            );
        }
        assert_eq!(member.layer(2), ckpt.layer(2));
    }

    #[test]
    fn generation_is_deterministic() {
        let ckpt = model();
        for method in [
            Method::Bsr { bits: 4 },
            Method::Gaussian { sigma2: 0.01 },
            Method::Mcd { drop_p: 0.2 },
        ] {
            let spec = EnsembleSpec::new(method, 3, 5).unwrap();
            assert_eq!(
                generate_members(&ckpt, &spec).unwrap(),
                generate_members(&ckpt, &spec).unwrap()
            );
        }
        let a = generate_members(&ckpt, &bsr(4, 2, 1)).unwrap();
        let b = generate_members(&ckpt, &bsr(4, 2, 2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn members_differ_from_each_other() {
        let ms = generate_members(&model(), &bsr(3, 2, 0)).unwrap();
        assert_ne!(ms.members()[0].layers, ms.members()[1].layers);
    }

    #[test]
    fn gaussian_small_variance_converges() {
        let ckpt = model();
        let sigma2 = 1e-8f64;
        let ms = generate_members(
            &ckpt,
            &EnsembleSpec::new(Method::Gaussian { sigma2 }, 4, 3).unwrap(),
        )
        .unwrap();
        for s in 0..4 {
            let m = ms.member_checkpoint(s).unwrap();
            for i in 0..3 {
                for (a, b) in m.layer(i).w.data().iter().zip(ckpt.layer(i).w.data()) {
                    assert!(((a - b).abs() as f64) <= 6.0 * sigma2.sqrt() + 1e-7);
                }
                assert_eq!(m.layer(i).b, ckpt.layer(i).b);
            }
            assert_eq!(m.layer(2).w, ckpt.layer(2).w);
        }
    }

    #[test]
    fn mcd_masks_drop_at_rate() {
        let spec = ModelSpec::new(vec![40, 50, 3], Activation::Relu).unwrap();
        let ckpt = Checkpoint::random_init(spec, 1).unwrap();
        let ms = generate_members(
            &ckpt,
            &EnsembleSpec::new(Method::Mcd { drop_p: 0.3 }, 2, 9).unwrap(),
        )
        .unwrap();
        let MemberLayer::Mask(mask) = &ms.members()[0].layers[0].1 else {
            panic!("expected mask")
        };
        let dropped = mask.data().iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - 0.3).abs() < 0.03, "{dropped}");
        // masked forward agrees with materialized weights
        let xs = Tensor::new(vec![1, 40], (0..40).map(|v| v as f32 / 40.0).collect()).unwrap();
        let via_mask = ms.members()[0].logits(ms.base(), &xs).unwrap();
        let via_ckpt = nn::forward(&ms.member_checkpoint(0).unwrap(), &xs).unwrap();
        assert_eq!(via_mask, via_ckpt);
    }

    #[test]
    fn bsr_members_within_one_step() {
        let ckpt = model();
        let ms = generate_members(&ckpt, &bsr(4, 5, 8)).unwrap();
        for m in ms.members() {
            for (i, l) in &m.layers {
                let MemberLayer::Quantized(q) = l else {
                    panic!()
                };
                let deq = quantizer::dequantize(q);
                let w = &ckpt.layer(*i).w;
                for (c, (dr, wr)) in deq.rows().zip(w.rows()).enumerate() {
                    let s = q.grids().scales()[c];
                    for (a, b) in dr.iter().zip(wr) {
                        assert!((a - b).abs() < s);
                    }
                }
            }
        }
    }

    #[test]
    fn prob_ensemble_examples() {
        let ckpt = model();
        let ms = generate_members(&ckpt, &bsr(6, 1, 0)).unwrap();
        let p = predict_prob_ensemble(&ms, &x()).unwrap().probs;
        let single = nn::forward(&ms.member_checkpoint(0).unwrap(), &x())
            .unwrap()
            .softmax();
        assert_eq!(p, single);

        // S identical members equal S = 1
        let m0 = ms.members()[0].clone();
        let copies: Vec<Member> = (0..3)
            .map(|i| Member {
                index: i,
                ..m0.clone()
            })
            .collect();
        let dup = MemberSet::new(bsr(6, 3, 0), ckpt.clone(), copies).unwrap();
        let q = predict_prob_ensemble(&dup, &x()).unwrap().probs;
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn prob_average_of_opposite_members() {
        let z = Tensor::new(vec![2, 1, 2], vec![100.0, 0.0, 0.0, 100.0]).unwrap();
        let p = average_probs(&z).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    fn linear_member_set(biases: &[[f32; 2]]) -> MemberSet {
        // 1 -> 2 linear model with zero weights; the bias is the logit.
        let spec = ModelSpec::with_mask(vec![1, 2], Activation::Relu, vec![true]).unwrap();
        let base = Checkpoint::new(
            spec,
            vec![Linear {
                w: Tensor::zeros(&[2, 1]),
                b: Tensor::zeros(&[2]),
            }],
        )
        .unwrap();
        // logits per member are encoded through dense weights with x = 1
        let members = biases
            .iter()
            .enumerate()
            .map(|(i, b)| Member {
                index: i,
                seed: 0,
                layers: vec![(
                    0,
                    MemberLayer::Dense(Tensor::new(vec![2, 1], b.to_vec()).unwrap()),
                )],
            })
            .collect();
        let spec = EnsembleSpec::new(Method::Gaussian { sigma2: 1.0 }, biases.len(), 0).unwrap();
        MemberSet::new(spec, base, members).unwrap()
    }

    #[test]
    fn logit_mean_examples() {
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let ms = linear_member_set(&[[0.0, 0.0], [2.0, 0.0]]);
        let p = predict_logit_mean(&ms, &one).unwrap().probs;
        assert!((p.data()[0] - 0.731059).abs() < 1e-6);
        assert!((p.data()[1] - 0.268941).abs() < 1e-6);

        let single = linear_member_set(&[[0.3, -0.2]]);
        let shifted = linear_member_set(&[[0.3, -0.2], [5.3, 4.8]]);
        let a = predict_logit_mean(&single, &one).unwrap().probs;
        let b = predict_logit_mean(&shifted, &one).unwrap().probs;
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn member_order_does_not_matter() {
        let ckpt = model();
        let ms = generate_members(&ckpt, &bsr(4, 4, 2)).unwrap();
        let mut shuffled = ms.members().to_vec();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let again = MemberSet::new(*ms.spec(), ckpt, shuffled).unwrap();
        let a = predict_prob_ensemble(&ms, &x()).unwrap().probs;
        let b = predict_prob_ensemble(&again, &x()).unwrap().probs;
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn prob_rows_are_distributions() {
        let ms = generate_members(&model(), &bsr(3, 7, 4)).unwrap();
        let p = predict_prob_ensemble(&ms, &x()).unwrap().probs;
        for row in p.rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn memory_budget_closed_form() {
        // one masked 4×3 layer, then a frozen 2×4 head
        let spec = ModelSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let ckpt = Checkpoint::random_init(spec, 0).unwrap();
        let shared = 4 + 2 * 4 + 2; // b1, W2, b2
        let one = generate_members(&ckpt, &bsr(5, 1, 0)).unwrap();
        assert_eq!(memory_budget(&one), 60 + 128 + 32 * shared);
        let three = generate_members(&ckpt, &bsr(5, 3, 0)).unwrap();
        assert_eq!(memory_budget(&three), 3 * (60 + 128) + 32 * shared);

        // full-precision member, nothing shared beyond biases and head
        let g = generate_members(
            &ckpt,
            &EnsembleSpec::new(Method::Gaussian { sigma2: 0.1 }, 1, 0).unwrap(),
        )
        .unwrap();
        assert_eq!(memory_budget(&g), 32 * ckpt.param_count() as u64);
    }

    #[test]
    fn single_member_report_is_degenerate() {
        let data = make_blobs(3, 2, 10, 1.0, 1).unwrap();
        let ms = generate_members(&model(), &bsr(5, 1, 0)).unwrap();
        let r = evaluate(&ms, &data).unwrap();
        assert_eq!(r.ambiguity, Some(0.0));
        assert_eq!(r.nll, r.avg_loss);
        assert_eq!(r.avg_loss, r.ensemble_loss);

        let c = evaluate_checkpoint(&model(), &data).unwrap();
        assert_eq!(c.ambiguity, None);
        assert_eq!(c.nll, c.avg_loss);
        assert_eq!(c.per_member_nll.len(), 1);
    }
}
