//! Runs fixtures through the library on an f64 tape.

use amd_distill::amd::{amd_feature_loss, AmdConfig, AmdFeatureLoss, LayerPairing};
use amd_distill::nn::{FeatureMap, GROUP_TAPS};
use amd_distill::tensor::{Tape, Tensor, Var};

use super::Act;

/// Stacks per-sample activations into one `n×c×h×w` tensor.
pub fn stack(acts: &[Act]) -> Tensor<f64> {
    let a = &acts[0];
    let data: Vec<f64> = acts.iter().flat_map(|x| x.data.iter().copied()).collect();
    Tensor::new(&[acts.len(), a.c, a.h, a.w], data).unwrap()
}

pub fn pairing(layers: usize) -> LayerPairing {
    LayerPairing {
        pairs: GROUP_TAPS[..layers].iter().map(|t| (t.to_string(), t.to_string())).collect(),
    }
}

pub struct Run {
    pub tape: Tape<f64>,
    pub student: Vec<Var>,
    pub out: AmdFeatureLoss,
}

/// `teacher[l]` / `student[l]` hold the batch for layer `l`.
pub fn feature_loss(teacher: &[Vec<Act>], student: &[Vec<Act>], cfg: &AmdConfig) -> Run {
    let mut tape = Tape::new();
    let mut t_taps = Vec::new();
    let mut s_taps = Vec::new();
    let mut student_vars = Vec::new();
    for (l, (t, s)) in teacher.iter().zip(student).enumerate() {
        let tv = tape.constant(stack(t));
        let sv = tape.param(stack(s));
        t_taps.push(FeatureMap { layer: GROUP_TAPS[l], activation: tv });
        s_taps.push(FeatureMap { layer: GROUP_TAPS[l], activation: sv });
        student_vars.push(sv);
    }
    let out = amd_feature_loss(&mut tape, &t_taps, &s_taps, &pairing(teacher.len()), cfg).unwrap();
    Run {
        tape,
        student: student_vars,
        out,
    }
}
