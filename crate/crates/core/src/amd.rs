//! Angular-margin knowledge and the three-term distillation loss.

use serde::{Deserialize, Serialize};

use crate::attention::{
    align_spatial, attention_map, frobenius_normalize, mask_negative, normalize_pair, split_local, AttentionPair,
    LocalMode,
};
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, ModelSpec};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmdConfig {
    /// Hypersphere radius.
    pub s: f64,
    /// Multiplicative margin on the positive angle.
    pub m: f64,
    pub gamma: f64,
    pub global_weight: f64,
    pub local_weight: f64,
    pub use_local: bool,
    pub use_mask: bool,
    pub mask_threshold: f64,
    /// Attention power.
    pub d: f64,
    pub local_mode: LocalMode,
    /// Tolerate all-zero attention maps instead of failing.
    pub norm_guard: bool,
}

impl Default for AmdConfig {
    fn default() -> Self {
        AmdConfig {
            s: 64.0,
            m: 1.35,
            gamma: 5000.0,
            global_weight: 0.8,
            local_weight: 0.2,
            use_local: false,
            use_mask: false,
            mask_threshold: 0.5,
            d: 2.0,
            local_mode: LocalMode::Renormalize,
            norm_guard: false,
        }
    }
}

impl AmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("amd.s must be positive, got {}", self.s)));
        }
        if !(self.m >= 1.0 && self.m.is_finite()) {
            return Err(Error::Config(format!("amd.m must be at least 1, got {}", self.m)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("amd.gamma must be non-negative, got {}", self.gamma)));
        }
        if self.global_weight < 0.0 || self.local_weight < 0.0 || (self.global_weight + self.local_weight - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "amd.global_weight + amd.local_weight must equal 1, got {} + {}",
                self.global_weight, self.local_weight
            )));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!(
                "amd.mask_threshold must lie in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        if self.d < 1.0 {
            return Err(Error::Config(format!("amd.d must be at least 1, got {}", self.d)));
        }
        Ok(())
    }

    /// Settings that are legal but probably unintended.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.m > 2.0 {
            w.push(format!(
                "amd.m = {} pushes m·θ past π; cos is no longer monotone there",
                self.m
            ));
        }
        w
    }
}

/// Teacher/student tap pairs `(teacher layer, student layer)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairing {
    pub pairs: Vec<(String, String)>,
}

impl LayerPairing {
    /// Pairs taps by group index, whatever the two depths are.
    pub fn by_group(teacher: &ModelSpec, student: &ModelSpec) -> Result<Self> {
        if teacher.tap_points.len() != student.tap_points.len() {
            return Err(Error::Pairing(format!(
                "teacher exposes {} taps, student {}",
                teacher.tap_points.len(),
                student.tap_points.len()
            )));
        }
        let pairs: Vec<(String, String)> = teacher
            .tap_points
            .iter()
            .zip(&student.tap_points)
            .map(|(t, s)| (t.clone(), s.clone()))
            .collect();
        if let Some((t, s)) = pairs.iter().find(|(t, s)| t != s) {
            return Err(Error::Pairing(format!("tap {t} would pair with {s}")));
        }
        Ok(LayerPairing { pairs })
    }
}

/// `G = log(e^a / (e^a + e^b))` with `a = s·cos(m·acos q_pos)` and
/// `b = s·cos(acos q_neg)`, evaluated as `−logsumexp(0, b − a)` so that
/// values near zero keep their relative precision.
pub fn angular_knowledge<T: Scalar>(tape: &mut Tape<T>, pair: &AttentionPair, s: f64, m: f64) -> Result<Var> {
    let theta_p = tape.acos(pair.q_pos)?;
    let mt = tape.mul_scalar(theta_p, lit(m))?;
    let cp = tape.cos(mt)?;
    let a = tape.mul_scalar(cp, lit(s))?;
    let theta_n = tape.acos(pair.q_neg)?;
    let cn = tape.cos(theta_n)?;
    let b = tape.mul_scalar(cn, lit(s))?;
    let d = tape.sub(b, a)?;
    let shape = tape.shape(d)?.to_vec();
    let zero = tape.constant(Tensor::zeros(&shape));
    let both = tape.concat(&[zero, d], 1)?;
    let lse = tape.logsumexp(both, &[1])?;
    let lse = tape.reshape(lse, &shape)?;
    tape.neg(lse)
}

/// Raw A/P/N terms for one layer pair, batch means of squared Frobenius
/// distances.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerComponents {
    pub layer: String,
    pub a: f64,
    pub p: f64,
    pub n: f64,
}

#[derive(Debug, Clone)]
pub struct AmLoss {
    pub loss: Var,
    pub components: Vec<LayerComponents>,
}

impl AmLoss {
    /// Component totals over layers.
    pub fn totals(&self) -> (f64, f64, f64) {
        self.components
            .iter()
            .fold((0.0, 0.0, 0.0), |(a, p, n), c| (a + c.a, p + c.p, n + c.n))
    }
}

/// Test hook: flips the sign of the student's angular knowledge.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    FlipStudentG,
}

fn sq_dist<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let d = tape.sub(x, y)?;
    let sq = tape.mul(d, d)?;
    let per_sample = tape.sum(sq, &[1, 2, 3])?;
    tape.mean(per_sample, &[])
}

/// Three-term loss over aligned teacher/student pair lists.
pub fn am_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[AttentionPair],
    student: &[AttentionPair],
    cfg: &AmdConfig,
) -> Result<AmLoss> {
    am_loss_with_fault(tape, teacher, student, cfg, Fault::None)
}

#[doc(hidden)]
pub fn am_loss_with_fault<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[AttentionPair],
    student: &[AttentionPair],
    cfg: &AmdConfig,
    fault: Fault,
) -> Result<AmLoss> {
    if teacher.is_empty() {
        return Err(Error::Pairing("empty layer pairing".into()));
    }
    if teacher.len() != student.len() {
        return Err(Error::Pairing(format!(
            "{} teacher pairs vs {} student pairs",
            teacher.len(),
            student.len()
        )));
    }
    let guard = cfg.norm_guard;
    let mut total: Option<Var> = None;
    let mut components = Vec::with_capacity(teacher.len());
    for (t, s) in teacher.iter().zip(student) {
        let (ts, ss) = (tape.shape(t.q_pos)?.to_vec(), tape.shape(s.q_pos)?.to_vec());
        if ts != ss {
            return Err(Error::shape("am_loss", &ts, &ss));
        }
        let gt = angular_knowledge(tape, t, cfg.s, cfg.m)?;
        let mut gs = angular_knowledge(tape, s, cfg.s, cfg.m)?;
        if fault == Fault::FlipStudentG {
            gs = tape.neg(gs)?;
        }
        let gt = frobenius_normalize(tape, gt, true)?;
        let gs = frobenius_normalize(tape, gs, true)?;
        let a = sq_dist(tape, gt, gs)?;

        let pt = frobenius_normalize(tape, t.q_pos, guard)?;
        let ps = frobenius_normalize(tape, s.q_pos, guard)?;
        let p = sq_dist(tape, pt, ps)?;

        // Masked negatives may vanish entirely; always guard them.
        let nt = frobenius_normalize(tape, t.q_neg, true)?;
        let ns = frobenius_normalize(tape, s.q_neg, true)?;
        let n = sq_dist(tape, nt, ns)?;

        components.push(LayerComponents {
            layer: s.layer.clone(),
            a: tape.item(a)?.as_f64(),
            p: tape.item(p)?.as_f64(),
            n: tape.item(n)?.as_f64(),
        });
        let ap = tape.add(a, p)?;
        let apn = tape.add(ap, n)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, apn)?,
            None => apn,
        });
    }
    let scale = 1.0 / (3.0 * teacher.len() as f64);
    let loss = tape.mul_scalar(total.expect("non-empty"), lit(scale))?;
    Ok(AmLoss { loss, components })
}

#[derive(Debug, Clone)]
pub struct AmdFeatureLoss {
    pub loss: Var,
    pub global: AmLoss,
    /// One entry per quadrant when local distillation is on.
    pub local: Vec<AmLoss>,
}

impl AmdFeatureLoss {
    /// A/P/N totals with the same weighting as the loss itself.
    pub fn weighted_components(&self, cfg: &AmdConfig) -> (f64, f64, f64) {
        let (ga, gp, gn) = self.global.totals();
        if self.local.is_empty() {
            return (ga, gp, gn);
        }
        let k = self.local.len() as f64;
        let (la, lp, ln) = self.local.iter().map(AmLoss::totals).fold((0.0, 0.0, 0.0), |acc, t| {
            (acc.0 + t.0 / k, acc.1 + t.1 / k, acc.2 + t.2 / k)
        });
        let (wg, wl) = (cfg.global_weight, cfg.local_weight);
        (wg * ga + wl * la, wg * gp + wl * lp, wg * gn + wl * ln)
    }
}

fn find_tap(taps: &[FeatureMap], name: &str) -> Result<Var> {
    taps.iter()
        .find(|t| t.layer == name)
        .map(|t| t.activation)
        .ok_or_else(|| Error::UnknownTap(name.to_string()))
}

/// Builds the teacher and student attention pairs for every paired tap.
pub fn build_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_taps: &[FeatureMap],
    student_taps: &[FeatureMap],
    pairing: &LayerPairing,
    cfg: &AmdConfig,
) -> Result<(Vec<AttentionPair>, Vec<AttentionPair>)> {
    let mut tp = Vec::with_capacity(pairing.pairs.len());
    let mut sp = Vec::with_capacity(pairing.pairs.len());
    for (tl, sl) in &pairing.pairs {
        let at = find_tap(teacher_taps, tl)?;
        let as_ = find_tap(student_taps, sl)?;
        let ft = attention_map(tape, at, cfg.d)?;
        let fs = attention_map(tape, as_, cfg.d)?;
        let (ft, fs) = align_spatial(tape, ft, fs)?;
        tp.push(normalize_pair(tape, ft, tl, cfg.norm_guard)?);
        sp.push(normalize_pair(tape, fs, sl, cfg.norm_guard)?);
    }
    Ok((tp, sp))
}

fn masked<T: Scalar>(tape: &mut Tape<T>, pairs: Vec<AttentionPair>, cfg: &AmdConfig) -> Result<Vec<AttentionPair>> {
    if !cfg.use_mask {
        return Ok(pairs);
    }
    pairs.iter().map(|p| mask_negative(tape, p, cfg.mask_threshold)).collect()
}

/// Global loss, optionally blended with the mean over the four quadrants.
pub fn amd_feature_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_taps: &[FeatureMap],
    student_taps: &[FeatureMap],
    pairing: &LayerPairing,
    cfg: &AmdConfig,
) -> Result<AmdFeatureLoss> {
    let (tp, sp) = build_pairs(tape, teacher_taps, student_taps, pairing, cfg)?;
    amd_loss_from_pairs(tape, &tp, &sp, cfg)
}

/// [`amd_feature_loss`] starting from already-normalized global pairs.
pub fn amd_loss_from_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[AttentionPair],
    student: &[AttentionPair],
    cfg: &AmdConfig,
) -> Result<AmdFeatureLoss> {
    let gt = masked(tape, teacher.to_vec(), cfg)?;
    let gs = masked(tape, student.to_vec(), cfg)?;
    let global = am_loss(tape, &gt, &gs, cfg)?;
    if !cfg.use_local {
        return Ok(AmdFeatureLoss {
            loss: global.loss,
            global,
            local: Vec::new(),
        });
    }

    let mut quads_t: [Vec<AttentionPair>; 4] = Default::default();
    let mut quads_s: [Vec<AttentionPair>; 4] = Default::default();
    for (t, s) in teacher.iter().zip(student) {
        let qt = split_local(tape, t, cfg.local_mode, cfg.norm_guard)?;
        let qs = split_local(tape, s, cfg.local_mode, cfg.norm_guard)?;
        for (k, (a, b)) in qt.into_iter().zip(qs).enumerate() {
            quads_t[k].push(a);
            quads_s[k].push(b);
        }
    }
    let mut local = Vec::with_capacity(4);
    let mut local_sum: Option<Var> = None;
    for (qt, qs) in quads_t.into_iter().zip(quads_s) {
        let qt = masked(tape, qt, cfg)?;
        let qs = masked(tape, qs, cfg)?;
        let l = am_loss(tape, &qt, &qs, cfg)?;
        local_sum = Some(match local_sum {
            Some(acc) => tape.add(acc, l.loss)?,
            None => l.loss,
        });
        local.push(l);
    }
    let local_mean = tape.mul_scalar(local_sum.expect("four quadrants"), lit(0.25))?;
    let g = tape.mul_scalar(global.loss, lit(cfg.global_weight))?;
    let l = tape.mul_scalar(local_mean, lit(cfg.local_weight))?;
    let loss = tape.add(g, l)?;
    Ok(AmdFeatureLoss { loss, global, local })
}
