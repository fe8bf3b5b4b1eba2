use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::spec::{Family, ModelSpec, TapActivation, GROUP_TAPS};
use crate::error::{Error, Result};
use crate::tensor::{lit, BatchStats, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running estimate.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One intermediate activation captured during forward.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub layer: &'static str,
    pub activation: Var,
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    pub taps: Vec<FeatureMap>,
    /// Tape handles of [`Model::params`], in the same order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<T> ForwardOutput<T> {
    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|t| t.layer == name)
            .map(|t| t.activation)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
enum Unit {
    /// bn-relu-conv-bn-relu-conv with identity or 1×1 shortcut on the
    /// activated input.
    PreAct {
        bn1: Bn,
        conv1: Conv,
        bn2: Bn,
        conv2: Conv,
        shortcut: Option<Conv>,
    },
    /// conv-bn-relu-conv-bn, add shortcut, relu.
    PostAct {
        conv1: Conv,
        bn1: Bn,
        conv2: Conv,
        bn2: Bn,
        shortcut: Option<(Conv, Bn)>,
    },
    /// conv-bn-relu.
    Plain { conv: Conv, bn: Bn },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    stem: Conv,
    stem_bn: Option<Bn>,
    groups: Vec<Vec<Unit>>,
    final_bn: Option<Bn>,
    fc_w: usize,
    fc_b: usize,
}

struct Builder<'r, T, R> {
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// He-normal (fan-in) initialization.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        let w = self.push(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, k, k], data).expect("shape matches"),
        );
        Conv {
            w,
            stride,
            pad: k / 2,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(&[c]));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.running.push(RunningStats {
            name: name.to_string(),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng,
        };
        let cin = spec.input_shape[0];
        let widths = spec.group_channels();
        let units = spec.units_per_group();
        let pre_act = spec.family == Family::Wrn;

        let stem = b.conv("conv1", cin, 16, 3, 1);
        let stem_bn = (!pre_act).then(|| b.bn("bn1", 16));
        let mut groups = Vec::with_capacity(3);
        let mut c = 16;
        for (g, &out) in widths.iter().enumerate() {
            let mut group = Vec::with_capacity(units);
            for u in 0..units {
                let stride = if g > 0 && u == 0 { 2 } else { 1 };
                let p = format!("group{}.{u}", g + 1);
                let needs_proj = c != out || stride != 1;
                let unit = match spec.family {
                    Family::Wrn => Unit::PreAct {
                        bn1: b.bn(&format!("{p}.bn1"), c),
                        conv1: b.conv(&format!("{p}.conv1"), c, out, 3, stride),
                        bn2: b.bn(&format!("{p}.bn2"), out),
                        conv2: b.conv(&format!("{p}.conv2"), out, out, 3, 1),
                        shortcut: needs_proj.then(|| b.conv(&format!("{p}.shortcut"), c, out, 1, stride)),
                    },
                    Family::ResnetBasic => Unit::PostAct {
                        conv1: b.conv(&format!("{p}.conv1"), c, out, 3, stride),
                        bn1: b.bn(&format!("{p}.bn1"), out),
                        conv2: b.conv(&format!("{p}.conv2"), out, out, 3, 1),
                        bn2: b.bn(&format!("{p}.bn2"), out),
                        shortcut: needs_proj.then(|| {
                            (
                                b.conv(&format!("{p}.shortcut"), c, out, 1, stride),
                                b.bn(&format!("{p}.shortcut_bn"), out),
                            )
                        }),
                    },
                    Family::PlainCnn => Unit::Plain {
                        conv: b.conv(&format!("{p}.conv"), c, out, 3, stride),
                        bn: b.bn(&format!("{p}.bn"), out),
                    },
                };
                group.push(unit);
                c = out;
            }
            groups.push(group);
        }
        let final_bn = pre_act.then(|| b.bn("bn_final", c));

        let classes = spec.num_classes;
        let bound = 1.0 / (c as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let fc: Vec<T> = (0..c * classes)
            .map(|_| T::from_f64_lossy(dist.sample(b.rng)))
            .collect();
        let fc_w = b.push("fc.weight".into(), Tensor::new(&[c, classes], fc)?);
        let fc_b = b.push("fc.bias".into(), Tensor::zeros(&[1, classes]));

        Ok(Model {
            spec,
            params: b.params,
            running: b.running,
            stem,
            stem_bn,
            groups,
            final_bn,
            fc_w,
            fc_b,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Forward pass with trainable parameters.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        self.run(tape, x, mode, params)
    }

    /// Eval-mode forward with parameters registered as constants, so nothing
    /// upstream of the outputs can receive a gradient.
    pub fn forward_frozen(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardOutput<T>> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        self.run(tape, x, Mode::Eval, params)
    }

    /// Blends batch statistics from a train-mode forward into the running
    /// estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} batch-norm statistics, got {}",
                self.running.len(),
                stats.len()
            )));
        }
        let mom: T = lit(BN_MOMENTUM);
        let rest = T::one() - mom;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = mom * *rm + rest * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = mom * *rv + rest * bv;
            }
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape<T>, x: Var, mode: Mode, params: Vec<Var>) -> Result<ForwardOutput<T>> {
        let shape = tape.shape(x)?.to_vec();
        let [c, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("model input", &shape, &[0, c, h, w]));
        }
        let mut ctx = Ctx {
            tape,
            params: &params,
            model: self,
            mode,
            stats: Vec::new(),
        };

        let mut h = ctx.conv(x, self.stem)?;
        if let Some(bn) = self.stem_bn {
            h = ctx.bn(h, bn)?;
            h = ctx.tape.relu(h)?;
        }
        let mut taps = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let mut pre = h;
            for unit in group {
                let (out, raw) = ctx.unit(h, unit)?;
                h = out;
                pre = raw;
            }
            let name = GROUP_TAPS[g];
            if self.spec.tap_points.iter().any(|t| t == name) {
                let activation = match (self.spec.tap_activation, self.spec.family) {
                    (TapActivation::Raw, _) => pre,
                    (TapActivation::PostRelu, Family::Wrn) => ctx.tape.relu(h)?,
                    (TapActivation::PostRelu, _) => h,
                };
                taps.push(FeatureMap { layer: name, activation });
            }
        }
        if let Some(bn) = self.final_bn {
            h = ctx.bn(h, bn)?;
            h = ctx.tape.relu(h)?;
        }
        let pooled = ctx.tape.mean(h, &[2, 3])?;
        let logits = ctx.tape.matmul(pooled, params[self.fc_w])?;
        let n = shape[0];
        let bias = ctx.tape.broadcast_to(params[self.fc_b], &[n, self.spec.num_classes])?;
        let logits = ctx.tape.add(logits, bias)?;
        let stats = ctx.stats;
        Ok(ForwardOutput {
            logits,
            taps,
            params,
            bn_stats: stats,
        })
    }
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    model: &'a Model<T>,
    mode: Mode,
    stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, x: Var, c: Conv) -> Result<Var> {
        self.tape.conv2d(x, self.params[c.w], c.stride, c.pad)
    }

    fn bn(&mut self, x: Var, bn: Bn) -> Result<Var> {
        let (g, b) = (self.params[bn.gamma], self.params[bn.beta]);
        let eps = lit(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b, eps)?;
                self.stats.push(stats);
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.model.running[bn.stats];
                self.tape.batch_norm_eval(x, g, b, &r.mean, &r.var, eps)
            }
        }
    }

    fn bn_relu(&mut self, x: Var, bn: Bn) -> Result<Var> {
        let y = self.bn(x, bn)?;
        self.tape.relu(y)
    }

    /// Returns the unit output and its value before any final activation.
    fn unit(&mut self, x: Var, unit: &Unit) -> Result<(Var, Var)> {
        match *unit {
            Unit::PreAct {
                bn1,
                conv1,
                bn2,
                conv2,
                shortcut,
            } => {
                let o1 = self.bn_relu(x, bn1)?;
                let y = self.conv(o1, conv1)?;
                let y = self.bn_relu(y, bn2)?;
                let y = self.conv(y, conv2)?;
                let skip = match shortcut {
                    Some(sc) => self.conv(o1, sc)?,
                    None => x,
                };
                let out = self.tape.add(y, skip)?;
                Ok((out, out))
            }
            Unit::PostAct {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let y = self.conv(x, conv1)?;
                let y = self.bn_relu(y, bn1)?;
                let y = self.conv(y, conv2)?;
                let y = self.bn(y, bn2)?;
                let skip = match shortcut {
                    Some((sc, sc_bn)) => {
                        let s = self.conv(x, sc)?;
                        self.bn(s, sc_bn)?
                    }
                    None => x,
                };
                let sum = self.tape.add(y, skip)?;
                Ok((self.tape.relu(sum)?, sum))
            }
            Unit::Plain { conv, bn } => {
                let y = self.conv(x, conv)?;
                let y = self.bn(y, bn)?;
                Ok((self.tape.relu(y)?, y))
            }
        }
    }
}
