//! Verification suites behind the `roundtrip`, `gradcheck` and
//! `logdet-check` commands: invertibility, log-det against the dense
//! Jacobian oracle, and tape gradients against finite differences.
//!
//! Log-det and gradient suites run in `f64`; the round-trip suite runs the
//! production `f32` model.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{
    squeeze_forward, squeeze_inverse, ActnormLayer, CouplingLayer, FlowStep, InvConv1x1, Invertible,
};
use crate::invnorm::{InstanceNormLayer, InvNormConfig, InvNormModel, DEFAULT_EPS};
use crate::numerics::check::DEFAULT_EPS as ORACLE_EPS;
use crate::numerics::{
    compare_grads, finite_diff_grad, GradComparison, Graph, JacobianReport, Param, Shape, Tensor,
    Var,
};

/// Round-trip tolerance on `max |decode(encode(x)) - x|`.
pub const ROUNDTRIP_TOL: f64 = 1e-4;
/// Log-det tolerance against the dense oracle.
pub const LOGDET_TOL: f64 = 1e-2;
/// Relative gradient tolerance.
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Gradient entries at or below this magnitude are not compared.
pub const GRAD_FLOOR: f64 = 1e-4;
/// Minimum distance of every ReLU input from zero for a gradient check
/// configuration to be accepted.
pub const RELU_MARGIN: f64 = 0.02;

pub fn default_roundtrip_shapes() -> Vec<Shape> {
    vec![
        Shape::new(1, 3, 32, 32),
        Shape::new(2, 3, 63, 65),
        Shape::new(4, 1, 7, 7),
    ]
}

/// A randomly initialized model with non-trivial layers: data-initialized
/// actnorm, random orthogonal 1x1 convs and random coupling nets.
pub fn random_model(
    config: InvNormConfig,
    x: &Tensor<f32>,
    seed: u64,
) -> Result<InvNormModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = InvNormModel::new(config, &mut rng)?;
    model.initialize(x)?;
    for step in model.steps_mut() {
        step.coupling.randomize_output(0.02, &mut rng);
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTripResult {
    pub shape: Shape,
    pub trials: usize,
    /// Worst `max |decode(encode(x)) - x|` over trials.
    pub max_err: f64,
    /// Squeeze-only round trips were bit-exact on every trial.
    pub squeeze_exact: bool,
}

/// Encode/decode round trips on inputs uniform in `[-3, 3]`, one fresh
/// random model per trial.
pub fn roundtrip_suite(
    shapes: &[Shape],
    trials: usize,
    seed: u64,
    hidden: usize,
) -> Result<Vec<RoundTripResult>> {
    shapes
        .iter()
        .map(|&shape| {
            let mut max_err = 0.0f64;
            let mut squeeze_exact = true;
            for t in 0..trials {
                let trial_seed = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
                let x = Tensor::<f32>::uniform(shape, -3.0, 3.0, &mut rng);
                let config = InvNormConfig::new(shape.c).with_hidden(hidden);
                let model = random_model(config, &x, trial_seed ^ 0x5eed)?;
                let mut enc = model.encode(&x)?;
                let back = model.decode(&enc.features, &mut enc.records)?;
                max_err = max_err.max(back.max_abs_diff(&x));
                let (y, rec) = squeeze_forward(&x);
                squeeze_exact &= squeeze_inverse(&y, &rec)? == x;
            }
            Ok(RoundTripResult {
                shape,
                trials,
                max_err,
                squeeze_exact,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LogdetRow {
    pub name: String,
    pub report: JacobianReport,
}

impl LogdetRow {
    pub fn passed(&self) -> bool {
        self.report.abs_err < LOGDET_TOL
    }
}

/// Largest `(1, c, h, w)` with even `h = w`, `c * h * w <= max_dim`.
fn tiny_shape(c: usize, max_dim: usize) -> Result<Shape> {
    let mut side = 2;
    while c * (side + 2) * (side + 2) <= max_dim {
        side += 2;
    }
    if c * side * side > max_dim {
        return Err(Error::Config(format!(
            "max_dim {max_dim} too small for {c} channels"
        )));
    }
    Ok(Shape::new(1, c, side, side))
}

fn random_actnorm<R: Rng>(c: usize, rng: &mut R) -> ActnormLayer<f64> {
    let scale: Vec<f64> = (0..c)
        .map(|_| rng.gen_range(0.5..2.0) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 })
        .collect();
    let shift: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ActnormLayer::from_values(&scale, &shift).expect("scales bounded away from zero")
}

/// General (non-orthogonal) well-conditioned weight.
fn random_invconv<R: Rng>(c: usize, rng: &mut R) -> InvConv1x1<f64> {
    let m = DMatrix::from_fn(c, c, |i, j| {
        let noise: f64 = rng.gen_range(-0.5..0.5);
        if i == j {
            1.5 + noise
        } else {
            noise
        }
    });
    InvConv1x1::from_matrix(&m).expect("diagonally dominant")
}

fn random_coupling<R: Rng>(c: usize, hidden: usize, rng: &mut R) -> CouplingLayer<f64> {
    let mut layer = CouplingLayer::new(c, hidden, rng).expect("c >= 2");
    layer.randomize_output(0.5, rng);
    layer
}

fn tiny_model(seed: u64) -> Result<InvNormModel<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = InvNormConfig::new(1).with_steps(1).with_hidden(2);
    let mut model = InvNormModel::<f64>::new(config, &mut rng)?;
    for step in model.steps_mut() {
        let c = step.channels();
        step.actnorm = random_actnorm(c, &mut rng);
        step.invconv = random_invconv(c, &mut rng);
        step.coupling.randomize_output(0.5, &mut rng);
    }
    let gamma: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
    model
        .norm_mut()
        .gamma_mut()
        .set_value(Tensor::vector(&gamma))?;
    model
        .norm_mut()
        .beta_mut()
        .set_value(Tensor::vector(&beta))?;
    Ok(model)
}

/// Each layer type on inputs of at most `max_dim` elements, plus the full
/// encoder of a tiny model (1 channel, 4x4, one step per block).
pub fn logdet_suite(max_dim: usize, seed: u64) -> Result<Vec<LogdetRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name: &str, report: JacobianReport| {
        rows.push(LogdetRow {
            name: name.to_string(),
            report,
        });
    };

    let shape = tiny_shape(2, max_dim)?;
    let x = Tensor::<f64>::uniform(shape, -3.0, 3.0, &mut rng);

    let actnorm = random_actnorm(2, &mut rng);
    push(
        "actnorm",
        JacobianReport::compare(
            |t| actnorm.forward(t),
            &x,
            ORACLE_EPS,
            actnorm.logdet(shape)?,
        )?,
    );

    let invconv = random_invconv(2, &mut rng);
    push(
        "invconv",
        JacobianReport::compare(
            |t| invconv.forward(t),
            &x,
            ORACLE_EPS,
            invconv.logdet(shape)?,
        )?,
    );

    let coupling = random_coupling(2, 4, &mut rng);
    push(
        "coupling",
        JacobianReport::compare(
            |t| coupling.forward(t),
            &x,
            ORACLE_EPS,
            coupling.logdet(shape)?,
        )?,
    );

    let squeeze = |t: &Tensor<f64>| Ok(squeeze_forward(t).0);
    push(
        "squeeze",
        JacobianReport::compare(squeeze, &x, ORACLE_EPS, 0.0)?,
    );

    let step = FlowStep {
        actnorm: random_actnorm(2, &mut rng),
        invconv: random_invconv(2, &mut rng),
        coupling: random_coupling(2, 4, &mut rng),
    };
    push(
        "flow-step",
        JacobianReport::compare(|t| step.forward(t), &x, ORACLE_EPS, step.logdet(shape)?)?,
    );

    if max_dim >= 16 {
        let model = tiny_model(rng.gen())?;
        let xs = Shape::new(1, 1, 4, 4);
        let x = Tensor::<f64>::uniform(xs, -3.0, 3.0, &mut rng);
        let enc = |t: &Tensor<f64>| Ok(model.encode(t)?.features);
        push(
            "encoder (1x1x4x4, 1 step/block)",
            JacobianReport::compare(enc, &x, ORACLE_EPS, model.encode_logdet(xs)?)?,
        );
    }
    Ok(rows)
}

/// Layers covered by [`gradcheck_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradLayer {
    Actnorm,
    Invconv,
    Coupling,
    CouplingIdentity,
    InstanceNorm,
    Pipeline,
}

impl GradLayer {
    pub const ALL: [GradLayer; 6] = [
        GradLayer::Actnorm,
        GradLayer::Invconv,
        GradLayer::Coupling,
        GradLayer::CouplingIdentity,
        GradLayer::InstanceNorm,
        GradLayer::Pipeline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradLayer::Actnorm => "actnorm",
            GradLayer::Invconv => "invconv",
            GradLayer::Coupling => "coupling",
            GradLayer::CouplingIdentity => "coupling-identity",
            GradLayer::InstanceNorm => "instance-norm",
            GradLayer::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for GradLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradLayer::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown layer {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub layer: GradLayer,
    /// Seed of the accepted configuration.
    pub seed: u64,
    pub params: GradComparison,
    pub input: GradComparison,
}

impl GradcheckRow {
    pub fn worst(&self) -> f64 {
        self.params.max_rel_err.max(self.input.max_rel_err)
    }

    pub fn passed(&self, rel_tol: f64) -> bool {
        self.worst() < rel_tol
    }
}

/// Compare tape gradients of `sum(r * run(module, x))` with central
/// differences, for every parameter of `module` and for `x`.
fn check_module<M: Clone>(
    module: &M,
    params: impl Fn(&M) -> Vec<&Param<f64>>,
    params_mut: impl Fn(&mut M) -> Vec<&mut Param<f64>>,
    run: impl Fn(&M, &mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
    seed: u64,
) -> Result<Option<(GradComparison, GradComparison)>> {
    let mut g = Graph::new();
    let xv = g.watch(x.clone());
    let y = run(module, &mut g, xv)?;
    if g.relu_margin().is_some_and(|m| m < RELU_MARGIN) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::<f64>::uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let loss = g.weighted_sum(y, r.clone())?;
    g.backward(loss)?;

    let eval = |m: &M, x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = run(m, &mut g, xv)?;
        Ok(g.value(y).dot_f64(&r))
    };

    let mut pcmp = GradComparison::default();
    for (i, p) in params(module).into_iter().enumerate() {
        let analytic = g
            .param_grad(p)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut m = module.clone();
                params_mut(&mut m)[i].set_value(t.clone())?;
                eval(&m, x)
            },
            p.value(),
            eps,
        )?;
        pcmp = pcmp.merge(compare_grads(&analytic, &numeric, GRAD_FLOOR)?);
    }
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = finite_diff_grad(|t| eval(module, t), x, eps)?;
    let icmp = compare_grads(&analytic, &numeric, GRAD_FLOOR)?;
    Ok(Some((pcmp, icmp)))
}

const SEED_ATTEMPTS: u64 = 200;

fn gradcheck_layer(layer: GradLayer, eps: f64, base_seed: u64) -> Result<GradcheckRow> {
    for attempt in 0..SEED_ATTEMPTS {
        let seed = base_seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = match layer {
            GradLayer::Actnorm => {
                let x = Tensor::uniform(Shape::new(2, 3, 3, 3), -3.0, 3.0, &mut rng);
                let m = random_actnorm(3, &mut rng);
                check_module(
                    &m,
                    |m| m.params(),
                    |m| m.params_mut(),
                    |m, g, x| {
                        // forward and inverse paths both carry gradient
                        let y = m.forward_graph(g, x)?;
                        let z = m.inverse_graph(g, x)?;
                        g.concat_channels(y, z)
                    },
                    &x,
                    eps,
                    seed,
                )?
            }
            GradLayer::Invconv => {
                let x = Tensor::uniform(Shape::new(2, 4, 3, 3), -3.0, 3.0, &mut rng);
                let m = random_invconv(4, &mut rng);
                check_module(
                    &m,
                    |m| m.params(),
                    |m| m.params_mut(),
                    |m, g, x| {
                        let y = m.forward_graph(g, x)?;
                        let z = m.inverse_graph(g, x)?;
                        g.concat_channels(y, z)
                    },
                    &x,
                    eps,
                    seed,
                )?
            }
            GradLayer::Coupling | GradLayer::CouplingIdentity => {
                let x = Tensor::uniform(Shape::new(1, 4, 3, 3), -3.0, 3.0, &mut rng);
                let m = if layer == GradLayer::Coupling {
                    random_coupling(4, 3, &mut rng)
                } else {
                    CouplingLayer::new(4, 3, &mut rng)?
                };
                check_module(
                    &m,
                    |m| m.params(),
                    |m| m.params_mut(),
                    |m, g, x| {
                        let y = m.forward_graph(g, x)?;
                        let z = m.inverse_graph(g, x)?;
                        g.concat_channels(y, z)
                    },
                    &x,
                    eps,
                    seed,
                )?
            }
            GradLayer::InstanceNorm => {
                let x = Tensor::uniform(Shape::new(2, 3, 3, 3), -3.0, 3.0, &mut rng);
                let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
                let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let m = InstanceNormLayer::from_parts(
                    Tensor::vector(&gamma),
                    Tensor::vector(&beta),
                    DEFAULT_EPS,
                )?;
                check_module(
                    &m,
                    |m| m.params(),
                    |m| m.params_mut(),
                    |m, g, x| Ok(m.normalize_graph(g, x)?.0),
                    &x,
                    eps,
                    seed,
                )?
            }
            GradLayer::Pipeline => {
                // 16x16 leaves a 4x4 deepest plane: the input gradient survives
                // instance norm and per-plane std is not degenerate
                let x = Tensor::uniform(Shape::new(1, 1, 16, 16), -3.0, 3.0, &mut rng);
                let m = tiny_model(rng.gen())?;
                check_module(
                    &m,
                    |m| m.params(),
                    |m| m.params_mut(),
                    |m, g, x| Ok(m.forward_graph(g, x)?.0),
                    &x,
                    eps,
                    seed,
                )?
            }
        };
        if let Some((params, input)) = out {
            return Ok(GradcheckRow {
                layer,
                seed,
                params,
                input,
            });
        }
    }
    Err(Error::Numerical(format!(
        "no {layer} configuration with ReLU margin {RELU_MARGIN} in {SEED_ATTEMPTS} seeds"
    )))
}

pub fn gradcheck_suite(layers: &[GradLayer], eps: f64, seed: u64) -> Result<Vec<GradcheckRow>> {
    layers
        .iter()
        .map(|&l| gradcheck_layer(l, eps, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shapes() {
        assert_eq!(tiny_shape(2, 16).unwrap(), Shape::new(1, 2, 2, 2));
        assert_eq!(tiny_shape(2, 64).unwrap(), Shape::new(1, 2, 4, 4));
        assert!(tiny_shape(2, 4).is_err());
    }

    #[test]
    fn layer_names_parse() {
        for l in GradLayer::ALL {
            assert_eq!(l.name().parse::<GradLayer>().unwrap(), l);
        }
        assert!("bogus".parse::<GradLayer>().is_err());
    }

    #[test]
    fn small_roundtrip_passes() {
        let r = roundtrip_suite(&[Shape::new(1, 1, 5, 7)], 2, 0, 4).unwrap();
        assert!(r[0].max_err < ROUNDTRIP_TOL && r[0].max_err > 0.0);
        assert!(r[0].squeeze_exact);
    }
}
