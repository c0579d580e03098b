//! Central finite-difference verification of analytic gradients, plus a
//! suite of named cases covering every differentiable layer and block.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::interactors::{Interactor, InteractorConfig, InteractorKind, RgcBlock};
use crate::loss;
use crate::model::{ModelConfig, SodModel};
use crate::nn::{self, BnConfig, Conv2d, ConvBnRelu, Mode, Module};
use crate::ops;
use crate::rng;
use crate::tensor::{Parameter, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// both essentially zero do not blow up the ratio.
    pub floor: f64,
    /// Elements probed per parameter; all of them when `None`.
    pub max_probes: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            floor: 1e-5,
            max_probes: Some(8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    /// Probe repetitions with a smaller step.
    pub refined: usize,
    /// Probes at a non-differentiable point accepted because the analytic
    /// gradient equals one of the one-sided slopes.
    pub one_sided: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    /// Parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Step reductions (each by 10x) tried on a failing probe.
pub const KINK_RETRIES: usize = 2;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `loss` with respect to each parameter against
/// central differences. `loss` must rebuild the graph from the current
/// parameter values on every call.
///
/// Kinks (ReLU, max selection) inside the step corrupt the central
/// difference, and with many activations downstream they can be crossed on
/// both sides at once. A failing probe is therefore repeated with the step
/// divided by 10, at most [`KINK_RETRIES`] times, and the best agreement is
/// kept; a wrong analytic gradient fails at every step size. When the point itself is non-differentiable
/// (e.g. a ReLU input exactly at zero behind a dead channel), detected by
/// disagreeing one-sided slopes, the analytic gradient is a one-sided
/// derivative, so agreement with a one-sided slope (first- or second-order
/// stencil) is accepted and counted in [`ParamCheck::one_sided`].
pub fn gradcheck<F>(params: &[Parameter<f64>], loss: F, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Config(format!("gradcheck eps must be positive, got {}", cfg.eps)));
    }
    let eval = |who: &str| -> Result<f64> {
        let v = loss()?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("loss is {v} while probing {who}")))
        }
    };
    for p in params {
        p.zero_grad();
    }
    let l = loss()?;
    if !l.item().is_finite() {
        return Err(Error::Numerical(format!("loss is {} at the unperturbed point", l.item())));
    }
    l.backward()?;
    let base = l.item();
    let mut report = GradReport {
        tol: cfg.tol,
        params: Vec::with_capacity(params.len()),
    };
    for p in params {
        let analytic = p.grad();
        let n = p.numel();
        let probes: Vec<usize> = match cfg.max_probes {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: p.name().to_string(),
            probes: probes.len(),
            refined: 0,
            one_sided: 0,
            max_rel_err: 0.0,
        };
        for &i in &probes {
            let orig = p.values()[i];
            let mut eps = cfg.eps;
            let mut best = f64::INFINITY;
            let mut attempt = 0;
            loop {
                p.update(|w| w[i] = orig + eps);
                let plus = eval(p.name());
                p.update(|w| w[i] = orig - eps);
                let minus = eval(p.name());
                p.update(|w| w[i] = orig);
                let (plus, minus) = (plus?, minus?);
                let mut err = rel_err(analytic[i], (plus - minus) / (2.0 * eps), cfg.floor);
                // One-sided slopes that disagree reveal a kink (ReLU,
                // max selection) inside the step or at the point itself.
                let fwd = (plus - base) / eps;
                let bwd = (base - minus) / eps;
                let kink = rel_err(fwd, bwd, cfg.floor) > cfg.tol;
                if kink && err > cfg.tol {
                    // Second-order one-sided stencils stay accurate when the
                    // kink sits right at the point.
                    p.update(|w| w[i] = orig + 2.0 * eps);
                    let plus2 = eval(p.name());
                    p.update(|w| w[i] = orig - 2.0 * eps);
                    let minus2 = eval(p.name());
                    p.update(|w| w[i] = orig);
                    let (plus2, minus2) = (plus2?, minus2?);
                    let fwd2 = (4.0 * plus - 3.0 * base - plus2) / (2.0 * eps);
                    let bwd2 = (3.0 * base - 4.0 * minus + minus2) / (2.0 * eps);
                    let one_sided = [fwd, bwd, fwd2, bwd2]
                        .into_iter()
                        .map(|d| rel_err(analytic[i], d, cfg.floor))
                        .fold(f64::INFINITY, f64::min);
                    if one_sided <= cfg.tol {
                        check.one_sided += 1;
                        err = one_sided;
                    }
                }
                best = best.min(err);
                if best <= cfg.tol || attempt == KINK_RETRIES {
                    break;
                }
                attempt += 1;
                check.refined += 1;
                eps /= 10.0;
            }
            check.max_rel_err = check.max_rel_err.max(best);
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Elements probed per parameter in the end-to-end case, which holds about
/// a hundred parameter tensors.
pub const MODEL_PROBES: usize = 2;

/// Named cases of the built-in suite.
pub const CASES: &[&str] = &[
    "linear",
    "add_broadcast",
    "mul_broadcast",
    "relu",
    "sigmoid",
    "conv2d",
    "batch_norm",
    "max_pool",
    "global_max_pool",
    "bilinear_resize",
    "concat",
    "adaptive_avg_pool",
    "loss",
    "conv_bn_relu",
    "plain_interactor",
    "rgc",
    "ppm",
    "model",
];

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn input(name: &str, shape: Shape, rng: &mut ChaCha8Rng) -> Parameter<f64> {
    Parameter::new(name, &shape.dims(), uniform(rng, shape.numel()))
}

/// Scalar read-out with random weights, so every element carries a distinct
/// upstream gradient.
fn readout(y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(y.shape(), uniform(rng, y.shape().numel()))
}

/// Values with pairwise gaps of at least `gap`, so max selections do not
/// flip under a small perturbation.
fn spread(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    use rand::seq::SliceRandom;
    v.shuffle(rng);
    v
}

fn bn() -> BnConfig {
    BnConfig::default()
}

fn module_params(m: &dyn Module<f64>) -> Vec<Parameter<f64>> {
    nn::parameters(m)
}

/// Runs suite case `name` with data and weights drawn from `seed`.
pub fn run_case(name: &str, seed: u64, cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut r = rng::stream(seed, &format!("gradcheck/{name}"));
    let mut probe = rng::stream(seed, &format!("gradcheck/{name}/probes"));
    macro_rules! check {
        ($params:expr, $body:expr) => {{
            let params: Vec<Parameter<f64>> = $params;
            gradcheck(&params, $body, cfg, &mut probe)
        }};
    }
    match name {
        "linear" => {
            let x = Tensor::new(Shape::new(1, 4, 1, 1), uniform(&mut r, 4));
            let w = Parameter::new("w", &[3, 4, 1, 1], uniform(&mut r, 12));
            let k = readout(&Tensor::zeros(Shape::new(1, 3, 1, 1)), &mut r);
            check!(vec![w.clone()], || ops::weighted_sum(&nn::conv2d(&x, &w.tensor(), None, 1, 0)?, &k))
        }
        "add_broadcast" | "mul_broadcast" => {
            let a = input("a", Shape::new(2, 3, 4, 5), &mut r);
            let b = input("b", Shape::new(2, 3, 1, 1), &mut r);
            let k = readout(&a.tensor(), &mut r);
            let mul = name == "mul_broadcast";
            check!(vec![a.clone(), b.clone()], || {
                let y = if mul {
                    ops::mul(&a.tensor(), &b.tensor())?
                } else {
                    ops::add(&a.tensor(), &b.tensor())?
                };
                ops::weighted_sum(&y, &k)
            })
        }
        "relu" | "sigmoid" => {
            let x = input("x", Shape::new(2, 3, 4, 4), &mut r);
            // Keep relu inputs away from the kink.
            if name == "relu" {
                x.update(|v| v.iter_mut().for_each(|e| *e += 0.05f64.copysign(*e)));
            }
            let k = readout(&x.tensor(), &mut r);
            let relu = name == "relu";
            check!(vec![x.clone()], || {
                let t = x.tensor();
                ops::weighted_sum(&if relu { ops::relu(&t) } else { ops::sigmoid(&t) }, &k)
            })
        }
        "conv2d" => {
            let stride = r.random_range(1..=2);
            let kernel = [1, 3, 7][r.random_range(0..3)];
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
            let x = input("x", Shape::new(2, cin, 9, 8), &mut r);
            let conv = Conv2d::<f64>::new("conv", None, cin, cout, kernel, stride, kernel / 2, true, &mut r);
            conv.bias.as_ref().unwrap().update(|b| b.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0)));
            let k = readout(&conv.forward(&x.tensor())?, &mut r);
            let mut ps = module_params(&conv);
            ps.push(x.clone());
            check!(ps, || ops::weighted_sum(&conv.forward(&x.tensor())?, &k))
        }
        "batch_norm" => {
            let x = input("x", Shape::new(2, 3, 4, 4), &mut r);
            let gamma = Parameter::new("gamma", &[3], uniform(&mut r, 3));
            let beta = Parameter::new("beta", &[3], uniform(&mut r, 3));
            let k = readout(&x.tensor(), &mut r);
            check!(vec![x.clone(), gamma.clone(), beta.clone()], || {
                let (y, _) = nn::batch_norm_train(&x.tensor(), &gamma.tensor(), &beta.tensor(), 1e-5)?;
                ops::weighted_sum(&y, &k)
            })
        }
        "max_pool" => {
            let s = Shape::new(2, 2, 6, 7);
            let x = Parameter::new("x", &s.dims(), spread(&mut r, s.numel(), 0.01));
            let (kernel, pad) = [(2, 0), (3, 1)][r.random_range(0..2)];
            let k = readout(&nn::max_pool2d(&x.tensor(), kernel, 2, pad)?, &mut r);
            check!(vec![x.clone()], || ops::weighted_sum(&nn::max_pool2d(&x.tensor(), kernel, 2, pad)?, &k))
        }
        "global_max_pool" => {
            let s = Shape::new(2, 4, 5, 7);
            let x = Parameter::new("x", &s.dims(), spread(&mut r, s.numel(), 0.01));
            let k = readout(&Tensor::zeros(Shape::new(2, 4, 1, 1)), &mut r);
            check!(vec![x.clone()], || ops::weighted_sum(&nn::global_max_pool(&x.tensor())?, &k))
        }
        "bilinear_resize" => {
            let x = input("x", Shape::new(1, 2, r.random_range(2..=7), r.random_range(2..=7)), &mut r);
            let (oh, ow) = (r.random_range(1..=12), r.random_range(1..=12));
            let k = readout(&Tensor::zeros(Shape::new(1, 2, oh, ow)), &mut r);
            check!(vec![x.clone()], || ops::weighted_sum(&nn::bilinear_resize(&x.tensor(), oh, ow)?, &k))
        }
        "concat" => {
            let a = input("a", Shape::new(2, 2, 3, 3), &mut r);
            let b = input("b", Shape::new(2, 3, 3, 3), &mut r);
            let k = readout(&Tensor::zeros(Shape::new(2, 5, 3, 3)), &mut r);
            check!(vec![a.clone(), b.clone()], || {
                ops::weighted_sum(&nn::concat_channels(&[a.tensor(), b.tensor()])?, &k)
            })
        }
        "adaptive_avg_pool" => {
            let x = input("x", Shape::new(1, 2, r.random_range(3..=9), r.random_range(3..=9)), &mut r);
            let bins = [1, 2, 3, 6][r.random_range(0..4)];
            let k = readout(&nn::adaptive_avg_pool(&x.tensor(), bins)?, &mut r);
            check!(vec![x.clone()], || ops::weighted_sum(&nn::adaptive_avg_pool(&x.tensor(), bins)?, &k))
        }
        "loss" => {
            let s = Shape::new(2, 1, 4, 4);
            let x = Parameter::new("pred", &s.dims(), (0..s.numel()).map(|_| r.random_range(0.05..0.95)).collect());
            let y = Tensor::new(s, (0..s.numel()).map(|_| f64::from(r.random_bool(0.4) as u8)).collect());
            check!(vec![x.clone()], || loss::total_loss(&x.tensor(), &y))
        }
        "conv_bn_relu" => {
            let x = input("x", Shape::new(2, 3, 5, 5), &mut r);
            let layer = ConvBnRelu::<f64>::new("cbr", None, 3, 4, 3, 1, bn(), &mut r);
            let k = readout(&Tensor::zeros(Shape::new(2, 4, 5, 5)), &mut r);
            let mut ps = module_params(&layer);
            ps.push(x.clone());
            check!(ps, || ops::weighted_sum(&layer.forward(&x.tensor(), Mode::Train)?, &k))
        }
        "plain_interactor" => {
            let c = 4;
            let icfg = InteractorConfig::plain(3, 2, true, c);
            let body = Interactor::<f64>::new(&icfg, "plain", None, bn(), &mut r);
            let x = input("x", Shape::new(2, c, 5, 5), &mut r);
            let k = readout(&x.tensor(), &mut r);
            let mut ps = module_params(&body);
            ps.push(x.clone());
            check!(ps, || ops::weighted_sum(&body.forward(&x.tensor(), &x.tensor(), Mode::Train)?, &k))
        }
        "rgc" => {
            // Two-stage pyramid: the finer stage is calibrated by the
            // coarser one, which also calibrates itself.
            let c = 4;
            let block = RgcBlock::<f64>::new("rgc", None, c, bn(), &mut r);
            let fine = input("fine", Shape::new(2, c, 6, 6), &mut r);
            let coarse = input("coarse", Shape::new(2, c, 3, 3), &mut r);
            let kf = readout(&fine.tensor(), &mut r);
            let kc = readout(&coarse.tensor(), &mut r);
            let mut ps = module_params(&block);
            ps.extend([fine.clone(), coarse.clone()]);
            check!(ps, || {
                let a = ops::weighted_sum(&block.forward(&fine.tensor(), &coarse.tensor(), Mode::Train)?, &kf)?;
                let b = ops::weighted_sum(&block.forward(&coarse.tensor(), &coarse.tensor(), Mode::Train)?, &kc)?;
                ops::add(&a, &b)
            })
        }
        "ppm" => {
            let c = 4;
            let icfg = InteractorConfig::of_kind(InteractorKind::PpmDagger, c);
            let body = Interactor::<f64>::new(&icfg, "ppm", None, bn(), &mut r);
            // Four images so the single-bin branch normalizes over four values.
            let x = input("x", Shape::new(4, c, 6, 6), &mut r);
            let succ = input("succ", Shape::new(4, c, 3, 3), &mut r);
            let k = readout(&x.tensor(), &mut r);
            let mut ps = module_params(&body);
            ps.extend([x.clone(), succ.clone()]);
            check!(ps, || ops::weighted_sum(&body.forward(&x.tensor(), &succ.tensor(), Mode::Train)?, &k))
        }
        "model" => {
            // 64x64 keeps the coarsest stage at 2x2, so its batch norm sees
            // eight values per channel rather than a degenerate pair.
            let size = 64;
            let mut mcfg = ModelConfig::desk(size);
            mcfg.backbone = BackboneConfig {
                stem_channels: 4,
                stage_channels: [4, 4, 8, 8],
                ..BackboneConfig::tiny(size)
            };
            mcfg.interactor = InteractorConfig::of_kind(InteractorKind::RgcDagger, 4);
            let model = SodModel::<f64>::new(&mcfg, seed)?;
            let x = Tensor::new(Shape::new(2, 3, size, size), uniform(&mut r, 2 * 3 * size * size));
            let y = Tensor::new(
                Shape::new(2, 1, size, size),
                (0..2 * size * size).map(|_| f64::from(r.random_bool(0.3) as u8)).collect(),
            );
            let cfg = &GradcheckConfig {
                max_probes: Some(cfg.max_probes.unwrap_or(MODEL_PROBES).min(MODEL_PROBES)),
                ..*cfg
            };
            let params = module_params(&model);
            gradcheck(&params, || loss::total_loss(&model.forward(&x, Mode::Train)?, &y), cfg, &mut probe)
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck case {other:?}; known: {}",
            CASES.join(", ")
        ))),
    }
}
