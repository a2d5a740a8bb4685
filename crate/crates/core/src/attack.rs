//! I-FGSM and MI-FGSM on batches of images in `[0, 1]`.
//!
//! `epsilon` and `alpha` are given on the 0–255 scale and divided by 255
//! internally. After every step the image is projected onto the ε-ball
//! around the original and then clamped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::network::{Classifier, NetworkError};

/// Per-image L1 norms below this count as zero in MI-FGSM.
pub const L1_FLOOR: f64 = 1e-12;

/// Images attacked together in one gradient call.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("gradient shape {found:?} does not match image batch {expected:?}")]
    GradShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("pixel {index} = {value} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Provider(String),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackMethod {
    #[serde(rename = "i-fgsm")]
    Ifgsm,
    #[serde(rename = "mi-fgsm")]
    Mifgsm,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Ifgsm => "i-fgsm",
            AttackMethod::Mifgsm => "mi-fgsm",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i-fgsm" | "ifgsm" => Ok(AttackMethod::Ifgsm),
            "mi-fgsm" | "mifgsm" => Ok(AttackMethod::Mifgsm),
            other => Err(AttackError::Config(format!(
                "unknown attack method `{other}` (expected i-fgsm or mi-fgsm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ budget on the 0–255 scale.
    pub epsilon: u32,
    /// Step size on the 0–255 scale.
    pub alpha: f64,
    pub iterations: usize,
    /// MI-FGSM decay factor μ.
    pub momentum: f64,
    pub seed: u64,
}

/// `min(ε + 4, ceil(1.25 ε))`.
pub fn default_iterations(epsilon: u32) -> usize {
    let eps = epsilon as usize;
    (eps + 4).min((5 * eps).div_ceil(4))
}

impl AttackConfig {
    /// Defaults: `N = min(ε + 4, ceil(1.25 ε))`, `α = 1`, `μ = 1`.
    pub fn new(method: AttackMethod, epsilon: u32) -> Self {
        Self {
            method,
            epsilon,
            alpha: 1.0,
            iterations: default_iterations(epsilon),
            momentum: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if self.epsilon == 0 {
            return bad("epsilon must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.iterations == 0 {
            return bad("iteration count must be at least 1");
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return bad("momentum must be non-negative");
        }
        Ok(())
    }

    pub fn epsilon_unit(&self) -> f64 {
        self.epsilon as f64 / 255.0
    }

    pub fn alpha_unit(&self) -> f64 {
        self.alpha / 255.0
    }
}

/// Source of input gradients for an attack; `iteration` lets ensembles
/// pick a fresh ghost per step.
pub trait GradProvider: Sync {
    /// Gradient of each image's own loss, same shape as `batch`.
    fn grad(&self, iteration: usize, batch: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

/// A single fixed model as gradient source.
pub struct ModelGrad<'a, C: ?Sized>(pub &'a C);

impl<C: Classifier + ?Sized> GradProvider for ModelGrad<'_, C> {
    fn grad(&self, _iteration: usize, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        Ok(self.0.input_grad(batch, labels)?)
    }
}

/// A batch mid-attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub original: Tensor,
    pub adversarial: Tensor,
    /// MI-FGSM accumulator `g_n`; stays zero for I-FGSM.
    pub accumulated: Tensor,
    /// Number of completed steps.
    pub iteration: usize,
}

impl AttackState {
    pub fn new(images: &Tensor) -> Self {
        Self {
            original: images.clone(),
            adversarial: images.clone(),
            accumulated: Tensor::zeros(images.shape().to_vec()),
            iteration: 0,
        }
    }

    /// Largest `|adv - orig|` over all pixels.
    pub fn linf(&self) -> f64 {
        self.original
            .data()
            .iter()
            .zip(self.adversarial.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One update of `state` given the gradient at its current image.
pub fn attack_step(state: &mut AttackState, grad: &Tensor, cfg: &AttackConfig) -> Result<()> {
    if grad.shape() != state.adversarial.shape() {
        return Err(AttackError::GradShape {
            expected: state.adversarial.shape().to_vec(),
            found: grad.shape().to_vec(),
        });
    }
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(AttackError::NonFiniteGradient {
            iteration: state.iteration,
        });
    }
    let eps = cfg.epsilon_unit();
    let alpha = cfg.alpha_unit();
    let per_image = state.adversarial.sample_len();
    let direction: &Tensor = match cfg.method {
        AttackMethod::Ifgsm => grad,
        AttackMethod::Mifgsm => {
            let acc = state.accumulated.data_mut();
            for (a, g) in acc.chunks_mut(per_image).zip(grad.data().chunks(per_image)) {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                for (ai, gi) in a.iter_mut().zip(g) {
                    let normalized = if l1 < L1_FLOOR { 0.0 } else { gi / l1 };
                    *ai = cfg.momentum * *ai + normalized;
                }
            }
            &state.accumulated
        }
    };
    let dir = direction.data().to_vec();
    let orig = state.original.data();
    for ((x, &o), d) in state.adversarial.data_mut().iter_mut().zip(orig).zip(dir) {
        let stepped = *x + alpha * sign(d);
        *x = stepped.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
    state.iteration += 1;
    Ok(())
}

/// Runs `cfg.iterations` steps on `images`, calling `observe` after each.
pub fn run_attack_observed(
    images: &Tensor,
    labels: &[usize],
    provider: &dyn GradProvider,
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(&AttackState),
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(images, labels)?;
    let mut state = AttackState::new(images);
    for j in 0..cfg.iterations {
        let grad = provider.grad(j, &state.adversarial, labels)?;
        attack_step(&mut state, &grad, cfg)?;
        observe(&state);
    }
    Ok(state.adversarial)
}

/// Attacks `images` in fixed-size chunks processed in parallel. The output
/// depends only on the inputs, never on thread scheduling.
pub fn run_attack(
    images: &Tensor,
    labels: &[usize],
    provider: &dyn GradProvider,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(images, labels)?;
    let n = images.batch_size();
    let per_image = images.sample_len();
    let sample_shape = images.shape()[1..].to_vec();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let rows: Vec<&[f64]> = (start..end).map(|i| images.sample(i)).collect();
            let batch = Tensor::stack(&sample_shape, &rows)?;
            run_attack_observed(&batch, &labels[start..end], provider, cfg, &mut |_| {})
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let mut data = Vec::with_capacity(n * per_image);
    for c in chunks {
        data.extend_from_slice(c.data());
    }
    Ok(Tensor::new(images.shape().to_vec(), data)?)
}

fn check_inputs(images: &Tensor, labels: &[usize]) -> Result<()> {
    if images.shape().len() < 2 || images.batch_size() != labels.len() {
        return Err(AttackError::LabelCount {
            images: images.shape().first().copied().unwrap_or(0),
            labels: labels.len(),
        });
    }
    if let Some((index, &value)) = images
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(AttackError::PixelRange { index, value });
    }
    Ok(())
}

impl From<crate::autodiff::AutodiffError> for AttackError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        AttackError::Network(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed gradient sequence regardless of the image.
    struct Scripted(Vec<Tensor>);

    impl GradProvider for Scripted {
        fn grad(&self, iteration: usize, _: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok(self.0[iteration % self.0.len()].clone())
        }
    }

    fn scripted(n: usize, shape: &[usize], seed: u64) -> Scripted {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        Scripted(
            (0..n)
                .map(|_| {
                    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Tensor::new(shape.to_vec(), data).unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn default_iterations_follow_the_formula() {
        assert_eq!(default_iterations(8), 10);
        assert_eq!(default_iterations(4), 5);
        assert_eq!(default_iterations(16), 20);
        assert_eq!(default_iterations(1), 2);
        assert_eq!(AttackConfig::new(AttackMethod::Ifgsm, 8).iterations, 10);
    }

    #[test]
    fn zero_gradient_leaves_the_image() {
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        for method in [AttackMethod::Ifgsm, AttackMethod::Mifgsm] {
            let cfg = AttackConfig::new(method, 8);
            let zero = Scripted(vec![Tensor::zeros(vec![1, 3])]);
            let out = run_attack(&x, &[0], &zero, &cfg).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = AttackConfig {
            iterations: 0,
            ..AttackConfig::new(AttackMethod::Ifgsm, 8)
        };
        let x = Tensor::zeros(vec![1, 2]);
        let g = Scripted(vec![Tensor::zeros(vec![1, 2])]);
        assert!(matches!(run_attack(&x, &[0], &g, &cfg), Err(AttackError::Config(_))));
    }

    #[test]
    fn single_step_with_alpha_epsilon_is_fgsm() {
        let x = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.01, 0.99]).unwrap();
        let g = Tensor::new(vec![1, 4], vec![2.0, -0.1, -3.0, 1.0]).unwrap();
        let cfg = AttackConfig {
            iterations: 1,
            alpha: 8.0,
            ..AttackConfig::new(AttackMethod::Ifgsm, 8)
        };
        let out = run_attack(&x, &[0], &Scripted(vec![g]), &cfg).unwrap();
        let e = 8.0 / 255.0;
        let expect = [0.5 + e, 0.5 - e, 0.0, 1.0];
        for (o, x) in out.data().iter().zip(expect) {
            assert!((o - x).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_zero_matches_ifgsm_bitwise() {
        let x = Tensor::filled(vec![2, 5], 0.4);
        let grads = scripted(10, &[2, 5], 3);
        let i = AttackConfig::new(AttackMethod::Ifgsm, 8);
        let m = AttackConfig {
            momentum: 0.0,
            ..AttackConfig::new(AttackMethod::Mifgsm, 8)
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_attack_observed(&x, &[0, 1], &grads, &i, &mut |s| a.push(s.adversarial.clone())).unwrap();
        run_attack_observed(&x, &[0, 1], &grads, &m, &mut |s| b.push(s.adversarial.clone())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mifgsm_normalizes_each_image() {
        // One image has a tiny-magnitude gradient, the other a huge one; the
        // accumulator treats them alike.
        let g = Tensor::new(vec![2, 2], vec![1e-6, -3e-6, 5e3, -1.5e4]).unwrap();
        let mut state = AttackState::new(&Tensor::filled(vec![2, 2], 0.5));
        attack_step(&mut state, &g, &AttackConfig::new(AttackMethod::Mifgsm, 8)).unwrap();
        let acc = state.accumulated.data();
        assert!((acc[0] - 0.25).abs() < 1e-12 && (acc[1] + 0.75).abs() < 1e-12);
        assert!((acc[2] - 0.25).abs() < 1e-12 && (acc[3] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn constraints_hold_after_every_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data = (0..3 * 16).map(|_| rng.random::<f64>().powi(3)).collect();
        let x = Tensor::new(vec![3, 16], data).unwrap();
        let grads = scripted(7, &[3, 16], 5);
        for method in [AttackMethod::Ifgsm, AttackMethod::Mifgsm] {
            for eps in [1, 4, 8, 16] {
                let cfg = AttackConfig {
                    alpha: 3.0,
                    ..AttackConfig::new(method, eps)
                };
                let bound = eps as f64 / 255.0 + 1e-12;
                run_attack_observed(&x, &[0, 0, 0], &grads, &cfg, &mut |s| {
                    assert!(s.linf() <= bound);
                    assert!(s.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_iteration() {
        let x = Tensor::filled(vec![1, 2], 0.5);
        let good = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap();
        let g = Scripted(vec![good.clone(), good, bad]);
        let cfg = AttackConfig::new(AttackMethod::Ifgsm, 8);
        assert!(matches!(
            run_attack(&x, &[0], &g, &cfg),
            Err(AttackError::NonFiniteGradient { iteration: 2 })
        ));
    }

    #[test]
    fn chunked_run_matches_single_batch() {
        use crate::network::{build, Preset};
        let net = build(Preset::PlainMlp.spec("p", &[4], 3), 2).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 150;
        let x = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let cfg = AttackConfig::new(AttackMethod::Mifgsm, 8);
        let a = run_attack(&x, &labels, &ModelGrad(&net), &cfg).unwrap();
        let b = run_attack_observed(&x, &labels, &ModelGrad(&net), &cfg, &mut |_| {}).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(a, run_attack(&x, &labels, &ModelGrad(&net), &cfg).unwrap());
    }
}
