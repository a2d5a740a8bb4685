//! Declarative networks, supervised training of base models, and the
//! `GNET` weight file.

mod file;
mod spec;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Reduction, Tape, Tensor, Var};

pub use file::{GNET_MAGIC, GNET_VERSION};
pub use spec::{
    Architecture, LayerSpec, NetworkSpec, ParamInfo, Preset, LAYER_KINDS, PLAIN_WIDTH, RES_BLOCKS,
    RES_WIDTH,
};
pub use train::{train, Optimizer, TrainConfig};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape chain breaks at {layer}: {reason}")]
    ShapeChain { layer: String, reason: String },
    #[error("unknown network preset `{0}`")]
    UnknownPreset(String),
    #[error("input batch shape {found:?} does not match per-sample shape {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {name}: expected shape {expected:?}, got {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged { epoch: usize },
    #[error("training data has no {0} samples")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not a GNET file")]
    BadMagic { path: std::path::PathBuf },
    #[error("{path}: unsupported GNET version {found} (expected {GNET_VERSION})")]
    Version { path: std::path::PathBuf, found: u16 },
    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: std::path::PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: unknown layer kind `{kind}`")]
    UnknownLayerKind {
        path: std::path::PathBuf,
        kind: String,
    },
    #[error("{path}: malformed model file: {reason}")]
    Malformed {
        path: std::path::PathBuf,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Perturbation applied while evaluating a network.
///
/// Slots and residual blocks are numbered in forward order, descending into
/// residual branches as they are met.
pub trait Erosion {
    /// Multiplicative mask (per-sample shape) for erosion slot `slot`.
    fn slot_mask(&self, _slot: usize) -> Option<&Tensor> {
        None
    }

    /// Scalar on the identity path of residual block `block`.
    fn skip_scale(&self, _block: usize) -> f64 {
        1.0
    }
}

/// The unperturbed base network.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoErosion;

impl Erosion for NoErosion {}

/// Anything that maps an input batch to class logits and input gradients.
pub trait Classifier: Sync {
    fn model_id(&self) -> String;

    /// `[batch, classes]` logits.
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;

    /// Gradient of the summed cross-entropy w.r.t. the input batch; row `i`
    /// is the gradient of sample `i`'s own loss.
    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor>;

    /// Argmax of the logits, lowest index on ties.
    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    /// Softmax probabilities.
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.logits(batch)?;
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let p = tape.softmax(z)?;
        Ok(tape.value(p).clone())
    }
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A network together with its weights.
///
/// Weights cannot be modified through this type once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetwork {
    spec: NetworkSpec,
    arch: Architecture,
    params: Vec<Param>,
    init_seed: u64,
    meta: Option<TrainingMeta>,
    fingerprint: u64,
}

/// Builds an untrained network with seeded scaled-uniform weights
/// (`U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`); biases use the same bound.
pub fn build(spec: NetworkSpec, seed: u64) -> Result<TrainedNetwork> {
    let arch = spec.analyze()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch
        .params
        .iter()
        .map(|info| {
            let n: usize = info.shape.iter().product();
            let a = (6.0 / (info.fan_in + info.fan_out) as f64).sqrt();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Param {
                name: info.name.clone(),
                value: Tensor::new(info.shape.clone(), data).expect("shape from analysis"),
            }
        })
        .collect();
    TrainedNetwork::assemble(spec, arch, params, seed, None)
}

impl TrainedNetwork {
    /// Network with explicit weights, checked against its `NetworkSpec`.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<Param>,
        init_seed: u64,
        meta: Option<TrainingMeta>,
    ) -> Result<Self> {
        let arch = spec.analyze()?;
        Self::assemble(spec, arch, params, init_seed, meta)
    }

    fn assemble(
        spec: NetworkSpec,
        arch: Architecture,
        params: Vec<Param>,
        init_seed: u64,
        meta: Option<TrainingMeta>,
    ) -> Result<Self> {
        if params.len() != arch.params.len() {
            return Err(NetworkError::ParamShape {
                name: "<count>".into(),
                expected: vec![arch.params.len()],
                found: vec![params.len()],
            });
        }
        for (p, info) in params.iter().zip(&arch.params) {
            if p.name != info.name || p.value.shape() != info.shape.as_slice() {
                return Err(NetworkError::ParamShape {
                    name: info.name.clone(),
                    expected: info.shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        let fingerprint = fingerprint(&params);
        Ok(Self {
            spec,
            arch,
            params,
            init_seed,
            meta,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn meta(&self) -> Option<&TrainingMeta> {
        self.meta.as_ref()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Stable content hash of the weights.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `<name>#<fingerprint>`; stable across save/load.
    pub fn id(&self) -> String {
        format!("{}#{:016x}", self.spec.name, self.fingerprint)
    }

    /// Copies of the weights with one tensor replaced per `edit` call.
    pub fn map_params(&self, mut edit: impl FnMut(&str, &mut Tensor)) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let mut value = p.value.clone();
                edit(&p.name, &mut value);
                Param {
                    name: p.name.clone(),
                    value,
                }
            })
            .collect();
        Self::assemble(
            self.spec.clone(),
            self.arch.clone(),
            params,
            self.init_seed,
            self.meta.clone(),
        )
    }

    /// Places the weights on `tape`.
    pub fn params_on(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Places an input batch on `tape`, reshaped to `[batch, input_shape...]`.
    pub fn input_on(&self, tape: &mut Tape, batch: &Tensor, requires_grad: bool) -> Result<Var> {
        let per_sample: usize = self.spec.input_shape.iter().product();
        let shape = batch.shape();
        if shape.is_empty() || batch.sample_len() != per_sample {
            return Err(NetworkError::InputShape {
                expected: self.spec.input_shape.clone(),
                found: shape.to_vec(),
            });
        }
        let mut full = vec![shape[0]];
        full.extend_from_slice(&self.spec.input_shape);
        let t = batch.clone().reshape(full)?;
        Ok(tape.leaf(t, requires_grad))
    }

    /// Records the forward pass on `tape` and returns the logits.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        input: Var,
        params: &[Var],
        erosion: &dyn Erosion,
    ) -> Result<Var> {
        let mut cursor = Cursor::default();
        run_layers(&self.spec.layers, tape, input, params, erosion, &mut cursor, None)
    }

    pub fn forward_with(&self, batch: &Tensor, erosion: &dyn Erosion) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params_on(&mut tape, false);
        let x = self.input_on(&mut tape, batch, false)?;
        let z = self.forward_on(&mut tape, x, &params, erosion)?;
        Ok(tape.value(z).clone())
    }

    /// Post-erosion activation at every slot, in forward order.
    pub fn slot_activations(&self, batch: &Tensor, erosion: &dyn Erosion) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.params_on(&mut tape, false);
        let x = self.input_on(&mut tape, batch, false)?;
        let mut cursor = Cursor::default();
        let mut seen = Vec::new();
        run_layers(
            &self.spec.layers,
            &mut tape,
            x,
            &params,
            erosion,
            &mut cursor,
            Some(&mut seen),
        )?;
        Ok(seen.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn input_grad_with(
        &self,
        batch: &Tensor,
        labels: &[usize],
        erosion: &dyn Erosion,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params_on(&mut tape, false);
        let x = self.input_on(&mut tape, batch, true)?;
        let z = self.forward_on(&mut tape, x, &params, erosion)?;
        let loss = tape.cross_entropy(z, labels, Reduction::Sum)?;
        tape.backward(loss)?;
        let grad = tape.take_grad(x).expect("input requires grad");
        Ok(grad.reshape(batch.shape().to_vec())?)
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        self.loss_with(batch, labels, &NoErosion)
    }

    pub fn loss_with(&self, batch: &Tensor, labels: &[usize], erosion: &dyn Erosion) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.params_on(&mut tape, false);
        let x = self.input_on(&mut tape, batch, false)?;
        let z = self.forward_on(&mut tape, x, &params, erosion)?;
        let loss = tape.cross_entropy(z, labels, Reduction::Mean)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    /// Fraction of samples whose prediction matches the label.
    pub fn accuracy_with(&self, batch: &Tensor, labels: &[usize], erosion: &dyn Erosion) -> Result<f64> {
        let pred = argmax_rows(&self.forward_with(batch, erosion)?);
        Ok(accuracy(&pred, labels))
    }

    pub(crate) fn with_meta(mut self, meta: TrainingMeta) -> Self {
        self.meta = Some(meta);
        self
    }
}

impl Classifier for TrainedNetwork {
    fn model_id(&self) -> String {
        self.id()
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, &NoErosion)
    }

    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.input_grad_with(batch, labels, &NoErosion)
    }
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn fingerprint(params: &[Param]) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Default)]
struct Cursor {
    param: usize,
    slot: usize,
    block: usize,
}

fn run_layers(
    layers: &[LayerSpec],
    tape: &mut Tape,
    mut x: Var,
    params: &[Var],
    erosion: &dyn Erosion,
    cursor: &mut Cursor,
    mut seen: Option<&mut Vec<Var>>,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            LayerSpec::Dense { .. } => {
                let (w, b) = (params[cursor.param], params[cursor.param + 1]);
                cursor.param += 2;
                let z = tape.matmul(x, w)?;
                tape.add(z, b)?
            }
            LayerSpec::Conv2d { .. } => {
                let (w, b) = (params[cursor.param], params[cursor.param + 1]);
                cursor.param += 2;
                tape.conv2d(x, w, Some(b))?
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::Avgpool2d => tape.avgpool2d(x)?,
            LayerSpec::Flatten => tape.flatten(x),
            LayerSpec::ErosionSlot => {
                let slot = cursor.slot;
                cursor.slot += 1;
                let out = match erosion.slot_mask(slot) {
                    Some(mask) => tape.mask_mul(x, mask)?,
                    None => x,
                };
                if let Some(seen) = seen.as_deref_mut() {
                    seen.push(out);
                }
                out
            }
            LayerSpec::ResidualBlock { layers } => {
                let block = cursor.block;
                cursor.block += 1;
                let branch = run_layers(layers, tape, x, params, erosion, cursor, seen.as_deref_mut())?;
                let lambda = erosion.skip_scale(block);
                let skip = if lambda == 1.0 { x } else { tape.scale(x, lambda) };
                tape.add(skip, branch)?
            }
        };
    }
    Ok(x)
}
