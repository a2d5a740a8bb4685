//! Ghost networks: virtual models derived from a trained base network by
//! eroding its features.
//!
//! Dropout erosion multiplies every erosion slot by a fixed Bernoulli mask
//! `r / (1 - Λ)` with `r ~ Bernoulli(1 - Λ)` per activation element.
//! Skip erosion scales the identity path of every residual block,
//! `x' = λ x + F(x)` with `λ ~ U[1 - Λ, 1 + Λ]`. A ghost is one draw of
//! these masks and scalars; it is never trained and never copies weights.
//!
//! Draws come from a counter-based generator keyed by the base network's
//! fingerprint and the erosion seed, with the draw index as the stream, so
//! any ghost can be rebuilt from `(base, spec, draw)` in any order. Masks
//! and scalars are derived from the same uniforms for every `Λ`, which makes
//! accuracy-vs-`Λ` curves use common random numbers.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::Dataset;
use crate::network::{
    argmax_rows, Classifier, Erosion, NetworkError, NoErosion, Result as NetResult, TrainedNetwork,
};

/// Λ at roughly a 10 % top-1 drop for full-size ImageNet models, for
/// comparison with calibrated desk-scale values. Dropout erosion:
pub const REFERENCE_LAMBDA_INC_V3: f64 = 0.006;
pub const REFERENCE_LAMBDA_INC_V4: f64 = 0.012;
pub const REFERENCE_LAMBDA_INCRES_V2: f64 = 0.08;
/// Skip erosion:
pub const REFERENCE_LAMBDA_RES_50: f64 = 0.22;
pub const REFERENCE_LAMBDA_RES_101: f64 = 0.16;
pub const REFERENCE_LAMBDA_RES_152: f64 = 0.12;

#[derive(Debug, Error)]
pub enum ErosionError {
    #[error("{kind} erosion needs {needs}, but `{network}` has none")]
    Incompatible {
        kind: ErosionKind,
        needs: &'static str,
        network: String,
    },
    #[error("erosion magnitude {magnitude} outside {range} for {kind} erosion")]
    Magnitude {
        kind: ErosionKind,
        magnitude: f64,
        range: &'static str,
    },
    #[error("target accuracy drop {0} outside (0, 0.5]")]
    TargetDrop(f64),
    #[error("calibration needs at least one ghost per grid point")]
    NoGhosts,
    #[error("unknown erosion kind `{0}` (expected dropout, skip or both)")]
    UnknownKind(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ErosionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErosionKind {
    Dropout,
    Skip,
    Both,
}

impl ErosionKind {
    fn uses_masks(self) -> bool {
        matches!(self, ErosionKind::Dropout | ErosionKind::Both)
    }

    fn uses_scalars(self) -> bool {
        matches!(self, ErosionKind::Skip | ErosionKind::Both)
    }

    /// Grid step used by [`calibrate_lambda`].
    pub fn grid_step(self) -> f64 {
        match self {
            ErosionKind::Skip => 0.02,
            ErosionKind::Dropout | ErosionKind::Both => 0.002,
        }
    }

    /// Largest admissible Λ on the calibration grid.
    fn grid_max(self) -> f64 {
        match self {
            ErosionKind::Skip => 1.0,
            ErosionKind::Dropout | ErosionKind::Both => 1.0 - self.grid_step(),
        }
    }

    /// The natural erosion for a network: skip erosion when it has residual
    /// blocks, dropout otherwise.
    pub fn default_for(net: &TrainedNetwork) -> Self {
        if net.architecture().residual_blocks > 0 {
            ErosionKind::Skip
        } else {
            ErosionKind::Dropout
        }
    }
}

impl fmt::Display for ErosionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErosionKind::Dropout => "dropout",
            ErosionKind::Skip => "skip",
            ErosionKind::Both => "both",
        })
    }
}

impl FromStr for ErosionKind {
    type Err = ErosionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(ErosionKind::Dropout),
            "skip" => Ok(ErosionKind::Skip),
            "both" => Ok(ErosionKind::Both),
            other => Err(ErosionError::UnknownKind(other.to_string())),
        }
    }
}

/// Which erosion slots receive dropout masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotPlacement {
    /// Every slot in the network.
    #[default]
    Dense,
    /// Only the last slot before the classifier head.
    TopOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErosionSpec {
    pub kind: ErosionKind,
    /// Λ, shared by every slot and block.
    pub magnitude: f64,
    pub seed: u64,
    #[serde(default)]
    pub placement: SlotPlacement,
}

impl ErosionSpec {
    pub fn new(kind: ErosionKind, magnitude: f64, seed: u64) -> Self {
        Self {
            kind,
            magnitude,
            seed,
            placement: SlotPlacement::Dense,
        }
    }

    pub fn with_magnitude(&self, magnitude: f64) -> Self {
        Self {
            magnitude,
            ..self.clone()
        }
    }

    /// Checks Λ's range and that `net` has something to erode.
    pub fn check(&self, net: &TrainedNetwork) -> Result<()> {
        let m = self.magnitude;
        let (ok, range) = match self.kind {
            ErosionKind::Skip => ((0.0..=1.0).contains(&m), "[0, 1]"),
            _ => ((0.0..1.0).contains(&m), "[0, 1)"),
        };
        if !ok {
            return Err(ErosionError::Magnitude {
                kind: self.kind,
                magnitude: m,
                range,
            });
        }
        let arch = net.architecture();
        let missing = if self.kind.uses_masks() && arch.slot_shapes.is_empty() {
            Some("an erosion slot")
        } else if self.kind.uses_scalars() && arch.residual_blocks == 0 {
            Some("a residual block")
        } else {
            None
        };
        match missing {
            Some(needs) => Err(ErosionError::Incompatible {
                kind: self.kind,
                needs,
                network: net.spec().name.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// One concrete draw of erosion variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostParams {
    pub base_id: String,
    pub spec: ErosionSpec,
    pub draw: u64,
    /// Binary mask `r` per erosion slot (per-sample shape); `None` where the
    /// slot is not eroded.
    pub masks: Vec<Option<Tensor>>,
    /// λ per residual block; empty unless skip erosion is active.
    pub scalars: Vec<f64>,
}

impl GhostParams {
    pub fn dump_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ghost params serialize");
        std::fs::write(path, text).map_err(|source| ErosionError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn ghost_rng(base: &TrainedNetwork, seed: u64, draw: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"ghost");
    h.update(base.fingerprint().to_le_bytes());
    h.update(seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    rng.set_stream(draw);
    rng
}

/// Draws the erosion variables for ghost `draw` of `base`.
///
/// The uniform stream is consumed identically for every Λ: one uniform per
/// element of every slot (in slot order), then one per residual block.
pub fn sample_params(base: &TrainedNetwork, spec: &ErosionSpec, draw: u64) -> Result<GhostParams> {
    spec.check(base)?;
    let arch = base.architecture();
    let lambda = spec.magnitude;
    let mut rng = ghost_rng(base, spec.seed, draw);
    let last = arch.slot_shapes.len().saturating_sub(1);
    let mut masks = Vec::with_capacity(arch.slot_shapes.len());
    if spec.kind.uses_masks() {
        for (slot, shape) in arch.slot_shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() >= lambda { 1.0 } else { 0.0 })
                .collect();
            let eroded = spec.placement == SlotPlacement::Dense || slot == last;
            masks.push(eroded.then(|| Tensor::new(shape.clone(), data).expect("slot shape")));
        }
    } else {
        masks.resize(arch.slot_shapes.len(), None);
    }
    let scalars = if spec.kind.uses_scalars() {
        (0..arch.residual_blocks)
            .map(|_| 1.0 + lambda * (2.0 * rng.random::<f64>() - 1.0))
            .collect()
    } else {
        Vec::new()
    };
    Ok(GhostParams {
        base_id: base.id(),
        spec: spec.clone(),
        draw,
        masks,
        scalars,
    })
}

/// A base network viewed through one fixed draw of erosion variables.
#[derive(Clone, Debug)]
pub struct GhostNetwork<'a> {
    base: &'a TrainedNetwork,
    params: GhostParams,
    /// `r / (1 - Λ)`; absent when Λ = 0 so the slot is an exact identity.
    scaled: Vec<Option<Tensor>>,
}

pub fn sample_ghost<'a>(
    base: &'a TrainedNetwork,
    spec: &ErosionSpec,
    draw: u64,
) -> Result<GhostNetwork<'a>> {
    let params = sample_params(base, spec, draw)?;
    Ok(GhostNetwork::from_params(base, params))
}

impl<'a> GhostNetwork<'a> {
    pub fn from_params(base: &'a TrainedNetwork, params: GhostParams) -> Self {
        let keep = 1.0 - params.spec.magnitude;
        let scaled = params
            .masks
            .iter()
            .map(|m| {
                m.as_ref().filter(|_| params.spec.magnitude > 0.0).map(|m| {
                    let data = m.data().iter().map(|&r| r / keep).collect();
                    Tensor::new(m.shape().to_vec(), data).expect("same shape")
                })
            })
            .collect();
        Self {
            base,
            params,
            scaled,
        }
    }

    pub fn base(&self) -> &'a TrainedNetwork {
        self.base
    }

    pub fn params(&self) -> &GhostParams {
        &self.params
    }

    /// Applies slot `slot`'s erosion to a batch of base activations.
    pub fn erode_slot(&self, slot: usize, activations: &Tensor) -> Tensor {
        match self.scaled.get(slot).and_then(|m| m.as_ref()) {
            None => activations.clone(),
            Some(mask) => {
                let m = mask.data();
                let mut out = activations.clone();
                for chunk in out.data_mut().chunks_mut(m.len()) {
                    chunk.iter_mut().zip(m).for_each(|(o, &v)| *o *= v);
                }
                out
            }
        }
    }
}

impl Erosion for GhostNetwork<'_> {
    fn slot_mask(&self, slot: usize) -> Option<&Tensor> {
        self.scaled.get(slot).and_then(|m| m.as_ref())
    }

    fn skip_scale(&self, block: usize) -> f64 {
        self.params.scalars.get(block).copied().unwrap_or(1.0)
    }
}

impl Classifier for GhostNetwork<'_> {
    fn model_id(&self) -> String {
        format!(
            "{}~{}{}@{}",
            self.base.id(),
            self.params.spec.kind,
            self.params.spec.magnitude,
            self.params.draw
        )
    }

    fn logits(&self, batch: &Tensor) -> NetResult<Tensor> {
        self.base.forward_with(batch, self)
    }

    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> NetResult<Tensor> {
        self.base.input_grad_with(batch, labels, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub magnitude: f64,
    /// Mean top-1 accuracy of the ghosts on the validation split.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kind: ErosionKind,
    pub magnitude: f64,
    pub base_accuracy: f64,
    pub target_drop: f64,
    /// False when no grid point reached the target; `magnitude` is then the
    /// grid maximum.
    pub crossed: bool,
    /// Every evaluated grid point, ascending in Λ.
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub kind: ErosionKind,
    pub target_drop: f64,
    /// Ghosts per grid point.
    pub ghosts: usize,
    pub seed: u64,
    #[serde(default)]
    pub placement: SlotPlacement,
}

impl CalibrationConfig {
    pub fn new(kind: ErosionKind, seed: u64) -> Self {
        Self {
            kind,
            target_drop: 0.10,
            ghosts: 20,
            seed,
            placement: SlotPlacement::Dense,
        }
    }
}

/// Mean accuracy of ghosts `0..ghosts` of `base` on `(batch, labels)`.
pub fn ghost_accuracy(
    base: &TrainedNetwork,
    spec: &ErosionSpec,
    ghosts: usize,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    if ghosts == 0 {
        return Err(ErosionError::NoGhosts);
    }
    if spec.magnitude == 0.0 {
        return Ok(base.accuracy_with(batch, labels, &NoErosion)?);
    }
    let accs = (0..ghosts as u64)
        .into_par_iter()
        .map(|draw| {
            let ghost = sample_ghost(base, spec, draw)?;
            let pred = argmax_rows(&ghost.logits(batch)?);
            let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len().max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / ghosts as f64)
}

/// Finds the smallest grid Λ whose mean ghost accuracy on the validation
/// split is at most `base_accuracy - target_drop`.
///
/// The grid is `k * step` for the kind's step. It is scanned coarsely (ten
/// steps at a time) until the first coarse crossing, then finely inside the
/// bracketing interval; with the shared uniforms across Λ the curve is
/// monotone in practice, which makes this the first crossing of the fine
/// grid.
pub fn calibrate_lambda(base: &TrainedNetwork, data: &Dataset, cfg: &CalibrationConfig) -> Result<Calibration> {
    if !(cfg.target_drop > 0.0 && cfg.target_drop <= 0.5) {
        return Err(ErosionError::TargetDrop(cfg.target_drop));
    }
    let val = data.split(crate::dataio::Split::Val);
    let eval_set = if val.is_empty() { data.clone() } else { val };
    let batch = eval_set.all();
    let labels = eval_set.labels().to_vec();
    let spec = ErosionSpec {
        kind: cfg.kind,
        magnitude: 0.0,
        seed: cfg.seed,
        placement: cfg.placement,
    };
    spec.check(base)?;

    let step = cfg.kind.grid_step();
    let max_index = (cfg.kind.grid_max() / step).round() as usize;
    let magnitude_at = |k: usize| (k as f64 * step * 1e6).round() / 1e6;
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut eval = |k: usize| -> Result<f64> {
        let magnitude = magnitude_at(k);
        if let Some(p) = curve.iter().find(|p| p.magnitude == magnitude) {
            return Ok(p.accuracy);
        }
        let accuracy = ghost_accuracy(base, &spec.with_magnitude(magnitude), cfg.ghosts, &batch, &labels)?;
        curve.push(CurvePoint { magnitude, accuracy });
        Ok(accuracy)
    };

    let base_accuracy = eval(0)?;
    let threshold = base_accuracy - cfg.target_drop;
    let coarse = 10;
    let mut lo = 0;
    let mut hit = None;
    let mut k = coarse.min(max_index);
    loop {
        if eval(k)? <= threshold {
            hit = Some(k);
            break;
        }
        lo = k;
        if k == max_index {
            break;
        }
        k = (k + coarse).min(max_index);
    }
    let (magnitude, crossed) = match hit {
        None => (magnitude_at(max_index), false),
        Some(hi) => {
            let mut found = hi;
            for fine in lo + 1..hi {
                if eval(fine)? <= threshold {
                    found = fine;
                    break;
                }
            }
            (magnitude_at(found), true)
        }
    };
    curve.sort_by(|a, b| a.magnitude.total_cmp(&b.magnitude));
    Ok(Calibration {
        kind: cfg.kind,
        magnitude,
        base_accuracy,
        target_drop: cfg.target_drop,
        crossed,
        curve,
    })
}
