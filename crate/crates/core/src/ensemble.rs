//! Gradient fusion across branches.
//!
//! A plan has `S` standard branches fused at every iteration and a
//! longitudinal length `L`: a ghost branch attacks a fresh ghost at each
//! of the `L = N` iterations, or one fixed ghost when `L = 1`. With several
//! base models, branch `b` belongs to base `b mod #B`.
//!
//! The fused gradient is `Σ_b w_b ∇ loss_b`, i.e. the gradient of the
//! weighted mean loss, so a single MI-FGSM accumulator sees one objective.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackError, GradProvider};
use crate::autodiff::Tensor;
use crate::erosion::{sample_ghost, sample_params, ErosionError, ErosionSpec, GhostParams};
use crate::network::{Classifier, TrainedNetwork};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan needs at least one base model")]
    NoBases,
    #[error("plan needs S >= 1 and L >= 1")]
    EmptyPlan,
    #[error("{standard} branches cannot cover {bases} base models")]
    TooFewBranches { standard: usize, bases: usize },
    #[error("branch weights must be {expected} non-negative values summing to 1 (sum {sum})")]
    Weights { expected: usize, sum: f64 },
    #[error("longitudinal length {longitudinal} must equal the iteration count {iterations}")]
    Longitudinal { longitudinal: usize, iterations: usize },
    #[error("ghost branch {branch} has no erosion spec for its base model")]
    MissingErosion { branch: usize },
    #[error(transparent)]
    Erosion(#[from] ErosionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    /// Attack the trained base models themselves.
    Base,
    /// Attack ghosts of the base models.
    Ghost,
}

/// Shape of a plan, independent of the concrete models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub model_type: ModelType,
    /// #B
    pub bases: usize,
    /// #S
    pub standard: usize,
    /// #L
    pub longitudinal: usize,
    /// Per-branch weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl PlanSpec {
    pub fn new(model_type: ModelType, bases: usize, standard: usize, longitudinal: usize) -> Self {
        Self {
            model_type,
            bases,
            standard,
            longitudinal,
            weights: None,
        }
    }

    /// #I: every ghost branch contributes `L` models, every base branch one.
    pub fn intrinsic_models(&self) -> usize {
        match self.model_type {
            ModelType::Ghost => self.standard * self.longitudinal,
            ModelType::Base => self.standard,
        }
    }

    /// CC: model evaluations per iteration relative to a single model.
    pub fn computational_cost(&self) -> usize {
        self.standard
    }

    pub fn branch_weights(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.standard as f64; self.standard])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Base,
    Ghost,
}

#[derive(Clone, Debug)]
pub struct PlanMember<'a> {
    pub net: &'a TrainedNetwork,
    pub erosion: Option<ErosionSpec>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub base: usize,
    pub mode: BranchMode,
    pub weight: f64,
}

/// A validated plan over concrete base models.
#[derive(Clone, Debug)]
pub struct EnsemblePlan<'a> {
    members: Vec<PlanMember<'a>>,
    branches: Vec<Branch>,
    longitudinal: usize,
}

impl<'a> EnsemblePlan<'a> {
    /// Builds a plan from explicit branches; branch `b` must name a member.
    pub fn new(
        members: Vec<PlanMember<'a>>,
        branches: Vec<Branch>,
        longitudinal: usize,
    ) -> Result<Self, PlanError> {
        if members.is_empty() {
            return Err(PlanError::NoBases);
        }
        if branches.is_empty() || longitudinal == 0 {
            return Err(PlanError::EmptyPlan);
        }
        let sum: f64 = branches.iter().map(|b| b.weight).sum();
        if branches.iter().any(|b| !(b.weight >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PlanError::Weights {
                expected: branches.len(),
                sum,
            });
        }
        for (i, b) in branches.iter().enumerate() {
            let member = members.get(b.base).ok_or(PlanError::NoBases)?;
            if b.mode == BranchMode::Ghost {
                let spec = member
                    .erosion
                    .as_ref()
                    .ok_or(PlanError::MissingErosion { branch: i })?;
                spec.check(member.net)?;
            }
        }
        Ok(Self {
            members,
            branches,
            longitudinal,
        })
    }

    /// Builds the plan described by `spec`, assigning branches to members
    /// round-robin. `members.len()` must equal `spec.bases`.
    pub fn from_spec(members: Vec<PlanMember<'a>>, spec: &PlanSpec) -> Result<Self, PlanError> {
        if members.is_empty() || members.len() != spec.bases {
            return Err(PlanError::NoBases);
        }
        if spec.standard == 0 || spec.longitudinal == 0 {
            return Err(PlanError::EmptyPlan);
        }
        if spec.standard < spec.bases {
            return Err(PlanError::TooFewBranches {
                standard: spec.standard,
                bases: spec.bases,
            });
        }
        let weights = spec.branch_weights();
        if weights.len() != spec.standard {
            return Err(PlanError::Weights {
                expected: spec.standard,
                sum: weights.iter().sum(),
            });
        }
        let mode = match spec.model_type {
            ModelType::Base => BranchMode::Base,
            ModelType::Ghost => BranchMode::Ghost,
        };
        let branches = weights
            .into_iter()
            .enumerate()
            .map(|(b, weight)| Branch {
                base: b % members.len(),
                mode,
                weight,
            })
            .collect();
        Self::new(members, branches, spec.longitudinal)
    }

    pub fn members(&self) -> &[PlanMember<'a>] {
        &self.members
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn longitudinal(&self) -> usize {
        self.longitudinal
    }

    pub fn intrinsic_models(&self) -> usize {
        self.branches
            .iter()
            .map(|b| match b.mode {
                BranchMode::Ghost => self.longitudinal,
                BranchMode::Base => 1,
            })
            .sum()
    }

    pub fn computational_cost(&self) -> usize {
        self.branches.len()
    }

    /// Ghost draw used by `branch` at `iteration`: one per iteration when
    /// `L > 1`, fixed for the whole attack otherwise.
    pub fn draw_index(&self, branch: usize, iteration: usize) -> u64 {
        if self.longitudinal > 1 {
            (branch * self.longitudinal + iteration % self.longitudinal) as u64
        } else {
            branch as u64
        }
    }

    /// Erosion variables of a ghost branch at `iteration`.
    pub fn ghost_params(&self, branch: usize, iteration: usize) -> Option<GhostParams> {
        let b = &self.branches[branch];
        if b.mode != BranchMode::Ghost {
            return None;
        }
        let m = &self.members[b.base];
        let spec = m.erosion.as_ref()?;
        sample_params(m.net, spec, self.draw_index(branch, iteration)).ok()
    }

    /// Checks that the plan fits an attack of `iterations` steps.
    pub fn check_iterations(&self, iterations: usize) -> Result<(), PlanError> {
        if self.longitudinal > 1 && self.longitudinal != iterations {
            return Err(PlanError::Longitudinal {
                longitudinal: self.longitudinal,
                iterations,
            });
        }
        Ok(())
    }

    fn branch_grad(&self, branch: usize, iteration: usize, batch: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
        let b = &self.branches[branch];
        let m = &self.members[b.base];
        match b.mode {
            BranchMode::Base => Ok(m.net.input_grad(batch, labels)?),
            BranchMode::Ghost => {
                let spec = m.erosion.as_ref().expect("validated plan");
                let ghost = sample_ghost(m.net, spec, self.draw_index(branch, iteration))
                    .map_err(|e| AttackError::Provider(e.to_string()))?;
                Ok(ghost.input_grad(batch, labels)?)
            }
        }
    }

    /// `Σ_b w_b ∇ loss_b` at `iteration`. Branches are evaluated in
    /// parallel and summed in branch order.
    pub fn fused_grad(&self, iteration: usize, batch: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
        let grads = (0..self.branches.len())
            .into_par_iter()
            .map(|b| self.branch_grad(b, iteration, batch, labels))
            .collect::<Result<Vec<_>, _>>()?;
        if grads.len() == 1 && self.branches[0].weight == 1.0 {
            return Ok(grads.into_iter().next().expect("one branch"));
        }
        let mut out = vec![0.0; batch.len()];
        for (g, b) in grads.iter().zip(&self.branches) {
            for (o, v) in out.iter_mut().zip(g.data()) {
                *o += b.weight * v;
            }
        }
        Ok(Tensor::new(batch.shape().to_vec(), out)?)
    }
}

/// Gradient provider calling [`EnsemblePlan::fused_grad`].
pub struct PlanGrad<'p, 'a> {
    plan: &'p EnsemblePlan<'a>,
}

impl GradProvider for PlanGrad<'_, '_> {
    fn grad(&self, iteration: usize, batch: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
        self.plan.fused_grad(iteration, batch, labels)
    }
}

pub fn make_grad_provider<'p, 'a>(
    plan: &'p EnsemblePlan<'a>,
    cfg: &AttackConfig,
) -> Result<PlanGrad<'p, 'a>, PlanError> {
    plan.check_iterations(cfg.iterations)?;
    Ok(PlanGrad { plan })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub computational_cost: usize,
    pub intrinsic_models: usize,
    pub images: usize,
    pub seconds_per_image: f64,
}

/// Theoretical cost plus measured wall time of attacking `images`.
pub fn measure_cost(
    plan: &EnsemblePlan<'_>,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<CostReport, AttackError> {
    let provider = make_grad_provider(plan, cfg).map_err(|e| AttackError::Config(e.to_string()))?;
    let start = Instant::now();
    run_attack(images, labels, &provider, cfg)?;
    let n = images.batch_size();
    Ok(CostReport {
        computational_cost: plan.computational_cost(),
        intrinsic_models: plan.intrinsic_models(),
        images: n,
        seconds_per_image: start.elapsed().as_secs_f64() / n.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackMethod, ModelGrad};
    use crate::erosion::ErosionKind;
    use crate::network::{build, Preset};
    use rand::{Rng, SeedableRng};

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn res(seed: u64) -> TrainedNetwork {
        build(Preset::ResMlp.spec("r", &[4], 3), seed).unwrap()
    }

    fn member(net: &TrainedNetwork, magnitude: f64) -> PlanMember<'_> {
        PlanMember {
            net,
            erosion: Some(ErosionSpec::new(ErosionKind::Skip, magnitude, 7)),
        }
    }

    #[test]
    fn table_accounting() {
        let rows = [
            (PlanSpec::new(ModelType::Base, 1, 1, 1), 1, 1),
            (PlanSpec::new(ModelType::Ghost, 1, 1, 1), 1, 1),
            (PlanSpec::new(ModelType::Ghost, 1, 1, 10), 10, 1),
            (PlanSpec::new(ModelType::Ghost, 1, 10, 1), 10, 10),
            (PlanSpec::new(ModelType::Ghost, 1, 10, 10), 100, 10),
            (PlanSpec::new(ModelType::Base, 3, 3, 1), 3, 3),
            (PlanSpec::new(ModelType::Ghost, 3, 3, 10), 30, 3),
        ];
        let nets: Vec<_> = (0..3).map(res).collect();
        for (spec, intrinsic, cc) in rows {
            assert_eq!(spec.intrinsic_models(), intrinsic);
            assert_eq!(spec.computational_cost(), cc);
            let members = nets[..spec.bases].iter().map(|n| member(n, 0.2)).collect();
            let plan = EnsemblePlan::from_spec(members, &spec).unwrap();
            assert_eq!(plan.intrinsic_models(), intrinsic);
            assert_eq!(plan.computational_cost(), cc);
        }
    }

    #[test]
    fn single_base_branch_is_the_model_gradient() {
        let net = res(1);
        let plan = EnsemblePlan::from_spec(vec![member(&net, 0.2)], &PlanSpec::new(ModelType::Base, 1, 1, 1)).unwrap();
        let x = batch(5, 4, 2);
        let labels = [0, 1, 2, 0, 1];
        assert_eq!(plan.fused_grad(3, &x, &labels).unwrap(), net.input_grad(&x, &labels).unwrap());
    }

    #[test]
    fn identical_ghosts_average_to_the_base() {
        let net = res(1);
        let plan =
            EnsemblePlan::from_spec(vec![member(&net, 0.0)], &PlanSpec::new(ModelType::Ghost, 1, 10, 1)).unwrap();
        let x = batch(4, 4, 3);
        let labels = [2, 1, 0, 0];
        let fused = plan.fused_grad(0, &x, &labels).unwrap();
        let single = net.input_grad(&x, &labels).unwrap();
        for (a, b) in fused.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_a_branch() {
        let nets: Vec<_> = (0..2).map(res).collect();
        let members = nets.iter().map(|n| member(n, 0.3)).collect();
        let branches = vec![
            Branch { base: 0, mode: BranchMode::Ghost, weight: 0.0 },
            Branch { base: 1, mode: BranchMode::Base, weight: 1.0 },
        ];
        let plan = EnsemblePlan::new(members, branches, 1).unwrap();
        let x = batch(3, 4, 4);
        let fused = plan.fused_grad(0, &x, &[0, 1, 2]).unwrap();
        assert_eq!(fused, nets[1].input_grad(&x, &[0, 1, 2]).unwrap());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let net = res(1);
        let spec = PlanSpec {
            weights: Some(vec![0.5, 0.4]),
            ..PlanSpec::new(ModelType::Ghost, 1, 2, 1)
        };
        assert!(matches!(
            EnsemblePlan::from_spec(vec![member(&net, 0.1)], &spec),
            Err(PlanError::Weights { .. })
        ));
        let ok = PlanSpec {
            weights: Some(vec![0.25, 0.75]),
            ..spec
        };
        assert!(EnsemblePlan::from_spec(vec![member(&net, 0.1)], &ok).is_ok());
    }

    #[test]
    fn longitudinal_length_is_tied_to_iterations() {
        let net = res(1);
        let plan =
            EnsemblePlan::from_spec(vec![member(&net, 0.1)], &PlanSpec::new(ModelType::Ghost, 1, 1, 10)).unwrap();
        let cfg = AttackConfig::new(AttackMethod::Ifgsm, 4);
        assert!(matches!(make_grad_provider(&plan, &cfg), Err(PlanError::Longitudinal { .. })));
        assert!(make_grad_provider(&plan, &AttackConfig::new(AttackMethod::Ifgsm, 8)).is_ok());
    }

    #[test]
    fn longitudinal_ghosts_are_fresh_and_reproducible() {
        let net = res(1);
        let spec = PlanSpec::new(ModelType::Ghost, 1, 2, 10);
        let plan = EnsemblePlan::from_spec(vec![member(&net, 0.2)], &spec).unwrap();
        let mut seen = Vec::new();
        for b in 0..2 {
            for j in 0..10 {
                let p = plan.ghost_params(b, j).unwrap();
                assert_eq!(p, plan.ghost_params(b, j).unwrap());
                seen.push(p.scalars);
            }
        }
        for i in 0..seen.len() {
            for k in i + 1..seen.len() {
                assert_ne!(seen[i], seen[k]);
            }
        }
        let fixed = EnsemblePlan::from_spec(vec![member(&net, 0.2)], &PlanSpec::new(ModelType::Ghost, 1, 2, 1)).unwrap();
        assert_eq!(fixed.ghost_params(1, 0), fixed.ghost_params(1, 9));
    }

    #[test]
    fn zero_magnitude_plans_collapse_to_base_plans() {
        let nets: Vec<_> = (0..2).map(res).collect();
        let x = batch(6, 4, 5);
        let labels = [0, 1, 2, 2, 1, 0];
        let cfg = AttackConfig::new(AttackMethod::Mifgsm, 8);
        let run = |model_type| {
            let members = nets.iter().map(|n| member(n, 0.0)).collect();
            let plan = EnsemblePlan::from_spec(members, &PlanSpec::new(model_type, 2, 4, 10)).unwrap();
            let p = make_grad_provider(&plan, &cfg).unwrap();
            run_attack(&x, &labels, &p, &cfg).unwrap()
        };
        assert_eq!(run(ModelType::Ghost), run(ModelType::Base));
        let single = EnsemblePlan::from_spec(vec![member(&nets[0], 0.0)], &PlanSpec::new(ModelType::Ghost, 1, 1, 10)).unwrap();
        let a = run_attack(&x, &labels, &make_grad_provider(&single, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a, run_attack(&x, &labels, &ModelGrad(&nets[0]), &cfg).unwrap());
    }

    #[test]
    fn branches_need_an_erosion_spec() {
        let net = res(1);
        let m = PlanMember { net: &net, erosion: None };
        assert!(matches!(
            EnsemblePlan::from_spec(vec![m], &PlanSpec::new(ModelType::Ghost, 1, 1, 1)),
            Err(PlanError::MissingErosion { branch: 0 })
        ));
    }
}
