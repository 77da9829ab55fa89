//! Online entropy-minimization loop over an evolving stream.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{random_branch, BranchMode, ForwardOptions, SplitPolicy, ToyViT};
use crate::dbe_ts::ExpansionPolicy;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Matrix, Tape, Var};
use crate::params::ParamKey;
use crate::sodd::DomainRegistry;
use crate::spectral::{extract_batch, ImageSample, SpectralConfig};

pub use crate::numerics::entropy;

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment of one tensor plus its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub m: Matrix,
    pub v: Matrix,
    pub steps: u64,
}

impl Moment {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            steps: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_update(param: &mut Matrix, grad: &Matrix, moment: &mut Moment, lr: f64, beta1: f64, beta2: f64) -> Result<()> {
    if param.shape() != grad.shape() || moment.m.shape() != grad.shape() {
        return Err(crate::error::shape_err(
            "adam_step",
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    moment.steps += 1;
    let t = moment.steps as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let p = param.as_mut_slice();
    let (m, v) = (moment.m.as_mut_slice(), moment.v.as_mut_slice());
    for (i, &g) in grad.as_slice().iter().enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam moments created lazily per parameter tensor. Only tensors present
/// in a gradient set are touched by a step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    moments: BTreeMap<ParamKey, Moment>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn moment(&self, key: &ParamKey) -> Option<&Moment> {
        self.moments.get(key)
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    pub fn step(&mut self, model: &mut ToyViT, grads: &Gradients, lr: f64) -> Result<()> {
        for (key, g) in grads.iter() {
            let param = model.param_mut(key)?;
            let moment = self
                .moments
                .entry(*key)
                .or_insert_with(|| Moment::zeros(g.rows(), g.cols()));
            adam_update(param, g, moment, lr, self.beta1, self.beta2)?;
        }
        Ok(())
    }
}

/// Entropy threshold default `0.4·ln C`.
pub fn default_kappa(classes: usize) -> f64 {
    0.4 * (classes as f64).ln()
}

/// Samples whose entropy is strictly below `kappa`.
pub fn passing_samples(entropies: &[f64], kappa: f64) -> Vec<usize> {
    (0..entropies.len()).filter(|&i| entropies[i] < kappa).collect()
}

/// Mean entropy of the passing samples, `0` when none pass.
pub fn filtered_loss(probs: &Matrix, kappa: f64) -> Result<f64> {
    let ent = (0..probs.rows())
        .map(|i| entropy(probs.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let pass = passing_samples(&ent, kappa);
    if pass.is_empty() {
        return Ok(0.0);
    }
    Ok(pass.iter().map(|&i| ent[i]).sum::<f64>() / pass.len() as f64)
}

/// Records the filtered loss on a tape; `None` when no sample passes.
pub fn filtered_loss_tape(tape: &mut Tape, logits: Var, kappa: f64) -> Result<Option<(Var, usize)>> {
    let probs = tape.softmax_rows(logits)?;
    let ent = tape.entropy_rows(probs)?;
    let values: Vec<f64> = (0..tape.value(ent).rows()).map(|i| tape.value(ent)[(i, 0)]).collect();
    let pass = passing_samples(&values, kappa);
    if pass.is_empty() {
        return Ok(None);
    }
    let picked = tape.gather_rows(ent, &pass)?;
    let total = tape.sum(picked);
    Ok(Some((tape.scale(total, 1.0 / pass.len() as f64), pass.len())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub token_guided: bool,
    pub shared_branch: bool,
    pub expandable: bool,
    pub sodd_routing: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            token_guided: true,
            shared_branch: true,
            expandable: true,
            sodd_routing: true,
        }
    }
}

impl AblationFlags {
    pub fn branch_mode(&self) -> Result<BranchMode> {
        match (self.shared_branch, self.expandable) {
            (true, true) => Ok(BranchMode::Dual),
            (true, false) => Ok(BranchMode::SharedOnly),
            (false, true) => Ok(BranchMode::DomainOnly),
            (false, false) => Err(Error::Config(
                "shared_branch and expandable cannot both be disabled".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Entropy threshold; `None` means `0.4·ln C`.
    pub kappa: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Overrides the fusion weight stored in the pools.
    pub lambda: Option<f64>,
    /// Overrides the split percentage stored in the pools.
    pub k_percent: Option<f64>,
    /// Overrides the calibrated novelty threshold.
    pub tau: Option<f64>,
    /// Overrides the registry shrinkage.
    pub shrinkage: Option<f64>,
    pub batch_size: usize,
    pub expansion: ExpansionPolicy,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            kappa: None,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            lambda: None,
            k_percent: None,
            tau: None,
            shrinkage: None,
            batch_size: 16,
            expansion: ExpansionPolicy::CloneTemplate,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

/// Mid-step failure points used to exercise rollback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultPoint {
    AfterExpansion,
    AfterUpdate,
    AfterStatsUpdate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Branch the model used for this batch.
    pub domain_id: usize,
    /// Registry domain the discriminator chose.
    pub sodd_domain: usize,
    pub is_new: bool,
    pub pass_count: usize,
    pub loss: f64,
    pub updated: bool,
    pub predictions: Vec<usize>,
    pub error_if_labeled: Option<f64>,
}

impl StepReport {
    /// JSON-lines record.
    pub fn to_json_line(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            domain_id: usize,
            is_new: bool,
            pass_count: usize,
            loss: f64,
            error_if_labeled: &'a Option<f64>,
        }
        Ok(serde_json::to_string(&Line {
            step: self.step,
            domain_id: self.domain_id,
            is_new: self.is_new,
            pass_count: self.pass_count,
            loss: self.loss,
            error_if_labeled: &self.error_if_labeled,
        })?)
    }
}

/// One adaptation stream: a warmed model, its registry and optimizer state.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub model: ToyViT,
    pub registry: DomainRegistry,
    pub config: AdaptConfig,
    pub spectral: SpectralConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    steps: usize,
    spawned: usize,
    /// Test hook: fail the next step at this point.
    pub fault: Option<FaultPoint>,
}

impl Adapter {
    pub fn new(mut model: ToyViT, mut registry: DomainRegistry, config: AdaptConfig, spectral: SpectralConfig) -> Result<Self> {
        config.ablation.branch_mode()?;
        if let Some(k) = config.kappa {
            if !(k >= 0.0) {
                return Err(Error::Config(format!("kappa {k} must be non-negative")));
            }
        }
        if registry.dim != spectral.dim() {
            return Err(Error::Dimension {
                expected: spectral.dim(),
                got: registry.dim,
            });
        }
        if registry.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        if model.num_branches() < registry.len() {
            return Err(Error::Config(format!(
                "{} domain branches for {} registry domains",
                model.num_branches(),
                registry.len()
            )));
        }
        model.freeze_backbone();
        for pool in &mut model.pools {
            if let Some(l) = config.lambda {
                pool.lambda = l;
            }
            if let Some(k) = config.k_percent {
                pool.k_percent = k;
            }
        }
        if let Some(t) = config.tau {
            registry.tau = t;
        }
        if let Some(s) = config.shrinkage {
            registry.shrinkage = s;
        }
        let adam = AdamState {
            beta1: config.beta1,
            beta2: config.beta2,
            ..AdamState::default()
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            registry,
            config,
            spectral,
            adam,
            steps: 0,
            spawned: 0,
            fault: None,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.config.kappa.unwrap_or_else(|| default_kappa(self.model.config.classes))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Branches added since the adapter was created.
    pub fn spawned(&self) -> usize {
        self.spawned
    }

    fn check_fault(&mut self, at: FaultPoint) -> Result<()> {
        if self.fault == Some(at) {
            self.fault = None;
            return Err(Error::InjectedFault(match at {
                FaultPoint::AfterExpansion => "expansion",
                FaultPoint::AfterUpdate => "parameter update",
                FaultPoint::AfterStatsUpdate => "statistics update",
            }));
        }
        Ok(())
    }

    /// One online step. On any error the model, registry and optimizer are
    /// restored to their state before the call.
    pub fn ctta_step(&mut self, batch: &[ImageSample]) -> Result<StepReport> {
        let snapshot = (
            self.model.pools.clone(),
            self.registry.clone(),
            self.adam.clone(),
            self.rng.clone(),
            self.spawned,
        );
        match self.step_inner(batch) {
            Ok(r) => {
                self.steps += 1;
                Ok(r)
            }
            Err(e) => {
                self.model.pools = snapshot.0;
                self.registry = snapshot.1;
                self.adam = snapshot.2;
                self.rng = snapshot.3;
                self.spawned = snapshot.4;
                Err(e)
            }
        }
    }

    fn step_inner(&mut self, batch: &[ImageSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let flags = self.config.ablation;
        let mode = flags.branch_mode()?;
        let desc = extract_batch(batch, &self.spectral)?;
        let assignment = self.registry.assign_batch(&desc)?;
        let sodd_domain = if assignment.is_new {
            self.registry.spawn_domain(&desc)?
        } else {
            assignment.domain
        };
        if assignment.is_new && mode != BranchMode::SharedOnly {
            while self.model.num_branches() < self.registry.len() {
                self.model.expand_pools(self.config.expansion, &mut self.rng)?;
                self.spawned += 1;
            }
            self.check_fault(FaultPoint::AfterExpansion)?;
        }
        let domain_id = match mode {
            BranchMode::SharedOnly => 0,
            _ if flags.sodd_routing => sodd_domain,
            _ => random_branch(self.model.num_branches(), &mut self.rng),
        };

        let opts = ForwardOptions {
            domain_id,
            branches: mode,
            train_backbone: false,
            train_experts: true,
        };
        let mut tape = Tape::new();
        let policy = if flags.token_guided {
            SplitPolicy::TokenGuided
        } else {
            SplitPolicy::Random(&mut self.rng)
        };
        let trace = self.model.forward_batch(&mut tape, batch, &opts, policy)?;
        let logits = tape.value(trace.logits).clone();
        let predictions = crate::backbone::softmax_rows(&logits)?;
        let predictions: Vec<usize> = (0..predictions.rows())
            .map(|i| argmax(predictions.row(i)))
            .collect();

        let (loss, pass_count, updated) = match filtered_loss_tape(&mut tape, trace.logits, self.kappa())? {
            None => (0.0, 0, false),
            Some((loss, n)) => {
                let value = tape.value(loss)[(0, 0)];
                let grads = tape.backward(loss)?;
                if !value.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged(format!("adaptation loss {value}")));
                }
                self.adam.step(&mut self.model, &grads, self.config.lr)?;
                (value, n, true)
            }
        };
        self.check_fault(FaultPoint::AfterUpdate)?;
        self.registry.update_domain(sodd_domain, &desc)?;
        self.check_fault(FaultPoint::AfterStatsUpdate)?;

        let labeled: Vec<(usize, usize)> = batch
            .iter()
            .zip(&predictions)
            .filter_map(|(s, &p)| s.class_label.map(|l| (l, p)))
            .collect();
        let error_if_labeled = (labeled.len() == batch.len())
            .then(|| labeled.iter().filter(|(l, p)| l != p).count() as f64 / batch.len() as f64);
        Ok(StepReport {
            step: self.steps,
            domain_id,
            sodd_domain,
            is_new: assignment.is_new,
            pass_count,
            loss,
            updated,
            predictions,
            error_if_labeled,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

/// How evaluation picks the branch for each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainPolicy {
    Fixed(usize),
    /// Nearest registry domain, without updating it.
    Sodd,
    /// Frozen backbone only.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_entropy: f64,
    pub samples: usize,
}

/// Read-only evaluation in chunks of `batch_size`.
pub fn evaluate(
    model: &ToyViT,
    registry: Option<&DomainRegistry>,
    spectral: &SpectralConfig,
    samples: &[ImageSample],
    policy: DomainPolicy,
    branches: BranchMode,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let classes = model.config.classes;
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut wrong = 0usize;
    let mut ent_total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (domain_id, mode) = match policy {
            DomainPolicy::Backbone => (0, BranchMode::Off),
            DomainPolicy::Fixed(id) => (id, branches),
            DomainPolicy::Sodd => {
                let reg = registry.ok_or(Error::EmptyRegistry)?;
                let desc = extract_batch(chunk, spectral)?;
                let a = reg.assign_batch(&desc)?;
                let nearest = if a.is_new { nearest_index(&a.distances) } else { a.domain };
                (nearest.min(model.num_branches().saturating_sub(1)), branches)
            }
        };
        let out = model.forward_with(chunk, &ForwardOptions::inference(domain_id, mode), SplitPolicy::TokenGuided)?;
        for (i, (s, p)) in chunk.iter().zip(out.predictions()).enumerate() {
            ent_total += entropy(out.probs.row(i))?;
            let label = s
                .class_label
                .ok_or_else(|| Error::InvalidImage("evaluation sample without a label".into()))?;
            if label >= classes {
                return Err(Error::InvalidImage(format!("label {label} outside {classes} classes")));
            }
            seen[label] += 1;
            if p == label {
                correct[label] += 1;
            } else {
                wrong += 1;
            }
        }
    }
    Ok(EvalReport {
        error_rate: wrong as f64 / samples.len() as f64,
        per_class_accuracy: seen
            .iter()
            .zip(&correct)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        mean_entropy: ent_total / samples.len() as f64,
        samples: samples.len(),
    })
}

fn nearest_index(distances: &[f64]) -> usize {
    (0..distances.len()).fold(0, |best, j| if distances[j] < distances[best] { j } else { best })
}
