//! Dual-branch expert specialization with token-guided separation.
//!
//! Patch tokens are ranked by cosine similarity to the class token. The
//! most similar `⌊k%·N⌋` go through the shared mixture, the least similar
//! `⌊k%·N⌋` through the domain branch picked by the discriminator, and
//! both outputs are scattered back to their patch rows (zeros elsewhere,
//! class token untouched) and fused as `λ·shared + (1−λ)·domain`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{shape_err, Error, Result};
use crate::moe::{moe_forward, MoEModule, MoeConfig};
use crate::numerics::{dot, Matrix, Tape, Var};
use crate::params::Branch;

/// Patch indices (0-based, excluding the class token) per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSplit {
    pub task_indices: Vec<usize>,
    pub domain_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl TokenSplit {
    /// Token-matrix rows (`patch + 1`) of the task set.
    pub fn task_rows(&self) -> Vec<usize> {
        self.task_indices.iter().map(|i| i + 1).collect()
    }

    pub fn domain_rows(&self) -> Vec<usize> {
        self.domain_indices.iter().map(|i| i + 1).collect()
    }
}

/// `⌊k%·N⌋`.
pub fn split_count(num_patches: usize, k_percent: f64) -> usize {
    (k_percent / 100.0 * num_patches as f64 + 1e-9).floor() as usize
}

fn check_split_size(num_patches: usize, count: usize) -> Result<()> {
    if num_patches < 2 || count == 0 || 2 * count > num_patches {
        return Err(Error::Config(format!(
            "split of {count} task + {count} domain tokens is invalid for {num_patches} patches"
        )));
    }
    Ok(())
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Splits one image's `(1+N)×D` token matrix. Ties rank the lower patch
/// index first; the task set is the head of the ranking and the domain
/// set its tail.
pub fn token_split(tokens: &Matrix, k_percent: f64) -> Result<TokenSplit> {
    let n = tokens.rows().saturating_sub(1);
    let count = split_count(n, k_percent);
    check_split_size(n, count)?;
    let cls = tokens.row(0);
    let similarities: Vec<f64> = (1..=n).map(|i| cosine_similarity(cls, tokens.row(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    Ok(TokenSplit {
        task_indices: order[..count].to_vec(),
        domain_indices: order[n - count..].to_vec(),
        similarities,
    })
}

/// Disjoint uniformly random index sets of the same sizes as
/// [`token_split`] would produce.
pub fn random_split<R: Rng + ?Sized>(num_patches: usize, k_percent: f64, rng: &mut R) -> Result<TokenSplit> {
    let count = split_count(num_patches, k_percent);
    check_split_size(num_patches, count)?;
    let mut order: Vec<usize> = (0..num_patches).collect();
    order.shuffle(rng);
    Ok(TokenSplit {
        task_indices: order[..count].to_vec(),
        domain_indices: order[count..2 * count].to_vec(),
        similarities: Vec::new(),
    })
}

/// Which branches contribute and with what weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fusion {
    pub shared: Option<f64>,
    pub domain: Option<f64>,
}

impl Fusion {
    pub fn dual(lambda: f64) -> Self {
        Self {
            shared: Some(lambda),
            domain: Some(1.0 - lambda),
        }
    }

    pub fn shared_only() -> Self {
        Self {
            shared: Some(1.0),
            domain: None,
        }
    }

    pub fn domain_only() -> Self {
        Self {
            shared: None,
            domain: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionPolicy {
    /// Deep copy of the warmed-up template branch.
    #[default]
    CloneTemplate,
    /// Fresh module with zero up-projections.
    ZeroInit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool {
    pub shared: MoEModule,
    domain_branches: Vec<MoEModule>,
    /// Copied into every new branch under [`ExpansionPolicy::CloneTemplate`].
    pub template: MoEModule,
    pub lambda: f64,
    pub k_percent: f64,
}

impl ExpertPool {
    /// Shared module plus one domain branch, all no-ops at birth.
    pub fn new<R: Rng + ?Sized>(dim: usize, moe: &MoeConfig, lambda: f64, k_percent: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(0.0..=50.0).contains(&k_percent) {
            return Err(Error::Config(format!("split percentage {k_percent} outside (0, 50]")));
        }
        let shared = MoEModule::new(dim, moe, rng)?;
        let template = MoEModule::new(dim, moe, rng)?;
        Ok(Self {
            shared,
            domain_branches: vec![template.clone()],
            template,
            lambda,
            k_percent,
        })
    }

    pub fn dim(&self) -> usize {
        self.shared.dim()
    }

    pub fn domain_branches(&self) -> &[MoEModule] {
        &self.domain_branches
    }

    pub fn num_branches(&self) -> usize {
        self.domain_branches.len()
    }

    pub fn branch(&self, id: usize) -> Result<&MoEModule> {
        self.domain_branches.get(id).ok_or(Error::UnknownDomainBranch {
            id,
            len: self.domain_branches.len(),
        })
    }

    pub fn branch_mut(&mut self, id: usize) -> Result<&mut MoEModule> {
        let len = self.domain_branches.len();
        self.domain_branches
            .get_mut(id)
            .ok_or(Error::UnknownDomainBranch { id, len })
    }

    pub fn module(&self, branch: Branch) -> Result<&MoEModule> {
        match branch {
            Branch::Shared => Ok(&self.shared),
            Branch::Domain(i) => self.branch(i),
        }
    }

    pub fn module_mut(&mut self, branch: Branch) -> Result<&mut MoEModule> {
        match branch {
            Branch::Shared => Ok(&mut self.shared),
            Branch::Domain(i) => self.branch_mut(i),
        }
    }

    /// Appends a branch; existing branches are left untouched.
    pub fn expand_pool<R: Rng + ?Sized>(&mut self, policy: ExpansionPolicy, moe: &MoeConfig, rng: &mut R) -> Result<usize> {
        let branch = match policy {
            ExpansionPolicy::CloneTemplate => self.template.clone(),
            ExpansionPolicy::ZeroInit => MoEModule::new(self.dim(), moe, rng)?,
        };
        self.domain_branches.push(branch);
        Ok(self.domain_branches.len() - 1)
    }

    /// Makes the template a copy of domain branch `id`.
    pub fn capture_template(&mut self, id: usize) -> Result<()> {
        self.template = self.branch(id)?.clone();
        Ok(())
    }

    /// Expert contribution `λ·Ẑ_shared + (1−λ)·Ẑ_domain` recorded on `tape`
    /// for one image's `(1+N)×D` tokens. `trainable(branch)` decides which
    /// modules register as parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn contribution_tape(
        &self,
        tape: &mut Tape,
        tokens: Var,
        split: &TokenSplit,
        domain_id: usize,
        fusion: Fusion,
        block: usize,
        trainable: &dyn Fn(Branch) -> bool,
    ) -> Result<Option<Var>> {
        let rows = tape.value(tokens).rows();
        let mut acc: Option<Var> = None;
        if let Some(weight) = fusion.shared {
            let task_rows = split.task_rows();
            let z_task = tape.gather_rows(tokens, &task_rows)?;
            let y = self
                .shared
                .forward_tape(tape, z_task, block, Branch::Shared, trainable(Branch::Shared))?;
            let placed = tape.scatter_rows(y, &task_rows, rows)?;
            acc = Some(tape.scale(placed, weight));
        }
        if let Some(weight) = fusion.domain {
            let branch = Branch::Domain(domain_id);
            let module = self.branch(domain_id)?;
            let domain_rows = split.domain_rows();
            let z_dom = tape.gather_rows(tokens, &domain_rows)?;
            let y = module.forward_tape(tape, z_dom, block, branch, trainable(branch))?;
            let placed = tape.scatter_rows(y, &domain_rows, rows)?;
            let scaled = tape.scale(placed, weight);
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(acc)
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.f64(self.lambda);
        w.f64(self.k_percent);
        w.len_u32(self.domain_branches.len());
        self.shared.encode(w);
        self.template.encode(w);
        for b in &self.domain_branches {
            b.encode(w);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let lambda = r.f64()?;
        let k_percent = r.f64()?;
        let n = r.usize()?;
        let shared = MoEModule::decode(r)?;
        let template = MoEModule::decode(r)?;
        let domain_branches = (0..n).map(|_| MoEModule::decode(r)).collect::<Result<_>>()?;
        Ok(Self {
            shared,
            domain_branches,
            template,
            lambda,
            k_percent,
        })
    }
}

/// Runs the task tokens through the shared mixture.
pub fn dispatch_shared(pool: &ExpertPool, z_task: &Matrix) -> Result<Matrix> {
    moe_forward(&pool.shared, z_task)
}

/// Runs the domain tokens through branch `domain_id`.
pub fn dispatch_domain(pool: &ExpertPool, z_domain: &Matrix, domain_id: usize) -> Result<Matrix> {
    moe_forward(pool.branch(domain_id)?, z_domain)
}

/// `Z + λ·Ẑ_shared + (1−λ)·Ẑ_domain` with zero-filled scatter.
pub fn scatter_fuse(
    z: &Matrix,
    split: &TokenSplit,
    y_shared: &Matrix,
    y_domain: &Matrix,
    lambda: f64,
) -> Result<Matrix> {
    let d = z.cols();
    if y_shared.shape() != (split.task_indices.len(), d) || y_domain.shape() != (split.domain_indices.len(), d) {
        return Err(shape_err(
            "scatter_fuse",
            format!(
                "branch outputs {:?}/{:?} for split {}+{} of width {d}",
                y_shared.shape(),
                y_domain.shape(),
                split.task_indices.len(),
                split.domain_indices.len()
            ),
        ));
    }
    let mut out = z.clone();
    for (r, &i) in split.task_rows().iter().enumerate() {
        if i >= z.rows() {
            return Err(shape_err("scatter_fuse", format!("row {i} of {}", z.rows())));
        }
        for (o, y) in out.row_mut(i).iter_mut().zip(y_shared.row(r)) {
            *o += lambda * y;
        }
    }
    for (r, &i) in split.domain_rows().iter().enumerate() {
        if i >= z.rows() {
            return Err(shape_err("scatter_fuse", format!("row {i} of {}", z.rows())));
        }
        for (o, y) in out.row_mut(i).iter_mut().zip(y_domain.row(r)) {
            *o += (1.0 - lambda) * y;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::moe::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize(m: &mut MoEModule, r: &mut ChaCha8Rng) {
        m.router_weight = Matrix::random_uniform(m.router_weight.rows(), m.router_weight.cols(), 1.0, r);
        m.router_bias = Matrix::random_uniform(1, m.num_experts(), 1.0, r);
        for e in &mut m.experts {
            e.down = Matrix::random_uniform(e.down.rows(), e.down.cols(), 1.0, r);
            e.up = Matrix::random_uniform(e.up.rows(), e.up.cols(), 1.0, r);
        }
    }

    fn small_cfg() -> MoeConfig {
        MoeConfig {
            num_experts: 3,
            rank: 2,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn split_counts() {
        let mut r = rng(1);
        let tokens = Matrix::random_uniform(5, 6, 1.0, &mut r);
        let s = token_split(&tokens, 25.0).unwrap();
        assert_eq!(s.task_indices.len(), 1);
        assert_eq!(s.domain_indices.len(), 1);
        let argmax = (0..4).max_by(|&a, &b| s.similarities[a].total_cmp(&s.similarities[b])).unwrap();
        let argmin = (0..4).min_by(|&a, &b| s.similarities[a].total_cmp(&s.similarities[b])).unwrap();
        assert_eq!(s.task_indices, vec![argmax]);
        assert_eq!(s.domain_indices, vec![argmin]);
        assert_eq!(split_count(64, 30.0), 19);
        assert_eq!(split_count(10, 30.0), 3);
    }

    #[test]
    fn identical_patch_is_task_relevant() {
        let mut r = rng(2);
        let mut tokens = Matrix::random_uniform(9, 4, 1.0, &mut r);
        let cls = tokens.row(0).to_vec();
        tokens.row_mut(6).copy_from_slice(&cls);
        let s = token_split(&tokens, 12.5).unwrap();
        assert!((s.similarities[5] - 1.0).abs() < 1e-12);
        assert_eq!(s.task_indices, vec![5]);
    }

    #[test]
    fn split_matches_full_sort() {
        let mut r = rng(3);
        for _ in 0..100 {
            let tokens = Matrix::random_uniform(11, 5, 1.0, &mut r);
            let s = token_split(&tokens, 30.0).unwrap();
            let (task, domain) = oracles::token_split_by_sort(&tokens, 3);
            assert_eq!(s.task_indices, task);
            assert_eq!(s.domain_indices, domain);
        }
    }

    #[test]
    fn ties_and_zero_norms() {
        let mut tokens = Matrix::zeros(5, 3);
        tokens.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        // every patch has zero norm: all similarities 0
        let s = token_split(&tokens, 25.0).unwrap();
        assert_eq!(s.similarities, vec![0.0; 4]);
        assert_eq!(s.task_indices, vec![0]);
        assert_eq!(s.domain_indices, vec![3]);
        let zero_cls = Matrix::filled(5, 3, 0.0);
        assert!(token_split(&zero_cls, 25.0).is_ok());
    }

    #[test]
    fn invalid_split_sizes() {
        let tokens = Matrix::filled(5, 3, 1.0);
        assert!(token_split(&tokens, 10.0).is_err());
        assert!(token_split(&tokens, 75.0).is_err());
        assert!(token_split(&Matrix::filled(2, 3, 1.0), 50.0).is_err());
    }

    #[test]
    fn split_is_scale_invariant() {
        let mut r = rng(4);
        let tokens = Matrix::random_uniform(13, 6, 1.0, &mut r);
        let base = token_split(&tokens, 25.0).unwrap();
        let mut scaled = tokens.clone();
        for (i, s) in [(2usize, 3.5), (5, 0.01), (9, 40.0)] {
            for v in scaled.row_mut(i) {
                *v *= s;
            }
        }
        let after = token_split(&scaled, 25.0).unwrap();
        assert_eq!(after.task_indices, base.task_indices);
        assert_eq!(after.domain_indices, base.domain_indices);
    }

    #[test]
    fn random_split_is_disjoint() {
        let mut r = rng(5);
        let s = random_split(20, 30.0, &mut r).unwrap();
        assert_eq!(s.task_indices.len(), 6);
        assert_eq!(s.domain_indices.len(), 6);
        assert!(s.task_indices.iter().all(|i| !s.domain_indices.contains(i)));
    }

    #[test]
    fn dispatch_examples() {
        let mut r = rng(6);
        let mut pool = ExpertPool::new(6, &small_cfg(), 0.5, 25.0, &mut r).unwrap();
        let z = Matrix::random_uniform(3, 6, 1.0, &mut r);
        assert_eq!(dispatch_shared(&pool, &z).unwrap(), Matrix::zeros(3, 6));
        assert_eq!(dispatch_shared(&pool, &Matrix::zeros(0, 6)).unwrap().shape(), (0, 6));
        randomize(&mut pool.shared, &mut r);
        assert_eq!(dispatch_shared(&pool, &z).unwrap(), moe_forward(&pool.shared, &z).unwrap());

        randomize(pool.branch_mut(0).unwrap(), &mut r);
        assert_eq!(
            dispatch_domain(&pool, &z, 0).unwrap(),
            moe_forward(pool.branch(0).unwrap(), &z).unwrap()
        );
        let id = pool.expand_pool(ExpansionPolicy::ZeroInit, &small_cfg(), &mut r).unwrap();
        assert_eq!(id, 1);
        assert_eq!(dispatch_domain(&pool, &z, 1).unwrap(), Matrix::zeros(3, 6));
        randomize(pool.branch_mut(1).unwrap(), &mut r);
        assert_ne!(dispatch_domain(&pool, &z, 0).unwrap(), dispatch_domain(&pool, &z, 1).unwrap());
        assert!(matches!(
            dispatch_domain(&pool, &z, 7),
            Err(Error::UnknownDomainBranch { id: 7, len: 2 })
        ));
    }

    #[test]
    fn expansion_leaves_existing_branches_alone() {
        let mut r = rng(7);
        let mut pool = ExpertPool::new(6, &small_cfg(), 0.5, 25.0, &mut r).unwrap();
        randomize(pool.branch_mut(0).unwrap(), &mut r);
        pool.capture_template(0).unwrap();
        let before = pool.branch(0).unwrap().clone();
        let id = pool.expand_pool(ExpansionPolicy::CloneTemplate, &small_cfg(), &mut r).unwrap();
        assert_eq!(id, 1);
        assert_eq!(pool.num_branches(), 2);
        assert_eq!(pool.branch(0).unwrap(), &before);
        assert_eq!(pool.branch(1).unwrap(), &before);
    }

    #[test]
    fn scatter_fuse_examples() {
        let mut r = rng(8);
        let z = Matrix::random_uniform(7, 4, 1.0, &mut r);
        let split = token_split(&z, 34.0).unwrap();
        let ys = Matrix::random_uniform(2, 4, 1.0, &mut r);
        let yd = Matrix::random_uniform(2, 4, 1.0, &mut r);

        let out = scatter_fuse(&z, &split, &ys, &yd, 1.0).unwrap();
        for (k, &row) in split.task_rows().iter().enumerate() {
            for j in 0..4 {
                assert_eq!(out[(row, j)], z[(row, j)] + ys[(k, j)]);
            }
        }
        for &row in &split.domain_rows() {
            assert_eq!(out.row(row), z.row(row));
        }

        let zero = scatter_fuse(&z, &split, &Matrix::zeros(2, 4), &Matrix::zeros(2, 4), 0.3).unwrap();
        assert_eq!(zero, z);

        let out = scatter_fuse(&z, &split, &ys, &yd, 0.5).unwrap();
        assert_eq!(out.row(0), z.row(0));
        for row in 1..7 {
            if !split.task_rows().contains(&row) && !split.domain_rows().contains(&row) {
                assert_eq!(out.row(row), z.row(row));
            }
        }
        assert!(scatter_fuse(&z, &split, &Matrix::zeros(3, 4), &yd, 0.5).is_err());
    }

    #[test]
    fn tape_contribution_matches_plain_fusion() {
        let mut r = rng(9);
        let mut pool = ExpertPool::new(6, &small_cfg(), 0.3, 25.0, &mut r).unwrap();
        randomize(&mut pool.shared, &mut r);
        randomize(pool.branch_mut(0).unwrap(), &mut r);
        let z = Matrix::random_uniform(9, 6, 1.0, &mut r);
        let split = token_split(&z, 25.0).unwrap();
        let ys = dispatch_shared(&pool, &Matrix::from_fn(2, 6, |i, j| z[(split.task_rows()[i], j)])).unwrap();
        let yd = dispatch_domain(&pool, &Matrix::from_fn(2, 6, |i, j| z[(split.domain_rows()[i], j)]), 0).unwrap();
        let plain = scatter_fuse(&z, &split, &ys, &yd, 0.3).unwrap();

        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let c = pool
            .contribution_tape(&mut tape, zv, &split, 0, Fusion::dual(0.3), 0, &|_| false)
            .unwrap()
            .unwrap();
        let fused = tape.add(zv, c).unwrap();
        assert!(tape.value(fused).max_abs_diff(&plain) < 1e-14);
    }

    #[test]
    fn codec_round_trip() {
        let mut r = rng(10);
        let mut pool = ExpertPool::new(6, &small_cfg(), 0.3, 25.0, &mut r).unwrap();
        randomize(&mut pool.shared, &mut r);
        pool.expand_pool(ExpansionPolicy::ZeroInit, &small_cfg(), &mut r).unwrap();
        let mut w = Writer::new();
        pool.encode(&mut w);
        let bytes = w.finish();
        let back = ExpertPool::decode(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, pool);
    }
}
