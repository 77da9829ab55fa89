//! Low-rank mixture-of-experts block with a dense softmax router.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{gelu, stable_softmax, Matrix, Tape, Var};
use crate::params::{Branch, ExpertSlot, ParamKey};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Relu),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// `σ(z·W_down)·W_up` with `W_down: D×r`, `W_up: r×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankExpert {
    pub down: Matrix,
    pub up: Matrix,
    pub activation: Activation,
}

impl LowRankExpert {
    pub fn dim(&self) -> usize {
        self.down.rows()
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }
}

pub fn expert_forward(expert: &LowRankExpert, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != expert.dim() {
        return Err(Error::Dimension {
            expected: expert.dim(),
            got: z.len(),
        });
    }
    let hidden = Matrix::row_vector(z)
        .matmul(&expert.down)?
        .map(|v| expert.activation.apply(v));
    Ok(hidden.matmul(&expert.up)?.into_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub rank: usize,
    pub activation: Activation,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            rank: 4,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModule {
    /// `M×D`.
    pub router_weight: Matrix,
    /// `1×M`.
    pub router_bias: Matrix,
    pub experts: Vec<LowRankExpert>,
    pub trainable: bool,
}

impl MoEModule {
    /// Zero router (uniform gating), `W_down ~ U(±1/√D)` and `W_up = 0`,
    /// so a fresh module outputs exactly zero.
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &MoeConfig, rng: &mut R) -> Result<Self> {
        if config.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if config.rank == 0 || config.rank >= dim {
            return Err(Error::Config(format!(
                "expert rank {} must be in 1..{dim}",
                config.rank
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let experts = (0..config.num_experts)
            .map(|_| LowRankExpert {
                down: Matrix::random_uniform(dim, config.rank, bound, rng),
                up: Matrix::zeros(config.rank, dim),
                activation: config.activation,
            })
            .collect();
        Ok(Self {
            router_weight: Matrix::zeros(config.num_experts, dim),
            router_bias: Matrix::zeros(1, config.num_experts),
            experts,
            trainable: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.router_weight.cols()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].rank()
    }

    /// Every tensor with its slot, in a fixed order.
    pub fn tensors(&self) -> Vec<(ExpertSlot, &Matrix)> {
        let mut out = vec![
            (ExpertSlot::RouterWeight, &self.router_weight),
            (ExpertSlot::RouterBias, &self.router_bias),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((ExpertSlot::Down(i), &e.down));
            out.push((ExpertSlot::Up(i), &e.up));
        }
        out
    }

    pub fn tensor_mut(&mut self, slot: ExpertSlot) -> Option<&mut Matrix> {
        match slot {
            ExpertSlot::RouterWeight => Some(&mut self.router_weight),
            ExpertSlot::RouterBias => Some(&mut self.router_bias),
            ExpertSlot::Down(i) => self.experts.get_mut(i).map(|e| &mut e.down),
            ExpertSlot::Up(i) => self.experts.get_mut(i).map(|e| &mut e.up),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Records the mixture on `tape`. Tensors become parameters (keyed by
    /// `block`/`branch`) only when both `self.trainable` and `trainable`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: Var,
        block: usize,
        branch: Branch,
        trainable: bool,
    ) -> Result<Var> {
        let (t, d) = tape.value(tokens).shape();
        if d != self.dim() {
            return Err(shape_err("moe_forward", format!("token width {d} vs {}", self.dim())));
        }
        if t == 0 {
            return Ok(tape.constant(Matrix::zeros(0, d)));
        }
        let train = trainable && self.trainable;
        let key = |slot| ParamKey::Expert { block, branch, slot };
        let wr = tape.leaf(key(ExpertSlot::RouterWeight), &self.router_weight, train);
        let br = tape.leaf(key(ExpertSlot::RouterBias), &self.router_bias, train);
        let logits = tape.matmul_transposed(tokens, wr)?;
        let logits = tape.add_row(logits, br)?;
        let alpha = tape.softmax_rows(logits)?;
        let mut acc: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let down = tape.leaf(key(ExpertSlot::Down(i)), &e.down, train);
            let up = tape.leaf(key(ExpertSlot::Up(i)), &e.up, train);
            let h = tape.matmul(tokens, down)?;
            let h = e.activation.on_tape(tape, h);
            let out = tape.matmul(h, up)?;
            let weighted = tape.row_scale(out, alpha, i)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok(acc.expect("at least one expert"))
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.len_u32(self.num_experts());
        w.len_u32(self.dim());
        w.len_u32(self.rank());
        w.u32(self.experts[0].activation.tag());
        w.u32(u32::from(self.trainable));
        w.f64s(self.router_weight.as_slice());
        w.f64s(self.router_bias.as_slice());
        for e in &self.experts {
            w.f64s(e.down.as_slice());
            w.f64s(e.up.as_slice());
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let m = r.usize()?;
        let d = r.usize()?;
        let rank = r.usize()?;
        let activation = Activation::from_tag(r.u32()?)?;
        let trainable = r.u32()? != 0;
        if m == 0 {
            return Err(Error::Checkpoint("module with zero experts".into()));
        }
        let router_weight = Matrix::from_vec(m, d, r.f64s(m * d)?)?;
        let router_bias = Matrix::from_vec(1, m, r.f64s(m)?)?;
        let mut experts = Vec::with_capacity(m);
        for _ in 0..m {
            let down = Matrix::from_vec(d, rank, r.f64s(d * rank)?)?;
            let up = Matrix::from_vec(rank, d, r.f64s(rank * d)?)?;
            experts.push(LowRankExpert {
                down,
                up,
                activation,
            });
        }
        Ok(Self {
            router_weight,
            router_bias,
            experts,
            trainable,
        })
    }
}

/// Mixture weights `α = softmax(W_r·z + b_r)`.
pub fn route(module: &MoEModule, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != module.dim() {
        return Err(Error::Dimension {
            expected: module.dim(),
            got: z.len(),
        });
    }
    let logits: Vec<f64> = (0..module.num_experts())
        .map(|i| {
            module
                .router_weight
                .row(i)
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + module.router_bias.as_slice()[i]
        })
        .collect();
    stable_softmax(&logits)
}

/// Dense mixture applied to each row of `tokens` (`T×D`).
pub fn moe_forward(module: &MoEModule, tokens: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let y = module.forward_tape(&mut tape, x, 0, Branch::Shared, false)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use crate::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(d: usize, m: usize, r: usize, act: Activation, seed: u64) -> MoEModule {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MoeConfig {
            num_experts: m,
            rank: r,
            activation: act,
        };
        let mut module = MoEModule::new(d, &cfg, &mut rng).unwrap();
        module.router_weight = Matrix::random_uniform(m, d, 1.0, &mut rng);
        module.router_bias = Matrix::random_uniform(1, m, 1.0, &mut rng);
        for e in &mut module.experts {
            e.down = Matrix::random_uniform(d, r, 1.0, &mut rng);
            e.up = Matrix::random_uniform(r, d, 1.0, &mut rng);
        }
        module
    }

    fn oracle_experts(m: &MoEModule) -> Vec<(Matrix, Matrix)> {
        m.experts.iter().map(|e| (e.down.clone(), e.up.clone())).collect()
    }

    #[test]
    fn expert_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fresh = MoEModule::new(8, &MoeConfig::default(), &mut rng).unwrap();
        let z: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        assert_eq!(expert_forward(&fresh.experts[0], &z).unwrap(), vec![0.0; 8]);

        let relu = LowRankExpert {
            down: Matrix::filled(3, 2, -1.0),
            up: Matrix::filled(2, 3, 5.0),
            activation: Activation::Relu,
        };
        assert_eq!(expert_forward(&relu, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);

        let m = randomized(8, 1, 2, Activation::Gelu, 2);
        let direct = oracles::moe_token(&m.router_weight, m.router_bias.as_slice(), &oracle_experts(&m), gelu, &z);
        let got = expert_forward(&m.experts[0], &z).unwrap();
        for (a, b) in got.iter().zip(direct) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn route_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fresh = MoEModule::new(6, &MoeConfig::default(), &mut rng).unwrap();
        assert_eq!(route(&fresh, &[1.0; 6]).unwrap(), vec![0.25; 4]);
        let single = randomized(6, 1, 2, Activation::Gelu, 4);
        assert_eq!(route(&single, &[0.3; 6]).unwrap(), vec![1.0]);

        let m = randomized(6, 4, 2, Activation::Gelu, 5);
        let z = [0.1, -0.2, 0.3, 0.5, -1.0, 2.0];
        let logits: Vec<f64> = (0..4)
            .map(|i| (0..6).map(|j| m.router_weight[(i, j)] * z[j]).sum::<f64>() + m.router_bias[(0, i)])
            .collect();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        for (a, l) in route(&m, &z).unwrap().iter().zip(logits) {
            assert!((a - l.exp() / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn moe_forward_examples() {
        let m = randomized(8, 1, 2, Activation::Gelu, 6);
        let tokens = Matrix::random_uniform(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let out = moe_forward(&m, &tokens).unwrap();
        for t in 0..3 {
            let e = expert_forward(&m.experts[0], tokens.row(t)).unwrap();
            for (a, b) in out.row(t).iter().zip(e) {
                assert!((a - b).abs() < 1e-14);
            }
        }

        let mut twin = randomized(8, 2, 2, Activation::Gelu, 8);
        twin.experts[1] = twin.experts[0].clone();
        let out = moe_forward(&twin, &tokens).unwrap();
        for t in 0..3 {
            let e = expert_forward(&twin.experts[0], tokens.row(t)).unwrap();
            for (a, b) in out.row(t).iter().zip(e) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let m = randomized(8, 3, 2, Activation::Relu, 9);
        let out = moe_forward(&m, &tokens).unwrap();
        for t in 0..3 {
            let direct = oracles::moe_token(
                &m.router_weight,
                m.router_bias.as_slice(),
                &oracle_experts(&m),
                |x| x.max(0.0),
                tokens.row(t),
            );
            for (a, b) in out.row(t).iter().zip(direct) {
                assert!((a - b).abs() <= 1e-12);
            }
        }

        assert_eq!(moe_forward(&m, &Matrix::zeros(0, 8)).unwrap().shape(), (0, 8));
    }

    #[test]
    fn permutation_equivariant() {
        let m = randomized(8, 3, 2, Activation::Gelu, 10);
        let tokens = Matrix::random_uniform(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let perm = [2, 0, 3, 1];
        let permuted = Matrix::from_fn(4, 8, |i, j| tokens[(perm[i], j)]);
        let a = moe_forward(&m, &tokens).unwrap();
        let b = moe_forward(&m, &permuted).unwrap();
        for i in 0..4 {
            assert_eq!(b.row(i), a.row(perm[i]));
        }
    }

    #[test]
    fn scaling_logits_keeps_argmax() {
        let m = randomized(8, 4, 2, Activation::Gelu, 12);
        let z = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 0.4];
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let base = argmax(&route(&m, &z).unwrap());
        for s in [0.1, 2.0, 10.0] {
            let mut scaled = m.clone();
            scaled.router_weight = m.router_weight.scale(s);
            scaled.router_bias = m.router_bias.scale(s);
            assert_eq!(argmax(&route(&scaled, &z).unwrap()), base);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, mm, r, t) = (8, 3, 2, 4);
        let m = randomized(d, mm, r, Activation::Gelu, 13);
        let tokens = Matrix::random_uniform(t, d, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let target = Matrix::random_uniform(t, d, 1.0, &mut ChaCha8Rng::seed_from_u64(15));

        let loss_of = |module: &MoEModule, tape: &mut Tape| -> Var {
            let x = tape.constant(tokens.clone());
            let y = module.forward_tape(tape, x, 0, Branch::Shared, true).unwrap();
            let tv = tape.constant(target.clone());
            let s = tape.row_scale(y, tv, 0).unwrap();
            tape.sum(s)
        };
        let mut tape = Tape::new();
        let l = loss_of(&m, &mut tape);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.len(), 2 + 2 * mm);

        for (slot, tensor) in m.tensors() {
            let key = ParamKey::Expert {
                block: 0,
                branch: Branch::Shared,
                slot,
            };
            let fd = finite_difference_gradient(
                |theta| {
                    let mut probe = m.clone();
                    probe
                        .tensor_mut(slot)
                        .unwrap()
                        .as_mut_slice()
                        .copy_from_slice(theta);
                    let mut tape = Tape::new();
                    let l = loss_of(&probe, &mut tape);
                    tape.value(l)[(0, 0)]
                },
                tensor.as_slice(),
                1e-5,
            );
            let g = grads.get(&key).unwrap().as_slice();
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-10);
            assert!(diff / norm <= 1e-4, "{key}: {}", diff / norm);
        }
    }

    #[test]
    fn codec_round_trip() {
        let m = randomized(8, 3, 2, Activation::Relu, 16);
        let mut w = Writer::new();
        m.encode(&mut w);
        let bytes = w.finish();
        let back = MoEModule::decode(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rank_must_be_below_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MoeConfig {
            num_experts: 2,
            rank: 8,
            activation: Activation::Gelu,
        };
        assert!(MoEModule::new(8, &cfg, &mut rng).is_err());
    }
}
