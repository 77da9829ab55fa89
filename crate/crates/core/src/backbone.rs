//! Toy vision transformer hosting a dual-branch expert pool at the FFN site
//! of every block, plus source pretraining and expert warm-up.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdamState;
use crate::codec::{Reader, Writer};
use crate::dbe_ts::{random_split, token_split, ExpertPool, Fusion, TokenSplit};
use crate::error::{shape_err, Error, Result};
use crate::moe::{Activation, MoeConfig};
use crate::numerics::{stable_softmax, Matrix, Tape, Var};
use crate::params::{AttnPart, Branch, ParamKey};
use crate::sodd::{batch_mean, DomainRegistry, SoddConfig};
use crate::spectral::{extract_batch, ImageSample, SpectralConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"XPMO";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub classes: usize,
    /// Hidden width of the frozen FFN.
    pub mlp_hidden: usize,
    pub seed: u64,
    pub experts: MoeConfig,
    /// Fusion weight of the shared branch.
    pub lambda: f64,
    /// Percentage of patch tokens sent to each branch.
    pub k_percent: f64,
    /// Keep the frozen FFN alongside the expert fusion. When false the FFN
    /// site output is only the residual plus the fused experts.
    pub keep_ffn: bool,
}

impl Default for ToyViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            blocks: 2,
            heads: 4,
            classes: 8,
            mlp_hidden: 64,
            seed: 0,
            experts: MoeConfig::default(),
            lambda: 0.5,
            k_percent: 30.0,
            keep_ffn: true,
        }
    }
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.classes < 2 || self.channels == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("classes ≥ 2 and non-zero channels, blocks, mlp_hidden required".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn encode(&self, w: &mut Writer) {
        for v in [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.blocks,
            self.heads,
            self.classes,
            self.mlp_hidden,
            self.experts.num_experts,
            self.experts.rank,
        ] {
            w.len_u32(v);
        }
        w.u32(self.experts.activation.tag());
        w.u64(self.seed);
        w.f64(self.lambda);
        w.f64(self.k_percent);
        w.u32(u32::from(self.keep_ffn));
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let mut next = || r.usize();
        let (image_size, patch_size, channels, embed_dim, blocks) = (next()?, next()?, next()?, next()?, next()?);
        let (heads, classes, mlp_hidden, num_experts, rank) = (next()?, next()?, next()?, next()?, next()?);
        let activation = Activation::from_tag(r.u32()?)?;
        let cfg = Self {
            image_size,
            patch_size,
            channels,
            embed_dim,
            blocks,
            heads,
            classes,
            mlp_hidden,
            seed: r.u64()?,
            experts: MoeConfig {
                num_experts,
                rank,
                activation,
            },
            lambda: r.f64()?,
            k_percent: r.f64()?,
            keep_ffn: r.u32()? != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which branches of the expert pool take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Pure frozen backbone.
    Off,
    Dual,
    SharedOnly,
    DomainOnly,
}

impl BranchMode {
    fn fusion(self, lambda: f64) -> Option<Fusion> {
        match self {
            BranchMode::Off => None,
            BranchMode::Dual => Some(Fusion::dual(lambda)),
            BranchMode::SharedOnly => Some(Fusion::shared_only()),
            BranchMode::DomainOnly => Some(Fusion::domain_only()),
        }
    }
}

/// How token splits are chosen for each image and block.
pub enum SplitPolicy<'a> {
    TokenGuided,
    Random(&'a mut ChaCha8Rng),
    /// `splits[image][block]`, reused verbatim.
    Fixed(&'a [Vec<TokenSplit>]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub domain_id: usize,
    pub branches: BranchMode,
    /// Register backbone tensors as parameters.
    pub train_backbone: bool,
    /// Register the participating expert modules as parameters.
    pub train_experts: bool,
}

impl ForwardOptions {
    pub fn inference(domain_id: usize, branches: BranchMode) -> Self {
        Self {
            domain_id,
            branches,
            train_backbone: false,
            train_experts: false,
        }
    }
}

/// A batch recorded on a tape.
pub struct BatchTrace {
    /// `B×C` logits.
    pub logits: Var,
    pub splits: Vec<Vec<TokenSplit>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub splits: Vec<Vec<TokenSplit>>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|i| {
                let row = self.probs.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyViT {
    pub config: ToyViTConfig,
    backbone: BTreeMap<ParamKey, Matrix>,
    pub pools: Vec<ExpertPool>,
    /// Set once pretraining finishes; backbone tensors never change again.
    pub backbone_frozen: bool,
}

fn backbone_shapes(cfg: &ToyViTConfig) -> Vec<(ParamKey, usize, usize, Init)> {
    let (d, dh, n) = (cfg.embed_dim, cfg.head_dim(), cfg.num_patches());
    let mut out = vec![
        (ParamKey::PatchWeight, cfg.patch_len(), d, Init::Fan(cfg.patch_len())),
        (ParamKey::PatchBias, 1, d, Init::Zero),
        (ParamKey::ClassToken, 1, d, Init::Small),
        (ParamKey::Positions, n + 1, d, Init::Small),
    ];
    for block in 0..cfg.blocks {
        for site in 0..2 {
            out.push((ParamKey::NormGain { block, site }, 1, d, Init::One));
            out.push((ParamKey::NormBias { block, site }, 1, d, Init::Zero));
        }
        for head in 0..cfg.heads {
            for part in [AttnPart::Query, AttnPart::Key, AttnPart::Value] {
                out.push((ParamKey::Attn { block, head, part }, d, dh, Init::Fan(d)));
            }
            out.push((
                ParamKey::Attn {
                    block,
                    head,
                    part: AttnPart::Output,
                },
                dh,
                d,
                Init::Fan(d),
            ));
        }
        out.push((ParamKey::AttnOutBias { block }, 1, d, Init::Zero));
        out.push((ParamKey::FfnIn { block }, d, cfg.mlp_hidden, Init::Fan(d)));
        out.push((ParamKey::FfnInBias { block }, 1, cfg.mlp_hidden, Init::Zero));
        out.push((ParamKey::FfnOut { block }, cfg.mlp_hidden, d, Init::Fan(cfg.mlp_hidden)));
        out.push((ParamKey::FfnOutBias { block }, 1, d, Init::Zero));
    }
    out.push((ParamKey::FinalGain, 1, d, Init::One));
    out.push((ParamKey::FinalBias, 1, d, Init::Zero));
    out.push((ParamKey::HeadWeight, d, cfg.classes, Init::Fan(d)));
    out.push((ParamKey::HeadBias, 1, cfg.classes, Init::Zero));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    Small,
    Fan(usize),
}

impl ToyViT {
    pub fn new(config: ToyViTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut backbone = BTreeMap::new();
        for (key, rows, cols, init) in backbone_shapes(&config) {
            let m = match init {
                Init::Zero => Matrix::zeros(rows, cols),
                Init::One => Matrix::filled(rows, cols, 1.0),
                Init::Small => Matrix::random_uniform(rows, cols, 0.1, &mut rng),
                Init::Fan(fan) => Matrix::random_uniform(rows, cols, (1.0 / fan as f64).sqrt(), &mut rng),
            };
            backbone.insert(key, m);
        }
        let pools = (0..config.blocks)
            .map(|_| ExpertPool::new(config.embed_dim, &config.experts, config.lambda, config.k_percent, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            backbone,
            pools,
            backbone_frozen: false,
        })
    }

    pub fn freeze_backbone(&mut self) {
        self.backbone_frozen = true;
    }

    /// Number of domain branches (identical in every block).
    pub fn num_branches(&self) -> usize {
        self.pools.first().map_or(0, ExpertPool::num_branches)
    }

    pub fn backbone_tensors(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.backbone.iter()
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Matrix> {
        match *key {
            ParamKey::Expert { block, branch, slot } => self
                .pools
                .get(block)?
                .module(branch)
                .ok()?
                .tensors()
                .into_iter()
                .find(|(s, _)| *s == slot)
                .map(|(_, m)| m),
            _ => self.backbone.get(key),
        }
    }

    /// Mutable access; backbone tensors are refused once frozen.
    pub fn param_mut(&mut self, key: &ParamKey) -> Result<&mut Matrix> {
        let missing = || Error::Tape(format!("no parameter {key}"));
        match *key {
            ParamKey::Expert { block, branch, slot } => self
                .pools
                .get_mut(block)
                .ok_or_else(missing)?
                .module_mut(branch)?
                .tensor_mut(slot)
                .ok_or_else(missing),
            _ if self.backbone_frozen => Err(Error::Tape(format!("parameter {key} is frozen"))),
            _ => self.backbone.get_mut(key).ok_or_else(missing),
        }
    }

    /// Adds a branch to every block's pool; returns the new id.
    pub fn expand_pools(&mut self, policy: crate::dbe_ts::ExpansionPolicy, rng: &mut ChaCha8Rng) -> Result<usize> {
        let moe = self.config.experts;
        let mut id = 0;
        for pool in &mut self.pools {
            id = pool.expand_pool(policy, &moe, rng)?;
        }
        Ok(id)
    }

    fn patches(&self, img: &ImageSample) -> Result<Matrix> {
        let cfg = &self.config;
        if img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels {
            return Err(shape_err(
                "model_forward",
                format!(
                    "image {}x{}x{} vs model {}x{}x{}",
                    img.height, img.width, img.channels, cfg.image_size, cfg.image_size, cfg.channels
                ),
            ));
        }
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        Ok(Matrix::from_fn(cfg.num_patches(), cfg.patch_len(), |n, k| {
            let (pr, pc) = (n / side, n % side);
            let c = k % cfg.channels;
            let pix = k / cfg.channels;
            img.at(pr * p + pix / p, pc * p + pix % p, c)
        }))
    }

    fn leaf(&self, tape: &mut Tape, key: ParamKey, train: bool) -> Var {
        tape.leaf(key, &self.backbone[&key], train)
    }

    /// Records one image; returns `1×C` logits and the splits used per block.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        img: &ImageSample,
        opts: &ForwardOptions,
        fixed: Option<&[TokenSplit]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<TokenSplit>)> {
        let cfg = &self.config;
        let tb = opts.train_backbone;
        let n = cfg.num_patches();
        let patches = tape.constant(self.patches(img)?);
        let pw = self.leaf(tape, ParamKey::PatchWeight, tb);
        let pb = self.leaf(tape, ParamKey::PatchBias, tb);
        let emb = tape.matmul(patches, pw)?;
        let emb = tape.add_row(emb, pb)?;
        let patch_rows: Vec<usize> = (1..=n).collect();
        let emb = tape.scatter_rows(emb, &patch_rows, n + 1)?;
        let cls = self.leaf(tape, ParamKey::ClassToken, tb);
        let cls = tape.scatter_rows(cls, &[0], n + 1)?;
        let pos = self.leaf(tape, ParamKey::Positions, tb);
        let x = tape.add(emb, cls)?;
        let mut x = tape.add(x, pos)?;

        let mut splits = Vec::with_capacity(cfg.blocks);
        for block in 0..cfg.blocks {
            x = self.attention(tape, x, block, tb)?;
            let g = self.leaf(tape, ParamKey::NormGain { block, site: 1 }, tb);
            let b = self.leaf(tape, ParamKey::NormBias { block, site: 1 }, tb);
            let h = tape.layer_norm(x, g, b)?;
            let mut out = x;
            let experts_on = opts.branches != BranchMode::Off;
            if cfg.keep_ffn || !experts_on {
                let ffn = self.ffn(tape, h, block, tb)?;
                out = tape.add(out, ffn)?;
            }
            if experts_on {
                let pool = &self.pools[block];
                let fusion = opts.branches.fusion(pool.lambda).expect("experts enabled");
                let split = match (fixed, rng.as_deref_mut()) {
                    (Some(f), _) => f
                        .get(block)
                        .cloned()
                        .ok_or_else(|| shape_err("model_forward", format!("no fixed split for block {block}")))?,
                    (None, Some(r)) => random_split(n, pool.k_percent, r)?,
                    (None, None) => token_split(tape.value(h), pool.k_percent)?,
                };
                let te = opts.train_experts;
                let did = opts.domain_id;
                let trainable = move |br: Branch| te && (br == Branch::Shared || br == Branch::Domain(did));
                if let Some(c) = pool.contribution_tape(tape, h, &split, did, fusion, block, &trainable)? {
                    out = tape.add(out, c)?;
                }
                splits.push(split);
            }
            x = out;
        }
        let g = self.leaf(tape, ParamKey::FinalGain, tb);
        let b = self.leaf(tape, ParamKey::FinalBias, tb);
        let x = tape.layer_norm(x, g, b)?;
        let cls = tape.gather_rows(x, &[0])?;
        let hw = self.leaf(tape, ParamKey::HeadWeight, tb);
        let hb = self.leaf(tape, ParamKey::HeadBias, tb);
        let logits = tape.matmul(cls, hw)?;
        Ok((tape.add_row(logits, hb)?, splits))
    }

    fn attention(&self, tape: &mut Tape, x: Var, block: usize, tb: bool) -> Result<Var> {
        let g = self.leaf(tape, ParamKey::NormGain { block, site: 0 }, tb);
        let b = self.leaf(tape, ParamKey::NormBias { block, site: 0 }, tb);
        let h = tape.layer_norm(x, g, b)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut acc: Option<Var> = None;
        for head in 0..self.config.heads {
            let key = |part| ParamKey::Attn { block, head, part };
            let wq = self.leaf(tape, key(AttnPart::Query), tb);
            let wk = self.leaf(tape, key(AttnPart::Key), tb);
            let wv = self.leaf(tape, key(AttnPart::Value), tb);
            let wo = self.leaf(tape, key(AttnPart::Output), tb);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let s = tape.matmul_transposed(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            let o = tape.matmul(a, v)?;
            let o = tape.matmul(o, wo)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, o)?,
                None => o,
            });
        }
        let bias = self.leaf(tape, ParamKey::AttnOutBias { block }, tb);
        let attn = tape.add_row(acc.expect("at least one head"), bias)?;
        tape.add(x, attn)
    }

    fn ffn(&self, tape: &mut Tape, h: Var, block: usize, tb: bool) -> Result<Var> {
        let w1 = self.leaf(tape, ParamKey::FfnIn { block }, tb);
        let b1 = self.leaf(tape, ParamKey::FfnInBias { block }, tb);
        let w2 = self.leaf(tape, ParamKey::FfnOut { block }, tb);
        let b2 = self.leaf(tape, ParamKey::FfnOutBias { block }, tb);
        let u = tape.matmul(h, w1)?;
        let u = tape.add_row(u, b1)?;
        let u = tape.gelu(u);
        let u = tape.matmul(u, w2)?;
        tape.add_row(u, b2)
    }

    /// Records a batch; logits of image `b` land in row `b`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        images: &[ImageSample],
        opts: &ForwardOptions,
        policy: SplitPolicy<'_>,
    ) -> Result<BatchTrace> {
        if images.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if opts.branches != BranchMode::Off {
            for pool in &self.pools {
                if opts.branches != BranchMode::SharedOnly {
                    pool.branch(opts.domain_id)?;
                }
            }
        }
        let bsz = images.len();
        let mut rng = None;
        let mut fixed = None;
        match policy {
            SplitPolicy::TokenGuided => {}
            SplitPolicy::Random(r) => rng = Some(r),
            SplitPolicy::Fixed(f) => {
                if f.len() != bsz {
                    return Err(shape_err("model_forward", format!("{} fixed splits for {bsz} images", f.len())));
                }
                fixed = Some(f);
            }
        }
        let mut acc: Option<Var> = None;
        let mut splits = Vec::with_capacity(bsz);
        for (b, img) in images.iter().enumerate() {
            let f = fixed.map(|f| f[b].as_slice());
            let (logits, s) = self.forward_image(tape, img, opts, f, rng.as_deref_mut())?;
            let placed = tape.scatter_rows(logits, &[b], bsz)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, placed)?,
                None => placed,
            });
            splits.push(s);
        }
        Ok(BatchTrace {
            logits: acc.expect("non-empty batch"),
            splits,
        })
    }

    /// Inference pass with explicit options.
    pub fn forward_with(&self, images: &[ImageSample], opts: &ForwardOptions, policy: SplitPolicy<'_>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let trace = self.forward_batch(&mut tape, images, opts, policy)?;
        let logits = tape.value(trace.logits).clone();
        let probs = softmax_rows(&logits)?;
        Ok(ForwardOutput {
            logits,
            probs,
            splits: trace.splits,
        })
    }

    /// Frozen backbone without any expert contribution.
    pub fn backbone_forward(&self, images: &[ImageSample]) -> Result<ForwardOutput> {
        self.forward_with(images, &ForwardOptions::inference(0, BranchMode::Off), SplitPolicy::TokenGuided)
    }

    /// Total number of learnable scalars in the backbone.
    pub fn backbone_parameter_count(&self) -> usize {
        self.backbone.values().map(Matrix::len).sum()
    }

    pub fn backbone_checksum(&self) -> u64 {
        checksum(self.backbone.values())
    }

    /// Checksum over every tensor of every pool.
    pub fn pools_checksum(&self) -> u64 {
        let mut w = Writer::new();
        for p in &self.pools {
            p.encode(&mut w);
        }
        fnv1a(&w.finish())
    }

    /// Magic, version, config, tensors and the optional registry, followed
    /// by a little-endian FNV-1a checksum of everything before it.
    pub fn to_bytes(&self, registry: Option<&DomainRegistry>) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        self.config.encode(&mut w);
        w.u32(u32::from(self.backbone_frozen));
        w.len_u32(self.backbone.len());
        for m in self.backbone.values() {
            w.matrix(m);
        }
        for p in &self.pools {
            p.encode(&mut w);
        }
        match registry {
            Some(reg) => {
                w.u32(1);
                reg.encode(&mut w);
            }
            None => w.u32(0),
        }
        let mut body = w.finish();
        let sum = fnv1a(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        body
    }

    /// Parses a checkpoint written by [`ToyViT::to_bytes`]; the trailing
    /// FNV-1a checksum must match the body.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<DomainRegistry>)> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint(format!("checkpoint of {} bytes is truncated", bytes.len())));
        }
        let (bytes, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(bytes) != stored {
            return Err(Error::Checkpoint("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!("unsupported model version {version}")));
        }
        let config = ToyViTConfig::decode(&mut r)?;
        let backbone_frozen = r.u32()? != 0;
        let shapes = backbone_shapes(&config);
        let n = r.usize()?;
        if n != shapes.len() {
            return Err(Error::Checkpoint(format!("{n} backbone tensors, expected {}", shapes.len())));
        }
        // BTreeMap iteration order equals sorted key order.
        let mut keys: Vec<_> = shapes.into_iter().map(|(k, rows, cols, _)| (k, rows, cols)).collect();
        keys.sort_by_key(|k| k.0);
        let mut backbone = BTreeMap::new();
        for (key, rows, cols) in keys {
            let m = r.matrix()?;
            if m.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!("tensor {key} has shape {:?}", m.shape())));
            }
            backbone.insert(key, m);
        }
        let pools = (0..config.blocks).map(|_| ExpertPool::decode(&mut r)).collect::<Result<Vec<_>>>()?;
        let registry = match r.u32()? {
            0 => None,
            1 => Some(DomainRegistry::decode(&mut r)?),
            t => return Err(Error::Checkpoint(format!("bad registry flag {t}"))),
        };
        r.finish()?;
        Ok((
            Self {
                config,
                backbone,
                pools,
                backbone_frozen,
            },
            registry,
        ))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn checksum<'a>(tensors: impl Iterator<Item = &'a Matrix>) -> u64 {
    let mut w = Writer::new();
    for m in tensors {
        w.matrix(m);
    }
    fnv1a(&w.finish())
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        probs.row_mut(i).copy_from_slice(&stable_softmax(logits.row(i))?);
    }
    Ok(probs)
}

/// `model_forward` with the dual branch and token-guided splits.
pub fn model_forward(model: &ToyViT, batch: &[ImageSample], domain_id: usize) -> Result<ForwardOutput> {
    model.forward_with(batch, &ForwardOptions::inference(domain_id, BranchMode::Dual), SplitPolicy::TokenGuided)
}

/// Per-sample photometric jitter applied to training images: a uniform
/// contrast factor in `[contrast_min, 1]` about the per-channel mean, then
/// a uniform offset in `[-brightness, brightness]`, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast_min: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast_min: 1.0,
        }
    }
}

impl Jitter {
    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast_min == 1.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &ImageSample, rng: &mut R) -> ImageSample {
        let factor = if self.contrast_min < 1.0 {
            rng.gen_range(self.contrast_min..=1.0)
        } else {
            1.0
        };
        let offset = if self.brightness > 0.0 {
            rng.gen_range(-self.brightness..=self.brightness)
        } else {
            0.0
        };
        let c = img.channels;
        let n = img.height * img.width;
        let mut out = img.clone();
        for ch in 0..c {
            let mean = (0..n).map(|k| img.pixels[k * c + ch]).sum::<f64>() / n as f64;
            for k in 0..n {
                let v = mean + (img.pixels[k * c + ch] - mean) * factor + offset;
                out.pixels[k * c + ch] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub jitter: Jitter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
            jitter: Jitter::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub validation_accuracy: f64,
}

fn labels_of(batch: &[ImageSample]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            s.class_label
                .ok_or_else(|| Error::InvalidImage("training sample without a class label".into()))
        })
        .collect()
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= classes) {
        Some(c) => Err(Error::InvalidImage(format!("label {c} outside {classes} classes"))),
        None => Ok(()),
    }
}

/// Accuracy of `opts`-style inference over labeled samples.
pub fn accuracy(model: &ToyViT, samples: &[ImageSample], branches: BranchMode, domain_id: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let labels = labels_of(samples)?;
    let mut correct = 0usize;
    for (chunk, lab) in samples.chunks(64).zip(labels.chunks(64)) {
        let out = model.forward_with(chunk, &ForwardOptions::inference(domain_id, branches), SplitPolicy::TokenGuided)?;
        correct += out.predictions().iter().zip(lab).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// One cross-entropy epoch over `order`; returns the mean loss.
fn train_epoch(
    model: &mut ToyViT,
    adam: &mut AdamState,
    data: &[ImageSample],
    order: &[usize],
    opts: &ForwardOptions,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<ImageSample> = if cfg.jitter.is_identity() {
            idx.iter().map(|&i| data[i].clone()).collect()
        } else {
            idx.iter().map(|&i| cfg.jitter.apply(&data[i], rng)).collect()
        };
        let labels = labels_of(&batch)?;
        check_labels(&labels, model.config.classes)?;
        let mut tape = Tape::new();
        let trace = model.forward_batch(&mut tape, &batch, opts, SplitPolicy::TokenGuided)?;
        let loss = tape.cross_entropy(trace.logits, &labels)?;
        let value = tape.value(loss)[(0, 0)];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value}")));
        }
        let grads = tape.backward(loss)?;
        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        adam.step(model, &grads, cfg.lr)?;
        total += value;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Cross-entropy training of every backbone tensor, then freezing.
pub fn pretrain_source(
    model: &mut ToyViT,
    train: &[ImageSample],
    validation: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    if model.backbone_frozen {
        return Err(Error::Config("backbone is already frozen".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let opts = ForwardOptions {
        domain_id: 0,
        branches: BranchMode::Off,
        train_backbone: true,
        train_experts: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        final_loss = train_epoch(model, &mut adam, train, &order, &opts, cfg, &mut rng)?;
    }
    model.freeze_backbone();
    Ok(PretrainReport {
        epochs: cfg.epochs,
        final_loss,
        validation_accuracy: accuracy(model, validation, BranchMode::Off, 0)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// False when warm-up lowered validation accuracy and the pools were
    /// restored to their no-op state.
    pub accepted: bool,
    pub sodd_batches: usize,
    pub tau: f64,
    pub init_variance: f64,
}

/// Mean per-dimension variance of a descriptor set.
pub fn mean_descriptor_variance(descriptors: &[Vec<f64>]) -> Result<f64> {
    let mean = batch_mean(descriptors)?;
    let n = descriptors.len() as f64;
    let total: f64 = descriptors
        .iter()
        .map(|z| z.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    Ok(total / (n * mean.len() as f64))
}

/// Empirical quantile with linear interpolation.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Source batches absorbed into the registry.
    pub batches: usize,
    /// Held-out batch-mean distances to the source domain.
    pub held_out_distances: Vec<f64>,
}

/// Source-domain registry: domain 0 is opened on the first shuffled batch
/// of `batch_size` training images and refreshed by every batch of one
/// pass. `σ0²` defaults to the mean per-dimension descriptor variance and
/// `tau` to `tau_multiplier` times the 99th percentile of held-out
/// batch-mean distances.
pub fn calibrate_registry(
    train: &[ImageSample],
    validation: &[ImageSample],
    spectral: &SpectralConfig,
    sodd: &SoddConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(DomainRegistry, Calibration)> {
    let bsz = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_0dd);
    let mut train_desc = extract_batch(train, spectral)?;
    let init_variance = match sodd.init_variance {
        Some(v) => v,
        None => mean_descriptor_variance(&train_desc)?,
    };
    let mut registry = DomainRegistry::new(spectral.dim(), sodd.shrinkage, f64::INFINITY, init_variance);
    registry.max_domains = sodd.max_domains;
    train_desc.shuffle(&mut rng);
    let mut batches = 0;
    for chunk in train_desc.chunks(bsz) {
        if registry.is_empty() {
            registry.spawn_domain(chunk)?;
        }
        registry.update_domain(0, chunk)?;
        batches += 1;
    }
    let mut held_out = extract_batch(validation, spectral)?;
    held_out.shuffle(&mut rng);
    let mut held_out_distances = Vec::new();
    for chunk in held_out.chunks(bsz) {
        held_out_distances.extend(registry.distances(&batch_mean(chunk)?)?);
    }
    registry.tau = match sodd.tau {
        Some(t) => t,
        None => sodd.tau_multiplier * quantile(&held_out_distances, 0.99).ok_or(Error::EmptyEvaluationSet)?,
    };
    Ok((
        registry,
        Calibration {
            batches,
            held_out_distances,
        },
    ))
}

/// Trains the shared branch and domain branch 0 on labeled source data with
/// the backbone frozen, stores branch 0 as the expansion template, and
/// builds the source-domain registry. `tau` comes from held-out batches of
/// `calibration_batch` images unless fixed in `sodd`.
pub fn warmup_experts(
    model: &mut ToyViT,
    train: &[ImageSample],
    validation: &[ImageSample],
    cfg: &TrainConfig,
    spectral: &SpectralConfig,
    sodd: &SoddConfig,
    calibration_batch: usize,
) -> Result<(DomainRegistry, WarmupReport)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    model.freeze_backbone();
    let accuracy_before = accuracy(model, validation, BranchMode::Dual, 0)?;
    let pools_before = model.pools.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let opts = ForwardOptions {
        domain_id: 0,
        branches: BranchMode::Dual,
        train_backbone: false,
        train_experts: true,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        train_epoch(model, &mut adam, train, &order, &opts, cfg, &mut rng)?;
    }

    let mut accuracy_after = accuracy(model, validation, BranchMode::Dual, 0)?;
    let accepted = accuracy_after >= accuracy_before;
    if !accepted {
        model.pools = pools_before;
        accuracy_after = accuracy_before;
    }
    for pool in &mut model.pools {
        pool.capture_template(0)?;
    }

    let (registry, calibration) = calibrate_registry(train, validation, spectral, sodd, calibration_batch, cfg.seed)?;
    let report = WarmupReport {
        accuracy_before,
        accuracy_after,
        accepted,
        sodd_batches: calibration.batches,
        tau: registry.tau,
        init_variance: registry.init_variance,
    };
    Ok((registry, report))
}

/// Draws a uniformly random existing branch id.
pub fn random_branch(num_branches: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(0..num_branches.max(1))
}
