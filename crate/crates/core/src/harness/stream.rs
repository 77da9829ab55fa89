//! Evolving-domain streams: a domain sequence repeated for several rounds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corruption::{apply_corruption, CorruptionKind, CorruptionSpec};
use super::data::{generate_base_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::spectral::ImageSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub domains: Vec<CorruptionSpec>,
    pub rounds: usize,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pool of clean images the corruptions are applied to.
    pub base: DatasetSpec,
}

/// The default four severity-5 target domains. The order matters: each
/// domain's first batch lies beyond the novelty threshold of every domain
/// opened before it, while the reverse distances need not.
pub fn default_domains() -> Vec<CorruptionSpec> {
    [
        CorruptionKind::Haze,
        CorruptionKind::Pixelate,
        CorruptionKind::BoxBlur,
        CorruptionKind::ImpulseNoise,
    ]
    .into_iter()
    .enumerate()
    .map(|(i, k)| CorruptionSpec::new(k, 5, 100 + i as u64))
    .collect()
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            domains: default_domains(),
            rounds: 3,
            batches_per_domain: 10,
            batch_size: 16,
            seed: 7,
            base: DatasetSpec {
                samples_per_class: 20,
                seed: 1_000_003,
                ..DatasetSpec::default()
            },
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.rounds == 0 || self.batches_per_domain == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "stream needs at least one domain, round, batch and sample".into(),
            ));
        }
        for d in &self.domains {
            d.kind()?;
            d.resolved_magnitude()?;
        }
        let per_visit = self.batches_per_domain * self.batch_size;
        let pool = self.base.classes * self.base.samples_per_class;
        if per_visit > pool {
            return Err(Error::Config(format!(
                "a visit needs {per_visit} distinct samples but the base pool has {pool}"
            )));
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.domains.len() * self.rounds * self.batches_per_domain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub round: usize,
    /// Position in the domain sequence (the true domain).
    pub domain: usize,
    /// Index of the batch within its visit.
    pub index: usize,
    /// Ids of the base samples in this batch.
    pub sample_ids: Vec<usize>,
    /// Labeled, domain-tagged images; strip before handing to a learner.
    pub images: Vec<ImageSample>,
}

impl StreamBatch {
    pub fn unlabeled(&self) -> Vec<ImageSample> {
        self.images
            .iter()
            .map(|s| ImageSample {
                class_label: None,
                true_domain: None,
                ..s.clone()
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|s| s.class_label.unwrap_or(usize::MAX)).collect()
    }
}

/// Domain-ordered, round-repeated batches. Every round visits the same
/// domains in the same order; each visit draws distinct base samples in a
/// freshly shuffled order, so no sample repeats within a visit.
pub fn build_stream(spec: &StreamSpec) -> Result<Vec<StreamBatch>> {
    spec.validate()?;
    let base = generate_base_dataset(&spec.base)?;
    let per_visit = spec.batches_per_domain * spec.batch_size;
    let mut out = Vec::with_capacity(spec.total_batches());
    for round in 0..spec.rounds {
        for (domain, cs) in spec.domains.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((round * spec.domains.len() + domain) as u64);
            let mut ids: Vec<usize> = (0..base.len()).collect();
            ids.shuffle(&mut rng);
            ids.truncate(per_visit);
            for (index, chunk) in ids.chunks(spec.batch_size).enumerate() {
                let images = chunk
                    .iter()
                    .map(|&i| apply_corruption(&base[i], cs, domain))
                    .collect::<Result<Vec<_>>>()?;
                out.push(StreamBatch {
                    round,
                    domain,
                    index,
                    sample_ids: chunk.to_vec(),
                    images,
                });
            }
        }
    }
    Ok(out)
}
