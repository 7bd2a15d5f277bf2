//! Analytic stand-in backend with planted orthonormal attribute directions
//! and a closed-form identity embedding.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::curation::EmbeddingVector;
use crate::error::{Error, Result};
use crate::geometry::LatentVector;
use crate::identity::{
    expression_attribute, race_attribute, CandidateSample, CandidateSource, Labels, ADULT_AGE_BINS,
    CHILD_AGE_BINS, EXPRESSIONS, GENDERS, NEUTRAL_EXPRESSION, RACES,
};
use crate::scalar::{dot, norm};
use crate::seeding;

/// Attributes scored on a continuous axis; the rest are categorical.
pub const BINARY_ATTRIBUTES: [&str; 5] = ["yaw", "pitch", "gender", "age", "illumination"];

/// Quality is log-normal around this median. Its 10% quantile is close to
/// the 24.45 real-data quality cutoff.
const QUALITY_MEDIAN: f64 = 27.79;
const QUALITY_LOG_SPREAD: f64 = 0.1;

/// `yaw, pitch, gender, age, illumination`, the six non-neutral expressions
/// and the seven races: 18 directions.
pub fn default_attributes() -> Vec<String> {
    BINARY_ATTRIBUTES
        .iter()
        .map(|s| s.to_string())
        .chain(
            EXPRESSIONS
                .iter()
                .filter(|e| **e != NEUTRAL_EXPRESSION)
                .map(|e| expression_attribute(e)),
        )
        .chain(RACES.iter().map(|r| race_attribute(r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub dim: usize,
    pub embed_dim: usize,
    /// Standard deviation of the labeler noise added to every attribute score.
    pub noise_sigma: f64,
    /// Fraction of candidates labeled with a child age bin.
    pub child_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dim: 64,
            embed_dim: 32,
            noise_sigma: 0.0,
            child_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    dim: usize,
    embed_dim: usize,
    noise_sigma: f64,
    child_fraction: f64,
    seed: u64,
    attributes: Vec<String>,
    directions: Vec<Vec<f64>>,
    /// `embed_dim × dim`, row-major.
    projection: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut seeding::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Extends `basis` by seeded Gram–Schmidt until it holds `extra` more
/// orthonormal vectors.
fn extend_orthonormal(rng: &mut seeding::Rng, dim: usize, mut basis: Vec<Vec<f64>>, extra: usize) -> Vec<Vec<f64>> {
    let target = basis.len() + extra;
    while basis.len() < target {
        let mut v = gaussian_vec(rng, dim);
        // two passes keep the basis orthonormal to ~1e-15
        for _ in 0..2 {
            for u in &basis {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    basis
}

/// Builds a world whose directions come from seeded Gram–Schmidt.
pub fn create_world(dim: usize, attributes: &[String], embed_dim: usize, seed: u64) -> Result<World> {
    World::new(
        attributes,
        &WorldConfig {
            dim,
            embed_dim,
            ..WorldConfig::default()
        },
        seed,
    )
}

impl World {
    pub fn new(attributes: &[String], cfg: &WorldConfig, seed: u64) -> Result<World> {
        let (dim, embed_dim) = (cfg.dim, cfg.embed_dim);
        if embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        if attributes.len() + embed_dim > dim {
            return Err(Error::config(format!(
                "{} attributes + embed_dim {embed_dim} exceed latent dim {dim}",
                attributes.len()
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = attributes.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(Error::config(format!("duplicate attribute `{dup}`")));
        }
        if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&cfg.child_fraction) {
            return Err(Error::config("child_fraction must be in [0, 1)"));
        }

        let mut rng = seeding::derived_rng(seed, "world-directions", 0);
        let directions = extend_orthonormal(&mut rng, dim, Vec::new(), attributes.len());
        // rows orthonormal and orthogonal to every attribute: random
        // identities embed isotropically
        let mut rng = seeding::derived_rng(seed, "world-projection", 0);
        let basis = extend_orthonormal(&mut rng, dim, directions.clone(), embed_dim);
        let projection = basis[attributes.len()..].to_vec();

        Ok(World {
            dim,
            embed_dim,
            noise_sigma: cfg.noise_sigma,
            child_fraction: cfg.child_fraction,
            seed,
            attributes: attributes.to_vec(),
            directions,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    /// The planted unit direction of `attribute`.
    pub fn direction(&self, attribute: &str) -> Option<&[f64]> {
        self.attributes
            .iter()
            .position(|a| a == attribute)
            .map(|i| self.directions[i].as_slice())
    }

    fn require(&self, attribute: &str) -> Result<&[f64]> {
        self.direction(attribute)
            .ok_or_else(|| Error::config(format!("world has no `{attribute}` direction")))
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: w.len(),
            });
        }
        Ok(())
    }

    /// `w` with every planted component removed.
    pub fn residual(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut r = w.to_vec();
        for u in &self.directions {
            let p = dot(&r, u);
            r.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        Ok(r)
    }

    /// `normalize(P · residual(w))`.
    pub fn embed(&self, w: &LatentVector<f64>) -> Result<EmbeddingVector<f64>> {
        let r = self.residual(w.as_slice())?;
        let scale = norm(w.as_slice()).max(1.0);
        if norm(&r) <= 1e-9 * scale {
            return Err(Error::Degenerate(
                "latent lies inside the attribute subspace; its identity residual is zero".into(),
            ));
        }
        let e: Vec<f64> = self.projection.iter().map(|row| dot(row, &r)).collect();
        let n = norm(&e);
        if n <= 1e-12 * scale {
            return Err(Error::Degenerate("identity residual is in the projection kernel".into()));
        }
        EmbeddingVector::new(e.into_iter().map(|x| x / n).collect())
    }

    /// A standard-normal latent.
    pub fn random_latent(&self, rng: &mut seeding::Rng) -> LatentVector<f64> {
        LatentVector::new(gaussian_vec(rng, self.dim)).expect("gaussian draws are finite")
    }

    /// Noiseless score of `w` along a planted direction.
    pub fn score(&self, w: &[f64], attribute: &str) -> Result<f64> {
        self.check_dim(w)?;
        Ok(dot(w, self.require(attribute)?))
    }

    /// Gender label read off the noiseless gender score.
    pub fn gender_label(&self, w: &LatentVector<f64>) -> Result<String> {
        let s = self.score(w.as_slice(), "gender")?;
        Ok(if s > 0.0 { GENDERS[0] } else { GENDERS[1] }.to_string())
    }

    /// Age bin for an age score: the score's standard-normal quantile is cut
    /// into three child bins covering `child_fraction` and five adult bins
    /// covering the rest, all of equal probability within their group.
    pub fn age_bin(&self, age_score: f64) -> &'static str {
        let sd = (1.0 + self.noise_sigma * self.noise_sigma).sqrt();
        let q = Normal::standard().cdf(age_score / sd);
        let c = self.child_fraction;
        if q < c {
            let k = ((q / c) * CHILD_AGE_BINS.len() as f64) as usize;
            CHILD_AGE_BINS[k.min(CHILD_AGE_BINS.len() - 1)]
        } else {
            let k = ((q - c) / (1.0 - c) * ADULT_AGE_BINS.len() as f64) as usize;
            ADULT_AGE_BINS[k.min(ADULT_AGE_BINS.len() - 1)]
        }
    }

    /// Labels a latent as the external labelers would: noisy scores on every
    /// direction, categorical labels by argmax over their group.
    pub fn label(&self, index: usize, latent: LatentVector<f64>, rng: &mut seeding::Rng) -> Result<CandidateSample<f64>> {
        let mut scores = BTreeMap::new();
        for a in default_attributes() {
            let noise: f64 = StandardNormal.sample(rng);
            scores.insert(a.clone(), self.score(latent.as_slice(), &a)? + self.noise_sigma * noise);
        }
        let argmax = |names: &mut dyn Iterator<Item = (&'static str, f64)>| {
            let mut best = ("", f64::NEG_INFINITY);
            for (n, s) in names {
                if s > best.1 {
                    best = (n, s);
                }
            }
            best.0.to_string()
        };
        let race = argmax(&mut RACES.iter().map(|r| (*r, scores[&race_attribute(r)])));
        let expression = argmax(&mut EXPRESSIONS.iter().map(|e| {
            let s = if *e == NEUTRAL_EXPRESSION {
                0.0
            } else {
                scores[&expression_attribute(e)]
            };
            (*e, s)
        }));
        let gender = if scores["gender"] > 0.0 { GENDERS[0] } else { GENDERS[1] };
        let z: f64 = StandardNormal.sample(rng);
        Ok(CandidateSample {
            index,
            labels: Labels {
                race,
                gender: gender.to_string(),
                age_bin: self.age_bin(scores["age"]).to_string(),
                expression,
                yaw: scores["yaw"],
                pitch: scores["pitch"],
                illumination: scores["illumination"],
            },
            quality: QUALITY_MEDIAN * (QUALITY_LOG_SPREAD * z).exp(),
            latent,
            scores,
        })
    }

    /// Candidate `index` of the stream seeded by `seed`.
    pub fn sample_one(&self, index: usize, seed: u64) -> Result<CandidateSample<f64>> {
        let mut rng = seeding::derived_rng(seed, "sim-latent", index as u64);
        let latent = self.random_latent(&mut rng);
        self.label(index, latent, &mut rng)
    }
}

/// `n` labeled candidates; candidate `i` depends only on `(world, seed, i)`.
pub fn sample_labeled_latents(world: &World, n: usize, seed: u64) -> Result<Vec<CandidateSample<f64>>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(|i| world.sample_one(i, seed)).collect()
}

/// A [`CandidateSource`] view of a world.
pub struct SimBackend<'a> {
    pub world: &'a World,
    pub seed: u64,
}

impl CandidateSource<f64> for SimBackend<'_> {
    fn sample(&self, index: usize) -> std::result::Result<CandidateSample<f64>, String> {
        self.world.sample_one(index, self.seed).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationNoise {
    /// Fraction of samples that depict a fresh random identity.
    pub outlier_fraction: f64,
    /// Fraction of samples in which the detector finds no face.
    pub no_face_fraction: f64,
    /// Fraction of non-outlier samples whose gender label flips.
    pub gender_flip_fraction: f64,
}

impl Default for PersonalizationNoise {
    fn default() -> Self {
        PersonalizationNoise {
            outlier_fraction: 0.1,
            no_face_fraction: 0.02,
            gender_flip_fraction: 0.02,
        }
    }
}

impl PersonalizationNoise {
    pub fn none() -> Self {
        PersonalizationNoise {
            outlier_fraction: 0.0,
            no_face_fraction: 0.0,
            gender_flip_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("no_face_fraction", self.no_face_fraction),
            ("gender_flip_fraction", self.gender_flip_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub prompt_id: String,
    pub k: usize,
    pub embedding: EmbeddingVector<f64>,
    pub face_count: u32,
    pub gender: String,
    pub outlier: bool,
}

/// Stand-in for diffusion inference: each sample's embedding is the identity
/// embedding plus isotropic Gaussian noise with per-coordinate standard
/// deviation `sigma_d` of its prompt, renormalized. Outliers replace the
/// identity with a fresh random one and get a random gender.
pub fn simulate_personalization(
    world: &World,
    identity_latent: &LatentVector<f64>,
    identity_gender: &str,
    prompts: &[(String, f64)],
    samples_per_prompt: usize,
    noise: &PersonalizationNoise,
    seed: u64,
) -> Result<Vec<SimulatedSample>> {
    noise.validate()?;
    if let Some((p, s)) = prompts.iter().find(|(_, s)| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::input(format!("prompt `{p}` has invalid sigma_d {s}")));
    }
    let base = world.embed(identity_latent)?;
    let mut out = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for (pi, (prompt_id, sigma)) in prompts.iter().enumerate() {
        for k in 0..samples_per_prompt {
            let mut rng = seeding::derived_rng(seed, "personalize", (pi * samples_per_prompt + k) as u64);
            let outlier = rng.random::<f64>() < noise.outlier_fraction;
            let center = if outlier {
                let stranger = world.random_latent(&mut rng);
                world.embed(&stranger)?
            } else {
                base.clone()
            };
            let mut e: Vec<f64> = center
                .as_slice()
                .iter()
                .map(|&c| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    c + sigma * g
                })
                .collect();
            let n = norm(&e);
            e.iter_mut().for_each(|x| *x /= n);
            let face_count = u32::from(rng.random::<f64>() >= noise.no_face_fraction);
            let gender = if outlier {
                GENDERS[rng.random_range(0..GENDERS.len())].to_string()
            } else if rng.random::<f64>() < noise.gender_flip_fraction {
                GENDERS
                    .iter()
                    .find(|g| **g != identity_gender)
                    .unwrap_or(&GENDERS[0])
                    .to_string()
            } else {
                identity_gender.to_string()
            };
            out.push(SimulatedSample {
                prompt_id: prompt_id.clone(),
                k,
                embedding: EmbeddingVector::new(e)?,
                face_count,
                gender,
                outlier,
            });
        }
    }
    Ok(out)
}

/// Stand-in for a real-image dataset: `identities × per_identity` samples,
/// each an identity embedding plus per-coordinate Gaussian noise `sigma`.
/// Each sample also gets a quality score from the pool's quality law.
#[derive(Debug, Clone)]
pub struct ReferenceDataset {
    pub identities: BTreeMap<String, Vec<String>>,
    pub embeddings: BTreeMap<String, EmbeddingVector<f64>>,
    pub quality: BTreeMap<String, f64>,
}

pub fn reference_dataset(
    world: &World,
    identities: usize,
    per_identity: usize,
    sigma: f64,
    seed: u64,
) -> Result<ReferenceDataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("reference sigma {sigma} must be finite and >= 0")));
    }
    let mut ds = ReferenceDataset {
        identities: BTreeMap::new(),
        embeddings: BTreeMap::new(),
        quality: BTreeMap::new(),
    };
    for i in 0..identities {
        let mut rng = seeding::derived_rng(seed, "reference", i as u64);
        let id = format!("ref{i:05}");
        let base = world.embed(&world.random_latent(&mut rng))?;
        let mut samples = Vec::with_capacity(per_identity);
        for k in 0..per_identity {
            let sample_id = format!("{id}_{k:03}");
            let mut e: Vec<f64> = base
                .as_slice()
                .iter()
                .map(|&c| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    c + sigma * g
                })
                .collect();
            let n = norm(&e);
            e.iter_mut().for_each(|x| *x /= n);
            let z: f64 = StandardNormal.sample(&mut rng);
            ds.embeddings.insert(sample_id.clone(), EmbeddingVector::new(e)?);
            ds.quality.insert(sample_id.clone(), QUALITY_MEDIAN * (QUALITY_LOG_SPREAD * z).exp());
            samples.push(sample_id);
        }
        ds.identities.insert(id, samples);
    }
    Ok(ds)
}
