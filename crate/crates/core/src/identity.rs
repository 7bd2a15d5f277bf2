//! Candidate pool construction, demographic planning and the four-step
//! identity synthesis sequence.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_edits, AttributeBoundary, EditStep, LatentVector};
use crate::scalar::Scalar;

pub const RACES: [&str; 7] = [
    "White",
    "Black",
    "Latino_Hispanic",
    "Southeast_Asian",
    "East_Asian",
    "Middle_Eastern",
    "Indian",
];
pub const GENDERS: [&str; 2] = ["Male", "Female"];
pub const ADULT_AGE_BINS: [&str; 5] = ["20-29", "30-39", "40-49", "50-59", "60+"];
pub const CHILD_AGE_BINS: [&str; 3] = ["0-2", "3-9", "10-19"];
pub const EXPRESSIONS: [&str; 7] = ["neutral", "happy", "sad", "surprise", "disgust", "anger", "contempt"];
pub const NEUTRAL_EXPRESSION: &str = "neutral";

pub fn race_attribute(race: &str) -> String {
    format!("race:{race}")
}

pub fn expression_attribute(expression: &str) -> String {
    format!("expression:{expression}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub race: String,
    pub gender: String,
    pub age_bin: String,
    pub expression: String,
    pub yaw: f64,
    pub pitch: f64,
    pub illumination: f64,
}

/// One generated candidate with its labeler output.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSample<T> {
    pub index: usize,
    pub latent: LatentVector<T>,
    pub labels: Labels,
    /// Higher is better.
    pub quality: f64,
    /// Continuous attribute scores keyed by attribute name, used for
    /// boundary training.
    pub scores: BTreeMap<String, f64>,
}

/// Anything that can produce labeled candidates by index.
pub trait CandidateSource<T>: Sync {
    fn sample(&self, index: usize) -> std::result::Result<CandidateSample<T>, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolProvenance {
    pub n_sampled: usize,
    pub n_quality_dropped: usize,
    pub n_age_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct CandidatePool<T> {
    /// Everything the backend produced, in index order.
    pub sampled: Vec<CandidateSample<T>>,
    /// Positions in `sampled` that survived both filters, ascending.
    pub survivors: Vec<usize>,
    pub provenance: PoolProvenance,
}

impl<T> CandidatePool<T> {
    pub fn survivor_samples(&self) -> impl Iterator<Item = &CandidateSample<T>> {
        self.survivors.iter().map(|&i| &self.sampled[i])
    }
}

/// Samples `n` candidates, then drops the `floor(quality_percentile * n)`
/// lowest-quality ones (ties by index) and every candidate in a child age bin.
pub fn build_candidate_pool<T: Scalar, S: CandidateSource<T>>(
    backend: &S,
    n: usize,
    quality_percentile: f64,
    child_age_bins: &[String],
) -> Result<CandidatePool<T>> {
    if n == 0 {
        return Err(Error::input("pool size must be >= 1"));
    }
    if !(0.0..1.0).contains(&quality_percentile) {
        return Err(Error::input(format!(
            "quality percentile {quality_percentile} outside [0, 1)"
        )));
    }
    let sampled = (0..n)
        .into_par_iter()
        .map(|i| backend.sample(i).map_err(|message| Error::Backend { index: i, message }))
        .collect::<Result<Vec<_>>>()?;
    filter_pool(sampled, quality_percentile, child_age_bins)
}

/// The filtering half of [`build_candidate_pool`], for pools read from disk.
pub fn filter_pool<T>(
    sampled: Vec<CandidateSample<T>>,
    quality_percentile: f64,
    child_age_bins: &[String],
) -> Result<CandidatePool<T>> {
    if let Some(c) = sampled.iter().find(|c| !c.quality.is_finite()) {
        return Err(Error::data(format!("candidate {} has non-finite quality", c.index)));
    }
    let n = sampled.len();
    let n_quality_dropped = (quality_percentile * n as f64).floor() as usize;
    let mut by_quality: Vec<usize> = (0..n).collect();
    by_quality.sort_by(|&a, &b| {
        sampled[a]
            .quality
            .partial_cmp(&sampled[b].quality)
            .unwrap()
            .then(sampled[a].index.cmp(&sampled[b].index))
    });
    let dropped: BTreeSet<usize> = by_quality[..n_quality_dropped].iter().copied().collect();

    let mut n_age_dropped = 0;
    let mut survivors = Vec::new();
    for (pos, c) in sampled.iter().enumerate() {
        if dropped.contains(&pos) {
            continue;
        }
        if child_age_bins.contains(&c.labels.age_bin) {
            n_age_dropped += 1;
            continue;
        }
        survivors.push(pos);
    }
    Ok(CandidatePool {
        provenance: PoolProvenance {
            n_sampled: n,
            n_quality_dropped,
            n_age_dropped,
        },
        sampled,
        survivors,
    })
}

/// Left-minus-right mean intensity of an 8-bit grayscale raster, scaled to
/// [-1, 1]. For odd widths the middle column belongs to neither half.
pub fn illumination_score(pixels: &[u8], width: usize, height: usize) -> Result<f64> {
    if width < 2 || height < 1 {
        return Err(Error::input(format!("image {width}x{height} too small")));
    }
    if pixels.len() != width * height {
        return Err(Error::input(format!(
            "buffer has {} bytes, expected {}",
            pixels.len(),
            width * height
        )));
    }
    let half = width / 2;
    let (mut left, mut right) = (0u64, 0u64);
    for row in pixels.chunks_exact(width) {
        left += row[..half].iter().map(|&p| p as u64).sum::<u64>();
        right += row[width - half..].iter().map(|&p| p as u64).sum::<u64>();
    }
    let count = (half * height) as f64;
    Ok((left as f64 - right as f64) / count / 255.0)
}

/// Binary PGM (`P5`) decoder for 8-bit images. Values are rescaled to 0..=255
/// when `maxval` is below 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::input("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::input("not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::input(format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::input(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::input("PGM dimensions overflow"))?;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() >= len)
        .ok_or_else(|| Error::input("truncated PGM raster"))?;
    let pixels = raster[..len]
        .iter()
        .map(|&p| ((p as usize * 255) / maxval) as u8)
        .collect();
    Ok((width, height, pixels))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DemographicGroup {
    pub group_id: usize,
    pub race: String,
    pub age_bin: String,
    pub gender: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub groups: Vec<DemographicGroup>,
    pub per_group: usize,
}

impl GroupPlan {
    pub fn quota(&self) -> usize {
        self.groups.len() * self.per_group
    }
}

fn check_names(kind: &str, names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::config(format!("no {kind} names given")));
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::config(format!("duplicate {kind} name `{n}`")));
        }
    }
    Ok(())
}

/// Full race × age × gender cross product, race-major.
pub fn plan_demographic_groups(
    races: &[String],
    age_bins: &[String],
    genders: &[String],
    per_group: usize,
) -> Result<GroupPlan> {
    check_names("race", races)?;
    check_names("age bin", age_bins)?;
    check_names("gender", genders)?;
    if per_group == 0 {
        return Err(Error::config("per_group must be >= 1"));
    }
    let mut groups = Vec::with_capacity(races.len() * age_bins.len() * genders.len());
    for race in races {
        for age_bin in age_bins {
            for gender in genders {
                groups.push(DemographicGroup {
                    group_id: groups.len(),
                    race: race.clone(),
                    age_bin: age_bin.clone(),
                    gender: gender.clone(),
                });
            }
        }
    }
    Ok(GroupPlan { groups, per_group })
}

fn demographic_matches<T>(c: &CandidateSample<T>, g: &DemographicGroup) -> usize {
    usize::from(c.labels.race == g.race)
        + usize::from(c.labels.gender == g.gender)
        + usize::from(c.labels.age_bin == g.age_bin)
}

/// The `k` candidates closest to `group`: more matching demographic fields
/// first, then higher quality, then lower index.
pub fn select_seed_candidates<'a, T>(
    pool: &[&'a CandidateSample<T>],
    group: &DemographicGroup,
    k: usize,
) -> Result<Vec<&'a CandidateSample<T>>> {
    if pool.is_empty() {
        return Err(Error::input("candidate pool is empty"));
    }
    if k > pool.len() {
        return Err(Error::input(format!(
            "requested {k} seeds from a pool of {}",
            pool.len()
        )));
    }
    let mut ranked: Vec<&CandidateSample<T>> = pool.to_vec();
    ranked.sort_by(|a, b| {
        demographic_matches(b, group)
            .cmp(&demographic_matches(a, group))
            .then(b.quality.partial_cmp(&a.quality).unwrap())
            .then(a.index.cmp(&b.index))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Edit magnitudes. Demographic alphas are signed per target value: the
/// direction of the gender and age boundaries is fixed by training, so the
/// target decides which way to move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Alphas {
    pub yaw: f64,
    pub pitch: f64,
    pub expression: f64,
    pub race: f64,
    pub gender: BTreeMap<String, f64>,
    pub age: BTreeMap<String, f64>,
}

impl Default for Alphas {
    fn default() -> Self {
        Alphas {
            yaw: 1.39,
            pitch: 0.98,
            expression: 1.0,
            race: 1.0,
            gender: [("Male", 1.0), ("Female", -1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            age: ADULT_AGE_BINS
                .iter()
                .zip([-1.0, -0.5, 0.0, 0.5, 1.0])
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl Alphas {
    pub fn zero() -> Self {
        Alphas {
            yaw: 0.0,
            pitch: 0.0,
            expression: 0.0,
            race: 0.0,
            gender: BTreeMap::new(),
            age: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityStatus {
    Planned,
    Synthesized,
    Personalized,
    Curated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variation<T> {
    pub tag: String,
    pub latent: LatentVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord<T> {
    pub identity_id: String,
    pub group: DemographicGroup,
    pub seed_index: usize,
    pub seed_latent: LatentVector<T>,
    /// After step 1 (yaw and pitch neutralized).
    pub pose_neutral_latent: LatentVector<T>,
    /// After step 2 (expression neutralized).
    pub neutral_latent: LatentVector<T>,
    /// After step 3 (demographic transforms).
    pub demographic_latent: LatentVector<T>,
    pub variations: Vec<Variation<T>>,
    pub status: IdentityStatus,
}

pub type BoundarySet<T> = BTreeMap<String, AttributeBoundary<T>>;

fn require<'a, T>(boundaries: &'a BoundarySet<T>, name: &str) -> Result<&'a AttributeBoundary<T>> {
    boundaries
        .get(name)
        .ok_or_else(|| Error::config(format!("missing required boundary `{name}`")))
}

/// Steps 1–3 of identity synthesis:
/// neutralize yaw then pitch; neutralize the current expression and push
/// `alpha_expression` away from it; transform toward the target race, age and
/// gender.
pub fn synthesize_identity<T: Scalar>(
    identity_id: impl Into<String>,
    seed: &CandidateSample<T>,
    group: &DemographicGroup,
    boundaries: &BoundarySet<T>,
    alphas: &Alphas,
) -> Result<IdentityRecord<T>> {
    let yaw = require(boundaries, "yaw")?;
    let pitch = require(boundaries, "pitch")?;
    let race = require(boundaries, &race_attribute(&group.race))?;
    let age = require(boundaries, "age")?;
    let gender = require(boundaries, "gender")?;
    let expression = if seed.labels.expression == NEUTRAL_EXPRESSION {
        None
    } else {
        Some(require(boundaries, &expression_attribute(&seed.labels.expression))?)
    };
    let age_alpha = *alphas
        .age
        .get(&group.age_bin)
        .ok_or_else(|| Error::config(format!("no age alpha for bin `{}`", group.age_bin)))?;
    let gender_alpha = *alphas
        .gender
        .get(&group.gender)
        .ok_or_else(|| Error::config(format!("no gender alpha for `{}`", group.gender)))?;

    let pose_neutral = compose_edits(
        &seed.latent,
        &[EditStep::Neutralize { boundary: yaw }, EditStep::Neutralize { boundary: pitch }],
    )?;
    let neutral = match expression {
        Some(b) => compose_edits(
            &pose_neutral,
            &[
                EditStep::Neutralize { boundary: b },
                EditStep::Transform {
                    boundary: b,
                    alpha: T::of(-alphas.expression),
                },
            ],
        )?,
        None => pose_neutral.clone(),
    };
    let demographic = compose_edits(
        &neutral,
        &[
            EditStep::Transform {
                boundary: race,
                alpha: T::of(alphas.race),
            },
            EditStep::Transform {
                boundary: age,
                alpha: T::of(age_alpha),
            },
            EditStep::Transform {
                boundary: gender,
                alpha: T::of(gender_alpha),
            },
        ],
    )?;

    Ok(IdentityRecord {
        identity_id: identity_id.into(),
        group: group.clone(),
        seed_index: seed.index,
        seed_latent: seed.latent.clone(),
        pose_neutral_latent: pose_neutral,
        neutral_latent: neutral,
        demographic_latent: demographic,
        variations: Vec::new(),
        status: IdentityStatus::Planned,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationRecipe {
    pub tag: String,
    /// `(attribute, alpha)` applied left to right.
    pub edits: Vec<(String, f64)>,
}

/// Exactly six recipes, one per fine-tuning input image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VariationRecipe>", into = "Vec<VariationRecipe>")]
pub struct VariationSpec {
    recipes: Vec<VariationRecipe>,
}

pub const VARIATIONS_PER_IDENTITY: usize = 6;

fn variation_attribute_allowed(name: &str) -> bool {
    matches!(name, "yaw" | "pitch" | "illumination") || name.starts_with("expression:")
}

impl VariationSpec {
    pub fn new(recipes: Vec<VariationRecipe>) -> Result<Self> {
        if recipes.len() != VARIATIONS_PER_IDENTITY {
            return Err(Error::config(format!(
                "variation spec needs exactly {VARIATIONS_PER_IDENTITY} recipes, got {}",
                recipes.len()
            )));
        }
        let mut tags = BTreeSet::new();
        for r in &recipes {
            if !tags.insert(&r.tag) {
                return Err(Error::config(format!("duplicate variation tag `{}`", r.tag)));
            }
            for (attr, alpha) in &r.edits {
                if !variation_attribute_allowed(attr) {
                    return Err(Error::config(format!(
                        "variation `{}` edits `{attr}`; only yaw, pitch, illumination and expression:* are allowed",
                        r.tag
                    )));
                }
                if !alpha.is_finite() {
                    return Err(Error::config(format!("variation `{}` has a non-finite alpha", r.tag)));
                }
            }
        }
        Ok(VariationSpec { recipes })
    }

    pub fn recipes(&self) -> &[VariationRecipe] {
        &self.recipes
    }

    /// `frontal, yaw+, yaw-, pitch+, happy+, yaw+∘happy+`, using `alphas`.
    pub fn default_with(alphas: &Alphas) -> Self {
        let happy = expression_attribute("happy");
        let r = |tag: &str, edits: Vec<(&str, f64)>| VariationRecipe {
            tag: tag.to_string(),
            edits: edits.into_iter().map(|(a, v)| (a.to_string(), v)).collect(),
        };
        VariationSpec::new(vec![
            r("frontal", vec![]),
            r("yaw+", vec![("yaw", alphas.yaw)]),
            r("yaw-", vec![("yaw", -alphas.yaw)]),
            r("pitch+", vec![("pitch", alphas.pitch)]),
            r("happy+", vec![(&happy, alphas.expression)]),
            r("yaw+happy+", vec![("yaw", alphas.yaw), (&happy, alphas.expression)]),
        ])
        .expect("default spec is valid")
    }
}

impl Default for VariationSpec {
    fn default() -> Self {
        VariationSpec::default_with(&Alphas::default())
    }
}

impl TryFrom<Vec<VariationRecipe>> for VariationSpec {
    type Error = Error;
    fn try_from(v: Vec<VariationRecipe>) -> Result<Self> {
        VariationSpec::new(v)
    }
}

impl From<VariationSpec> for Vec<VariationRecipe> {
    fn from(s: VariationSpec) -> Self {
        s.recipes
    }
}

/// Step 4: one variation latent per recipe, applied to the demographic latent.
pub fn generate_variations<T: Scalar>(
    mut rec: IdentityRecord<T>,
    spec: &VariationSpec,
    boundaries: &BoundarySet<T>,
) -> Result<IdentityRecord<T>> {
    let mut variations = Vec::with_capacity(VARIATIONS_PER_IDENTITY);
    for recipe in spec.recipes() {
        let steps = recipe
            .edits
            .iter()
            .map(|(attr, alpha)| {
                Ok(EditStep::Transform {
                    boundary: require(boundaries, attr)?,
                    alpha: T::of(*alpha),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        variations.push(Variation {
            tag: recipe.tag.clone(),
            latent: compose_edits(&rec.demographic_latent, &steps)?,
        });
    }
    rec.variations = variations;
    rec.status = IdentityStatus::Synthesized;
    Ok(rec)
}
