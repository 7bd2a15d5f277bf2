use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::SvmConfig;
use crate::curation::FilterConfig;
use crate::error::{Error, Result};
use crate::identity::{Alphas, VariationSpec, ADULT_AGE_BINS, CHILD_AGE_BINS, GENDERS, RACES};
use crate::personalization::{build_prompt_bank, default_templates, FinetuneConfig, PromptTemplate};
use crate::simworld::{PersonalizationNoise, WorldConfig};

/// Name of the simulated reference dataset.
pub const SIM_REFERENCE: &str = "reference";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Simworld,
    Bridge,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Simworld => "simworld",
            Backend::Bridge => "bridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub per_identity: usize,
    pub mated: usize,
    pub nonmated: usize,
    pub bins: usize,
    pub epsilon: f64,
    /// Images per identity sampled from the GAN dataset, which only has six.
    pub gan_per_identity: usize,
    pub references: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            per_identity: 10,
            mated: 20,
            nonmated: 20,
            bins: 100,
            epsilon: 1e-6,
            gan_per_identity: 6,
            references: vec![SIM_REFERENCE.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimReference {
    pub identities: usize,
    pub per_identity: usize,
    pub sigma: f64,
}

impl Default for SimReference {
    fn default() -> Self {
        SimReference {
            identities: 100,
            per_identity: 12,
            sigma: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub world: WorldConfig,
    pub personalization: PersonalizationNoise,
    /// Per-prompt embedding noise is swept linearly over this range in
    /// prompt order.
    pub sigma_d_range: [f64; 2],
    pub reference: SimReference,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            world: WorldConfig::default(),
            personalization: PersonalizationNoise::default(),
            sigma_d_range: [0.05, 0.8],
            reference: SimReference::default(),
        }
    }
}

impl SimConfig {
    /// `sigma_d` of prompt `i` out of `n`.
    pub fn sigma_d(&self, i: usize, n: usize) -> f64 {
        let [lo, hi] = self.sigma_d_range;
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeReference {
    pub embeddings: PathBuf,
    /// `sample_id,row_index`
    pub index: PathBuf,
    /// `sample_id,identity_id`
    pub identities: PathBuf,
    /// `sample_id,quality`; samples below the quality threshold are dropped.
    #[serde(default)]
    pub quality: Option<PathBuf>,
}

/// Files produced by external model runners.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// `latents.latv`, `labels.csv` and `scores/<attribute>.csv`.
    pub pool_dir: Option<PathBuf>,
    /// One subdirectory per identity holding the generated images.
    pub generated_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embeddings_index: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub genders: Option<PathBuf>,
    pub references: BTreeMap<String, BridgeReference>,
}

impl BridgeConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.pool_dir,
            &mut self.generated_dir,
            &mut self.embeddings,
            &mut self.embeddings_index,
            &mut self.detections,
            &mut self.genders,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for r in self.references.values_mut() {
            fix(&mut r.embeddings);
            fix(&mut r.index);
            fix(&mut r.identities);
            if let Some(q) = &mut r.quality {
                fix(q);
            }
        }
    }

    pub fn require<'a>(&self, field: &'static str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::config(format!("bridge backend requires `bridge.{field}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: Backend,
    pub seed: u64,
    pub pool_size: usize,
    pub quality_percentile: f64,
    pub races: Vec<String>,
    pub age_bins: Vec<String>,
    pub child_age_bins: Vec<String>,
    pub genders: Vec<String>,
    pub per_group: usize,
    pub alphas: Alphas,
    /// Defaults to the standard six recipes scaled by `alphas`.
    pub variation_spec: Option<VariationSpec>,
    pub svm: SvmConfig,
    pub finetune: FinetuneConfig,
    pub prompts: Vec<PromptTemplate>,
    pub samples_per_prompt: usize,
    pub t_ip: f64,
    pub eval: EvalConfig,
    pub quality_threshold: f64,
    pub simworld: SimConfig,
    pub bridge: BridgeConfig,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: Backend::Simworld,
            seed: 0,
            pool_size: 256_000,
            quality_percentile: 0.10,
            races: names(&RACES),
            age_bins: names(&ADULT_AGE_BINS),
            child_age_bins: names(&CHILD_AGE_BINS),
            genders: names(&GENDERS),
            per_group: 10,
            alphas: Alphas::default(),
            variation_spec: None,
            svm: SvmConfig::default(),
            finetune: FinetuneConfig::default(),
            prompts: default_templates(),
            samples_per_prompt: 4,
            t_ip: 0.3,
            eval: EvalConfig::default(),
            quality_threshold: 24.45,
            simworld: SimConfig::default(),
            bridge: BridgeConfig::default(),
        }
    }
}

fn subset(kind: &str, given: &[String], known: &[&str]) -> Result<()> {
    match given.iter().find(|g| !known.contains(&g.as_str())) {
        Some(g) => Err(Error::config(format!(
            "simworld does not know {kind} `{g}`; known: {}",
            known.join(", ")
        ))),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn variation_spec(&self) -> VariationSpec {
        self.variation_spec
            .clone()
            .unwrap_or_else(|| VariationSpec::default_with(&self.alphas))
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::config("pool_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.quality_percentile) {
            return Err(Error::config(format!(
                "quality_percentile {} outside [0, 1)",
                self.quality_percentile
            )));
        }
        if self.per_group == 0 {
            return Err(Error::config("per_group must be >= 1"));
        }
        FilterConfig::new(self.t_ip)?;
        for (kind, list) in [
            ("races", &self.races),
            ("age_bins", &self.age_bins),
            ("genders", &self.genders),
        ] {
            if list.is_empty() {
                return Err(Error::config(format!("`{kind}` is empty")));
            }
        }
        for bin in &self.age_bins {
            if !self.alphas.age.contains_key(bin) {
                return Err(Error::config(format!("alphas.age has no entry for age bin `{bin}`")));
            }
        }
        for g in &self.genders {
            if !self.alphas.gender.contains_key(g) {
                return Err(Error::config(format!("alphas.gender has no entry for `{g}`")));
            }
        }
        let alphas = [self.alphas.yaw, self.alphas.pitch, self.alphas.expression, self.alphas.race];
        if alphas
            .iter()
            .chain(self.alphas.age.values())
            .chain(self.alphas.gender.values())
            .any(|a| !a.is_finite())
        {
            return Err(Error::config("alphas must be finite"));
        }
        self.svm.validate()?;
        self.finetune.validate()?;
        build_prompt_bank(&self.prompts, &self.finetune.token, &self.finetune.class_name)?;
        if self.prompts.is_empty() {
            return Err(Error::config("prompt bank is empty"));
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::config("samples_per_prompt must be >= 1"));
        }
        let e = &self.eval;
        if e.per_identity < 2 || e.gan_per_identity < 2 {
            return Err(Error::config("eval per_identity and gan_per_identity must be >= 2"));
        }
        if e.gan_per_identity > crate::curation::GAN_IMAGES_PER_IDENTITY {
            return Err(Error::config(format!(
                "eval.gan_per_identity {} exceeds the {} GAN images per identity",
                e.gan_per_identity,
                crate::curation::GAN_IMAGES_PER_IDENTITY
            )));
        }
        if e.bins < 2 {
            return Err(Error::config("eval.bins must be >= 2"));
        }
        if !(e.epsilon > 0.0 && e.epsilon.is_finite()) {
            return Err(Error::config("eval.epsilon must be finite and > 0"));
        }
        let mut seen = BTreeSet::new();
        if let Some(r) = e.references.iter().find(|r| !seen.insert(r.as_str())) {
            return Err(Error::config(format!("duplicate reference `{r}`")));
        }
        if !self.quality_threshold.is_finite() {
            return Err(Error::config("quality_threshold must be finite"));
        }

        match self.backend {
            Backend::Simworld => {
                subset("race", &self.races, &RACES)?;
                subset("age bin", &self.age_bins, &ADULT_AGE_BINS)?;
                subset("child age bin", &self.child_age_bins, &CHILD_AGE_BINS)?;
                subset("gender", &self.genders, &GENDERS)?;
                if let Some(r) = e.references.iter().find(|r| *r != SIM_REFERENCE) {
                    return Err(Error::config(format!(
                        "unknown reference `{r}`; simworld provides only `{SIM_REFERENCE}`"
                    )));
                }
                self.simworld.personalization.validate()?;
                let [lo, hi] = self.simworld.sigma_d_range;
                if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::config("simworld.sigma_d_range must satisfy 0 <= lo <= hi"));
                }
                let r = &self.simworld.reference;
                if !(r.sigma >= 0.0 && r.sigma.is_finite()) {
                    return Err(Error::config("simworld.reference.sigma must be finite and >= 0"));
                }
            }
            Backend::Bridge => {
                let b = &self.bridge;
                b.require("pool_dir", &b.pool_dir)?;
                b.require("generated_dir", &b.generated_dir)?;
                b.require("embeddings", &b.embeddings)?;
                b.require("embeddings_index", &b.embeddings_index)?;
                b.require("detections", &b.detections)?;
                b.require("genders", &b.genders)?;
                if let Some(r) = e.references.iter().find(|r| !b.references.contains_key(*r)) {
                    return Err(Error::config(format!(
                        "unknown reference `{r}`; not listed under bridge.references"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical bytes of this configuration; the run hash is their digest.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Parses a JSON run configuration. Relative bridge paths are resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.bridge.resolve(base);
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Config(format!(
            "line {} column {}: field `{}`: {inner}",
            inner.line(),
            inner.column(),
            e.path()
        ))
    })?;
    Ok(cfg)
}
