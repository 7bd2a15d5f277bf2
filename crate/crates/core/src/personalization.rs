//! Fine-tuning jobs, prompt banks and inference manifests for per-identity
//! personalization, plus ingestion of whatever the external runner produced.
//! Nothing here runs a model.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{SampleRecord, Stage};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::identity::{IdentityRecord, IdentityStatus, VARIATIONS_PER_IDENTITY};

pub const NEGATIVE_PROMPT: &str = "photo with the style of painting, comics, drawing, or containing text";
pub const SUBJECT_PLACEHOLDER: &str = "{subject}";
pub const IMAGE_EXTENSION: &str = "png";

/// Sample id of the `k`-th GAN image of an identity.
pub fn gan_sample_id(identity_id: &str, k: usize) -> String {
    format!("{identity_id}_gan{k}")
}

/// Sample id of the `k`-th output for a prompt.
pub fn diffusion_sample_id(identity_id: &str, prompt_id: &str, k: usize) -> String {
    format!("{identity_id}_{prompt_id}_{k}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub regularization_images: usize,
    pub epochs: usize,
    pub token: String,
    pub class_name: String,
    pub train_text_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            regularization_images: 200,
            epochs: 1000,
            token: "xyz".into(),
            class_name: "person".into(),
            train_text_encoder: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token.trim().is_empty() {
            return Err(Error::config("fine-tune token must be nonempty"));
        }
        if self.class_name.trim().is_empty() {
            return Err(Error::config("fine-tune class name must be nonempty"));
        }
        if self.epochs == 0 {
            return Err(Error::config("fine-tune epochs must be >= 1"));
        }
        Ok(())
    }

    /// `"<token> <class_name>"`, e.g. `"xyz person"`.
    pub fn subject(&self) -> String {
        format!("{} {}", self.token, self.class_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneJob {
    pub identity_id: String,
    pub input_images: Vec<String>,
    pub regularization_images: usize,
    pub epochs: usize,
    pub token: String,
    pub class_name: String,
    pub train_text_encoder: bool,
}

/// One job per synthesized identity; its inputs are the six GAN variation
/// images.
pub fn emit_finetune_job<T>(rec: &IdentityRecord<T>, cfg: &FinetuneConfig) -> Result<FinetuneJob> {
    cfg.validate()?;
    if rec.status < IdentityStatus::Synthesized {
        return Err(Error::Invariant(format!(
            "identity `{}` is not synthesized yet",
            rec.identity_id
        )));
    }
    if rec.variations.len() != VARIATIONS_PER_IDENTITY {
        return Err(Error::Invariant(format!(
            "identity `{}` has {} input images, expected {VARIATIONS_PER_IDENTITY}",
            rec.identity_id,
            rec.variations.len()
        )));
    }
    Ok(FinetuneJob {
        identity_id: rec.identity_id.clone(),
        input_images: (0..rec.variations.len())
            .map(|k| format!("{}.{IMAGE_EXTENSION}", gan_sample_id(&rec.identity_id, k)))
            .collect(),
        regularization_images: cfg.regularization_images,
        epochs: cfg.epochs,
        token: cfg.token.clone(),
        class_name: cfg.class_name.clone(),
        train_text_encoder: cfg.train_text_encoder,
    })
}

/// Writes `<dir>/<identity_id>.json`.
pub fn write_finetune_job(dir: &Path, job: &FinetuneJob) -> Result<PathBuf> {
    let path = dir.join(format!("{}.json", job.identity_id));
    fsutil::write_json(&path, job)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    Accessorization,
    AdvancedPoses,
    AdvancedExpressions,
    Recontextualization,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub category: PromptCategory,
    /// Must contain `{subject}`.
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub category: PromptCategory,
    pub text: String,
    pub negative_text: String,
}

/// Sixteen templates, four per category.
pub fn default_templates() -> Vec<PromptTemplate> {
    use PromptCategory::*;
    let t = |category, template: &str| PromptTemplate {
        category,
        template: template.to_string(),
    };
    vec![
        t(Accessorization, "{subject} wearing scarf"),
        t(Accessorization, "{subject} wearing glasses"),
        t(Accessorization, "{subject} wearing a hat"),
        t(Accessorization, "{subject} wearing earrings"),
        t(AdvancedPoses, "full body {subject} with accurate details of face in an indoor place"),
        t(AdvancedPoses, "{subject} looking over the shoulder"),
        t(AdvancedPoses, "profile photo of {subject}"),
        t(AdvancedPoses, "{subject} looking up"),
        t(AdvancedExpressions, "skeptical {subject}"),
        t(AdvancedExpressions, "laughing {subject}"),
        t(AdvancedExpressions, "surprised {subject}"),
        t(AdvancedExpressions, "angry {subject}"),
        t(Recontextualization, "close photo of {subject} at the beach"),
        t(Recontextualization, "close photo of {subject} in a busy street at night"),
        t(Recontextualization, "close photo of {subject} in a snowy forest"),
        t(Recontextualization, "close photo of {subject} in an office under fluorescent light"),
    ]
}

/// Substitutes `"<token> <class_name>"` into every template. Prompt ids are
/// `p00`, `p01`, ... in template order.
pub fn build_prompt_bank(templates: &[PromptTemplate], token: &str, class_name: &str) -> Result<Vec<PromptSpec>> {
    let subject = format!("{token} {class_name}");
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if !t.template.contains(SUBJECT_PLACEHOLDER) {
                return Err(Error::config(format!(
                    "prompt template `{}` has no {SUBJECT_PLACEHOLDER} placeholder",
                    t.template
                )));
            }
            Ok(PromptSpec {
                prompt_id: format!("p{i:02}"),
                category: t.category,
                text: t.template.replace(SUBJECT_PLACEHOLDER, &subject),
                negative_text: NEGATIVE_PROMPT.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedOutput {
    pub sample_id: String,
    pub prompt_id: String,
    pub k: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceManifest {
    pub identity_id: String,
    pub prompts: Vec<PromptSpec>,
    pub samples_per_prompt: usize,
    pub output_dir: String,
    pub seed: u64,
    pub expected_outputs: Vec<ExpectedOutput>,
}

pub fn emit_inference_manifest(
    identity_id: &str,
    bank: &[PromptSpec],
    samples_per_prompt: usize,
    output_dir: &str,
    seed: u64,
) -> Result<InferenceManifest> {
    if bank.is_empty() {
        return Err(Error::input("prompt bank is empty"));
    }
    if samples_per_prompt == 0 {
        return Err(Error::input("samples_per_prompt must be >= 1"));
    }
    let expected_outputs = bank
        .iter()
        .flat_map(|p| {
            (0..samples_per_prompt).map(move |k| {
                let sample_id = diffusion_sample_id(identity_id, &p.prompt_id, k);
                ExpectedOutput {
                    file: format!("{sample_id}.{IMAGE_EXTENSION}"),
                    sample_id,
                    prompt_id: p.prompt_id.clone(),
                    k,
                }
            })
        })
        .collect();
    Ok(InferenceManifest {
        identity_id: identity_id.to_string(),
        prompts: bank.to_vec(),
        samples_per_prompt,
        output_dir: output_dir.to_string(),
        seed,
        expected_outputs,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub identity_id: String,
    pub expected: usize,
    pub found: usize,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub warnings: Vec<String>,
}

impl CompletenessReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// One pending diffusion-stage record per expected file present in `dir`.
/// Missing files are reported, never fatal; unexpected files are ignored
/// with a warning.
pub fn ingest_generated_samples(
    manifest: &InferenceManifest,
    dir: &Path,
) -> Result<(Vec<SampleRecord>, CompletenessReport)> {
    let mut present = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            present.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let mut report = CompletenessReport {
        identity_id: manifest.identity_id.clone(),
        expected: manifest.expected_outputs.len(),
        ..CompletenessReport::default()
    };
    let mut records = Vec::new();
    let mut expected_files = BTreeSet::new();
    for out in &manifest.expected_outputs {
        expected_files.insert(out.file.as_str());
        if present.contains(&out.file) {
            let mut r = SampleRecord::pending(&out.sample_id, &manifest.identity_id, Stage::Diffusion);
            r.prompt_id = Some(out.prompt_id.clone());
            records.push(r);
        } else {
            report.missing.push(out.file.clone());
        }
    }
    report.found = records.len();
    report.unexpected = present
        .iter()
        .filter(|f| !expected_files.contains(f.as_str()))
        .cloned()
        .collect();
    if !report.unexpected.is_empty() {
        report.warnings.push(format!(
            "{} unexpected files in {} ignored",
            report.unexpected.len(),
            dir.display()
        ));
    }
    Ok((records, report))
}
