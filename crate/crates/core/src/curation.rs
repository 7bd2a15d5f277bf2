//! Post-generation filtering: face detection gate, cross-domain identity
//! preservation threshold, gender preservation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// A face embedding: finite with nonzero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("embedding has non-finite entries"));
        }
        if values.is_empty() || scalar::norm(&values) == T::zero() {
            return Err(Error::input("embedding has zero norm"));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        scalar::norm(&self.values)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn cosine(&self, other: &Self) -> Result<T> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let c = scalar::cosine(&self.values, &other.values).expect("embeddings have nonzero norm");
        Ok(c.max(-T::one()).min(T::one()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gan,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Kept,
    DroppedDetection,
    DroppedIdentity,
    DroppedGender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub identity_id: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    /// Row of this sample in its embedding table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
    pub detected_face: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip_score: Option<f64>,
    pub verdict: Verdict,
}

impl SampleRecord {
    pub fn pending(sample_id: impl Into<String>, identity_id: impl Into<String>, stage: Stage) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            identity_id: identity_id.into(),
            stage,
            prompt_id: None,
            embedding_row: None,
            detected_face: false,
            gender_label: None,
            ip_score: None,
            verdict: Verdict::Pending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub t_ip: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { t_ip: 0.3 }
    }
}

impl FilterConfig {
    pub fn new(t_ip: f64) -> Result<Self> {
        if !(t_ip > -1.0 && t_ip < 1.0) {
            return Err(Error::config(format!("t_ip {t_ip} outside (-1, 1)")));
        }
        Ok(FilterConfig { t_ip })
    }
}

/// Stage 1. Only pending samples are touched; a missing entry counts as zero
/// faces.
pub fn detection_gate(samples: &mut [SampleRecord], detections: &BTreeMap<String, u32>) {
    for s in samples.iter_mut().filter(|s| s.verdict == Verdict::Pending) {
        let faces = detections.get(&s.sample_id).copied().unwrap_or(0);
        if faces >= 1 {
            s.detected_face = true;
        } else {
            s.verdict = Verdict::DroppedDetection;
        }
    }
}

pub const GAN_IMAGES_PER_IDENTITY: usize = 6;

/// Mean cosine similarity between a sample and the six GAN images of its
/// identity.
pub fn identity_preservation_score<T: Scalar>(
    sample: &EmbeddingVector<T>,
    gan: &[EmbeddingVector<T>],
) -> Result<T> {
    if gan.len() != GAN_IMAGES_PER_IDENTITY {
        return Err(Error::Invariant(format!(
            "identity preservation needs {GAN_IMAGES_PER_IDENTITY} GAN references, got {}",
            gan.len()
        )));
    }
    let mut total = T::zero();
    for g in gan {
        total = total + sample.cosine(g)?;
    }
    Ok(total / T::of_usize(gan.len()))
}

/// [`identity_preservation_score`] for a record; only diffusion-stage samples
/// are scored, since comparisons never stay within one domain.
pub fn score_sample<T: Scalar>(
    sample: &SampleRecord,
    embedding: &EmbeddingVector<T>,
    gan: &[EmbeddingVector<T>],
) -> Result<T> {
    if sample.stage != Stage::Diffusion {
        return Err(Error::Invariant(format!(
            "sample `{}` is {:?}-stage; identity preservation compares diffusion samples to GAN images only",
            sample.sample_id, sample.stage
        )));
    }
    identity_preservation_score(embedding, gan)
}

/// The six GAN-stage embeddings and gender labels of one identity.
#[derive(Debug, Clone)]
pub struct GanReference<T> {
    pub embeddings: Vec<EmbeddingVector<T>>,
    pub genders: Vec<String>,
}

impl<T> GanReference<T> {
    /// The single gender shared by every GAN image of the identity.
    pub fn gender(&self, identity_id: &str) -> Result<&str> {
        let first = self
            .genders
            .first()
            .ok_or_else(|| Error::config(format!("identity `{identity_id}` has no GAN gender label")))?;
        if self.genders.iter().any(|g| g != first) {
            return Err(Error::config(format!(
                "identity `{identity_id}` has conflicting GAN gender labels"
            )));
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDrops {
    pub detection: usize,
    pub identity: usize,
    pub gender: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityTally {
    pub kept: usize,
    pub dropped: StageDrops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub t_ip: f64,
    pub n_samples: usize,
    pub n_kept: usize,
    pub per_stage_drops: StageDrops,
    pub per_identity_survivors: BTreeMap<String, usize>,
    pub per_identity: BTreeMap<String, IdentityTally>,
}

impl FilterReport {
    /// Tally of final verdicts, in identity order.
    pub fn from_samples(samples: &[SampleRecord], cfg: &FilterConfig) -> Self {
        let mut per_identity: BTreeMap<String, IdentityTally> = BTreeMap::new();
        let mut totals = StageDrops::default();
        for s in samples {
            let t = per_identity.entry(s.identity_id.clone()).or_default();
            match s.verdict {
                Verdict::Kept => t.kept += 1,
                Verdict::DroppedDetection => {
                    t.dropped.detection += 1;
                    totals.detection += 1;
                }
                Verdict::DroppedIdentity => {
                    t.dropped.identity += 1;
                    totals.identity += 1;
                }
                Verdict::DroppedGender => {
                    t.dropped.gender += 1;
                    totals.gender += 1;
                }
                Verdict::Pending => {}
            }
        }
        FilterReport {
            t_ip: cfg.t_ip,
            n_samples: samples.len(),
            n_kept: per_identity.values().map(|t| t.kept).sum(),
            per_stage_drops: totals,
            per_identity_survivors: per_identity.iter().map(|(k, v)| (k.clone(), v.kept)).collect(),
            per_identity,
        }
    }
}

pub struct FilterInputs<'a, T> {
    pub gan: &'a BTreeMap<String, GanReference<T>>,
    pub embeddings: &'a BTreeMap<String, EmbeddingVector<T>>,
    pub detections: &'a BTreeMap<String, u32>,
    pub gender_labels: &'a BTreeMap<String, String>,
}

/// Runs detection, identity preservation and gender preservation in order.
/// A sample is dropped at stage 2 iff its score is strictly below `t_ip`.
/// Samples already carrying a verdict are left alone, so re-running on the
/// output changes nothing.
pub fn apply_filters<T: Scalar>(
    samples: &mut [SampleRecord],
    inputs: &FilterInputs<'_, T>,
    cfg: &FilterConfig,
) -> Result<FilterReport> {
    FilterConfig::new(cfg.t_ip)?;
    for s in samples.iter().filter(|s| s.verdict == Verdict::Pending) {
        match inputs.gan.get(&s.identity_id) {
            Some(g) if g.embeddings.len() == GAN_IMAGES_PER_IDENTITY => {
                g.gender(&s.identity_id)?;
            }
            Some(g) => {
                return Err(Error::config(format!(
                    "identity `{}` has {} GAN embeddings, expected {GAN_IMAGES_PER_IDENTITY}",
                    s.identity_id,
                    g.embeddings.len()
                )))
            }
            None => {
                return Err(Error::config(format!(
                    "identity `{}` has no GAN embeddings",
                    s.identity_id
                )))
            }
        }
    }

    detection_gate(samples, inputs.detections);

    let t_ip = T::of(cfg.t_ip);
    for s in samples.iter_mut().filter(|s| s.verdict == Verdict::Pending) {
        let emb = inputs
            .embeddings
            .get(&s.sample_id)
            .ok_or_else(|| Error::data(format!("no embedding for sample `{}`", s.sample_id)))?;
        let gan = &inputs.gan[&s.identity_id];
        let score = score_sample(s, emb, &gan.embeddings)?;
        s.ip_score = Some(score.as_f64());
        if score < t_ip {
            s.verdict = Verdict::DroppedIdentity;
        }
    }

    for s in samples.iter_mut().filter(|s| s.verdict == Verdict::Pending) {
        let label = inputs
            .gender_labels
            .get(&s.sample_id)
            .ok_or_else(|| Error::data(format!("no gender label for sample `{}`", s.sample_id)))?;
        s.gender_label = Some(label.clone());
        let expected = inputs.gan[&s.identity_id].gender(&s.identity_id)?;
        s.verdict = if label == expected {
            Verdict::Kept
        } else {
            Verdict::DroppedGender
        };
    }

    Ok(FilterReport::from_samples(samples, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    /// Unit vector in the (e1, e2) plane with cosine `c` to e1.
    fn at_cos(c: f64) -> EmbeddingVector<f64> {
        emb(&[c, (1.0 - c * c).sqrt(), 0.0, 0.0])
    }

    #[test]
    fn ip_score_examples() {
        let e = emb(&[0.0, 1.0, 0.0]);
        let gan = vec![e.clone(); 6];
        assert_eq!(identity_preservation_score(&e, &gan).unwrap(), 1.0);
        let gan = vec![emb(&[1.0, 0.0, 0.0]); 6];
        assert_eq!(identity_preservation_score(&e, &gan).unwrap(), 0.0);

        // sample = e1 against references at cosines {0.4 x3, 0.2 x3}
        let gan: Vec<_> = [0.4, 0.4, 0.4, 0.2, 0.2, 0.2].iter().map(|&c| at_cos(c)).collect();
        let s = identity_preservation_score(&emb(&[1.0, 0.0, 0.0, 0.0]), &gan).unwrap();
        assert!((s - 0.3).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ip_score_errors() {
        let e = emb(&[1.0, 0.0]);
        assert!(matches!(
            identity_preservation_score(&e, &vec![e.clone(); 5]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(EmbeddingVector::new(vec![0.0, 0.0]), Err(Error::Input(_))));
        let other = emb(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            identity_preservation_score(&e, &vec![other; 6]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gan_stage_samples_rejected() {
        let e = emb(&[1.0, 0.0]);
        let s = SampleRecord::pending("g", "id", Stage::Gan);
        assert!(matches!(score_sample(&s, &e, &vec![e.clone(); 6]), Err(Error::Invariant(_))));
    }

    #[test]
    fn detection_examples() {
        let mut samples = vec![
            SampleRecord::pending("a", "id", Stage::Diffusion),
            SampleRecord::pending("b", "id", Stage::Diffusion),
            SampleRecord::pending("c", "id", Stage::Diffusion),
        ];
        let det: BTreeMap<String, u32> = [("a".to_string(), 1), ("b".to_string(), 0)].into();
        detection_gate(&mut samples, &det);
        assert!(samples[0].detected_face && samples[0].verdict == Verdict::Pending);
        assert_eq!(samples[1].verdict, Verdict::DroppedDetection);
        assert_eq!(samples[2].verdict, Verdict::DroppedDetection);
    }

    struct Fixture {
        gan: BTreeMap<String, GanReference<f64>>,
        embeddings: BTreeMap<String, EmbeddingVector<f64>>,
        detections: BTreeMap<String, u32>,
        genders: BTreeMap<String, String>,
        samples: Vec<SampleRecord>,
    }

    fn fixture(cosines: &[f64]) -> Fixture {
        let mut f = Fixture {
            gan: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            detections: BTreeMap::new(),
            genders: BTreeMap::new(),
            samples: Vec::new(),
        };
        f.gan.insert(
            "id".into(),
            GanReference {
                embeddings: vec![emb(&[1.0, 0.0, 0.0, 0.0]); 6],
                genders: vec!["Female".into(); 6],
            },
        );
        for (i, &c) in cosines.iter().enumerate() {
            let id = format!("s{i}");
            // (3, 9, 3, 1) has norm exactly 10, so its cosine to e1 is exactly 0.3
            let e = if c == 0.3 { emb(&[3.0, 9.0, 3.0, 1.0]) } else { at_cos(c) };
            f.embeddings.insert(id.clone(), e);
            f.detections.insert(id.clone(), 1);
            f.genders.insert(id.clone(), "Female".into());
            f.samples.push(SampleRecord::pending(id, "id", Stage::Diffusion));
        }
        f
    }

    fn run(f: &mut Fixture, t: f64) -> FilterReport {
        let inputs = FilterInputs {
            gan: &f.gan,
            embeddings: &f.embeddings,
            detections: &f.detections,
            gender_labels: &f.genders,
        };
        apply_filters(&mut f.samples, &inputs, &FilterConfig::new(t).unwrap()).unwrap()
    }

    #[test]
    fn boundary_equality_keeps() {
        let mut f = fixture(&[0.3, 0.29, 0.31]);
        let r = run(&mut f, 0.3);
        assert_eq!(f.samples[0].verdict, Verdict::Kept);
        assert_eq!(f.samples[1].verdict, Verdict::DroppedIdentity);
        assert_eq!(f.samples[2].verdict, Verdict::Kept);
        assert_eq!(r.n_kept, 2);
        assert_eq!(r.per_stage_drops.identity, 1);
    }

    #[test]
    fn stages_in_order() {
        let mut f = fixture(&[0.9, 0.9, 0.1, 0.9]);
        f.detections.insert("s0".into(), 0);
        f.genders.insert("s3".into(), "Male".into());
        // s2 fails identity but also has a mismatched gender: identity wins
        f.genders.insert("s2".into(), "Male".into());
        let r = run(&mut f, 0.3);
        let v: Vec<Verdict> = f.samples.iter().map(|s| s.verdict).collect();
        assert_eq!(
            v,
            vec![
                Verdict::DroppedDetection,
                Verdict::Kept,
                Verdict::DroppedIdentity,
                Verdict::DroppedGender
            ]
        );
        assert!(f.samples[0].ip_score.is_none());
        assert!(f.samples[1..].iter().all(|s| s.ip_score.is_some()));
        assert_eq!(r.per_identity["id"].dropped, StageDrops { detection: 1, identity: 1, gender: 1 });
        assert_eq!(r.per_identity_survivors["id"], 1);
    }

    #[test]
    fn idempotent() {
        let mut f = fixture(&[0.9, 0.1, 0.5, 0.25]);
        let first = run(&mut f, 0.3);
        let snapshot = f.samples.clone();
        let second = run(&mut f, 0.3);
        assert_eq!(f.samples, snapshot);
        assert_eq!(first, second);
        // a looser threshold never revives a dropped sample
        run(&mut f, 0.0);
        assert_eq!(f.samples, snapshot);
    }

    #[test]
    fn missing_gan_is_config_error() {
        let mut f = fixture(&[0.9]);
        f.gan.clear();
        let inputs = FilterInputs {
            gan: &f.gan,
            embeddings: &f.embeddings,
            detections: &f.detections,
            gender_labels: &f.genders,
        };
        assert!(matches!(
            apply_filters(&mut f.samples, &inputs, &FilterConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conflicting_gan_gender_is_config_error() {
        let mut f = fixture(&[0.9]);
        f.gan.get_mut("id").unwrap().genders[3] = "Male".into();
        let inputs = FilterInputs {
            gan: &f.gan,
            embeddings: &f.embeddings,
            detections: &f.detections,
            gender_labels: &f.genders,
        };
        assert!(matches!(
            apply_filters(&mut f.samples, &inputs, &FilterConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn threshold_range() {
        assert!(FilterConfig::new(1.0).is_err());
        assert!(FilterConfig::new(-1.0).is_err());
        assert!(FilterConfig::new(0.2).is_ok());
    }
}
