use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Backend, RunConfig, SIM_REFERENCE};
use super::tables::{
    read_csv, read_detections, read_embedding_store, read_genders, read_pool_dir, require_file, write_csv,
    write_embedding_store, write_pool_dir, DetectionRow, GenderRow, IdentityRow, QualityRow,
};
use super::StageName;
use crate::boundary::{train_attribute_suite, LabeledPool, Scheme, NEUTRAL};
use crate::curation::{apply_filters, EmbeddingVector, FilterConfig, FilterInputs, GanReference, SampleRecord, Stage, Verdict};
use crate::error::{Error, Result};
use crate::evaluation::{
    distribution_report, sample_comparisons, score_comparisons, write_report, ComparisonParams, DatasetScores,
};
use crate::fsutil::{read_json, write_json};
use crate::geometry::{AttributeBoundary, BoundaryDoc, LatentVector};
use crate::identity::{
    build_candidate_pool, expression_attribute, filter_pool, generate_variations, plan_demographic_groups,
    race_attribute, select_seed_candidates, synthesize_identity, BoundarySet, CandidateSample, DemographicGroup,
    IdentityRecord, IdentityStatus, Labels, PoolProvenance, Variation, EXPRESSIONS, NEUTRAL_EXPRESSION,
};
use crate::latv::VectorTable;
use crate::personalization::{
    build_prompt_bank, diffusion_sample_id, emit_finetune_job, emit_inference_manifest, gan_sample_id,
    ingest_generated_samples, write_finetune_job, CompletenessReport, InferenceManifest,
};
use crate::seeding::derive;
use crate::simworld::{default_attributes, reference_dataset, simulate_personalization, SimBackend, World, BINARY_ATTRIBUTES};

pub(super) struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub run_dir: &'a Path,
    world: Option<World>,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig, run_dir: &'a Path) -> Result<Self> {
        let world = match cfg.backend {
            Backend::Simworld => Some(World::new(
                &default_attributes(),
                &cfg.simworld.world,
                derive(cfg.seed, "world", 0),
            )?),
            Backend::Bridge => None,
        };
        Ok(Ctx { cfg, run_dir, world })
    }

    fn world(&self) -> &World {
        self.world.as_ref().expect("simworld backend has a world")
    }

    fn dir(&self, stage: StageName) -> PathBuf {
        self.run_dir.join(stage.dir_name())
    }

    fn seed(&self, tag: &str, index: u64) -> u64 {
        derive(self.cfg.seed, tag, index)
    }

    /// Externally supplied files a stage reads, for the manifest.
    pub fn external_inputs(&self, stage: StageName) -> Vec<PathBuf> {
        if self.cfg.backend != Backend::Bridge {
            return Vec::new();
        }
        let b = &self.cfg.bridge;
        let mut v: Vec<PathBuf> = match stage {
            StageName::Pool => b.pool_dir.iter().cloned().collect(),
            StageName::Ingest => [&b.generated_dir, &b.embeddings, &b.embeddings_index, &b.detections, &b.genders]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            StageName::Eval => b
                .references
                .iter()
                .filter(|(name, _)| self.cfg.eval.references.contains(name))
                .flat_map(|(_, r)| [Some(&r.embeddings), Some(&r.index), Some(&r.identities), r.quality.as_ref()])
                .flatten()
                .cloned()
                .collect(),
            _ => Vec::new(),
        };
        v.sort();
        v
    }

    pub fn run(&self, stage: StageName) -> Result<()> {
        match stage {
            StageName::Pool => self.pool(),
            StageName::Boundaries => self.boundaries(),
            StageName::Identities => self.identities(),
            StageName::Variations => self.variations(),
            StageName::PersonalizeEmit => self.personalize_emit(),
            StageName::Ingest => self.ingest(),
            StageName::Filter => self.filter(),
            StageName::Eval => self.eval(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolSummary {
    #[serde(flatten)]
    provenance: PoolProvenance,
    n_survivors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SurvivorRow {
    index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundaryReportRow {
    attribute: String,
    n_images: usize,
    validation_accuracy: f64,
    average_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanDoc {
    per_group: usize,
    quota: usize,
    groups: Vec<DemographicGroup>,
    identities: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentRows {
    seed: usize,
    pose_neutral: usize,
    neutral: usize,
    demographic: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdentityDoc {
    identity_id: String,
    group: DemographicGroup,
    seed_index: usize,
    seed_labels: Labels,
    seed_quality: f64,
    status: IdentityStatus,
    latents: String,
    rows: LatentRows,
    steps: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VariationRow {
    sample_id: String,
    identity_id: String,
    tag: String,
    row_index: usize,
}

fn boundary_file(attribute: &str) -> String {
    format!("{}.json", attribute.replace(':', "_"))
}

fn identity_id(group: &DemographicGroup, j: usize) -> String {
    format!("g{:02}-{j:02}", group.group_id)
}

fn latv_err(path: &Path) -> impl Fn(crate::latv::LatvError) -> Error + '_ {
    move |source| Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

impl Ctx<'_> {
    fn load_pool(&self) -> Result<(Vec<CandidateSample<f64>>, Vec<usize>)> {
        let dir = self.dir(StageName::Pool);
        let samples = read_pool_dir(&dir, &BINARY_ATTRIBUTES)?;
        let survivors = read_csv::<SurvivorRow>(&dir.join("survivors.csv"))?
            .into_iter()
            .map(|r| {
                if r.index < samples.len() {
                    Ok(r.index)
                } else {
                    Err(Error::data(format!("survivor index {} outside the pool", r.index)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, survivors))
    }

    fn pool(&self) -> Result<()> {
        let cfg = self.cfg;
        let pool = match cfg.backend {
            Backend::Simworld => {
                let backend = SimBackend {
                    world: self.world(),
                    seed: self.seed("pool", 0),
                };
                build_candidate_pool(&backend, cfg.pool_size, cfg.quality_percentile, &cfg.child_age_bins)?
            }
            Backend::Bridge => {
                let dir = cfg.bridge.require("pool_dir", &cfg.bridge.pool_dir)?;
                let sampled = read_pool_dir(dir, &BINARY_ATTRIBUTES)?;
                if sampled.len() != cfg.pool_size {
                    log::warn!(
                        "bridge pool has {} candidates; configured pool_size {} ignored",
                        sampled.len(),
                        cfg.pool_size
                    );
                }
                filter_pool(sampled, cfg.quality_percentile, &cfg.child_age_bins)?
            }
        };
        let out = self.dir(StageName::Pool);
        write_pool_dir(&out, &pool.sampled, &BINARY_ATTRIBUTES)?;
        let survivors: Vec<SurvivorRow> = pool.survivors.iter().map(|&index| SurvivorRow { index }).collect();
        write_csv(&out.join("survivors.csv"), &survivors)?;
        log::info!(
            "pool: {} sampled, {} quality-dropped, {} age-dropped, {} kept",
            pool.provenance.n_sampled,
            pool.provenance.n_quality_dropped,
            pool.provenance.n_age_dropped,
            survivors.len()
        );
        write_json(
            &out.join("provenance.json"),
            &PoolSummary {
                provenance: pool.provenance,
                n_survivors: survivors.len(),
            },
        )
    }

    fn boundaries(&self) -> Result<()> {
        let (samples, _) = self.load_pool()?;
        let latents: Vec<LatentVector<f64>> = samples.iter().map(|s| s.latent.clone()).collect();
        let members = |pred: &dyn Fn(&CandidateSample<f64>) -> bool| -> Vec<LatentVector<f64>> {
            samples.iter().filter(|s| pred(s)).map(|s| s.latent.clone()).collect()
        };

        enum Job {
            Binary(&'static str),
            Suite(BTreeMap<String, Vec<LatentVector<f64>>>, Scheme),
        }
        let mut jobs: Vec<Job> = BINARY_ATTRIBUTES.iter().map(|a| Job::Binary(a)).collect();

        let mut expression_pools = BTreeMap::new();
        for e in EXPRESSIONS {
            let m = members(&|s| s.labels.expression == e);
            let name = if e == NEUTRAL_EXPRESSION {
                NEUTRAL.to_string()
            } else {
                expression_attribute(e)
            };
            if m.is_empty() && e != NEUTRAL_EXPRESSION {
                log::warn!("no candidates labeled `{e}`; its boundary is not trained");
                continue;
            }
            expression_pools.insert(name, m);
        }
        if expression_pools.get(NEUTRAL).is_none_or(|m| m.is_empty()) {
            return Err(Error::data("no candidates labeled neutral; expression boundaries need them"));
        }
        jobs.push(Job::Suite(expression_pools, Scheme::OneVsOneVsNeutral));

        let mut race_pools = BTreeMap::new();
        for r in &self.cfg.races {
            let m = members(&|s| s.labels.race == *r);
            if m.is_empty() {
                return Err(Error::data(format!("no candidates labeled race `{r}`")));
            }
            race_pools.insert(race_attribute(r), m);
        }
        jobs.push(Job::Suite(race_pools, Scheme::OneVsAll));

        let trained: Vec<Vec<AttributeBoundary<f64>>> = jobs
            .into_par_iter()
            .enumerate()
            .map(|(k, job)| {
                let mut svm = self.cfg.svm;
                svm.seed = derive(self.cfg.svm.seed ^ self.cfg.seed, "svm", k as u64);
                match job {
                    Job::Binary(attr) => {
                        let scores = samples.iter().map(|s| s.scores[attr]).collect();
                        let pool = LabeledPool::new(attr, latents.clone(), scores)?;
                        train_attribute_suite(&BTreeMap::from([(attr.to_string(), pool)]), Scheme::Binary, &svm)
                    }
                    Job::Suite(pools, scheme) => {
                        let pools = pools
                            .into_iter()
                            .map(|(name, m)| (name.clone(), LabeledPool::members(name, m)))
                            .collect();
                        train_attribute_suite(&pools, scheme, &svm)
                    }
                }
            })
            .collect::<Result<_>>()?;

        let out = self.dir(StageName::Boundaries);
        let mut report = Vec::new();
        for b in trained.into_iter().flatten() {
            write_json(&out.join(boundary_file(b.attribute())), &b.to_doc())?;
            report.push(BoundaryReportRow {
                attribute: b.attribute().to_string(),
                n_images: b.meta.n_train,
                validation_accuracy: b.meta.validation_accuracy,
                average_distance: b.meta.average_distance,
            });
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &report {
            w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
        }
        let mut bytes = b"# average_distance: mean |signed distance| of all training vectors under the unit normal; validation: last 10% of each side's seeded shuffle\n".to_vec();
        bytes.extend(w.into_inner().map_err(|e| Error::data(e.to_string()))?);
        crate::fsutil::write_atomic(&out.join("report.csv"), &bytes)
    }

    fn load_boundaries(&self) -> Result<BoundarySet<f64>> {
        let dir = self.dir(StageName::Boundaries);
        let path = dir.join("report.csv");
        require_file(&path)?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(&path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut set = BoundarySet::new();
        for row in r.deserialize::<BoundaryReportRow>() {
            let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let doc: BoundaryDoc = read_json(&dir.join(boundary_file(&row.attribute)))?;
            set.insert(row.attribute.clone(), AttributeBoundary::from_doc(&doc)?);
        }
        Ok(set)
    }

    fn identities(&self) -> Result<()> {
        let cfg = self.cfg;
        let (samples, survivors) = self.load_pool()?;
        let boundaries = self.load_boundaries()?;
        let plan = plan_demographic_groups(&cfg.races, &cfg.age_bins, &cfg.genders, cfg.per_group)?;

        let mut used = BTreeSet::new();
        let mut assignments = Vec::with_capacity(plan.quota());
        let mut unfillable = Vec::new();
        for g in &plan.groups {
            let avail: Vec<&CandidateSample<f64>> = survivors
                .iter()
                .map(|&i| &samples[i])
                .filter(|c| !used.contains(&c.index))
                .collect();
            if avail.len() < plan.per_group {
                unfillable.push(format!("{} ({}, {}, {})", g.group_id, g.race, g.age_bin, g.gender));
                continue;
            }
            for (j, c) in select_seed_candidates(&avail, g, plan.per_group)?.into_iter().enumerate() {
                used.insert(c.index);
                assignments.push((identity_id(g, j), c, g));
            }
        }
        if !unfillable.is_empty() {
            return Err(Error::data(format!(
                "candidate pool exhausted; cannot fill groups: {}",
                unfillable.join(", ")
            )));
        }

        let records: Vec<IdentityRecord<f64>> = assignments
            .par_iter()
            .map(|(id, seed, g)| synthesize_identity(id.clone(), seed, g, &boundaries, &cfg.alphas))
            .collect::<Result<_>>()?;

        let out = self.dir(StageName::Identities);
        let dim = records.first().map_or(1, |r| r.seed_latent.dim());
        let latv = out.join("latents.latv");
        let mut table = VectorTable::<f64>::new(dim);
        for (rec, (_, seed, g)) in records.iter().zip(&assignments) {
            let mut push = |l: &LatentVector<f64>| table.push(l.as_slice()).map_err(latv_err(&latv));
            let rows = LatentRows {
                seed: push(&rec.seed_latent)?,
                pose_neutral: push(&rec.pose_neutral_latent)?,
                neutral: push(&rec.neutral_latent)?,
                demographic: push(&rec.demographic_latent)?,
            };
            let mut steps = vec!["neutralize yaw".to_string(), "neutralize pitch".to_string()];
            if seed.labels.expression != NEUTRAL_EXPRESSION {
                let e = expression_attribute(&seed.labels.expression);
                steps.push(format!("neutralize {e}"));
                steps.push(format!("transform {e} {}", -cfg.alphas.expression));
            }
            steps.push(format!("transform {} {}", race_attribute(&g.race), cfg.alphas.race));
            steps.push(format!("transform age {}", cfg.alphas.age[&g.age_bin]));
            steps.push(format!("transform gender {}", cfg.alphas.gender[&g.gender]));
            write_json(
                &out.join("records").join(format!("{}.json", rec.identity_id)),
                &IdentityDoc {
                    identity_id: rec.identity_id.clone(),
                    group: rec.group.clone(),
                    seed_index: rec.seed_index,
                    seed_labels: seed.labels.clone(),
                    seed_quality: seed.quality,
                    status: rec.status,
                    latents: "latents.latv".into(),
                    rows,
                    steps,
                },
            )?;
        }
        table.write(&latv)?;
        write_json(
            &out.join("plan.json"),
            &PlanDoc {
                per_group: plan.per_group,
                quota: plan.quota(),
                groups: plan.groups.clone(),
                identities: records.iter().map(|r| r.identity_id.clone()).collect(),
            },
        )?;
        log::info!("identities: {} synthesized across {} groups", records.len(), plan.groups.len());
        Ok(())
    }

    fn load_identities(&self) -> Result<Vec<IdentityRecord<f64>>> {
        let dir = self.dir(StageName::Identities);
        let plan: PlanDoc = read_json(&dir.join("plan.json"))?;
        let latv = dir.join("latents.latv");
        require_file(&latv)?;
        let table = VectorTable::<f64>::read(&latv)?;
        let row = |i: usize| -> Result<LatentVector<f64>> {
            let r = table
                .row(i)
                .ok_or_else(|| Error::data(format!("{}: no row {i}", latv.display())))?;
            LatentVector::new(r.to_vec())
        };
        plan.identities
            .iter()
            .map(|id| {
                let doc: IdentityDoc = read_json(&dir.join("records").join(format!("{id}.json")))?;
                Ok(IdentityRecord {
                    identity_id: doc.identity_id,
                    group: doc.group,
                    seed_index: doc.seed_index,
                    seed_latent: row(doc.rows.seed)?,
                    pose_neutral_latent: row(doc.rows.pose_neutral)?,
                    neutral_latent: row(doc.rows.neutral)?,
                    demographic_latent: row(doc.rows.demographic)?,
                    variations: Vec::new(),
                    status: doc.status,
                })
            })
            .collect()
    }

    fn variations(&self) -> Result<()> {
        let records = self.load_identities()?;
        let boundaries = self.load_boundaries()?;
        let spec = self.cfg.variation_spec();
        let records: Vec<IdentityRecord<f64>> = records
            .into_par_iter()
            .map(|r| generate_variations(r, &spec, &boundaries))
            .collect::<Result<_>>()?;
        let out = self.dir(StageName::Variations);
        let latv = out.join("latents.latv");
        let mut table = VectorTable::<f64>::new(records.first().map_or(1, |r| r.seed_latent.dim()));
        let mut index = Vec::new();
        for r in &records {
            for (k, v) in r.variations.iter().enumerate() {
                index.push(VariationRow {
                    sample_id: gan_sample_id(&r.identity_id, k),
                    identity_id: r.identity_id.clone(),
                    tag: v.tag.clone(),
                    row_index: table.push(v.latent.as_slice()).map_err(latv_err(&latv))?,
                });
            }
        }
        table.write(&latv)?;
        write_csv(&out.join("index.csv"), &index)
    }

    /// Identity records with their variation latents attached.
    fn load_synthesized(&self) -> Result<Vec<IdentityRecord<f64>>> {
        let mut records = self.load_identities()?;
        let dir = self.dir(StageName::Variations);
        let latv = dir.join("latents.latv");
        require_file(&latv)?;
        let table = VectorTable::<f64>::read(&latv)?;
        let rows: Vec<VariationRow> = read_csv(&dir.join("index.csv"))?;
        let mut by_id: BTreeMap<&str, Vec<&VariationRow>> = BTreeMap::new();
        for r in &rows {
            by_id.entry(&r.identity_id).or_default().push(r);
        }
        for rec in &mut records {
            for r in by_id.get(rec.identity_id.as_str()).into_iter().flatten() {
                let v = table
                    .row(r.row_index)
                    .ok_or_else(|| Error::data(format!("{}: no row {}", latv.display(), r.row_index)))?;
                rec.variations.push(Variation {
                    tag: r.tag.clone(),
                    latent: LatentVector::new(v.to_vec())?,
                });
            }
            rec.status = IdentityStatus::Synthesized;
        }
        Ok(records)
    }

    fn personalize_emit(&self) -> Result<()> {
        let cfg = self.cfg;
        let records = self.load_synthesized()?;
        let bank = build_prompt_bank(&cfg.prompts, &cfg.finetune.token, &cfg.finetune.class_name)?;
        let out = self.dir(StageName::PersonalizeEmit);
        write_json(&out.join("prompt_bank.json"), &bank)?;
        for (i, rec) in records.iter().enumerate() {
            let job = emit_finetune_job(rec, &cfg.finetune)?;
            write_finetune_job(&out.join("jobs"), &job)?;
            let manifest = emit_inference_manifest(
                &rec.identity_id,
                &bank,
                cfg.samples_per_prompt,
                &rec.identity_id,
                self.seed("inference", i as u64),
            )?;
            write_json(&out.join("manifests").join(format!("{}.json", rec.identity_id)), &manifest)?;
        }
        Ok(())
    }

    fn ingest(&self) -> Result<()> {
        let records = self.load_synthesized()?;
        let manifests: Vec<InferenceManifest> = records
            .iter()
            .map(|r| {
                read_json(
                    &self
                        .dir(StageName::PersonalizeEmit)
                        .join("manifests")
                        .join(format!("{}.json", r.identity_id)),
                )
            })
            .collect::<Result<_>>()?;

        let ingested = match self.cfg.backend {
            Backend::Simworld => self.ingest_simworld(&records, &manifests)?,
            Backend::Bridge => self.ingest_bridge(&records, &manifests)?,
        };

        let out = self.dir(StageName::Ingest);
        let mut row_of = BTreeMap::new();
        for (row, (id, _)) in ingested.embeddings.iter().enumerate() {
            row_of.insert(id.clone(), row);
        }
        let mut samples = ingested.samples;
        for s in &mut samples {
            s.embedding_row = row_of.get(&s.sample_id).copied();
        }
        write_embedding_store(&out.join("embeddings.latv"), &out.join("embeddings.csv"), &ingested.embeddings)?;
        write_csv(&out.join("gan.csv"), &ingested.gan)?;
        write_csv(&out.join("detections.csv"), &ingested.detections)?;
        write_csv(&out.join("genders.csv"), &ingested.genders)?;
        write_json(&out.join("records.json"), &samples)?;
        let missing: usize = ingested.completeness.iter().map(|c| c.missing.len()).sum();
        if missing > 0 {
            log::warn!("ingest: {missing} expected outputs missing");
        }
        write_json(&out.join("completeness.json"), &ingested.completeness)
    }

    fn ingest_simworld(&self, records: &[IdentityRecord<f64>], manifests: &[InferenceManifest]) -> Result<Ingested> {
        let world = self.world();
        let sim = &self.cfg.simworld;
        let parts: Vec<Ingested> = records
            .par_iter()
            .zip(manifests)
            .map(|(rec, manifest)| {
                let mut part = Ingested::default();
                let gender = world.gender_label(&rec.demographic_latent)?;
                for (k, v) in rec.variations.iter().enumerate() {
                    let id = gan_sample_id(&rec.identity_id, k);
                    part.embeddings.push((id.clone(), world.embed(&v.latent)?));
                    part.gan.push(IdentityRow {
                        sample_id: id.clone(),
                        identity_id: rec.identity_id.clone(),
                    });
                    part.genders.push(GenderRow {
                        sample_id: id,
                        gender: gender.clone(),
                    });
                }
                let n = manifest.prompts.len();
                let prompts: Vec<(String, f64)> = manifest
                    .prompts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (p.prompt_id.clone(), sim.sigma_d(i, n)))
                    .collect();
                let simulated = simulate_personalization(
                    world,
                    &rec.demographic_latent,
                    &gender,
                    &prompts,
                    manifest.samples_per_prompt,
                    &sim.personalization,
                    manifest.seed,
                )?;
                for s in simulated {
                    let id = diffusion_sample_id(&rec.identity_id, &s.prompt_id, s.k);
                    let mut r = SampleRecord::pending(&id, &rec.identity_id, Stage::Diffusion);
                    r.prompt_id = Some(s.prompt_id.clone());
                    part.samples.push(r);
                    part.embeddings.push((id.clone(), s.embedding));
                    part.detections.push(DetectionRow {
                        sample_id: id.clone(),
                        face_count: s.face_count,
                    });
                    part.genders.push(GenderRow {
                        sample_id: id,
                        gender: s.gender,
                    });
                }
                part.completeness.push(CompletenessReport {
                    identity_id: rec.identity_id.clone(),
                    expected: manifest.expected_outputs.len(),
                    found: manifest.expected_outputs.len(),
                    ..CompletenessReport::default()
                });
                Ok(part)
            })
            .collect::<Result<_>>()?;
        Ok(Ingested::merge(parts))
    }

    fn ingest_bridge(&self, records: &[IdentityRecord<f64>], manifests: &[InferenceManifest]) -> Result<Ingested> {
        let b = &self.cfg.bridge;
        let generated = b.require("generated_dir", &b.generated_dir)?;
        let store = read_embedding_store(
            b.require("embeddings", &b.embeddings)?,
            b.require("embeddings_index", &b.embeddings_index)?,
        )?;
        let detections = read_detections(b.require("detections", &b.detections)?)?;
        let genders = read_genders(b.require("genders", &b.genders)?)?;
        let embedding = |id: &str| {
            store
                .get(id)
                .cloned()
                .ok_or_else(|| Error::data(format!("bridge embeddings have no entry for sample `{id}`")))
        };

        let mut all = Ingested::default();
        for (rec, manifest) in records.iter().zip(manifests) {
            for k in 0..rec.variations.len() {
                let id = gan_sample_id(&rec.identity_id, k);
                all.embeddings.push((id.clone(), embedding(&id)?));
                all.gan.push(IdentityRow {
                    sample_id: id.clone(),
                    identity_id: rec.identity_id.clone(),
                });
                if let Some(g) = genders.get(&id) {
                    all.genders.push(GenderRow {
                        sample_id: id,
                        gender: g.clone(),
                    });
                }
            }
            let (samples, report) = ingest_generated_samples(manifest, &generated.join(&manifest.output_dir))?;
            for w in &report.warnings {
                log::warn!("{}: {w}", rec.identity_id);
            }
            for s in samples {
                all.embeddings.push((s.sample_id.clone(), embedding(&s.sample_id)?));
                if let Some(&face_count) = detections.get(&s.sample_id) {
                    all.detections.push(DetectionRow {
                        sample_id: s.sample_id.clone(),
                        face_count,
                    });
                }
                if let Some(g) = genders.get(&s.sample_id) {
                    all.genders.push(GenderRow {
                        sample_id: s.sample_id.clone(),
                        gender: g.clone(),
                    });
                }
                all.samples.push(s);
            }
            all.completeness.push(report);
        }
        Ok(all)
    }

    fn load_ingested_embeddings(&self) -> Result<BTreeMap<String, EmbeddingVector<f64>>> {
        let dir = self.dir(StageName::Ingest);
        read_embedding_store(&dir.join("embeddings.latv"), &dir.join("embeddings.csv"))
    }

    fn gan_groups(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in read_csv::<IdentityRow>(&self.dir(StageName::Ingest).join("gan.csv"))? {
            groups.entry(r.identity_id).or_default().push(r.sample_id);
        }
        Ok(groups)
    }

    fn filter(&self) -> Result<()> {
        let dir = self.dir(StageName::Ingest);
        let mut samples: Vec<SampleRecord> = read_json(&dir.join("records.json"))?;
        let embeddings = self.load_ingested_embeddings()?;
        let detections = read_detections(&dir.join("detections.csv"))?;
        let genders = read_genders(&dir.join("genders.csv"))?;
        let mut gan = BTreeMap::new();
        for (identity, ids) in self.gan_groups()? {
            let mut reference = GanReference {
                embeddings: Vec::new(),
                genders: Vec::new(),
            };
            for id in ids {
                reference.embeddings.push(
                    embeddings
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| Error::data(format!("no embedding for GAN sample `{id}`")))?,
                );
                reference.genders.push(
                    genders
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| Error::data(format!("no gender label for GAN sample `{id}`")))?,
                );
            }
            gan.insert(identity, reference);
        }
        let report = apply_filters(
            &mut samples,
            &FilterInputs {
                gan: &gan,
                embeddings: &embeddings,
                detections: &detections,
                gender_labels: &genders,
            },
            &FilterConfig::new(self.cfg.t_ip)?,
        )?;
        log::info!(
            "filter: kept {} of {} at t_ip={}",
            report.n_kept,
            report.n_samples,
            report.t_ip
        );
        let out = self.dir(StageName::Filter);
        write_json(&out.join("samples.json"), &samples)?;
        write_json(&out.join("report.json"), &report)
    }

    fn eval(&self) -> Result<()> {
        let cfg = self.cfg;
        let e = &cfg.eval;
        let samples: Vec<SampleRecord> = read_json(&self.dir(StageName::Filter).join("samples.json"))?;
        let embeddings = self.load_ingested_embeddings()?;

        let mut kept: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in samples.iter().filter(|s| s.verdict == Verdict::Kept) {
            kept.entry(s.identity_id.clone()).or_default().push(s.sample_id.clone());
        }
        let synthetic_params = ComparisonParams {
            per_identity: e.per_identity,
            mated_per_id: e.mated,
            nonmated_per_id: e.nonmated,
        };
        let mut sources: Vec<EvalSource> = vec![
            EvalSource {
                name: "gan".into(),
                identities: self.gan_groups()?,
                embeddings: embeddings.clone(),
                params: ComparisonParams {
                    per_identity: e.gan_per_identity,
                    ..synthetic_params
                },
            },
            EvalSource {
                name: "diffusion".into(),
                identities: kept,
                embeddings,
                params: synthetic_params,
            },
        ];
        let mut summary = EvalSummary::default();
        for name in &e.references {
            let (src, dropped) = self.load_reference(name, synthetic_params)?;
            summary.reference_quality_dropped.insert(name.clone(), dropped);
            sources.push(src);
        }

        let out = self.dir(StageName::Eval);
        let mut datasets = Vec::new();
        for (k, src) in sources.iter().enumerate() {
            let set = sample_comparisons(&src.name, &src.identities, &src.params, self.seed("eval", k as u64))?;
            for w in &set.warnings {
                log::warn!("eval `{}`: {w}", src.name);
            }
            let (mated, nonmated) = score_comparisons(&set, &src.embeddings, e.bins)?;
            write_json(&out.join("comparisons").join(format!("{}.json", src.name)), &set)?;
            summary.datasets.push(DatasetSummary {
                name: src.name.clone(),
                n_identities: set.n_identities,
                skipped_identities: set.skipped_identities.len(),
                n_mated: set.mated.len(),
                n_nonmated: set.nonmated.len(),
                warnings: set.warnings.clone(),
            });
            datasets.push(DatasetScores {
                name: src.name.clone(),
                n_identities: set.n_identities,
                mated,
                nonmated,
            });
        }
        let report = distribution_report(&datasets, &e.references, e.bins, e.epsilon)?;
        write_report(&out, &report, &datasets)?;
        write_json(&out.join("summary.json"), &summary)
    }

    fn load_reference(&self, name: &str, params: ComparisonParams) -> Result<(EvalSource, usize)> {
        let cfg = self.cfg;
        let (identities, embeddings, quality) = match cfg.backend {
            Backend::Simworld => {
                debug_assert_eq!(name, SIM_REFERENCE);
                let r = &cfg.simworld.reference;
                let ds = reference_dataset(self.world(), r.identities, r.per_identity, r.sigma, self.seed("reference", 0))?;
                (ds.identities, ds.embeddings, ds.quality)
            }
            Backend::Bridge => {
                let r = cfg
                    .bridge
                    .references
                    .get(name)
                    .ok_or_else(|| Error::config(format!("unknown reference `{name}`")))?;
                let embeddings = read_embedding_store(&r.embeddings, &r.index)?;
                let mut identities: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for row in read_csv::<IdentityRow>(&r.identities)? {
                    identities.entry(row.identity_id).or_default().push(row.sample_id);
                }
                let quality = match &r.quality {
                    Some(q) => read_csv::<QualityRow>(q)?
                        .into_iter()
                        .map(|q| (q.sample_id, q.quality))
                        .collect(),
                    None => BTreeMap::new(),
                };
                (identities, embeddings, quality)
            }
        };
        let mut dropped = 0;
        let identities = identities
            .into_iter()
            .map(|(id, samples)| {
                let before = samples.len();
                let keep: Vec<String> = samples
                    .into_iter()
                    .filter(|s| quality.get(s).is_none_or(|&q| q >= cfg.quality_threshold))
                    .collect();
                dropped += before - keep.len();
                (id, keep)
            })
            .collect();
        Ok((
            EvalSource {
                name: name.to_string(),
                identities,
                embeddings,
                params,
            },
            dropped,
        ))
    }
}

#[derive(Default)]
struct Ingested {
    samples: Vec<SampleRecord>,
    embeddings: Vec<(String, EmbeddingVector<f64>)>,
    gan: Vec<IdentityRow>,
    detections: Vec<DetectionRow>,
    genders: Vec<GenderRow>,
    completeness: Vec<CompletenessReport>,
}

impl Ingested {
    /// Concatenates per-identity parts with every GAN row ahead of the
    /// diffusion rows, so embedding row numbers do not depend on scheduling.
    fn merge(parts: Vec<Ingested>) -> Ingested {
        let mut all = Ingested::default();
        let mut diffusion_embeddings = Vec::new();
        for p in parts {
            let n_gan = p.gan.len();
            let mut emb = p.embeddings.into_iter();
            all.embeddings.extend(emb.by_ref().take(n_gan));
            diffusion_embeddings.extend(emb);
            all.samples.extend(p.samples);
            all.gan.extend(p.gan);
            all.detections.extend(p.detections);
            all.genders.extend(p.genders);
            all.completeness.extend(p.completeness);
        }
        all.embeddings.extend(diffusion_embeddings);
        all
    }
}

struct EvalSource {
    name: String,
    identities: BTreeMap<String, Vec<String>>,
    embeddings: BTreeMap<String, EmbeddingVector<f64>>,
    params: ComparisonParams,
}

#[derive(Debug, Default, Serialize)]
struct DatasetSummary {
    name: String,
    n_identities: usize,
    skipped_identities: usize,
    n_mated: usize,
    n_nonmated: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Default, Serialize)]
struct EvalSummary {
    datasets: Vec<DatasetSummary>,
    reference_quality_dropped: BTreeMap<String, usize>,
}
