use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use latentforge::pipeline::tables::{
    read_csv, write_csv, write_embedding_store, write_pool_dir, DetectionRow, GenderRow, IdentityRow, QualityRow,
};
use latentforge::pipeline::{
    parse_config, Backend, RunManifest, StageName, CONFIG_FILE, LOCK_FILE, MANIFEST_FILE,
};
use latentforge::personalization::InferenceManifest;
use latentforge::seeding::{derive, rng};
use latentforge::simworld::{default_attributes, sample_labeled_latents, WorldConfig};
use latentforge::{execute, execute_config, Embedding, Error, ExecuteOptions, Latent, RunConfig, VectorTable, World};
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

fn smoke() -> RunConfig {
    RunConfig {
        seed: 7,
        pool_size: 2560,
        per_group: 2,
        ..RunConfig::default()
    }
}

fn only(stages: &[StageName]) -> ExecuteOptions {
    ExecuteOptions {
        stages: Some(stages.to_vec()),
        ..ExecuteOptions::default()
    }
}

fn files_under(dir: &Path, root: &Path, out: &mut BTreeSet<String>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files_under(&p, root, out);
        } else {
            let rel = p.strip_prefix(root).unwrap();
            out.insert(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"));
        }
    }
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn smoke_run_writes_every_artifact_once() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let summary = execute_config(smoke(), &run, &ExecuteOptions::default()).unwrap();
    assert_eq!(summary.executed, StageName::ALL.to_vec());

    let m = manifest(&run);
    assert_eq!(m.seed, 7);
    assert_eq!(m.backend, Backend::Simworld);
    let mut seen = BTreeMap::new();
    for e in &m.stages {
        for path in e.outputs.keys() {
            *seen.entry(path.clone()).or_insert(0) += 1;
        }
    }
    let mut files = BTreeSet::new();
    files_under(&run, &run, &mut files);
    files.remove(CONFIG_FILE);
    files.remove(MANIFEST_FILE);
    assert!(!files.contains(LOCK_FILE));
    assert_eq!(seen.keys().cloned().collect::<BTreeSet<_>>(), files);
    assert!(seen.values().all(|&n| n == 1));

    let plan: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("identities/plan.json")).unwrap()).unwrap();
    assert_eq!(plan["groups"].as_array().unwrap().len(), 70);
    let report = std::fs::read_to_string(run.join("eval/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("dataset,n_identities,mated_mean"));
    assert!(rows[1].starts_with("gan,140,"));
    assert!(rows[2].starts_with("diffusion,140,"));
    assert!(rows[3].starts_with("reference,"));
    assert!(run.join("eval/report.md").is_file());
    assert!(run.join("eval/histograms/diffusion.csv").is_file());
}

#[test]
fn rerun_is_a_noop_and_directory_is_bound_to_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    execute_config(smoke(), &run, &ExecuteOptions::default()).unwrap();
    let before = std::fs::read(run.join(MANIFEST_FILE)).unwrap();
    let again = execute_config(smoke(), &run, &ExecuteOptions::default()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, StageName::ALL.to_vec());
    assert_eq!(std::fs::read(run.join(MANIFEST_FILE)).unwrap(), before);

    let other = ExecuteOptions {
        t_ip: Some(0.4),
        ..ExecuteOptions::default()
    };
    assert!(matches!(execute_config(smoke(), &run, &other), Err(Error::Config(_))));

    std::fs::write(run.join("filter/report.json"), b"{}").unwrap();
    let err = execute_config(smoke(), &run, &only(&[StageName::Eval])).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn missing_dependency_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let err = execute_config(smoke(), tmp.path(), &only(&[StageName::Eval])).unwrap_err();
    match err {
        Error::Dependency(msg) => assert!(msg.contains("`filter`"), "{msg}"),
        other => panic!("{other}"),
    }
    let summary = execute_config(smoke(), tmp.path(), &only(&[StageName::Pool, StageName::Boundaries])).unwrap();
    assert_eq!(summary.executed, vec![StageName::Pool, StageName::Boundaries]);
    let rest = execute_config(smoke(), tmp.path(), &ExecuteOptions::default()).unwrap();
    assert_eq!(rest.skipped, vec![StageName::Pool, StageName::Boundaries]);
    assert_eq!(rest.executed.len(), 6);
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(LOCK_FILE), b"").unwrap();
    let err = execute_config(smoke(), tmp.path(), &ExecuteOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)));
}

#[test]
fn identical_configs_give_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    execute_config(smoke(), &a, &ExecuteOptions::default()).unwrap();
    execute_config(smoke(), &b, &ExecuteOptions::default()).unwrap();
    for f in [MANIFEST_FILE, "eval/report.csv", "eval/report.md", "eval/summary.json", "filter/report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_report_position_and_field() {
    let err = parse_config("{\n  \"per_group\": \"ten\"\n}").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("line 2") && msg.contains("per_group"), "{msg}");

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    std::fs::write(&path, "{\"bogus\": 1}").unwrap();
    assert!(matches!(execute(&path, &tmp.path().join("r"), &ExecuteOptions::default()), Err(Error::Config(_))));
}

#[derive(Deserialize)]
struct VariationRow {
    sample_id: String,
    identity_id: String,
    row_index: usize,
}

fn noisy(base: &Embedding, sigma: f64, r: &mut latentforge::seeding::Rng) -> Embedding {
    let v: Vec<f64> = base
        .as_slice()
        .iter()
        .map(|x| x + sigma * Distribution::<f64>::sample(&StandardNormal, r))
        .collect();
    Embedding::new(v).unwrap()
}

/// Drives the bridge backend with files laid out the way external runners
/// would produce them.
#[test]
fn bridge_files_drive_the_whole_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let ext = tmp.path().join("external");
    let world = World::new(&default_attributes(), &WorldConfig::default(), 123).unwrap();
    let attrs: Vec<&str> = world.attributes().iter().map(String::as_str).collect();
    let samples = sample_labeled_latents(&world, 2560, 9).unwrap();
    write_pool_dir(&ext.join("pool"), &samples, &attrs).unwrap();

    let config = serde_json::json!({
        "backend": "bridge",
        "seed": 3,
        "pool_size": 2560,
        "per_group": 1,
        "samples_per_prompt": 1,
        "eval": { "per_identity": 10, "references": ["real"] },
        "bridge": {
            "pool_dir": "external/pool",
            "generated_dir": "external/generated",
            "embeddings": "external/embeddings.latv",
            "embeddings_index": "external/embeddings.csv",
            "detections": "external/detections.csv",
            "genders": "external/genders.csv",
            "references": {
                "real": {
                    "embeddings": "external/real.latv",
                    "index": "external/real.csv",
                    "identities": "external/real_identities.csv",
                    "quality": "external/real_quality.csv"
                }
            }
        }
    });
    let config_path = tmp.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    let run = tmp.path().join("run");
    let upto = only(&[
        StageName::Pool,
        StageName::Boundaries,
        StageName::Identities,
        StageName::Variations,
        StageName::PersonalizeEmit,
    ]);
    execute(&config_path, &run, &upto).unwrap();

    let table = VectorTable::<f64>::read(&run.join("variations/latents.latv")).unwrap();
    let rows: Vec<VariationRow> = read_csv(&run.join("variations/index.csv")).unwrap();
    let mut entries = Vec::new();
    let mut genders = Vec::new();
    let mut identity_embedding: BTreeMap<String, (Embedding, String)> = BTreeMap::new();
    for r in &rows {
        let latent = Latent::new(table.row(r.row_index).unwrap().to_vec()).unwrap();
        let e = world.embed(&latent).unwrap();
        let g = world.gender_label(&latent).unwrap();
        identity_embedding.entry(r.identity_id.clone()).or_insert((e.clone(), g.clone()));
        entries.push((r.sample_id.clone(), e));
        genders.push(GenderRow {
            sample_id: r.sample_id.clone(),
            gender: g,
        });
    }

    let mut r = rng(5);
    let mut detections = Vec::new();
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(run.join("personalize/manifests"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    manifests.sort();
    let mut skipped_file = None;
    for (i, path) in manifests.iter().enumerate() {
        let m: InferenceManifest = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        let out = ext.join("generated").join(&m.output_dir);
        std::fs::create_dir_all(&out).unwrap();
        let (base, g) = &identity_embedding[&m.identity_id];
        for (k, o) in m.expected_outputs.iter().enumerate() {
            if i == 0 && k == 0 {
                skipped_file = Some(o.sample_id.clone());
                continue;
            }
            std::fs::write(out.join(&o.file), b"png").unwrap();
            entries.push((o.sample_id.clone(), noisy(base, 0.1, &mut r)));
            detections.push(DetectionRow {
                sample_id: o.sample_id.clone(),
                face_count: 1,
            });
            genders.push(GenderRow {
                sample_id: o.sample_id.clone(),
                gender: g.clone(),
            });
        }
        if i == 1 {
            std::fs::write(out.join("stray.png"), b"png").unwrap();
        }
    }
    write_embedding_store(&ext.join("embeddings.latv"), &ext.join("embeddings.csv"), &entries).unwrap();
    write_csv(&ext.join("detections.csv"), &detections).unwrap();
    write_csv(&ext.join("genders.csv"), &genders).unwrap();

    let mut real = Vec::new();
    let mut ids = Vec::new();
    let mut quality = Vec::new();
    for i in 0..20 {
        let base = world.embed(&world.random_latent(&mut rng(derive(1, "real", i)))).unwrap();
        for k in 0..12 {
            let sample_id = format!("real{i:02}_{k:02}");
            real.push((sample_id.clone(), noisy(&base, 0.15, &mut r)));
            ids.push(IdentityRow {
                sample_id: sample_id.clone(),
                identity_id: format!("real{i:02}"),
            });
            quality.push(QualityRow {
                sample_id,
                quality: if k == 0 { 10.0 } else { 30.0 },
            });
        }
    }
    write_embedding_store(&ext.join("real.latv"), &ext.join("real.csv"), &real).unwrap();
    write_csv(&ext.join("real_identities.csv"), &ids).unwrap();
    write_csv(&ext.join("real_quality.csv"), &quality).unwrap();

    let summary = execute(&config_path, &run, &ExecuteOptions::default()).unwrap();
    assert_eq!(summary.executed, vec![StageName::Ingest, StageName::Filter, StageName::Eval]);

    let completeness: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(run.join("ingest/completeness.json")).unwrap()).unwrap();
    let missing: Vec<&str> = completeness
        .iter()
        .flat_map(|c| c["missing"].as_array().unwrap().iter().map(|m| m.as_str().unwrap()))
        .collect();
    assert_eq!(missing.len(), 1);
    assert!(missing[0].contains(skipped_file.as_deref().unwrap()), "{missing:?}");
    let warned = completeness.iter().any(|c| !c["unexpected"].as_array().unwrap().is_empty());
    assert!(warned);

    let report = std::fs::read_to_string(run.join("eval/report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("gan,70,")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("diffusion,")));
    assert!(report.lines().any(|l| l.starts_with("real,20,")), "{report}");
    let m = manifest(&run);
    let ingest = m.stage(StageName::Ingest).unwrap();
    assert!(ingest.inputs.keys().any(|k| k.ends_with("embeddings.latv") && k.contains("external")));
}
