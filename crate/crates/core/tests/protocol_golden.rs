use std::collections::BTreeMap;
use std::path::PathBuf;

use latentforge::evaluation::ComparisonParams;
use latentforge::identity::{BoundarySet, ADULT_AGE_BINS, GENDERS, RACES};
use latentforge::personalization::{default_templates, FinetuneConfig, NEGATIVE_PROMPT};
use latentforge::simworld::default_attributes;
use latentforge::{
    build_prompt_bank, create_world, emit_finetune_job, generate_variations, plan_demographic_groups,
    sample_comparisons, synthesize_identity, Alphas, Boundary, VariationSpec,
};
use serde::Serialize;

/// Compares against `tests/golden/<name>`; `LATENTFORGE_BLESS=1` rewrites it.
fn golden<S: Serialize>(name: &str, value: &S) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let actual = serde_json::to_string_pretty(value).unwrap() + "\n";
    if std::env::var_os("LATENTFORGE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{} differs from the golden copy", path.display());
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn seventy_groups_and_seven_hundred_identities() {
    let plan = plan_demographic_groups(&names(&RACES), &names(&ADULT_AGE_BINS), &names(&GENDERS), 10).unwrap();
    assert_eq!(plan.groups.len(), 70);
    assert_eq!(plan.quota(), 700);
    golden("group_plan.json", &plan);
}

#[test]
fn finetune_job_fields() {
    let world = create_world(64, &default_attributes(), 32, 1).unwrap();
    let boundaries: BoundarySet<f64> = world
        .attributes()
        .iter()
        .map(|a| (a.clone(), Boundary::new(a.clone(), world.direction(a).unwrap().to_vec(), 0.0).unwrap()))
        .collect();
    let plan = plan_demographic_groups(&names(&RACES), &names(&ADULT_AGE_BINS), &names(&GENDERS), 1).unwrap();
    let seed = world.sample_one(0, 3).unwrap();
    let rec = synthesize_identity("g00-00", &seed, &plan.groups[0], &boundaries, &Alphas::default()).unwrap();
    let rec = generate_variations(rec, &VariationSpec::default(), &boundaries).unwrap();
    assert_eq!(rec.variations.len(), 6);

    let job = emit_finetune_job(&rec, &FinetuneConfig::default()).unwrap();
    assert_eq!(job.input_images.len(), 6);
    assert_eq!(job.regularization_images, 200);
    assert_eq!(job.epochs, 1000);
    assert_eq!(job.token, "xyz");
    assert_eq!(job.class_name, "person");
    assert!(job.train_text_encoder);
    golden("finetune_job.json", &job);
}

#[test]
fn prompt_bank_carries_the_published_prompts() {
    let bank = build_prompt_bank(&default_templates(), "xyz", "person").unwrap();
    let texts: Vec<&str> = bank.iter().map(|p| p.text.as_str()).collect();
    for example in [
        "xyz person wearing scarf",
        "close photo of xyz person at the beach",
        "skeptical xyz person",
        "full body xyz person with accurate details of face in an indoor place",
    ] {
        assert!(texts.contains(&example), "missing `{example}`");
    }
    assert_eq!(NEGATIVE_PROMPT, "photo with the style of painting, comics, drawing, or containing text");
    assert!(bank.iter().all(|p| p.negative_text == NEGATIVE_PROMPT));
    assert!(bank.iter().all(|p| p.text.contains("xyz person")));
    golden("prompt_bank.json", &bank);
}

#[test]
fn twenty_mated_and_twenty_nonmated_pairs_per_identity() {
    let dataset: BTreeMap<String, Vec<String>> = (0..12)
        .map(|i| {
            let id = format!("id{i:02}");
            let samples = (0..15).map(|k| format!("{id}_{k:02}")).collect();
            (id, samples)
        })
        .collect();
    let params = ComparisonParams::default();
    assert_eq!((params.per_identity, params.mated_per_id, params.nonmated_per_id), (10, 20, 20));
    let set = sample_comparisons("golden", &dataset, &params, 42).unwrap();
    assert!(set.warnings.is_empty());
    for id in dataset.keys() {
        let mated = set.mated.iter().filter(|(a, _)| a.starts_with(id.as_str())).count();
        let nonmated = set
            .nonmated
            .iter()
            .filter(|(a, b)| a.starts_with(id.as_str()) || b.starts_with(id.as_str()))
            .count();
        assert_eq!(mated, 20, "{id}");
        assert!(nonmated >= 20, "{id}");
        let images: std::collections::BTreeSet<&str> = set
            .mated
            .iter()
            .chain(&set.nonmated)
            .flat_map(|(a, b)| [a.as_str(), b.as_str()])
            .filter(|s| s.starts_with(id.as_str()))
            .collect();
        assert_eq!(images.len(), 10, "{id}");
    }
    assert_eq!(set.mated.len(), 12 * 20);
    assert_eq!(set.nonmated.len(), 12 * 20);
    golden("comparisons.json", &set);
}
