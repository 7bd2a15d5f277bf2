use std::path::Path;
use std::process::{Command, Output};

fn latentforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentforge"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMOKE: &str = r#"{ "seed": 7, "pool_size": 2560, "per_group": 2 }"#;

#[test]
fn run_succeeds_and_reports_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "r"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("executed: pool,boundaries,identities,variations,personalize-emit,ingest,filter,eval"));
    let again = latentforge(&["run", "--config", &cfg, "--run-dir", "r"], tmp.path());
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stdout).contains("executed: \n"));
}

#[test]
fn default_run_dir_is_per_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let out = latentforge(&["run", "--config", &cfg, "--stages", "pool"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let out = latentforge(&["run", "--config", &cfg, "--stages", "pool", "--seed-override", "8"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(tmp.path().join("runs")).unwrap().count(), 2);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{ "per_group": -1 }"#).unwrap();
    let out = latentforge(&["run", "--config", bad.to_str().unwrap(), "--run-dir", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("per_group"));

    assert_eq!(latentforge(&["run", "--bogus"], tmp.path()).status.code(), Some(2));
    let out = latentforge(&["run", "--config", &cfg, "--stages", "pool,nope"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = latentforge(&["run", "--config", &cfg, "--t-ip", "1.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "d", "--stages", "eval"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter"));

    std::fs::create_dir_all(tmp.path().join("locked")).unwrap();
    std::fs::write(tmp.path().join("locked/.lock"), b"").unwrap();
    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "locked"], tmp.path());
    assert_eq!(out.status.code(), Some(3));

    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "m", "--stages", "pool"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    std::fs::write(tmp.path().join("m/pool/labels.csv"), b"index\n").unwrap();
    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "m", "--stages", "boundaries"], tmp.path());
    assert_eq!(out.status.code(), Some(4));

    let out = latentforge(&["run", "--config", &cfg, "--run-dir", "m", "--seed-override", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sim_commands_write_bridge_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let out = latentforge(&["sim", "pool", "--n", "300", "--out", "pool", "--seed", "4"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pool = latentforge::pipeline::tables::read_pool_dir(&tmp.path().join("pool"), &["yaw", "gender", "age"]).unwrap();
    assert_eq!(pool.len(), 300);

    let out = latentforge(
        &["sim", "embed", "--latents", "pool/latents.latv", "--out-dir", "emb", "--seed", "4"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let store = latentforge::pipeline::tables::read_embedding_store(
        &tmp.path().join("emb/embeddings.latv"),
        &tmp.path().join("emb/embeddings.csv"),
    )
    .unwrap();
    assert_eq!(store.len(), 300);
    assert!(store.values().all(|e| e.dim() == 32 && (e.norm() - 1.0).abs() < 1e-6));

    let out = latentforge(
        &["sim", "embed", "--latents", "pool/latents.latv", "--out-dir", "emb2", "--dim", "96"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 96"));
}
