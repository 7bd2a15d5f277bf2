//! CSV and sidecar-indexed vector files exchanged between stages and with
//! external runners.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::curation::EmbeddingVector;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::LatentVector;
use crate::identity::{CandidateSample, Labels};
use crate::latv::VectorTable;

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    fsutil::write_atomic(path, &bytes)
}

/// Fails with a dependency error when an externally supplied file is absent.
pub fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("required file {} not found", path.display())))
    }
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    require_file(path)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub index: usize,
    pub race: String,
    pub gender: String,
    pub age_bin: String,
    pub expression: String,
    pub yaw: f64,
    pub pitch: f64,
    pub illumination: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub index: usize,
    pub score: f64,
}

/// Scores as `index,score` rows, or one bare score per line in LATV order.
pub fn read_scores(path: &Path, n: usize) -> Result<Vec<f64>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::data(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut scores = vec![None; n];
    let indexed = matches!(lines.peek(), Some((_, l)) if l.trim() == "index,score");
    if indexed {
        lines.next();
    }
    for (pos, (lineno, line)) in lines.enumerate() {
        let (index, value) = if indexed {
            let (i, s) = line
                .split_once(',')
                .ok_or_else(|| bad(lineno + 1, "expected `index,score`"))?;
            let i: usize = i.trim().parse().map_err(|_| bad(lineno + 1, "bad index"))?;
            (i, s)
        } else {
            (pos, line)
        };
        let v: f64 = value.trim().parse().map_err(|_| bad(lineno + 1, "bad score"))?;
        if !v.is_finite() {
            return Err(bad(lineno + 1, "non-finite score"));
        }
        let slot = scores
            .get_mut(index)
            .ok_or_else(|| bad(lineno + 1, &format!("index {index} outside the pool of {n}")))?;
        if slot.replace(v).is_some() {
            return Err(bad(lineno + 1, &format!("duplicate index {index}")));
        }
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::data(format!("{}: no score for index {i}", path.display()))))
        .collect()
}

pub fn write_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let rows: Vec<ScoreRow> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| ScoreRow { index, score })
        .collect();
    write_csv(path, &rows)
}

/// A pool directory: `latents.latv`, `labels.csv`, `scores/<attribute>.csv`.
pub fn write_pool_dir(dir: &Path, samples: &[CandidateSample<f64>], score_attributes: &[&str]) -> Result<()> {
    let dim = samples.first().map_or(1, |s| s.latent.dim());
    let mut table = VectorTable::<f64>::new(dim);
    let mut labels = Vec::with_capacity(samples.len());
    for (row, s) in samples.iter().enumerate() {
        table
            .push(s.latent.as_slice())
            .map_err(|source| Error::Format {
                path: dir.join("latents.latv"),
                source,
            })?;
        labels.push(LabelRow {
            index: row,
            race: s.labels.race.clone(),
            gender: s.labels.gender.clone(),
            age_bin: s.labels.age_bin.clone(),
            expression: s.labels.expression.clone(),
            yaw: s.labels.yaw,
            pitch: s.labels.pitch,
            illumination: s.labels.illumination,
            quality: s.quality,
        });
    }
    table.write(&dir.join("latents.latv"))?;
    write_csv(&dir.join("labels.csv"), &labels)?;
    for a in score_attributes {
        let scores = samples
            .iter()
            .map(|s| {
                s.scores
                    .get(*a)
                    .copied()
                    .ok_or_else(|| Error::data(format!("candidate {} has no `{a}` score", s.index)))
            })
            .collect::<Result<Vec<_>>>()?;
        write_scores(&dir.join("scores").join(format!("{a}.csv")), &scores)?;
    }
    Ok(())
}

/// Reads a pool directory. Labels must list rows `0..count` in order.
/// Attributes without a score file fall back to their label column where one
/// exists (yaw, pitch, illumination).
pub fn read_pool_dir(dir: &Path, score_attributes: &[&str]) -> Result<Vec<CandidateSample<f64>>> {
    let latv = dir.join("latents.latv");
    require_file(&latv)?;
    let table = VectorTable::<f64>::read(&latv)?;
    let labels: Vec<LabelRow> = read_csv(&dir.join("labels.csv"))?;
    if labels.len() != table.len() {
        return Err(Error::data(format!(
            "{}: {} label rows for {} latents",
            dir.display(),
            labels.len(),
            table.len()
        )));
    }
    if let Some((pos, row)) = labels.iter().enumerate().find(|(i, r)| r.index != *i) {
        return Err(Error::data(format!(
            "{}: row {pos} has index {}, expected {pos}",
            dir.join("labels.csv").display(),
            row.index
        )));
    }
    let mut score_columns = BTreeMap::new();
    for a in score_attributes {
        let path = dir.join("scores").join(format!("{a}.csv"));
        let column = if path.exists() {
            read_scores(&path, table.len())?
        } else {
            match *a {
                "yaw" => labels.iter().map(|l| l.yaw).collect(),
                "pitch" => labels.iter().map(|l| l.pitch).collect(),
                "illumination" => labels.iter().map(|l| l.illumination).collect(),
                _ => {
                    return Err(Error::Dependency(format!(
                        "required file {} not found",
                        path.display()
                    )))
                }
            }
        };
        score_columns.insert(a.to_string(), column);
    }
    labels
        .into_iter()
        .zip(table.rows())
        .map(|(l, row)| {
            let scores = score_columns.iter().map(|(a, col)| (a.clone(), col[l.index])).collect();
            Ok(CandidateSample {
                index: l.index,
                latent: LatentVector::new(row.to_vec())?,
                labels: Labels {
                    race: l.race,
                    gender: l.gender,
                    age_bin: l.age_bin,
                    expression: l.expression,
                    yaw: l.yaw,
                    pitch: l.pitch,
                    illumination: l.illumination,
                },
                quality: l.quality,
                scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRef {
    pub sample_id: String,
    pub row_index: usize,
}

/// Writes embeddings as a LATV file plus a `sample_id,row_index` sidecar.
pub fn write_embedding_store(latv: &Path, index: &Path, entries: &[(String, EmbeddingVector<f64>)]) -> Result<()> {
    let dim = entries.first().map_or(1, |(_, e)| e.dim());
    let mut table = VectorTable::<f64>::new(dim);
    let mut refs = Vec::with_capacity(entries.len());
    for (id, e) in entries {
        let row_index = table.push(e.as_slice()).map_err(|source| Error::Format {
            path: latv.to_path_buf(),
            source,
        })?;
        refs.push(RowRef {
            sample_id: id.clone(),
            row_index,
        });
    }
    table.write(latv)?;
    write_csv(index, &refs)
}

pub fn read_embedding_store(latv: &Path, index: &Path) -> Result<BTreeMap<String, EmbeddingVector<f64>>> {
    require_file(latv)?;
    let table = VectorTable::<f64>::read(latv)?;
    let refs: Vec<RowRef> = read_csv(index)?;
    let mut out = BTreeMap::new();
    for r in refs {
        let row = table.row(r.row_index).ok_or_else(|| {
            Error::data(format!(
                "{}: sample `{}` points at row {} of {}",
                index.display(),
                r.sample_id,
                r.row_index,
                table.len()
            ))
        })?;
        let e = EmbeddingVector::new(row.to_vec())
            .map_err(|e| Error::data(format!("embedding of `{}`: {e}", r.sample_id)))?;
        if out.insert(r.sample_id.clone(), e).is_some() {
            return Err(Error::data(format!("{}: duplicate sample `{}`", index.display(), r.sample_id)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub sample_id: String,
    pub face_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderRow {
    pub sample_id: String,
    pub gender: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub sample_id: String,
    pub identity_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub sample_id: String,
    pub quality: f64,
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, u32>> {
    Ok(read_csv::<DetectionRow>(path)?
        .into_iter()
        .map(|r| (r.sample_id, r.face_count))
        .collect())
}

pub fn read_genders(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(read_csv::<GenderRow>(path)?
        .into_iter()
        .map(|r| (r.sample_id, r.gender))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "index,score\n1,0.5\n0,-1\n").unwrap();
        assert_eq!(read_scores(&a, 2).unwrap(), vec![-1.0, 0.5]);
        let b = dir.path().join("b.csv");
        std::fs::write(&b, "0.25\n0.75\n").unwrap();
        assert_eq!(read_scores(&b, 2).unwrap(), vec![0.25, 0.75]);
        assert!(matches!(read_scores(&b, 3), Err(Error::Data(_))));
        std::fs::write(&a, "index,score\n0,1\n0,2\n").unwrap();
        assert!(matches!(read_scores(&a, 2), Err(Error::Data(_))));
        assert!(matches!(read_scores(&dir.path().join("c.csv"), 1), Err(Error::Dependency(_))));
    }

    #[test]
    fn embedding_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ("a".to_string(), EmbeddingVector::new(vec![1.0, 0.0]).unwrap()),
            ("b".to_string(), EmbeddingVector::new(vec![0.5, 0.5]).unwrap()),
        ];
        let (l, i) = (dir.path().join("e.latv"), dir.path().join("e.csv"));
        write_embedding_store(&l, &i, &entries).unwrap();
        let back = read_embedding_store(&l, &i).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["b"].as_slice(), &[0.5, 0.5]);
    }
}
