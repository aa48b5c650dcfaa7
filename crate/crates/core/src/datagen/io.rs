//! Dataset and query files.
//!
//! Both artifact kinds are JSON-lines: the first line is a metadata header
//! carrying the schema tag, the hash of the generating configuration, the
//! seed, and the dimensions; every following line is one record. Writers
//! stream to `<path>.partial` and rename into place on success, so an
//! interrupted write never leaves a file without the `.partial` marker.
//! Output is byte-deterministic for identical inputs.
//!
//! Dataset records: `{id, T, Y, X, A, static, true_propensities, U}`.
//! Query records: `{trajectory_id, t, a_seq, oracle, oracle_se,
//! oracle_method}` (oracle fields null outside evaluation splits).
//! A CSV export flattens the same dataset fields to one row per
//! `(trajectory, step)` for spreadsheet inspection.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CapoQuery, Dataset, OracleValue, Trajectory};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "igc.dataset.v1";
pub const QUERY_SCHEMA: &str = "igc.queries.v1";

/// Header line shared by all JSONL artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMeta {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub d_y: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub n_static: usize,
    /// Record count (trajectories or queries).
    pub n: usize,
}

/// SHA-256 of the canonical JSON serialization of a configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Serialize, Deserialize)]
struct TrajRecord {
    id: u64,
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "Y")]
    y: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "static")]
    statics: Vec<f64>,
    true_propensities: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    u: f64,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    trajectory_id: u64,
    t: usize,
    a_seq: Vec<Vec<f64>>,
    oracle: Option<Vec<f64>>,
    oracle_se: Option<Vec<f64>>,
    oracle_method: Option<String>,
}

fn rows_of(arr: &Array2<f64>) -> Vec<Vec<f64>> {
    arr.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn arr_of(op: &'static str, rows: Vec<Vec<f64>>, ncols: usize, nrows: usize) -> Result<Array2<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::shape(op, format!("ragged or mis-sized matrix (expected {nrows}x{ncols})")));
    }
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::shape(op, e.to_string()))
}

/// Streams `lines` to `<path>.partial`, then renames it to `path`.
fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let partial = partial_path(path);
    let mut w = BufWriter::new(File::create(&partial)?);
    body(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&partial, path)?;
    Ok(())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes a dataset as JSONL with a metadata header.
pub fn write_dataset(path: &Path, ds: &Dataset, config_hash: &str, seed: u64) -> Result<FileMeta> {
    let meta = FileMeta {
        schema: DATASET_SCHEMA.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        split: ds.split_label.clone(),
        d_y: ds.d_y,
        d_x: ds.d_x,
        d_a: ds.d_a,
        n_static: ds.n_static,
        n: ds.len(),
    };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &meta)?;
        w.write_all(b"\n")?;
        for tr in &ds.trajectories {
            let rec = TrajRecord {
                id: tr.id,
                t_len: tr.len(),
                y: rows_of(&tr.y),
                x: rows_of(&tr.x),
                a: rows_of(&tr.a),
                statics: tr.statics.clone(),
                true_propensities: rows_of(&tr.true_propensities),
                u: tr.u,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(meta)
}

/// Reads a dataset file, validating the schema tag and every record's
/// shape against the header dimensions.
pub fn read_dataset(path: &Path) -> Result<(Dataset, FileMeta)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact(format!("{}: empty file", path.display())))??;
    let meta: FileMeta = serde_json::from_str(&header)
        .map_err(|e| Error::Artifact(format!("{}: bad header: {e}", path.display())))?;
    if meta.schema != DATASET_SCHEMA {
        return Err(Error::Artifact(format!(
            "{}: schema {:?}, expected {DATASET_SCHEMA:?}",
            path.display(),
            meta.schema
        )));
    }
    let mut trajectories = Vec::with_capacity(meta.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Artifact(format!("{}: bad record: {e}", path.display())))?;
        let t = rec.t_len;
        trajectories.push(Trajectory::new(
            rec.id,
            arr_of("read_dataset", rec.y, meta.d_y, t)?,
            arr_of("read_dataset", rec.x, meta.d_x, t)?,
            arr_of("read_dataset", rec.a, meta.d_a, t)?,
            rec.statics,
            arr_of("read_dataset", rec.true_propensities, meta.d_a, t)?,
            rec.u,
        )?);
    }
    if trajectories.len() != meta.n {
        return Err(Error::Artifact(format!(
            "{}: header claims {} records, found {}",
            path.display(),
            meta.n,
            trajectories.len()
        )));
    }
    let ds = Dataset::new(trajectories, &meta.split)?;
    if ds.n_static != meta.n_static {
        return Err(Error::Artifact(format!("{}: static dims disagree with header", path.display())));
    }
    Ok((ds, meta))
}

/// Writes CAPO queries as JSONL with a metadata header (`d_y`/`d_x` are
/// carried over from the dataset the queries refer to).
pub fn write_queries(
    path: &Path,
    queries: &[CapoQuery],
    dataset_meta: &FileMeta,
    config_hash: &str,
) -> Result<FileMeta> {
    let meta = FileMeta {
        schema: QUERY_SCHEMA.to_string(),
        config_hash: config_hash.to_string(),
        seed: dataset_meta.seed,
        split: dataset_meta.split.clone(),
        d_y: dataset_meta.d_y,
        d_x: dataset_meta.d_x,
        d_a: dataset_meta.d_a,
        n_static: dataset_meta.n_static,
        n: queries.len(),
    };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &meta)?;
        w.write_all(b"\n")?;
        for q in queries {
            let rec = QueryRecord {
                trajectory_id: q.trajectory_id,
                t: q.t,
                a_seq: rows_of(&q.a_seq),
                oracle: q.oracle.as_ref().map(|o| o.value.clone()),
                oracle_se: q.oracle.as_ref().map(|o| o.se.clone()),
                oracle_method: q.oracle.as_ref().map(|o| o.method.clone()),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(meta)
}

/// Reads a query file.
pub fn read_queries(path: &Path) -> Result<(Vec<CapoQuery>, FileMeta)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact(format!("{}: empty file", path.display())))??;
    let meta: FileMeta = serde_json::from_str(&header)
        .map_err(|e| Error::Artifact(format!("{}: bad header: {e}", path.display())))?;
    if meta.schema != QUERY_SCHEMA {
        return Err(Error::Artifact(format!(
            "{}: schema {:?}, expected {QUERY_SCHEMA:?}",
            path.display(),
            meta.schema
        )));
    }
    let mut queries = Vec::with_capacity(meta.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Artifact(format!("{}: bad record: {e}", path.display())))?;
        let tau = rec.a_seq.len();
        if tau == 0 {
            return Err(Error::Artifact(format!("{}: query with empty a_seq", path.display())));
        }
        let a_seq = arr_of("read_queries", rec.a_seq, meta.d_a, tau)?;
        let oracle = match (rec.oracle, rec.oracle_se, rec.oracle_method) {
            (Some(value), Some(se), Some(method)) => {
                if value.len() != meta.d_y || se.len() != meta.d_y {
                    return Err(Error::Artifact(format!(
                        "{}: oracle dims disagree with header d_y",
                        path.display()
                    )));
                }
                Some(OracleValue { value, se, method })
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::Artifact(format!(
                    "{}: oracle fields must be all present or all absent",
                    path.display()
                )))
            }
        };
        queries.push(CapoQuery { trajectory_id: rec.trajectory_id, t: rec.t, a_seq, oracle });
    }
    if queries.len() != meta.n {
        return Err(Error::Artifact(format!(
            "{}: header claims {} records, found {}",
            path.display(),
            meta.n,
            queries.len()
        )));
    }
    Ok((queries, meta))
}

/// CSV export: one row per `(trajectory, step)`, the JSONL fields
/// flattened into columns. A `#`-prefixed first line carries the same
/// metadata as the JSONL header.
pub fn write_dataset_csv(path: &Path, ds: &Dataset, config_hash: &str, seed: u64) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(
            w,
            "# schema=igc.dataset.csv.v1 config_hash={config_hash} seed={seed} split={}",
            ds.split_label
        )?;
        let mut header = vec!["id".to_string(), "T".to_string(), "step".to_string()];
        header.extend((0..ds.d_y).map(|j| format!("y{j}")));
        header.extend((0..ds.d_x).map(|j| format!("x{j}")));
        header.extend((0..ds.d_a).map(|j| format!("a{j}")));
        header.extend((0..ds.n_static).map(|j| format!("static{j}")));
        header.extend((0..ds.d_a).map(|j| format!("propensity{j}")));
        header.push("u".to_string());
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&header).map_err(|e| Error::Artifact(e.to_string()))?;
        for tr in &ds.trajectories {
            for step in 0..tr.len() {
                let mut row = vec![tr.id.to_string(), tr.len().to_string(), step.to_string()];
                row.extend(tr.y.row(step).iter().map(|v| v.to_string()));
                row.extend(tr.x.row(step).iter().map(|v| v.to_string()));
                row.extend(tr.a.row(step).iter().map(|v| v.to_string()));
                row.extend(tr.statics.iter().map(|v| v.to_string()));
                row.extend(tr.true_propensities.row(step).iter().map(|v| v.to_string()));
                row.push(tr.u.to_string());
                csv.write_record(&row).map_err(|e| Error::Artifact(e.to_string()))?;
            }
        }
        csv.flush()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::tumor::{TumorDgp, TumorParams};
    use crate::datagen::Dgp;

    fn small_dataset() -> Dataset {
        TumorDgp::new(TumorParams::default()).generate(4, 11, "test").unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let ds = small_dataset();
        let hash = config_hash(&TumorParams::default()).unwrap();
        let meta = write_dataset(&path, &ds, &hash, 11).unwrap();
        let (back, meta2) = read_dataset(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(meta.config_hash, hash);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.y, b.y);
            assert_eq!(a.x, b.x);
            assert_eq!(a.a, b.a);
            assert_eq!(a.statics, b.statics);
            assert_eq!(a.true_propensities, b.true_propensities);
            assert_eq!(a.u, b.u);
        }
        assert!(!partial_path(&path).exists());
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let ds = small_dataset();
        write_dataset(&p1, &ds, "h", 11).unwrap();
        write_dataset(&p2, &ds, "h", 11).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn query_round_trip_with_and_without_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        let ds = small_dataset();
        let hash = config_hash(&TumorParams::default()).unwrap();
        let ds_meta = write_dataset(&dir.path().join("d.jsonl"), &ds, &hash, 11).unwrap();
        let queries = vec![
            CapoQuery {
                trajectory_id: 0,
                t: 3,
                a_seq: Array2::from_elem((2, ds.d_a), 1.0),
                oracle: Some(OracleValue {
                    value: vec![1.5],
                    se: vec![0.01],
                    method: "mc-shared-noise".into(),
                }),
            },
            CapoQuery {
                trajectory_id: 1,
                t: 5,
                a_seq: Array2::zeros((1, ds.d_a)),
                oracle: None,
            },
        ];
        write_queries(&path, &queries, &ds_meta, &hash).unwrap();
        let (back, meta) = read_queries(&path).unwrap();
        assert_eq!(meta.n, 2);
        assert_eq!(back[0].oracle.as_ref().unwrap().value, vec![1.5]);
        assert_eq!(back[0].a_seq, queries[0].a_seq);
        assert!(back[1].oracle.is_none());
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let dpath = dir.path().join("d.jsonl");
        let ds = small_dataset();
        write_dataset(&dpath, &ds, "h", 11).unwrap();
        let err = read_queries(&dpath).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn truncated_file_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let dpath = dir.path().join("d.jsonl");
        let ds = small_dataset();
        write_dataset(&dpath, &ds, "h", 11).unwrap();
        let text = fs::read_to_string(&dpath).unwrap();
        let truncated: Vec<&str> = text.lines().take(ds.len()).collect(); // drop last record
        fs::write(&dpath, truncated.join("\n")).unwrap();
        let err = read_dataset(&dpath).unwrap_err();
        assert!(err.to_string().contains("header claims"), "{err}");
    }

    #[test]
    fn csv_export_flattens_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = small_dataset();
        write_dataset_csv(&path, &ds, "h", 11).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let total_steps: usize = ds.trajectories.iter().map(Trajectory::len).sum();
        // comment line + header + one row per step
        assert_eq!(text.lines().count(), 2 + total_steps);
        assert!(text.starts_with("# schema=igc.dataset.csv.v1 config_hash=h seed=11"));
        let header = text.lines().nth(1).unwrap();
        assert!(header.starts_with("id,T,step,y0,"));
        assert!(header.ends_with(",u"));
    }
}
