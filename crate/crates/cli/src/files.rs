use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rlvr_core::config::RunConfig;
use rlvr_core::policy::PolicyParams;
use rlvr_core::sampler::{read_pool, PoolItem};
use rlvr_core::toyenv::Example;
use serde::Serialize;

use crate::fail::{Classify, Failure};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).or_usage("loading config"),
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).or_usage(&format!("creating {}", dir.display()))
}

/// Writes through a sibling temp file and a rename, so a reader never sees
/// a half-written file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> Result<(), Failure> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp).or_usage(&format!("creating {}", tmp.display()))?);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
    write_atomic(path, |w| Ok(rlvr_core::sampler::write_jsonl(w, rows)?))
}

pub fn read_items(path: &Path) -> Result<Vec<PoolItem>, Failure> {
    read_pool(open(path)?).or_data(&format!("reading {}", path.display()))
}

/// Items whose payload carries a feature vector, all of one dimension.
pub fn read_examples(path: &Path) -> Result<Vec<Example>, Failure> {
    let examples = read_items(path)?
        .iter()
        .map(Example::from_pool_item)
        .collect::<Result<Vec<_>, _>>()
        .or_data(&format!("reading {}", path.display()))?;
    let Some(first) = examples.first() else {
        return Err(Failure::data(format!("{} holds no items", path.display())));
    };
    let d = first.observation.features.len();
    if let Some(bad) = examples.iter().find(|e| e.observation.features.len() != d) {
        return Err(Failure::data(format!("item {:?} has {} features, expected {d}", bad.id, bad.observation.features.len())));
    }
    Ok(examples)
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("missing checkpoint {}", path.display())));
    }
    let (params, _) = PolicyParams::read_checkpoint(open(path)?).or_data(&format!("reading {}", path.display()))?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams, seed: u64) -> Result<(), Failure> {
    write_atomic(path, |w| Ok(params.write_checkpoint(w, seed)?))
}

/// CSV with a header row; numbers use the shortest exact representation.
pub fn write_csv_to(w: &mut dyn Write, header: &[String], rows: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(row.iter().map(|x| x.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), Failure> {
    write_atomic(path, |w| write_csv_to(w, header, rows))
}

/// Header and numeric rows of a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), Failure> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = r.headers().or_data("reading CSV header")?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.or_data(&format!("CSV row {}", i + 1))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .or_data(&format!("CSV row {}", i + 1))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Stdin/stdout when the path is absent or "-".
pub fn is_std(path: &Option<PathBuf>) -> bool {
    path.as_deref().is_none_or(|p| p == Path::new("-"))
}
