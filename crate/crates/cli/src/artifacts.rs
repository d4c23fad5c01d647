//! Writers for the files a run leaves in its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use bhm_core::koh::CalibratedModel;
use bhm_core::mcmc::PosteriorChain;
use bhm_core::surrogate::SurrogateArchive;
use bhm_core::transient::TransientModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MODEL_FILE_SCHEMA: u32 = 1;

/// Everything `predict` can load, tagged by kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelFile {
    Scalar { schema_version: u32, model: Box<CalibratedModel> },
    Transient { schema_version: u32, model: Box<TransientModel> },
    Surrogate { schema_version: u32, archive: SurrogateArchive },
}

pub struct OutDir {
    root: PathBuf,
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

impl OutDir {
    pub fn create(root: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(p)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("serializing {rel}: {e}")))?;
        fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    pub fn csv(&self, rel: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let wrap = |e: csv::Error| CliError::Config(format!("{}: {e}", p.display()));
        w.write_record(header).map_err(wrap)?;
        for r in rows {
            w.write_record(r).map_err(wrap)?;
        }
        w.flush().map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    pub fn chains(&self, chains: &[PosteriorChain]) -> CliResult<()> {
        for (k, c) in chains.iter().enumerate() {
            let p = self.path(&format!("chains/chain_{k}.csv"))?;
            let f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
            c.write_csv(std::io::BufWriter::new(f)).map_err(|source| CliError::Core { context: "chain dump".into(), source })?;
        }
        Ok(())
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Equal-width histogram rows: parameter, bin, lower, upper, count, density.
pub fn histogram_rows(name: &str, x: &[f64], bins: usize) -> Vec<Vec<String>> {
    if x.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in x {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, c)| {
            let l = lo + b as f64 * width;
            vec![name.to_string(), b.to_string(), num(l), num(l + width), c.to_string(), num(*c as f64 / (x.len() as f64 * width))]
        })
        .collect()
}

pub fn histogram_header() -> Vec<String> {
    header(&["parameter", "bin", "lower", "upper", "count", "density"])
}
