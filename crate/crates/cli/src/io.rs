//! Delimited matrix files and the metadata record that opens every output
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use coda::pipeline::RunConfig;
use coda::scalar::fmt_exact;
use coda::trajectory::TrajectoryLayout;
use coda::Scalar;
use ndarray::{Array2, ArrayView2};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Column names of the polynomial-game trajectory layout.
pub fn trajectory_header(layout: &TrajectoryLayout) -> Vec<String> {
    let mut names = vec![String::new(); layout.dim()];
    for t in 0..layout.horizon {
        for i in 0..layout.n_agents {
            for (k, j) in layout.obs_range(t, i).enumerate() {
                names[j] = format!("obs{t}_{i}_{k}");
            }
            for (k, j) in layout.action_range(t, i).enumerate() {
                names[j] = format!("act{t}_{i}_{k}");
            }
        }
        names[layout.reward_index(t)] = format!("reward{t}");
    }
    names
}

pub fn write_matrix<T: Scalar>(path: &Path, header: &[String], m: ArrayView2<T>) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_exact(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let cols = lines.next().context("empty matrix file")?.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != cols {
            bail!("{}:{}: expected {cols} fields, found {}", path.display(), k + 2, vals.len());
        }
        for v in vals {
            let x: f64 = v.trim().parse().with_context(|| format!("{}:{}: bad number `{v}`", path.display(), k + 2))?;
            data.push(T::c(x));
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols), data)?)
}

/// Writes `meta.toml` (command, version, seed, config hash) and the full
/// config echo; called before any result is produced.
pub fn write_meta(dir: &Path, command: &str, cfg: &RunConfig, precision: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut meta = String::new();
    writeln!(meta, "command = \"{command}\"").unwrap();
    writeln!(meta, "version = \"{VERSION}\"").unwrap();
    writeln!(meta, "seed = {}", cfg.seed).unwrap();
    writeln!(meta, "config_hash = \"{}\"", cfg.hash()).unwrap();
    writeln!(meta, "precision = \"{precision}\"").unwrap();
    writeln!(meta, "config = \"config.toml\"").unwrap();
    fs::write(dir.join("meta.toml"), meta)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}
