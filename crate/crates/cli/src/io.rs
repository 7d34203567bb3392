//! Tabular input/output: the gauge matrix format, field CSVs, chain CSVs,
//! and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rsl_core::engines::SampleChain;
use rsl_core::gp::PosteriorField;

use crate::config::parse_latlon;
use crate::CliError;

/// Central 95% half-width multiplier for Gaussian summaries.
pub const Z95: f64 = 1.959963984540054;

/// A gauge matrix: a shared time index with one value column per site.
///
/// File format: CSV with header `time,NAME@lat:lon,...`; empty cells mark
/// missing values. The `@lat:lon` suffix is optional and defaults to (0, 0).
#[derive(Debug, Clone)]
pub struct GaugeMatrix {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub locations: Vec<(f64, f64)>,
    /// One series per site, aligned with `times`.
    pub series: Vec<Vec<Option<f64>>>,
}

pub fn read_gauge_matrix(path: &Path) -> Result<GaugeMatrix, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| CliError::Computation("gauge matrix file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 {
        return Err(CliError::Computation(
            "gauge matrix needs a time column and at least one site column".into(),
        ));
    }
    let mut names = Vec::new();
    let mut locations = Vec::new();
    for col in &cols[1..] {
        match col.split_once('@') {
            Some((name, loc)) => {
                names.push(name.trim().to_string());
                locations.push(parse_latlon(loc)?);
            }
            None => {
                names.push(col.trim().to_string());
                locations.push((0.0, 0.0));
            }
        }
    }
    let mut times = Vec::new();
    let mut series = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(CliError::Computation(format!(
                "gauge matrix row {}: {} cells, expected {}",
                i + 2,
                cells.len(),
                cols.len()
            )));
        }
        let t: f64 = cells[0].trim().parse().map_err(|_| {
            CliError::Computation(format!("gauge matrix row {}: bad time '{}'", i + 2, cells[0]))
        })?;
        times.push(t);
        for (j, cell) in cells[1..].iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                series[j].push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    CliError::Computation(format!(
                        "gauge matrix row {}: bad value '{cell}'",
                        i + 2
                    ))
                })?;
                series[j].push(Some(v));
            }
        }
    }
    if times.is_empty() {
        return Err(CliError::Computation("gauge matrix has no data rows".into()));
    }
    Ok(GaugeMatrix { times, names, locations, series })
}

/// Serialize a posterior field. Temporal grids get `time,...` columns;
/// spatial grids are prefixed with `lat,lon`.
pub fn field_csv(field: &PosteriorField) -> String {
    let spatial = field.grid.iter().any(|p| p.location.is_some());
    let mut out = String::new();
    if spatial {
        out.push_str("lat,lon,time,mean,sd,lower95,upper95\n");
    } else {
        out.push_str("time,mean,sd,lower95,upper95\n");
    }
    let sd = field.sd();
    for (i, p) in field.grid.iter().enumerate() {
        let m = field.mean[i];
        if spatial {
            let (lat, lon) = p.location.unwrap_or((0.0, 0.0));
            let _ = writeln!(
                out,
                "{lat},{lon},{},{m},{},{},{}",
                p.time,
                sd[i],
                m - Z95 * sd[i],
                m + Z95 * sd[i]
            );
        } else {
            let _ =
                writeln!(out, "{},{m},{},{},{}", p.time, sd[i], m - Z95 * sd[i], m + Z95 * sd[i]);
        }
    }
    out
}

/// Per-parameter posterior summary of an MCMC chain.
pub fn chain_summary_csv(chain: &SampleChain) -> String {
    let mut out = String::from("parameter,mean,sd,q2.5,q50,q97.5,acceptance,rhat\n");
    let means = chain.means();
    let sds = chain.sds();
    for (j, name) in chain.names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            means[j],
            sds[j],
            chain.quantile(j, 0.025),
            chain.quantile(j, 0.5),
            chain.quantile(j, 0.975),
            chain.acceptance_rate.get(j).copied().unwrap_or(f64::NAN),
            chain.rhat.get(j).copied().unwrap_or(f64::NAN),
        );
    }
    out
}

/// Full retained draws, one row per draw.
pub fn chain_draws_csv(chain: &SampleChain) -> String {
    let mut out = chain.names.join(",");
    out.push('\n');
    for i in 0..chain.draws.nrows() {
        let row: Vec<String> =
            (0..chain.draws.ncols()).map(|j| format!("{}", chain.draws[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Output sink: collects stage timings and writes files under one directory.
pub struct RunOutput {
    dir: PathBuf,
    stages: Vec<(String, f64)>,
    started: Instant,
    stage_started: Instant,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let now = Instant::now();
        Ok(RunOutput { dir: dir.to_path_buf(), stages: Vec::new(), started: now, stage_started: now })
    }

    /// Close the current stage and start the next one.
    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        if let Some((_, secs)) = self.stages.last_mut() {
            *secs = now.duration_since(self.stage_started).as_secs_f64();
        }
        self.stages.push((name.to_string(), 0.0));
        self.stage_started = now;
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }

    /// Write the run manifest: config echo, seed, versions, and wall time
    /// per stage. Call last.
    pub fn finish_manifest(&mut self, header: &[(String, String)]) -> Result<(), CliError> {
        let now = Instant::now();
        if let Some((_, secs)) = self.stages.last_mut() {
            *secs = now.duration_since(self.stage_started).as_secs_f64();
        }
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "rsl-cli version = {}", env!("CARGO_PKG_VERSION"));
        for (name, secs) in &self.stages {
            let _ = writeln!(out, "stage {name} = {:.3} ms", secs * 1e3);
        }
        let _ = writeln!(
            out,
            "wall time total = {:.3} ms",
            now.duration_since(self.started).as_secs_f64() * 1e3
        );
        self.write("run-manifest.txt", &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauge_matrix_roundtrip_with_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "time,a@1:2,b\n0,1.5,\n1,,2.5\n").unwrap();
        let g = read_gauge_matrix(&path).unwrap();
        assert_eq!(g.times, vec![0.0, 1.0]);
        assert_eq!(g.names, vec!["a", "b"]);
        assert_eq!(g.locations[0], (1.0, 2.0));
        assert_eq!(g.series[0], vec![Some(1.5), None]);
        assert_eq!(g.series[1], vec![None, Some(2.5)]);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "time,a\n0,1,9\n").unwrap();
        assert!(read_gauge_matrix(&path).is_err());
    }
}
