//! Observation data model and CSV ingestion.
//!
//! Ages are expressed in years CE (negative values are BCE) and RSL in meters
//! relative to present mean sea level, positive upward. Input files may carry
//! ages in ka BP; those are converted at ingestion via `CE = 1950 - 1000*ka`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Kind of sea-level datum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObsKind {
    /// Discrete sea-level index point.
    Slip,
    /// Sample from a continuous sediment core.
    CoreSample,
    /// Tide-gauge annual mean (negligible temporal uncertainty).
    TideGauge,
}

impl ObsKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObsKind::Slip => "SLIP",
            ObsKind::CoreSample => "CoreSample",
            ObsKind::TideGauge => "TideGauge",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "SLIP" | "slip" => Ok(ObsKind::Slip),
            "CoreSample" | "core" | "core_sample" => Ok(ObsKind::CoreSample),
            "TideGauge" | "tide_gauge" | "gauge" => Ok(ObsKind::TideGauge),
            other => Err(Error::Parse(format!("unknown observation kind '{other}'"))),
        }
    }
}

/// One dated RSL datum with vertical and temporal uncertainty (both 1-sigma).
///
/// `rsl_sd` carries combined measurement and inferential uncertainty; the
/// indicative-meaning term is folded in upstream, at database construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub site_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Central point estimate of the (calibrated) age, years CE.
    pub age_mean: f64,
    /// 1-sigma age uncertainty, years.
    pub age_sd: f64,
    /// Observed RSL, meters.
    pub rsl_mean: f64,
    /// 1-sigma vertical uncertainty, meters.
    pub rsl_sd: f64,
    pub kind: ObsKind,
    /// Shared by samples from one continuous core.
    pub core_id: Option<String>,
}

impl Observation {
    /// Check the data-level invariants.
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::Validation(format!(
                "site {}: latitude {} out of [-90,90]",
                self.site_id, self.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "site {}: longitude {} out of [-180,180]",
                self.site_id, self.longitude
            )));
        }
        if !(self.age_sd >= 0.0) || !(self.rsl_sd >= 0.0) {
            return Err(Error::Validation(format!(
                "site {}: negative or non-finite uncertainty",
                self.site_id
            )));
        }
        if self.kind == ObsKind::TideGauge && self.age_sd != 0.0 {
            return Err(Error::Validation(format!(
                "site {}: tide-gauge observation must have age_sd = 0",
                self.site_id
            )));
        }
        if !self.age_mean.is_finite() || !self.rsl_mean.is_finite() {
            return Err(Error::Validation(format!(
                "site {}: non-finite age or RSL",
                self.site_id
            )));
        }
        Ok(())
    }
}

/// Ordered, deduplicated collection of observations.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub provenance: String,
}

impl Dataset {
    /// Build a dataset, validating every observation and dropping exact
    /// duplicates on the (site_id, age_mean, rsl_mean, kind) quadruple.
    pub fn new(observations: Vec<Observation>, provenance: impl Into<String>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Validation("dataset must be non-empty".into()));
        }
        let mut bad = Vec::new();
        for (i, obs) in observations.iter().enumerate() {
            if let Err(e) = obs.validate() {
                bad.push(format!("row {}: {}", i + 1, e));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad.join("; ")));
        }
        let mut seen: Vec<(&str, f64, f64, ObsKind)> = Vec::new();
        let mut kept = Vec::with_capacity(observations.len());
        for obs in &observations {
            let key = (obs.site_id.as_str(), obs.age_mean, obs.rsl_mean, obs.kind);
            if seen.iter().any(|k| *k == key) {
                continue;
            }
            seen.push(key);
            kept.push(obs.clone());
        }
        Ok(Dataset {
            observations: kept,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Ages as a vector, in input order.
    pub fn ages(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.age_mean).collect()
    }

    pub fn rsl(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.rsl_mean).collect()
    }

    /// Partition into one dataset per site, keyed by `site_id`.
    pub fn split_by_site(&self) -> BTreeMap<String, Dataset> {
        let mut map: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
        for obs in &self.observations {
            map.entry(obs.site_id.clone()).or_default().push(obs.clone());
        }
        map.into_iter()
            .map(|(site, obs)| {
                let d = Dataset {
                    observations: obs,
                    provenance: format!("{} [site {}]", self.provenance, site),
                };
                (site, d)
            })
            .collect()
    }

    /// Distinct site ids in first-appearance order.
    pub fn site_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for obs in &self.observations {
            if !out.contains(&obs.site_id) {
                out.push(obs.site_id.clone());
            }
        }
        out
    }
}

/// Unit in which the age column is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgeUnit {
    #[default]
    YearsCe,
    KaBp,
}

/// Convert thousands of years before present (1950) to years CE.
pub fn ka_bp_to_ce(ka: f64) -> f64 {
    1950.0 - 1000.0 * ka
}

/// Convert years CE to ka BP.
pub fn ce_to_ka_bp(ce: f64) -> f64 {
    (1950.0 - ce) / 1000.0
}

/// Column names expected in an input CSV. Uncertainty columns are 2-sigma,
/// halved at ingestion.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub site_id: String,
    pub lat: String,
    pub lon: String,
    pub age: String,
    pub age_2sd: String,
    pub rsl: String,
    pub rsl_2sd: String,
    pub kind: String,
    pub core_id: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            site_id: "site_id".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            age: "age".into(),
            age_2sd: "age_2sd".into(),
            rsl: "rsl".into(),
            rsl_2sd: "rsl_2sd".into(),
            kind: "kind".into(),
            core_id: "core_id".into(),
        }
    }
}

fn find_column(header: &[&str], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
}

fn parse_cell(cell: &str, col: &str, row: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}: non-numeric value '{cell}' in column '{col}'")))
}

/// Load a dataset from a CSV file.
///
/// The file may start with metadata lines of the form `# key=value`;
/// `# age_unit=CE|kaBP` selects the age unit (default CE). 2-sigma columns
/// are converted to 1-sigma by halving.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_csv(&text, schema, path.as_ref().display().to_string())
}

fn parse_csv(text: &str, schema: &ColumnMap, provenance: String) -> Result<Dataset> {
    let mut age_unit = AgeUnit::YearsCe;
    let mut lines = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(meta) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = meta.split_once('=') {
                if key.trim() == "age_unit" {
                    age_unit = match value.trim() {
                        "CE" => AgeUnit::YearsCe,
                        "kaBP" => AgeUnit::KaBp,
                        other => {
                            return Err(Error::Schema(format!("unknown age_unit '{other}'")))
                        }
                    };
                }
            }
            continue;
        }
        lines.push(trimmed);
    }
    let header_line = lines
        .first()
        .ok_or_else(|| Error::Schema("file has no header row".into()))?;
    let header: Vec<&str> = header_line.split(',').collect();
    let c_site = find_column(&header, &schema.site_id)?;
    let c_lat = find_column(&header, &schema.lat)?;
    let c_lon = find_column(&header, &schema.lon)?;
    let c_age = find_column(&header, &schema.age)?;
    let c_age2 = find_column(&header, &schema.age_2sd)?;
    let c_rsl = find_column(&header, &schema.rsl)?;
    let c_rsl2 = find_column(&header, &schema.rsl_2sd)?;
    let c_kind = find_column(&header, &schema.kind)?;
    let c_core = header.iter().position(|h| h.trim() == schema.core_id);

    let mut observations = Vec::new();
    for (lineno, line) in lines.iter().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let row = lineno + 1;
        let need = [c_site, c_lat, c_lon, c_age, c_age2, c_rsl, c_rsl2, c_kind]
            .into_iter()
            .max()
            .unwrap();
        if cells.len() <= need {
            return Err(Error::Parse(format!("row {row}: too few cells")));
        }
        let raw_age = parse_cell(cells[c_age], &schema.age, row)?;
        let raw_age_2sd = parse_cell(cells[c_age2], &schema.age_2sd, row)?;
        let (age_mean, age_sd) = match age_unit {
            AgeUnit::YearsCe => (raw_age, raw_age_2sd / 2.0),
            AgeUnit::KaBp => (ka_bp_to_ce(raw_age), 1000.0 * raw_age_2sd / 2.0),
        };
        let core_id = c_core
            .map(|c| cells.get(c).map(|s| s.trim()).unwrap_or(""))
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string());
        observations.push(Observation {
            site_id: cells[c_site].trim().to_string(),
            latitude: parse_cell(cells[c_lat], &schema.lat, row)?,
            longitude: parse_cell(cells[c_lon], &schema.lon, row)?,
            age_mean,
            age_sd,
            rsl_mean: parse_cell(cells[c_rsl], &schema.rsl, row)?,
            rsl_sd: parse_cell(cells[c_rsl2], &schema.rsl_2sd, row)? / 2.0,
            kind: ObsKind::parse(cells[c_kind])?,
            core_id,
        });
    }
    Dataset::new(observations, provenance)
}

/// Serialize a dataset back to the canonical CSV schema (ages in CE, 2-sigma
/// columns). Numeric fields are written with enough digits to round-trip.
pub fn write_csv(d: &Dataset) -> String {
    let mut out = String::from("# age_unit=CE\n");
    out.push_str("site_id,lat,lon,age,age_2sd,rsl,rsl_2sd,kind,core_id\n");
    for o in &d.observations {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            o.site_id,
            o.latitude,
            o.longitude,
            o.age_mean,
            2.0 * o.age_sd,
            o.rsl_mean,
            2.0 * o.rsl_sd,
            o.kind.as_str(),
            o.core_id.as_deref().unwrap_or("")
        );
    }
    out
}
