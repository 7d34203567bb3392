//! Field reductions for the tide-gauge era: EOF (principal-component)
//! decomposition of dense fields, EOF regression of sparse gauge records, and
//! the virtual-station regional averaging estimate of GMSL.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::angular_distance;

// ---------------------------------------------------------------------------
// EOF decomposition
// ---------------------------------------------------------------------------

/// Leading spatial EOF patterns of a dense field, with the per-location time
/// means that were removed before the SVD.
#[derive(Debug, Clone)]
pub struct EofBasis {
    /// Locations × k orthonormal patterns.
    pub patterns: DMatrix<f64>,
    /// Fraction of anomaly variance captured by each pattern, nonincreasing.
    pub variance_fractions: Vec<f64>,
    /// Reference (lat, lon) per field row.
    pub grid: Vec<(f64, f64)>,
    /// Per-location time means of the input field.
    pub time_means: DVector<f64>,
}

/// Top-k EOF decomposition of a locations × times field. Per-location time
/// means are removed first; patterns are the leading left singular vectors of
/// the anomaly matrix.
pub fn eof_decompose(
    field: &DMatrix<f64>,
    grid: &[(f64, f64)],
    k: usize,
) -> Result<EofBasis> {
    let (n_loc, n_time) = field.shape();
    if grid.len() != n_loc {
        return Err(Error::Argument("grid length must match the field's rows".into()));
    }
    if k == 0 || k > n_loc.min(n_time) {
        return Err(Error::Argument(format!(
            "requested {k} patterns from a {n_loc}×{n_time} field"
        )));
    }
    let time_means = DVector::from_fn(n_loc, |i, _| field.row(i).sum() / n_time as f64);
    let mut anom = field.clone();
    for i in 0..n_loc {
        for t in 0..n_time {
            anom[(i, t)] -= time_means[i];
        }
    }
    let svd = anom.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let s = &svd.singular_values;
    let total: f64 = s.iter().map(|v| v * v).sum();
    let rank = s.iter().filter(|&&v| v > 1e-12 * s[0].max(1.0)).count();
    if k > rank {
        return Err(Error::Argument(format!(
            "requested {k} patterns but the anomaly field has rank {rank}"
        )));
    }
    let patterns = u.columns(0, k).into_owned();
    let variance_fractions: Vec<f64> = (0..k)
        .map(|i| if total > 0.0 { s[i] * s[i] / total } else { 0.0 })
        .collect();
    Ok(EofBasis { patterns, variance_fractions, grid: grid.to_vec(), time_means })
}

impl EofBasis {
    pub fn k(&self) -> usize {
        self.patterns.ncols()
    }
}

// ---------------------------------------------------------------------------
// EOF regression
// ---------------------------------------------------------------------------

/// Per-step least-squares fit of a uniform term plus EOF amplitudes.
#[derive(Debug, Clone)]
pub struct EofRegression {
    /// Uniform (globally common) term per time step.
    pub g: Vec<f64>,
    /// k × times amplitude series.
    pub alphas: DMatrix<f64>,
    /// Reconstructed anomaly field, locations × times.
    pub field: DMatrix<f64>,
}

/// Fit sparse gauge observations with the EOF basis: at each step, solve the
/// least-squares system [1, U at observed rows]·(g, α) = observed anomalies.
/// The GIA correction field (locations × times) is subtracted from the
/// observations before fitting.
pub fn eof_regress(
    basis: &EofBasis,
    obs: &[Vec<Option<f64>>],
    gia_correction: Option<&DMatrix<f64>>,
) -> Result<EofRegression> {
    let n_loc = basis.grid.len();
    let k = basis.k();
    let n_time = obs.len();
    if let Some(gia) = gia_correction {
        if gia.nrows() != n_loc || gia.ncols() != n_time {
            return Err(Error::Argument("GIA correction must be a locations × times field".into()));
        }
    }
    let mut g = Vec::with_capacity(n_time);
    let mut alphas = DMatrix::zeros(k, n_time);
    let mut field = DMatrix::zeros(n_loc, n_time);
    for (t, step) in obs.iter().enumerate() {
        if step.len() != n_loc {
            return Err(Error::Argument(format!(
                "step {t} has {} entries, expected one per grid location",
                step.len()
            )));
        }
        let rows: Vec<usize> = step.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
        if rows.len() < k + 1 {
            return Err(Error::Validation(format!(
                "step {t} has {} observed gauges but fitting a uniform term plus {k} \
                 amplitudes needs at least {}",
                rows.len(),
                k + 1
            )));
        }
        let design = DMatrix::from_fn(rows.len(), k + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                basis.patterns[(rows[i], j - 1)]
            }
        });
        let y = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| {
                step[i].unwrap() - gia_correction.map_or(0.0, |gia| gia[(i, t)])
            }),
        );
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::Numeric(format!("least squares failed at step {t}: {e}")))?;
        g.push(coef[0]);
        for j in 0..k {
            alphas[(j, t)] = coef[j + 1];
        }
        let recon = basis.patterns.columns(0, k) * coef.rows(1, k);
        for i in 0..n_loc {
            field[(i, t)] = coef[0] + recon[i];
        }
    }
    Ok(EofRegression { g, alphas, field })
}

// ---------------------------------------------------------------------------
// Virtual-station GMSL
// ---------------------------------------------------------------------------

/// A gauge record on the common time index; `None` marks missing steps.
#[derive(Debug, Clone)]
pub struct GaugeSeries {
    pub site_id: String,
    pub location: (f64, f64),
    pub values: Vec<Option<f64>>,
}

/// A named group of gauges with its ocean-area weight.
#[derive(Debug, Clone)]
pub struct Region {
    pub name: String,
    pub sites: Vec<String>,
    pub weight: f64,
}

/// Output of the virtual-station average: the global series plus each
/// region's final integrated series and virtual location.
#[derive(Debug, Clone)]
pub struct VirtualStationResult {
    pub gmsl: Vec<f64>,
    pub regional: Vec<(String, Vec<f64>, (f64, f64))>,
}

/// Midpoint along the great circle between two (lat, lon) points.
pub fn great_circle_midpoint(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let to_vec = |(lat, lon): (f64, f64)| {
        let (lat, lon) = (lat.to_radians(), lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (va, vb) = (to_vec(a), to_vec(b));
    let sum = [va[0] + vb[0], va[1] + vb[1], va[2] + vb[2]];
    let norm = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
    if norm < 1e-12 {
        return a; // antipodal: midpoint undefined, keep the first location
    }
    let m = [sum[0] / norm, sum[1] / norm, sum[2] / norm];
    (m[2].asin().to_degrees(), m[1].atan2(m[0]).to_degrees())
}

#[derive(Clone)]
struct Station {
    id: String,
    location: (f64, f64),
    /// First differences on the common index; `None` where neither parent
    /// had data.
    diffs: Vec<Option<f64>>,
}

fn merge_stations(a: &Station, b: &Station) -> Station {
    let diffs = a
        .diffs
        .iter()
        .zip(&b.diffs)
        .map(|(x, y)| match (x, y) {
            (Some(u), Some(v)) => Some(0.5 * (u + v)),
            (Some(u), None) => Some(*u),
            (None, Some(v)) => Some(*v),
            (None, None) => None,
        })
        .collect();
    let id = if a.id <= b.id { a.id.clone() } else { b.id.clone() };
    Station { id, location: great_circle_midpoint(a.location, b.location), diffs }
}

/// Integrate first differences from zero; missing increments contribute no
/// change.
fn integrate(diffs: &[Option<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(diffs.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for d in diffs {
        acc += d.unwrap_or(0.0);
        out.push(acc);
    }
    out
}

/// Virtual-station GMSL: within each region, repeatedly average the
/// geographically closest pair of stations on first differences (placing the
/// merged station at the great-circle midpoint) until one survives; the
/// global series is the weighted average of the integrated regional series,
/// anchored at zero in the first year.
pub fn virtual_station_gmsl(
    gauges: &[GaugeSeries],
    regions: &[Region],
) -> Result<VirtualStationResult> {
    if gauges.is_empty() || regions.is_empty() {
        return Err(Error::Argument("need at least one gauge and one region".into()));
    }
    let n_time = gauges[0].values.len();
    if n_time < 2 {
        return Err(Error::Argument("gauge series need at least two steps".into()));
    }
    for g in gauges {
        if g.values.len() != n_time {
            return Err(Error::Argument(format!(
                "gauge {} has {} steps, expected {n_time} (series must share one time index)",
                g.site_id,
                g.values.len()
            )));
        }
    }
    let weight_sum: f64 = regions.iter().map(|r| r.weight).sum();
    if regions.iter().any(|r| r.weight < 0.0) || (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config("region weights must be nonnegative and sum to 1".into()));
    }

    let mut regional = Vec::with_capacity(regions.len());
    let mut gmsl = vec![0.0; n_time];
    for region in regions {
        let mut stations: Vec<Station> = region
            .sites
            .iter()
            .map(|sid| {
                let g = gauges
                    .iter()
                    .find(|g| &g.site_id == sid)
                    .ok_or_else(|| Error::Config(format!("region {} lists unknown gauge {sid}", region.name)))?;
                Ok(Station {
                    id: g.site_id.clone(),
                    location: g.location,
                    diffs: g
                        .values
                        .windows(2)
                        .map(|w| match (w[0], w[1]) {
                            (Some(a), Some(b)) => Some(b - a),
                            _ => None,
                        })
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        if stations.is_empty() {
            return Err(Error::Config(format!("region {} has no gauges", region.name)));
        }
        // stable order so distance ties break on site_id lexicographically
        stations.sort_by(|a, b| a.id.cmp(&b.id));
        while stations.len() > 1 {
            let mut best = (0usize, 1usize);
            let mut best_d = f64::INFINITY;
            for i in 0..stations.len() {
                for j in (i + 1)..stations.len() {
                    let d = angular_distance(stations[i].location, stations[j].location);
                    if d < best_d - 1e-12 {
                        best_d = d;
                        best = (i, j);
                    }
                }
            }
            let merged = merge_stations(&stations[best.0], &stations[best.1]);
            stations.remove(best.1);
            stations.remove(best.0);
            let pos = stations
                .binary_search_by(|s| s.id.cmp(&merged.id))
                .unwrap_or_else(|p| p);
            stations.insert(pos, merged);
        }
        let survivor = &stations[0];
        let series = integrate(&survivor.diffs);
        for (t, v) in series.iter().enumerate() {
            gmsl[t] += region.weight * v;
        }
        regional.push((region.name.clone(), series, survivor.location));
    }
    let anchor = gmsl[0];
    for v in &mut gmsl {
        *v -= anchor;
    }
    Ok(VirtualStationResult { gmsl, regional })
}
