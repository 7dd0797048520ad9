//! On-disk formats: trajectory CSV files and the JSON parameter file.
//!
//! Trajectories are stored as `t,y1,...,yD` with raw seconds; phases are
//! recomputed on read. Parameter files carry `format_version` 1 and may embed
//! the full stepwise learner state so training can be resumed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::incremental::{step_size, StepwiseConfig, StepwiseState};
use crate::linalg::relative_asymmetry;
use crate::model::{Demonstration, ProMPParams};

pub const FORMAT_VERSION: u32 = 1;

/// Relative asymmetry accepted (and removed) when loading matrices.
pub const LOAD_SYMMETRY_TOLERANCE: f64 = 1e-9;

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn parse_trajectory_csv<R: Read>(reader: R) -> Result<Demonstration> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "t" {
        return Err(Error::Data("trajectory header must be t,y1,...,yD".into()));
    }
    for (i, name) in header.iter().enumerate().skip(1) {
        if name != format!("y{i}") {
            return Err(Error::Data(format!("unexpected column {name:?}, expected y{i}")));
        }
    }
    let d = header.len() - 1;
    let mut timestamps = Vec::new();
    let mut states = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        if record.len() != d + 1 {
            return Err(Error::Data(format!("row {} has {} columns, expected {}", row + 1, record.len(), d + 1)));
        }
        let values: Vec<f64> = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Data(format!("row {}: {f:?}: {e}", row + 1))))
            .collect::<Result<_>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {} contains a non-finite value", row + 1)));
        }
        timestamps.push(values[0]);
        states.push(DVector::from_column_slice(&values[1..]));
    }
    Demonstration::new(timestamps, states)
}

pub fn read_trajectory(path: &Path) -> Result<Demonstration> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    parse_trajectory_csv(file)
}

pub fn write_trajectory_csv<W: Write>(writer: W, demo: &Demonstration) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((1..=demo.dim()).map(|i| format!("y{i}")));
    wtr.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for (t, y) in demo.timestamps.iter().zip(&demo.states) {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let mut row = vec![t.to_string()];
        row.extend(y.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn write_trajectory(path: &Path, demo: &Demonstration) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    write_trajectory_csv(file, demo)
}

/// All `*.csv` files of `dir`, in file-name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Demonstration>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .csv trajectories found", dir.display())));
    }
    paths.iter().map(|p| read_trajectory(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))).collect()
}

/// Writes `demo_00000.csv`, `demo_00001.csv`, ... into `dir`, creating it.
pub fn write_dataset(dir: &Path, demos: &[Demonstration]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    for (i, demo) in demos.iter().enumerate() {
        write_trajectory(&dir.join(format!("demo_{i:05}.csv")), demo)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    pub centers: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseStateFile {
    pub u1: Vec<f64>,
    pub u2: Vec<Vec<f64>>,
    pub u3: Vec<Vec<f64>>,
    pub eta: f64,
    pub t_eff: f64,
    pub n: u64,
    pub beta: f64,
    pub delta_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProMPFile {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub basis: BasisFile,
    pub mu_w: Vec<f64>,
    pub sigma_w: Vec<Vec<f64>>,
    pub sigma_y: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stepwise_state: Option<StepwiseStateFile>,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], n: usize, what: &'static str) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch { what, expected: n, got: rows.len() });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { what, expected: n, got: r.len() });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Reads a square matrix that must be symmetric within the load tolerance.
fn symmetric_from_rows(rows: &[Vec<f64>], n: usize, what: &'static str) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows, n, what)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} contains non-finite entries")));
    }
    let asym = relative_asymmetry(&m);
    if asym > LOAD_SYMMETRY_TOLERANCE {
        return Err(Error::Data(format!("{what} is not symmetric (relative asymmetry {asym:e})")));
    }
    Ok(crate::linalg::symmetrize(&m))
}

fn vector_of(values: &[f64], n: usize, what: &'static str) -> Result<DVector<f64>> {
    if values.len() != n {
        return Err(Error::DimensionMismatch { what, expected: n, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} contains non-finite entries")));
    }
    Ok(DVector::from_column_slice(values))
}

impl ProMPFile {
    pub fn from_params(params: &ProMPParams) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            k: params.basis.k,
            d: params.basis.d,
            basis: BasisFile { centers: params.basis.centers.clone(), width: params.basis.width },
            mu_w: params.mu_w.iter().cloned().collect(),
            sigma_w: matrix_rows(&params.sigma_w),
            sigma_y: matrix_rows(&params.sigma_y),
            stepwise_state: None,
        }
    }

    /// Parameters plus the learner state needed to continue training.
    pub fn from_state(state: &StepwiseState, config: &StepwiseConfig) -> Self {
        let mut file = Self::from_params(&state.params);
        file.stepwise_state = Some(StepwiseStateFile {
            u1: state.u1.iter().cloned().collect(),
            u2: matrix_rows(&state.u2),
            u3: matrix_rows(&state.u3),
            eta: state.eta,
            t_eff: state.t_eff,
            n: state.n,
            beta: config.beta,
            delta_min: config.delta_min,
        });
        file
    }

    pub fn to_params(&self) -> Result<ProMPParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported format_version {}", self.format_version)));
        }
        let basis = BasisConfig::from_parts(self.k, self.d, self.basis.centers.clone(), self.basis.width)?;
        let kd = basis.dim();
        let mu_w = vector_of(&self.mu_w, kd, "mu_w")?;
        let sigma_w = symmetric_from_rows(&self.sigma_w, kd, "sigma_w")?;
        let sigma_y = symmetric_from_rows(&self.sigma_y, self.d, "sigma_y")?;
        ProMPParams::new(basis, mu_w, sigma_w, sigma_y)
    }

    /// Learner state and a default configuration carrying the stored `beta`
    /// and `delta_min`; `None` when the file holds parameters only.
    pub fn to_state(&self) -> Result<Option<(StepwiseState, StepwiseConfig)>> {
        let Some(s) = &self.stepwise_state else { return Ok(None) };
        let params = self.to_params()?;
        let (kd, d) = (params.basis.dim(), params.basis.d);
        if s.n == 0 {
            return Err(Error::Data("stepwise_state.n must be at least 1".into()));
        }
        if !(s.eta.is_finite() && s.t_eff.is_finite() && s.eta >= 0.0 && s.t_eff >= 0.0) {
            return Err(Error::Data("stepwise_state.eta and t_eff must be finite and non-negative".into()));
        }
        let config = StepwiseConfig::new(&params.basis, s.beta).with_delta_min(s.delta_min);
        config.validate(&params.basis)?;
        let state = StepwiseState {
            u1: vector_of(&s.u1, kd, "u1")?,
            u2: symmetric_from_rows(&s.u2, kd, "u2")?,
            u3: symmetric_from_rows(&s.u3, d, "u3")?,
            eta: s.eta,
            t_eff: s.t_eff,
            n: s.n,
            delta: step_size(s.n, s.beta, s.delta_min),
            params,
        };
        Ok(Some((state, config)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ProMPFile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid parameter file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| io_error(path, e))
    }
}

pub fn load_params(path: &Path) -> Result<ProMPParams> {
    ProMPFile::load(path)?.to_params()
}

pub fn save_params(path: &Path, params: &ProMPParams) -> Result<()> {
    ProMPFile::from_params(params).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let demo = Demonstration::new(
            vec![0.0, 0.1, 0.30000000000000004],
            vec![
                DVector::from_vec(vec![1.0 / 3.0, -2e-300]),
                DVector::from_vec(vec![0.1 + 0.2, 5.0]),
                DVector::from_vec(vec![f64::MAX, f64::MIN_POSITIVE]),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &demo).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y1,y2\n"));
        assert_eq!(parse_trajectory_csv(buf.as_slice()).unwrap(), demo);
    }

    #[test]
    fn csv_rejects_bad_input() {
        let cases = [
            "t,y1\n0,1\n",
            "t,y1\n0,1\n0,2\n",
            "t,y1\n0,1\n1,2,3\n",
            "time,y1\n0,1\n1,2\n",
            "t,y2\n0,1\n1,2\n",
            "t,y1\n0,abc\n1,2\n",
            "t,y1\n0,NaN\n1,2\n",
        ];
        for c in cases {
            assert!(parse_trajectory_csv(c.as_bytes()).is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_keys_match_format() {
        let params = ProMPParams::standard(BasisConfig::new(2, 1).unwrap());
        let value: serde_json::Value = serde_json::from_str(&ProMPFile::from_params(&params).to_json()).unwrap();
        for key in ["format_version", "K", "D", "basis", "mu_w", "sigma_w", "sigma_y"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        assert!(value.get("stepwise_state").is_none());
        assert_eq!(value["format_version"], 1);
    }

    #[test]
    fn asymmetry_within_tolerance_is_removed() {
        let params = ProMPParams::standard(BasisConfig::new(2, 1).unwrap());
        let mut file = ProMPFile::from_params(&params);
        file.sigma_w[0][1] = 1e-12;
        let loaded = file.to_params().unwrap();
        assert_eq!(loaded.sigma_w[(0, 1)], loaded.sigma_w[(1, 0)]);
        file.sigma_w[0][1] = 1e-3;
        assert!(matches!(file.to_params(), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_version_and_shapes_are_rejected() {
        let params = ProMPParams::standard(BasisConfig::new(3, 2).unwrap());
        let mut file = ProMPFile::from_params(&params);
        file.format_version = 2;
        assert!(file.to_params().is_err());
        let mut file = ProMPFile::from_params(&params);
        file.mu_w.pop();
        assert!(file.to_params().is_err());
        let mut file = ProMPFile::from_params(&params);
        file.sigma_y.push(vec![0.0, 0.0]);
        assert!(file.to_params().is_err());
    }
}
