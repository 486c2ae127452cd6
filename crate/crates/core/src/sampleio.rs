//! Sample sets, prior metadata and their on-disk formats.
//!
//! Samples are CSV with a header `<name_0>,...,<name_{d-1}>,log_unnorm_posterior`.
//! Metadata is JSON:
//!
//! ```json
//! {"dim": 2, "names": ["a", "b"],
//!  "prior": {"lower": [0, 0], "upper": [1, 1]},
//!  "periodic": [{"dim": 1, "period": 6.283185307179586}],
//!  "sharp_edges": [{"dim": 0, "side": "lower"}]}
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffkernel::Mat;
use crate::error::{FlozError, Result};

pub const LOG_POSTERIOR_COLUMN: &str = "log_unnorm_posterior";

/// Posterior samples with their unnormalized log-posterior values (nats).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    params: Mat,
    log_p_hat: Vec<f64>,
    names: Vec<String>,
}

impl SampleSet {
    pub fn new(params: Mat, log_p_hat: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let set = SampleSet {
            params,
            log_p_hat,
            names,
        };
        set.validate()?;
        Ok(set)
    }

    /// Default names `x0, x1, ...`.
    pub fn unnamed(params: Mat, log_p_hat: Vec<f64>) -> Result<Self> {
        let names = default_names(params.cols());
        SampleSet::new(params, log_p_hat, names)
    }

    fn validate(&self) -> Result<()> {
        let n = self.params.rows();
        if n < 2 {
            return Err(FlozError::Precondition(format!(
                "a sample set needs at least 2 samples, got {n}"
            )));
        }
        if self.log_p_hat.len() != n {
            return Err(FlozError::Schema(format!(
                "{} log-posterior values for {n} samples",
                self.log_p_hat.len()
            )));
        }
        if self.names.len() != self.params.cols() {
            return Err(FlozError::Schema(format!(
                "{} parameter names for dimension {}",
                self.names.len(),
                self.params.cols()
            )));
        }
        for i in 0..n {
            if self.params.row_slice(i).iter().any(|v| !v.is_finite()) {
                return Err(FlozError::Domain(format!("sample {i} has a non-finite parameter")));
            }
            if !self.log_p_hat[i].is_finite() {
                return Err(FlozError::Domain(format!(
                    "sample {i} has a non-finite log posterior ({})",
                    self.log_p_hat[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.params.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.params.cols()
    }

    pub fn params(&self) -> &Mat {
        &self.params
    }

    pub fn log_p_hat(&self) -> &[f64] {
        &self.log_p_hat
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.params.row_slice(i)
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<SampleSet> {
        SampleSet::new(
            self.params.select_rows(idx),
            idx.iter().map(|&i| self.log_p_hat[i]).collect(),
            self.names.clone(),
        )
    }

    /// Replace parameters and log values, keeping names. Used by the
    /// preprocessing transforms.
    pub(crate) fn with_values(&self, params: Mat, log_p_hat: Vec<f64>) -> Result<SampleSet> {
        SampleSet::new(params, log_p_hat, self.names.clone())
    }
}

pub fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicDim {
    pub dim: usize,
    pub period: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharpEdge {
    pub dim: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Rectangular prior plus periodicity and sharp-edge declarations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorMetadata {
    pub dim: usize,
    pub names: Vec<String>,
    pub prior: PriorBox,
    #[serde(default)]
    pub periodic: Vec<PeriodicDim>,
    #[serde(default)]
    pub sharp_edges: Vec<SharpEdge>,
}

impl PriorMetadata {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let meta = PriorMetadata {
            dim: names.len(),
            names,
            prior: PriorBox { lower, upper },
            periodic: Vec::new(),
            sharp_edges: Vec::new(),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn lower(&self) -> &[f64] {
        &self.prior.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.prior.upper
    }

    pub fn volume(&self) -> f64 {
        self.prior
            .lower
            .iter()
            .zip(&self.prior.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(FlozError::Schema("metadata dim must be at least 1".into()));
        }
        if self.names.len() != d {
            return Err(FlozError::Schema(format!(
                "metadata lists {} names for dim {d}",
                self.names.len()
            )));
        }
        if self.prior.lower.len() != d || self.prior.upper.len() != d {
            return Err(FlozError::Schema(format!(
                "prior bounds have lengths {} and {} for dim {d}",
                self.prior.lower.len(),
                self.prior.upper.len()
            )));
        }
        for (j, (l, u)) in self.prior.lower.iter().zip(&self.prior.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(FlozError::Domain(format!(
                    "prior bound for dimension {j} is not a finite interval with lower < upper: [{l}, {u}]"
                )));
            }
        }
        for p in &self.periodic {
            if p.dim >= d {
                return Err(FlozError::Domain(format!(
                    "periodic dimension {} is out of range for dim {d}",
                    p.dim
                )));
            }
            if !(p.period.is_finite() && p.period > 0.0) {
                return Err(FlozError::Domain(format!(
                    "period of dimension {} must be positive, got {}",
                    p.dim, p.period
                )));
            }
        }
        for e in &self.sharp_edges {
            if e.dim >= d {
                return Err(FlozError::Domain(format!(
                    "sharp edge dimension {} is out of range for dim {d}",
                    e.dim
                )));
            }
            if self.periodic.iter().any(|p| p.dim == e.dim) {
                return Err(FlozError::Domain(format!(
                    "dimension {} is declared both periodic and sharp",
                    e.dim
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let meta: PriorMetadata =
            serde_json::from_str(s).map_err(|e| FlozError::Schema(format!("metadata: {e}")))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlozError::io(path, e))?;
        PriorMetadata::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| FlozError::io(path, e))
    }
}

/// Reads and validates a sample CSV against its metadata.
pub fn load_sample_set(samples_path: &Path, metadata_path: &Path) -> Result<(SampleSet, PriorMetadata)> {
    let meta = PriorMetadata::load(metadata_path)?;
    let file = File::open(samples_path).map_err(|e| FlozError::io(samples_path, e))?;
    let set = read_samples(file, samples_path, &meta)?;
    Ok((set, meta))
}

fn read_samples<R: std::io::Read>(reader: R, path: &Path, meta: &PriorMetadata) -> Result<SampleSet> {
    let d = meta.dim;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| FlozError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.len() != d + 1 {
        return Err(FlozError::Schema(format!(
            "{}: header has {} columns, metadata dim {d} requires {}",
            path.display(),
            header.len(),
            d + 1
        )));
    }
    if &header[d] != LOG_POSTERIOR_COLUMN {
        return Err(FlozError::Schema(format!(
            "{}: last column must be `{LOG_POSTERIOR_COLUMN}`, found `{}`",
            path.display(),
            &header[d]
        )));
    }
    let names: Vec<String> = header.iter().take(d).map(str::to_string).collect();
    if names != meta.names {
        return Err(FlozError::Schema(format!(
            "{}: column names {:?} do not match metadata names {:?}",
            path.display(),
            names,
            meta.names
        )));
    }

    let mut values = Vec::new();
    let mut log_p = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| FlozError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 1 {
            return Err(FlozError::Schema(format!(
                "{}: line {line} has {} fields, expected {} ({d} parameters + {LOG_POSTERIOR_COLUMN})",
                path.display(),
                record.len(),
                d + 1
            )));
        }
        let mut parsed = Vec::with_capacity(d + 1);
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| FlozError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(FlozError::Domain(format!(
                    "{}: row {row_idx} (line {line}) contains a non-finite value",
                    path.display()
                )));
            }
            parsed.push(v);
        }
        for (j, &x) in parsed[..d].iter().enumerate() {
            if x < meta.prior.lower[j] || x > meta.prior.upper[j] {
                return Err(FlozError::Domain(format!(
                    "{}: row {row_idx} (line {line}) lies outside the prior box in dimension {j}: \
                     {x} not in [{}, {}]",
                    path.display(),
                    meta.prior.lower[j],
                    meta.prior.upper[j]
                )));
            }
        }
        log_p.push(parsed[d]);
        values.extend_from_slice(&parsed[..d]);
    }
    let n = log_p.len();
    SampleSet::new(Mat::from_vec(n, d, values), log_p, names)
}

/// Output locations of [`write_sample_set`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub samples: PathBuf,
    pub metadata: PathBuf,
}

impl SamplePaths {
    pub fn for_prefix(prefix: &Path) -> Self {
        let base = prefix.as_os_str().to_string_lossy().into_owned();
        SamplePaths {
            samples: PathBuf::from(format!("{base}.samples.csv")),
            metadata: PathBuf::from(format!("{base}.meta.json")),
        }
    }
}

/// 17 significant digits: lossless for `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `<prefix>.samples.csv` and `<prefix>.meta.json`.
pub fn write_sample_set(set: &SampleSet, meta: &PriorMetadata, out_prefix: &Path) -> Result<SamplePaths> {
    set.validate()?;
    meta.validate()?;
    if set.dim() != meta.dim {
        return Err(FlozError::Schema(format!(
            "sample dimension {} differs from metadata dim {}",
            set.dim(),
            meta.dim
        )));
    }
    let paths = SamplePaths::for_prefix(out_prefix);
    let file = File::create(&paths.samples).map_err(|e| FlozError::io(&paths.samples, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FlozError::io(&paths.samples, e);
    let mut header = set.names().join(",");
    header.push(',');
    header.push_str(LOG_POSTERIOR_COLUMN);
    writeln!(w, "{header}").map_err(io)?;
    let mut line = String::new();
    for i in 0..set.len() {
        line.clear();
        for &x in set.row(i) {
            line.push_str(&format_f64(x));
            line.push(',');
        }
        line.push_str(&format_f64(set.log_p_hat()[i]));
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    meta.save(&paths.metadata)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_meta(d: usize) -> PriorMetadata {
        PriorMetadata::new(default_names(d), vec![0.0; d], vec![1.0; d]).unwrap()
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_well_formed_input() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.json", &serde_json::to_string(&unit_meta(2)).unwrap());
        let csv = write(
            dir.path(),
            "s.csv",
            "x0,x1,log_unnorm_posterior\n0.1,0.2,-1.5\n0.9,1.0,-0.5\n",
        );
        let (set, m) = load_sample_set(&csv, &meta).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(m.dim, 2);
        assert_eq!(set.log_p_hat(), &[-1.5, -0.5]);
    }

    #[test]
    fn extra_column_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.json", &serde_json::to_string(&unit_meta(2)).unwrap());
        let csv = write(
            dir.path(),
            "s.csv",
            "x0,x1,log_unnorm_posterior\n0.1,0.2,-1.5\n0.1,0.2,0.3,-1.5\n",
        );
        assert!(matches!(load_sample_set(&csv, &meta), Err(FlozError::Schema(_))));
    }

    #[test]
    fn malformed_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.json", &serde_json::to_string(&unit_meta(2)).unwrap());
        let csv = write(
            dir.path(),
            "s.csv",
            "x0,x1,log_unnorm_posterior\n0.1,0.2,-1.5\n0.1,abc,-1.5\n",
        );
        match load_sample_set(&csv, &meta) {
            Err(FlozError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_box_sample_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.json", &serde_json::to_string(&unit_meta(2)).unwrap());
        let csv = write(
            dir.path(),
            "s.csv",
            "x0,x1,log_unnorm_posterior\n0.1,0.2,-1.5\n0.5,1.5,-1.5\n",
        );
        match load_sample_set(&csv, &meta) {
            Err(FlozError::Domain(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn samples_on_the_bound_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.json", &serde_json::to_string(&unit_meta(2)).unwrap());
        let csv = write(dir.path(), "s.csv", "x0,x1,log_unnorm_posterior\n0,1,0\n1,0,0\n");
        assert!(load_sample_set(&csv, &meta).is_ok());
    }

    #[test]
    fn sharp_edge_out_of_range_is_domain_error() {
        let text = r#"{"dim":2,"names":["a","b"],"prior":{"lower":[0,0],"upper":[1,1]},
                       "sharp_edges":[{"dim":5,"side":"lower"}]}"#;
        assert!(matches!(PriorMetadata::from_json_str(text), Err(FlozError::Domain(_))));
    }

    #[test]
    fn periodic_and_sharp_on_same_dim_is_rejected() {
        let text = r#"{"dim":1,"names":["a"],"prior":{"lower":[0],"upper":[1]},
                       "periodic":[{"dim":0,"period":1.0}],
                       "sharp_edges":[{"dim":0,"side":"upper"}]}"#;
        assert!(matches!(PriorMetadata::from_json_str(text), Err(FlozError::Domain(_))));
    }

    #[test]
    fn empty_or_nan_sets_are_refused() {
        assert!(matches!(
            SampleSet::unnamed(Mat::zeros(0, 2), vec![]),
            Err(FlozError::Precondition(_))
        ));
        assert!(matches!(
            SampleSet::unnamed(Mat::zeros(2, 1), vec![0.0, f64::NAN]),
            Err(FlozError::Domain(_))
        ));
    }

    #[test]
    fn write_then_load_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10;
        let d = 3;
        let vals: Vec<f64> = (0..n * d).map(|k| ((k as f64) * 0.7316).sin().abs()).collect();
        let logp: Vec<f64> = (0..n).map(|k| -(k as f64) / 3.0 - 1e-17).collect();
        let set = SampleSet::unnamed(Mat::from_vec(n, d, vals), logp).unwrap();
        let meta = unit_meta(d);
        let prefix = dir.path().join("rt");
        let paths = write_sample_set(&set, &meta, &prefix).unwrap();
        let (back, meta_back) = load_sample_set(&paths.samples, &paths.metadata).unwrap();
        assert_eq!(back, set);
        assert_eq!(meta_back, meta);

        let first = std::fs::read_to_string(&paths.samples).unwrap();
        write_sample_set(&back, &meta_back, &prefix).unwrap();
        let second = std::fs::read_to_string(&paths.samples).unwrap();
        assert_eq!(first, second);
    }
}
