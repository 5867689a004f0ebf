//! Dataset formats: a design/response CSV pair, or one JSON document
//! `{design, response, sigma, lambda, tau}` with the design given as rows.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RegressionProblem, Tuning};

#[derive(Debug, Clone)]
pub enum DataSource {
    /// Row-major design CSV and a response CSV (one value per row).
    CsvPair {
        design: PathBuf,
        response: PathBuf,
        header: bool,
        tuning: Tuning,
    },
    Json(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub design: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl ProblemDocument {
    pub fn from_problem(problem: &RegressionProblem) -> Self {
        let t = problem.tuning();
        Self {
            design: problem
                .design()
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            response: problem.response().iter().copied().collect(),
            sigma: t.sigma,
            lambda: t.lambda,
            tau: t.tau,
        }
    }

    pub fn into_problem(self) -> Result<RegressionProblem> {
        let n = self.design.len();
        if n != self.response.len() {
            return Err(Error::DimensionMismatch(format!(
                "design has {n} rows but response has {} entries",
                self.response.len()
            )));
        }
        let design = rows_to_matrix(&self.design)?;
        RegressionProblem::new(
            design,
            DVector::from_vec(self.response),
            Tuning::new(self.sigma, self.lambda, self.tau)?,
        )
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
        return Err(Error::DimensionMismatch(format!(
            "row {i} has {} columns, expected {p}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

pub fn load_problem(source: &DataSource) -> Result<RegressionProblem> {
    match source {
        DataSource::Json(path) => {
            let text = read(path)?;
            let doc: ProblemDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            doc.into_problem()
        }
        DataSource::CsvPair {
            design,
            response,
            header,
            tuning,
        } => {
            let rows = read_csv(design, *header)?;
            let x = rows_to_matrix(&rows)?;
            let yrows = read_csv(response, *header)?;
            if let Some(i) = yrows.iter().position(|r| r.len() != 1) {
                return Err(Error::Parse {
                    path: response.clone(),
                    message: format!("line {} must hold exactly one value", i + 1),
                });
            }
            let y: Vec<f64> = yrows.into_iter().map(|r| r[0]).collect();
            if y.len() != x.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "design has {} rows but response has {} entries",
                    x.nrows(),
                    y.len()
                )));
            }
            RegressionProblem::new(x, DVector::from_vec(y), *tuning)
        }
    }
}

/// Row-major design matrix from a CSV file.
pub fn load_design_csv(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    rows_to_matrix(&read_csv(path, header)?)
}

pub fn save_problem_json(problem: &RegressionProblem, path: &Path) -> Result<()> {
    let doc = ProblemDocument::from_problem(problem);
    let text = serde_json::to_string(&doc).expect("plain data serialises");
    write(path, &text)
}

pub fn save_problem_csv(problem: &RegressionProblem, design: &Path, response: &Path) -> Result<()> {
    let rows: Vec<Vec<f64>> = problem
        .design()
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    write_csv(design, None, &rows)?;
    let y: Vec<Vec<f64>> = problem.response().iter().map(|&v| vec![v]).collect();
    write_csv(response, None, &y)
}

pub(crate) fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_csv(path: &Path, header: bool) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|field| {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("record {}: cannot parse {field:?}", i + 1),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("{} record {}", path.display(), i + 1)))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows of floats using the shortest round-trip representation.
pub fn write_csv(path: &Path, header: Option<&[&str]>, rows: &[Vec<f64>]) -> Result<()> {
    write(path, &csv_string(header, rows))
}

pub fn csv_string(header: Option<&[&str]>, rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuning() -> Tuning {
        Tuning::new(1.0, 0.5, 0.1).unwrap()
    }

    #[test]
    fn csv_identity_pair() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("x.csv");
        let r = dir.path().join("y.csv");
        fs::write(&d, "1,0\n0,1\n").unwrap();
        fs::write(&r, "0.5\n-1\n").unwrap();
        let pb = load_problem(&DataSource::CsvPair {
            design: d,
            response: r,
            header: false,
            tuning: tuning(),
        })
        .unwrap();
        assert_eq!((pb.n(), pb.p()), (2, 2));
        assert_eq!(pb.design(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn csv_header_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("x.csv");
        let r = dir.path().join("y.csv");
        fs::write(&d, "a,b\n1,2\n").unwrap();
        fs::write(&r, "y\n3\n").unwrap();
        let pb = load_problem(&DataSource::CsvPair {
            design: d,
            response: r,
            header: true,
            tuning: tuning(),
        })
        .unwrap();
        assert_eq!(pb.response()[0], 3.0);
    }

    #[test]
    fn json_inconsistent_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(
            &path,
            r#"{"design": [[1,0],[0,1],[1,1]], "response": [1, 2], "sigma": 1, "lambda": 1, "tau": 1}"#,
        )
        .unwrap();
        let err = load_problem(&DataSource::Json(path)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn json_non_finite_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_problem(&DataSource::Json(path.clone())),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            load_problem(&DataSource::Json(dir.path().join("missing.json"))),
            Err(Error::Io { .. })
        ));
        let d = dir.path().join("x.csv");
        let r = dir.path().join("y.csv");
        fs::write(&d, "1,inf\n").unwrap();
        fs::write(&r, "1\n").unwrap();
        assert!(matches!(
            load_problem(&DataSource::CsvPair {
                design: d,
                response: r,
                header: false,
                tuning: tuning()
            }),
            Err(Error::NonFinite(_))
        ));
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn json_and_csv_are_bit_exact(
                n in 1usize..6, p in 1usize..5,
                vals in proptest::collection::vec(-1e6f64..1e6, 36),
                scale in -300i32..300,
            ) {
                let f = 10f64.powi(scale / 10);
                let x = DMatrix::from_fn(n, p, |i, j| vals[(i * p + j) % 36] * f / 7.0);
                let y = DVector::from_fn(n, |i, _| vals[(i + 11) % 36] / 3.0);
                let pb = RegressionProblem::new(x, y, tuning()).unwrap();
                let dir = tempfile::tempdir().unwrap();

                let jp = dir.path().join("p.json");
                save_problem_json(&pb, &jp).unwrap();
                let back = load_problem(&DataSource::Json(jp)).unwrap();
                prop_assert_eq!(back.design(), pb.design());
                prop_assert_eq!(back.response(), pb.response());

                let (d, r) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
                save_problem_csv(&pb, &d, &r).unwrap();
                let back = load_problem(&DataSource::CsvPair {
                    design: d, response: r, header: false, tuning: tuning()
                }).unwrap();
                prop_assert_eq!(back.design(), pb.design());
                prop_assert_eq!(back.response(), pb.response());
            }
        }
    }
}
