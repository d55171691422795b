//! Datasets, CSV ingestion and column standardization.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ResponseKind {
    Continuous { q: usize },
    Categorical { classes: usize },
}

/// Response block: real-valued `n × q` or integer labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Continuous(Array2<f64>),
    Categorical { labels: Vec<usize>, classes: usize },
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Continuous(y) => y.nrows(),
            Response::Categorical { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ResponseKind {
        match self {
            Response::Continuous(y) => ResponseKind::Continuous { q: y.ncols() },
            Response::Categorical { classes, .. } => ResponseKind::Categorical { classes: *classes },
        }
    }

    /// Single-column continuous response from a vector.
    pub fn scalar(values: Vec<f64>) -> Self {
        let n = values.len();
        Response::Continuous(Array2::from_shape_vec((n, 1), values).expect("n x 1 shape"))
    }

    pub fn select(&self, rows: &[usize]) -> Response {
        match self {
            Response::Continuous(y) => Response::Continuous(y.select(Axis(0), rows)),
            Response::Categorical { labels, classes } => Response::Categorical {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Response::Continuous(y) => {
                if y.ncols() == 0 {
                    return Err(PodError::Data("continuous response has no columns".into()));
                }
                if let Some((i, _)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(PodError::Data(format!(
                        "non-finite response value at row {}",
                        i / y.ncols()
                    )));
                }
            }
            Response::Categorical { labels, classes } => {
                if *classes == 0 {
                    return Err(PodError::Data("categorical response with zero classes".into()));
                }
                if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= *classes) {
                    return Err(PodError::Data(format!(
                        "label {l} at row {i} outside 0..{classes}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Response,
    feature_names: Vec<String>,
    /// Original label text for each dense class index (categorical only).
    label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Response) -> Result<Self> {
        let feature_names = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(x, y, feature_names, None)
    }

    pub fn with_names(
        x: Array2<f64>,
        y: Response,
        feature_names: Vec<String>,
        label_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(PodError::Data(format!(
                "predictor matrix must be non-empty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(PodError::Dimension(format!(
                "{} predictor rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if let Some((i, _)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(PodError::Data(format!(
                "non-finite predictor at row {}, column {}",
                i / x.ncols(),
                i % x.ncols()
            )));
        }
        y.validate()?;
        if feature_names.len() != x.ncols() {
            return Err(PodError::Dimension("feature name count differs from p".into()));
        }
        Ok(Self {
            x,
            y,
            feature_names,
            label_names,
        })
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Response {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn kind(&self) -> ResponseKind {
        self.y.kind()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    /// Row subset; the class count of a categorical response is preserved.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::with_names(
            self.x.select(Axis(0), rows),
            self.y.select(rows),
            self.feature_names.clone(),
            self.label_names.clone(),
        )
    }
}

/// Which CSV columns form the response, and how to read them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseSpec {
    pub columns: Vec<String>,
    pub categorical: bool,
}

pub fn load_csv(path: impl AsRef<Path>, spec: &ResponseSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PodError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&bytes, spec)
}

pub fn parse_csv(bytes: &[u8], spec: &ResponseSpec) -> Result<Dataset> {
    if spec.columns.is_empty() {
        return Err(PodError::Config("no response column given".into()));
    }
    if spec.categorical && spec.columns.len() != 1 {
        return Err(PodError::Config(
            "a categorical response must be a single column".into(),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(b',')
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    let mut response_idx = Vec::with_capacity(spec.columns.len());
    for name in &spec.columns {
        let pos = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PodError::MissingColumn(name.clone()))?;
        response_idx.push(pos);
    }
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|j| !response_idx.contains(j))
        .collect();
    if feature_idx.is_empty() {
        return Err(PodError::Data("no predictor columns remain".into()));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut raw_labels = Vec::new();
    let mut n = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1, so data row r sits on line r + 2
        let line = r + 2;
        let cell = |j: usize| -> Result<f64> {
            let text = record.get(j).unwrap_or("");
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(PodError::BadCell {
                    row: line,
                    column: header[j].clone(),
                    value: text.to_owned(),
                }),
            }
        };
        for &j in &feature_idx {
            xs.push(cell(j)?);
        }
        if spec.categorical {
            raw_labels.push(record.get(response_idx[0]).unwrap_or("").to_owned());
        } else {
            for &j in &response_idx {
                ys.push(cell(j)?);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(PodError::Data("file has a header but no data rows".into()));
    }

    let x = Array2::from_shape_vec((n, feature_idx.len()), xs)
        .map_err(|e| PodError::Data(e.to_string()))?;
    let feature_names = feature_idx.iter().map(|&j| header[j].clone()).collect();
    if spec.categorical {
        let (labels, names) = index_labels(&raw_labels);
        let classes = names.len();
        Dataset::with_names(
            x,
            Response::Categorical { labels, classes },
            feature_names,
            Some(names),
        )
    } else {
        let y = Array2::from_shape_vec((n, response_idx.len()), ys)
            .map_err(|e| PodError::Data(e.to_string()))?;
        Dataset::with_names(x, Response::Continuous(y), feature_names, None)
    }
}

/// Reads every column not listed in `exclude` as a predictor. Used by the
/// factor-number baselines, which ignore the response.
pub fn parse_predictors_csv(bytes: &[u8], exclude: &[String]) -> Result<(Array2<f64>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(b',')
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    for name in exclude {
        if !header.contains(name) {
            return Err(PodError::MissingColumn(name.clone()));
        }
    }
    let keep: Vec<usize> = (0..header.len()).filter(|&j| !exclude.contains(&header[j])).collect();
    if keep.is_empty() {
        return Err(PodError::Data("no predictor columns remain".into()));
    }
    let mut xs = Vec::new();
    let mut n = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for &j in &keep {
            let text = record.get(j).unwrap_or("");
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => xs.push(v),
                _ => {
                    return Err(PodError::BadCell {
                        row: r + 2,
                        column: header[j].clone(),
                        value: text.to_owned(),
                    })
                }
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(PodError::Data("file has a header but no data rows".into()));
    }
    let x = Array2::from_shape_vec((n, keep.len()), xs).map_err(|e| PodError::Data(e.to_string()))?;
    Ok((x, keep.iter().map(|&j| header[j].clone()).collect()))
}

/// Maps raw label strings to dense indices. Numeric labels sort numerically,
/// anything else lexicographically.
fn index_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let mut names: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
    if names.iter().all(|s| s.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| {
            let (a, b) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            a.total_cmp(&b)
        });
    }
    let labels = raw
        .iter()
        .map(|s| names.iter().position(|n| n == s).expect("label present"))
        .collect();
    (labels, names)
}

/// Per-column centering and scaling, sample sd with the `n - 1` denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterScale {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// Columns whose sd was zero; their scale is 1.
    pub degenerate: Vec<bool>,
}

impl CenterScale {
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(PodError::Data(format!("standardize needs n >= 2, got {n}")));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let mut scale = Array1::ones(x.ncols());
        let mut degenerate = vec![false; x.ncols()];
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let ss: f64 = col.iter().map(|v| (v - mean[j]).powi(2)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            // relative cutoff so that constant columns with rounding noise count as constant
            if sd > 1e-12 * (1.0 + mean[j].abs()) {
                scale[j] = sd;
            } else {
                degenerate[j] = true;
            }
        }
        Ok(Self {
            mean,
            scale,
            degenerate,
        })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        z * &self.scale + &self.mean
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

pub fn standardize(x: &Array2<f64>) -> Result<(Array2<f64>, CenterScale)> {
    let cs = CenterScale::fit(x)?;
    Ok((cs.apply(x), cs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn spec(col: &str, categorical: bool) -> ResponseSpec {
        ResponseSpec {
            columns: vec![col.to_owned()],
            categorical,
        }
    }

    #[test]
    fn loads_small_categorical_file() {
        let csv = b"f1,f2,label\n1.0,2.0,cat\n3,4,dog\n5,6,cat\n";
        let ds = parse_csv(csv, &spec("label", true)).unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 2));
        assert_eq!(ds.kind(), ResponseKind::Categorical { classes: 2 });
        assert_eq!(ds.label_names().unwrap(), &["cat".to_owned(), "dog".to_owned()]);
        assert_eq!(ds.x()[[2, 1]], 6.0);
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let csv = b"a,y\n1,10\n2,9\n3,0\n";
        let ds = parse_csv(csv, &spec("y", true)).unwrap();
        assert_eq!(ds.label_names().unwrap(), &["0", "9", "10"]);
        match ds.y() {
            Response::Categorical { labels, .. } => assert_eq!(labels, &vec![2, 1, 0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn response_column_may_sit_anywhere() {
        let csv = b"y,a,b\n1,2,3\n4,5,6\n";
        let ds = parse_csv(csv, &spec("y", false)).unwrap();
        assert_eq!(ds.feature_names(), &["a", "b"]);
        assert_eq!(ds.x(), &array![[2.0, 3.0], [5.0, 6.0]]);
    }

    #[test]
    fn inf_cell_reports_location() {
        let csv = b"a,b,y\n1,2,3\n4,inf,6\n";
        match parse_csv(csv, &spec("y", false)) {
            Err(PodError::BadCell { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("expected BadCell, got {other:?}"),
        }
    }

    #[test]
    fn predictor_only_reads() {
        let (x, names) = parse_predictors_csv(b"a,y,b\n1,0,2\n3,1,4\n", &["y".to_owned()]).unwrap();
        assert_eq!(x, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(names, ["a", "b"]);
        let (all, _) = parse_predictors_csv(b"a,b\n1,2\n", &[]).unwrap();
        assert_eq!(all.dim(), (1, 2));
        assert!(matches!(
            parse_predictors_csv(b"a\n1\n", &["z".to_owned()]),
            Err(PodError::MissingColumn(_))
        ));
    }

    #[test]
    fn missing_column_and_empty_file() {
        assert!(matches!(
            parse_csv(b"a,b\n1,2\n", &spec("y", false)),
            Err(PodError::MissingColumn(_))
        ));
        assert!(matches!(
            parse_csv(b"a,y\n", &spec("y", false)),
            Err(PodError::Data(_))
        ));
        assert!(matches!(
            load_csv("/definitely/not/here.csv", &spec("y", false)),
            Err(PodError::Io { .. })
        ));
    }

    #[test]
    fn rejects_nan_at_construction() {
        let x = array![[1.0, f64::NAN]];
        assert!(Dataset::new(x, Response::scalar(vec![0.0])).is_err());
        let x = array![[1.0], [2.0]];
        let y = Response::Categorical {
            labels: vec![0, 3],
            classes: 3,
        };
        assert!(Dataset::new(x, y).is_err());
    }

    #[test]
    fn constant_column_is_flagged() {
        let x = array![[1.0, 0.0], [1.0, 2.0], [1.0, 4.0]];
        let (z, cs) = standardize(&x).unwrap();
        assert!(cs.degenerate[0] && !cs.degenerate[1]);
        assert!(z.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_column_uses_n_minus_one() {
        // mean 1, sd sqrt(2) => z = (-1, 1) / sqrt(2)
        let x = array![[0.0], [2.0]];
        let (z, cs) = standardize(&x).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((z[[0, 0]] + h).abs() < 1e-15 && (z[[1, 0]] - h).abs() < 1e-15);
        assert!((cs.scale[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(standardize(&array![[1.0]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn standardize_round_trips(seed in any::<u64>(), n in 2usize..30, p in 1usize..6) {
            let mut g = crate::rng::Gaussian::from_seed(seed);
            let x = Array2::from_shape_fn((n, p), |(_, j)| 3.0 * g.sample() + j as f64 * 10.0);
            let (z, cs) = standardize(&x).unwrap();
            for (j, col) in z.axis_iter(Axis(1)).enumerate() {
                let m = col.mean().unwrap();
                prop_assert!(m.abs() <= 1e-10);
                if !cs.degenerate[j] {
                    let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                    prop_assert!((sd - 1.0).abs() <= 1e-10);
                }
            }
            let back = cs.invert(&z);
            for (a, b) in back.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn parsing_is_deterministic(values in proptest::collection::vec(-1e6f64..1e6, 6..30)) {
            let mut text = String::from("a,b,y\n");
            for c in values.chunks_exact(3) {
                text.push_str(&format!("{},{},{}\n", c[0], c[1], c[2]));
            }
            let a = parse_csv(text.as_bytes(), &spec("y", false)).unwrap();
            let b = parse_csv(text.as_bytes(), &spec("y", false)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
