//! Losses that define predictiveness.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Response;
use crate::error::{PodError, Result};

/// Probability floor applied before taking logs in the cross-entropy.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
const PROBABILITY_SUM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Loss {
    Squared,
    ZeroOne,
    CrossEntropy { clip: f64 },
}

impl Loss {
    pub fn cross_entropy() -> Self {
        Loss::CrossEntropy {
            clip: PROBABILITY_FLOOR,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Loss::Squared)
    }

    pub fn check_response(&self, y: &Response) -> Result<()> {
        match (self, y) {
            (Loss::Squared, Response::Continuous(_)) => Ok(()),
            (Loss::ZeroOne | Loss::CrossEntropy { .. }, Response::Categorical { .. }) => Ok(()),
            _ => Err(PodError::Config(format!(
                "loss {self} is incompatible with a {} response",
                match y {
                    Response::Continuous(_) => "continuous",
                    Response::Categorical { .. } => "categorical",
                }
            ))),
        }
    }

    /// Loss of a single prediction.
    pub fn eval(&self, y: ResponseValue<'_>, yhat: Prediction<'_>) -> Result<f64> {
        match (self, y, yhat) {
            (Loss::Squared, ResponseValue::Continuous(y), Prediction::Continuous(p)) => {
                if y.len() != p.len() {
                    return Err(PodError::Dimension(format!(
                        "response has {} outputs, prediction {}",
                        y.len(),
                        p.len()
                    )));
                }
                Ok(y.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            }
            (Loss::ZeroOne, ResponseValue::Label(y), Prediction::Label(p)) => {
                Ok(if y == p { 0.0 } else { 1.0 })
            }
            (Loss::CrossEntropy { clip }, ResponseValue::Label(y), Prediction::Probabilities(p)) => {
                check_probabilities(p)?;
                let py = *p.get(y).ok_or_else(|| {
                    PodError::Dimension(format!("label {y} outside a {}-class vector", p.len()))
                })?;
                Ok(-py.max(*clip).ln())
            }
            _ => Err(PodError::Config(format!(
                "loss {self} cannot score this response/prediction pair"
            ))),
        }
    }

    /// Per-sample losses for a block of predictions.
    pub fn per_sample(&self, y: &Response, yhat: &Predictions) -> Result<Vec<f64>> {
        if y.len() != yhat.len() {
            return Err(PodError::Dimension(format!(
                "{} responses but {} predictions",
                y.len(),
                yhat.len()
            )));
        }
        (0..y.len())
            .map(|i| self.eval(ResponseValue::at(y, i), yhat.for_loss(self, i)))
            .collect()
    }

    /// Mean risk together with the per-sample losses it averages.
    pub fn mean_risk(&self, y: &Response, yhat: &Predictions) -> Result<(f64, Vec<f64>)> {
        if y.is_empty() {
            return Err(PodError::Data("mean risk over zero samples".into()));
        }
        let losses = self.per_sample(y, yhat)?;
        Ok((mean(&losses), losses))
    }
}

fn check_probabilities(p: ArrayView1<'_, f64>) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(PodError::Numerical("probability vector has negative or non-finite entries".into()));
    }
    let total: f64 = p.sum();
    if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(PodError::Numerical(format!(
            "probability vector sums to {total}"
        )));
    }
    Ok(())
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Squared => "squared",
            Loss::ZeroOne => "zero-one",
            Loss::CrossEntropy { .. } => "cross-entropy",
        })
    }
}

impl FromStr for Loss {
    type Err = PodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Loss::Squared),
            "zero-one" | "zero_one" | "01" => Ok(Loss::ZeroOne),
            "cross-entropy" | "cross_entropy" => Ok(Loss::cross_entropy()),
            other => Err(PodError::Config(format!(
                "unknown loss {other:?} (expected squared, zero-one or cross-entropy)"
            ))),
        }
    }
}

/// One observed response.
#[derive(Debug, Clone, Copy)]
pub enum ResponseValue<'a> {
    Continuous(ArrayView1<'a, f64>),
    Label(usize),
}

impl<'a> ResponseValue<'a> {
    pub fn at(y: &'a Response, i: usize) -> Self {
        match y {
            Response::Continuous(m) => ResponseValue::Continuous(m.row(i)),
            Response::Categorical { labels, .. } => ResponseValue::Label(labels[i]),
        }
    }
}

/// One prediction, borrowed from a [`Predictions`] block.
#[derive(Debug, Clone, Copy)]
pub enum Prediction<'a> {
    Continuous(ArrayView1<'a, f64>),
    Label(usize),
    Probabilities(ArrayView1<'a, f64>),
}

/// Predictions for a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Continuous(Array2<f64>),
    /// Hard labels plus the class-probability rows they were derived from.
    Classes {
        labels: Vec<usize>,
        probabilities: Array2<f64>,
    },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Continuous(m) => m.nrows(),
            Predictions::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The prediction of row `i`; classification rows resolve to a hard label
    /// unless probabilities are requested through [`Predictions::for_loss`].
    pub fn at(&self, i: usize) -> Prediction<'_> {
        match self {
            Predictions::Continuous(m) => Prediction::Continuous(m.row(i)),
            Predictions::Classes { labels, .. } => Prediction::Label(labels[i]),
        }
    }

    pub fn probabilities_at(&self, i: usize) -> Option<Prediction<'_>> {
        match self {
            Predictions::Classes { probabilities, .. } => {
                Some(Prediction::Probabilities(probabilities.row(i)))
            }
            Predictions::Continuous(_) => None,
        }
    }

    /// Row `i` in the form the loss consumes.
    pub fn for_loss(&self, loss: &Loss, i: usize) -> Prediction<'_> {
        match loss {
            Loss::CrossEntropy { .. } => self.probabilities_at(i).unwrap_or_else(|| self.at(i)),
            _ => self.at(i),
        }
    }
}

impl Loss {
    /// Per-sample losses over a subset of rows. `rows` index both `y` and
    /// `yhat`.
    pub fn losses_on(&self, y: &Response, yhat: &Predictions, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| self.eval(ResponseValue::at(y, i), yhat.for_loss(self, i)))
            .collect()
    }
}
