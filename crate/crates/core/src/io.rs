//! CSV schemas for trials, target profiles, Stage-1 aggregates, predictions
//! and simulation metrics.
//!
//! Readers take the text plus a label used in diagnostics; line numbers are
//! 1-based and count the header. Writers print floats with `{}`, the shortest
//! representation that parses back to the same value, so reading an emitted
//! file and writing it again reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{CoverageFlag, CovariateProfile, StudyCateEstimate, TrialDataset, TrialRow};
use crate::sim::ProfileMetrics;

pub const AGGREGATE_HEADER: &str = "profile_id,study_id,tau_hat,se2";
pub const PREDICTION_HEADER: &str = "profile_id,tau_pooled,theta2,lower,upper,df,flag_nonoverlap";
pub const METRICS_HEADER: &str = "profile_id,method,coverage,mean_length,bias,n_effective_replications";
pub const FLAGS_HEADER: &str = "profile_id,outside_range";

struct Table {
    label: String,
    header: Vec<String>,
    /// (line number, fields)
    records: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn parse(label: &str, text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Input(format!("{label}: unreadable header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::Input(format!("{label}: missing header")));
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Input(format!("{label}: line {line}: {e}"))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            records.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Self {
            label: label.to_string(),
            header,
            records,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("{}: missing required column `{name}`", self.label)))
    }

    fn expect_header(&self, expected: &str) -> Result<()> {
        if self.header.join(",") != expected {
            return Err(Error::Input(format!(
                "{}: header must be `{expected}`, found `{}`",
                self.label,
                self.header.join(",")
            )));
        }
        Ok(())
    }

    fn field<V: FromStr>(&self, line: u64, rec: &[String], col: usize) -> Result<V> {
        let raw = &rec[col];
        raw.parse().map_err(|_| {
            Error::Input(format!(
                "{}: line {line}: column `{}`: cannot parse `{raw}`",
                self.label, self.header[col]
            ))
        })
    }

    fn optional<V: FromStr>(&self, line: u64, rec: &[String], col: usize) -> Result<Option<V>> {
        if rec[col].is_empty() {
            Ok(None)
        } else {
            self.field(line, rec, col).map(Some)
        }
    }
}

/// Rows of one trial file: covariate names and `(study_id, row)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRows {
    pub covariate_names: Vec<String>,
    pub rows: Vec<(u32, TrialRow<f64>)>,
}

/// Parses `study_id,y,a,<covariates...>`.
pub fn parse_trial_csv(label: &str, text: &str) -> Result<TrialRows> {
    let t = Table::parse(label, text)?;
    let (sid, y, a) = (t.column("study_id")?, t.column("y")?, t.column("a")?);
    let cov_cols: Vec<usize> = (0..t.header.len()).filter(|c| ![sid, y, a].contains(c)).collect();
    if cov_cols.is_empty() {
        return Err(Error::Input(format!("{label}: no covariate columns")));
    }
    let covariate_names = cov_cols.iter().map(|&c| t.header[c].clone()).collect();
    let mut rows = Vec::with_capacity(t.records.len());
    for (line, rec) in &t.records {
        let treated = match rec[a].as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Input(format!(
                    "{label}: line {line}: column `a` must be 0 or 1, found `{other}`"
                )))
            }
        };
        let x = cov_cols
            .iter()
            .map(|&c| t.field(*line, rec, c))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((t.field(*line, rec, sid)?, TrialRow::new(t.field(*line, rec, y)?, treated, x)));
    }
    Ok(TrialRows {
        covariate_names,
        rows,
    })
}

/// Groups parsed trial files into one dataset per `study_id`, ordered by id.
/// All files must list the same covariates in the same order.
pub fn group_trials(files: Vec<(String, TrialRows)>) -> Result<Vec<TrialDataset<f64>>> {
    let mut names: Option<Vec<String>> = None;
    let mut by_study: BTreeMap<u32, Vec<TrialRow<f64>>> = BTreeMap::new();
    for (label, file) in files {
        match &names {
            None => names = Some(file.covariate_names.clone()),
            Some(n) if *n != file.covariate_names => {
                return Err(Error::Input(format!(
                    "{label}: covariates `{}` differ from `{}`",
                    file.covariate_names.join(","),
                    n.join(",")
                )))
            }
            Some(_) => {}
        }
        for (sid, row) in file.rows {
            by_study.entry(sid).or_default().push(row);
        }
    }
    let names = names.ok_or_else(|| Error::Input("no trial files given".into()))?;
    if by_study.is_empty() {
        return Err(Error::Input("trial files contain no rows".into()));
    }
    Ok(by_study
        .into_iter()
        .map(|(sid, rows)| TrialDataset::new(sid, names.clone(), rows))
        .collect())
}

/// Parses `profile_id,<covariates...>`; covariates must match `expected` when given.
pub fn parse_profile_csv(
    label: &str,
    text: &str,
    expected: Option<&[String]>,
) -> Result<Vec<CovariateProfile<f64>>> {
    let t = Table::parse(label, text)?;
    let pid = t.column("profile_id")?;
    let cov_cols: Vec<usize> = (0..t.header.len()).filter(|&c| c != pid).collect();
    if let Some(expected) = expected {
        let found: Vec<&String> = cov_cols.iter().map(|&c| &t.header[c]).collect();
        if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| *a != b) {
            let missing: Vec<&String> = expected.iter().filter(|e| !found.contains(e)).collect();
            return Err(Error::Input(match missing.first() {
                Some(m) => format!("{label}: missing required column `{m}`"),
                None => format!(
                    "{label}: covariate columns must be `{}` in that order",
                    expected.join(",")
                ),
            }));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    t.records
        .iter()
        .map(|(line, rec)| {
            let id: u32 = t.field(*line, rec, pid)?;
            if !seen.insert(id) {
                return Err(Error::Input(format!("{label}: line {line}: duplicate profile_id {id}")));
            }
            let x = cov_cols
                .iter()
                .map(|&c| t.field(*line, rec, c))
                .collect::<Result<Vec<f64>>>()?;
            Ok(CovariateProfile::new(id, x))
        })
        .collect()
}

pub fn write_profiles(names: &[String], profiles: &[CovariateProfile<f64>]) -> String {
    let mut out = format!("profile_id,{}\n", names.join(","));
    for p in profiles {
        let xs: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{},{}", p.profile_id, xs.join(","));
    }
    out
}

pub fn write_trials(trials: &[TrialDataset<f64>]) -> String {
    let names = trials.first().map(|t| t.covariate_names().join(",")).unwrap_or_default();
    let mut out = format!("study_id,y,a,{names}\n");
    for t in trials {
        for r in t.rows() {
            let xs: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", t.study_id(), r.y, u8::from(r.treated), xs.join(","));
        }
    }
    out
}

pub fn write_aggregates(estimates: &[StudyCateEstimate<f64>]) -> String {
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for e in estimates {
        let _ = writeln!(out, "{},{},{},{}", e.profile_id, e.study_id, e.tau_hat, e.se2);
    }
    out
}

pub fn parse_aggregate_csv(label: &str, text: &str) -> Result<Vec<StudyCateEstimate<f64>>> {
    let t = Table::parse(label, text)?;
    for name in ["profile_id", "study_id", "tau_hat", "se2"] {
        t.column(name)?;
    }
    t.expect_header(AGGREGATE_HEADER)?;
    t.records
        .iter()
        .map(|(line, rec)| {
            StudyCateEstimate::new(
                t.field(*line, rec, 1)?,
                t.field(*line, rec, 0)?,
                t.field(*line, rec, 2)?,
                t.field(*line, rec, 3)?,
            )
            .map_err(|e| Error::Input(format!("{label}: line {line}: {e}")))
        })
        .collect()
}

/// Sign of a prediction interval relative to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SignFlag {
    Positive,
    Negative,
    CrossesZero,
    /// Two studies: pooled estimate only.
    NoInterval,
}

impl SignFlag {
    pub fn of(lower: f64, upper: f64) -> Self {
        if lower > 0.0 {
            SignFlag::Positive
        } else if upper < 0.0 {
            SignFlag::Negative
        } else {
            SignFlag::CrossesZero
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignFlag::Positive => "positive",
            SignFlag::Negative => "negative",
            SignFlag::CrossesZero => "crosses_zero",
            SignFlag::NoInterval => "no_pi",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "positive" => SignFlag::Positive,
            "negative" => SignFlag::Negative,
            "crosses_zero" => SignFlag::CrossesZero,
            "no_pi" => SignFlag::NoInterval,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub profile_id: u32,
    pub tau_pooled: f64,
    pub theta2: f64,
    /// `(lower, upper, df)`, absent with two studies.
    pub interval: Option<(f64, f64, usize)>,
    pub flag: SignFlag,
}

pub fn write_predictions(rows: &[PredictionRow]) -> String {
    let mut out = format!("{PREDICTION_HEADER}\n");
    for r in rows {
        let (lo, hi, df) = match r.interval {
            Some((lo, hi, df)) => (lo.to_string(), hi.to_string(), df.to_string()),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{lo},{hi},{df},{}",
            r.profile_id,
            r.tau_pooled,
            r.theta2,
            r.flag.as_str()
        );
    }
    out
}

pub fn parse_prediction_csv(label: &str, text: &str) -> Result<Vec<PredictionRow>> {
    let t = Table::parse(label, text)?;
    t.expect_header(PREDICTION_HEADER)?;
    t.records
        .iter()
        .map(|(line, rec)| {
            let lo: Option<f64> = t.optional(*line, rec, 3)?;
            let hi: Option<f64> = t.optional(*line, rec, 4)?;
            let df: Option<usize> = t.optional(*line, rec, 5)?;
            let interval = match (lo, hi, df) {
                (Some(lo), Some(hi), Some(df)) => Some((lo, hi, df)),
                (None, None, None) => None,
                _ => {
                    return Err(Error::Input(format!(
                        "{label}: line {line}: lower, upper and df must be all present or all empty"
                    )))
                }
            };
            let flag = SignFlag::parse(&rec[6]).ok_or_else(|| {
                Error::Input(format!("{label}: line {line}: unknown flag `{}`", rec[6]))
            })?;
            Ok(PredictionRow {
                profile_id: t.field(*line, rec, 0)?,
                tau_pooled: t.field(*line, rec, 1)?,
                theta2: t.field(*line, rec, 2)?,
                interval,
                flag,
            })
        })
        .collect()
}

pub fn write_metrics(rows: &[ProfileMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.profile_id, r.method, r.coverage, r.mean_length, r.bias, r.n_effective_replications
        );
    }
    out
}

pub fn parse_metrics_csv(label: &str, text: &str) -> Result<Vec<ProfileMetrics>> {
    let t = Table::parse(label, text)?;
    t.expect_header(METRICS_HEADER)?;
    t.records
        .iter()
        .map(|(line, rec)| {
            Ok(ProfileMetrics {
                profile_id: t.field(*line, rec, 0)?,
                method: rec[1].clone(),
                coverage: t.field(*line, rec, 2)?,
                mean_length: t.field(*line, rec, 3)?,
                bias: t.field(*line, rec, 4)?,
                n_effective_replications: t.field(*line, rec, 5)?,
            })
        })
        .collect()
}

/// One line per profile; `outside_range` lists covariates joined by `;`.
pub fn write_coverage_flags(flags: &[CoverageFlag]) -> String {
    let mut out = format!("{FLAGS_HEADER}\n");
    for f in flags {
        let _ = writeln!(out, "{},{}", f.profile_id, f.names.join(";"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_schema_errors_name_column_and_line() {
        let e = parse_trial_csv("t.csv", "study_id,y,age\n1,0.5,3\n").unwrap_err();
        assert!(e.to_string().contains("`a`"), "{e}");
        let e = parse_trial_csv("t.csv", "study_id,y,a,age\n1,0.5,1,3\n1,zz,0,2\n").unwrap_err();
        assert!(e.to_string().contains("line 3") && e.to_string().contains("`y`"), "{e}");
        let e = parse_trial_csv("t.csv", "study_id,y,a,age\n1,0.5,2,3\n").unwrap_err();
        assert!(e.to_string().contains("0 or 1"), "{e}");
    }

    #[test]
    fn trials_group_across_files() {
        let f1 = parse_trial_csv("a", "study_id,y,a,x\n2,1,1,0\n1,0,0,1\n").unwrap();
        let f2 = parse_trial_csv("b", "study_id,y,a,x\n1,3,1,2\n").unwrap();
        let trials = group_trials(vec![("a".into(), f1), ("b".into(), f2)]).unwrap();
        assert_eq!(trials.iter().map(|t| t.study_id()).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(trials[0].len(), 2);
        let f3 = parse_trial_csv("c", "study_id,y,a,z\n1,3,1,2\n").unwrap();
        let f1 = parse_trial_csv("a", "study_id,y,a,x\n2,1,1,0\n").unwrap();
        assert!(group_trials(vec![("a".into(), f1), ("c".into(), f3)]).is_err());
    }

    #[test]
    fn round_trips_are_byte_identical() {
        let agg = "profile_id,study_id,tau_hat,se2\n1,1,0.1,0.30000000000000004\n1,2,-2.5,1e-7\n";
        let parsed = parse_aggregate_csv("agg", agg).unwrap();
        let again = write_aggregates(&parsed);
        assert_eq!(write_aggregates(&parse_aggregate_csv("agg", &again).unwrap()), again);

        let rows = vec![
            PredictionRow { profile_id: 1, tau_pooled: 1.0 / 3.0, theta2: 0.0, interval: Some((-1.0, 3.0, 2)), flag: SignFlag::CrossesZero },
            PredictionRow { profile_id: 2, tau_pooled: 2.0, theta2: 0.1, interval: None, flag: SignFlag::NoInterval },
        ];
        let text = write_predictions(&rows);
        assert_eq!(parse_prediction_csv("p", &text).unwrap(), rows);
        assert!(text.contains("\n2,2,0.1,,,,no_pi\n"));
    }

    #[test]
    fn sign_flags() {
        assert_eq!(SignFlag::of(-1.0, 3.0), SignFlag::CrossesZero);
        assert_eq!(SignFlag::of(0.5, 3.0), SignFlag::Positive);
        assert_eq!(SignFlag::of(-3.0, -0.5), SignFlag::Negative);
    }

    #[test]
    fn profile_columns_checked() {
        let names = vec!["age".to_string(), "sex".to_string()];
        let e = parse_profile_csv("p", "profile_id,age\n1,0\n", Some(&names)).unwrap_err();
        assert!(e.to_string().contains("`sex`"));
        let ok = parse_profile_csv("p", "profile_id,age,sex\n1,0,1\n2,1,0\n", Some(&names)).unwrap();
        assert_eq!(write_profiles(&names, &ok), "profile_id,age,sex\n1,0,1\n2,1,0\n");
    }
}
