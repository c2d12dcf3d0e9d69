//! Per-column ranking of experiment rows and per-row rank accumulation.

use super::ReportError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

/// How equal values within a column share ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Competition ranking: `1, 2, 2, 4`.
    #[default]
    Min,
    /// `1, 2, 2, 3`.
    Dense,
    /// Average of the tied positions: `1, 2.5, 2.5, 4`.
    Fractional,
}

impl TiePolicy {
    pub const ALL: [TiePolicy; 3] = [TiePolicy::Min, TiePolicy::Dense, TiePolicy::Fractional];
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::Min => "min",
            TiePolicy::Dense => "dense",
            TiePolicy::Fractional => "fractional",
        })
    }
}

impl FromStr for TiePolicy {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(TiePolicy::Min),
            "dense" => Ok(TiePolicy::Dense),
            "fractional" => Ok(TiePolicy::Fractional),
            other => Err(ReportError::Input(format!("unknown tie policy '{other}' (min, dense, fractional)"))),
        }
    }
}

/// Labelled numeric grid; rows are experiments, columns are metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major values.
    pub values: Vec<Vec<f64>>,
    /// Per column: does a larger value rank better?
    pub higher_better: Vec<bool>,
}

impl Grid {
    /// All columns higher-is-better.
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, ReportError> {
        let higher_better = vec![true; col_labels.len()];
        let g = Self {
            row_labels,
            col_labels,
            values,
            higher_better,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.values.len() < 2 {
            return Err(ReportError::Input(format!("need ≥2 rows, got {}", self.values.len())));
        }
        if self.row_labels.len() != self.values.len() || self.higher_better.len() != self.col_labels.len() {
            return Err(ReportError::Input("label count does not match the grid".into()));
        }
        for (r, row) in self.values.iter().enumerate() {
            if row.len() != self.col_labels.len() {
                return Err(ReportError::Input(format!(
                    "row '{}' has {} values, expected {}",
                    self.row_labels[r],
                    row.len(),
                    self.col_labels.len()
                )));
            }
            if let Some(c) = row.iter().position(|v| v.is_nan()) {
                return Err(ReportError::Input(format!(
                    "NaN at row '{}', column '{}'",
                    self.row_labels[r], self.col_labels[c]
                )));
            }
        }
        Ok(())
    }

    /// Appends the rows of `other`, whose columns must match.
    pub fn extend(&mut self, other: Grid) -> Result<(), ReportError> {
        if other.col_labels != self.col_labels || other.higher_better != self.higher_better {
            return Err(ReportError::Input(format!(
                "column mismatch: {:?} vs {:?}",
                self.col_labels, other.col_labels
            )));
        }
        self.row_labels.extend(other.row_labels);
        self.values.extend(other.values);
        Ok(())
    }

    /// Reads `label,col,col,...` CSV. Row count is not checked here so that
    /// single-row files can be merged with [`Grid::extend`].
    pub fn read_csv(reader: impl Read) -> Result<Self, ReportError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(ReportError::Input(
                "grid CSV needs a label column and at least one value column".into(),
            ));
        }
        let col_labels: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let (mut row_labels, mut values) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            row_labels.push(rec.get(0).unwrap_or_default().to_owned());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| ReportError::Input(format!("not a number: '{v}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        Ok(Self {
            higher_better: vec![true; col_labels.len()],
            row_labels,
            col_labels,
            values,
        })
    }
}

/// Ranks of one column; rank 1 is best.
pub fn rank_column(values: &[f64], higher_better: bool, policy: TiePolicy) -> Vec<f64> {
    let better = |a: f64, b: f64| if higher_better { a > b } else { a < b };
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| {
        if better(*a, *b) {
            std::cmp::Ordering::Less
        } else if better(*b, *a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    distinct.dedup();
    values
        .iter()
        .map(|&v| {
            let above = values.iter().filter(|&&o| better(o, v)).count();
            let tied = values.iter().filter(|&&o| o == v).count();
            match policy {
                TiePolicy::Min => (above + 1) as f64,
                TiePolicy::Dense => (distinct.iter().position(|&d| d == v).expect("value is present") + 1) as f64,
                TiePolicy::Fractional => above as f64 + (tied as f64 + 1.0) / 2.0,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub grid: Grid,
    pub policy: TiePolicy,
    /// Row-major, aligned with `grid.values`.
    pub ranks: Vec<Vec<f64>>,
    pub accumulated: Vec<f64>,
}

impl RankTable {
    pub fn row_labels(&self) -> &[String] {
        &self.grid.row_labels
    }

    /// `label,<columns>,accum_rank` with the metric values, followed by a
    /// blank line and the same layout holding ranks.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), ReportError> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        let mut header = vec!["label".to_owned()];
        header.extend(self.grid.col_labels.iter().cloned());
        header.push("accum_rank".into());
        w.write_record(&header)?;
        for (r, label) in self.grid.row_labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.grid.values[r].iter().map(|v| v.to_string()));
            rec.push(fmt_rank(self.accumulated[r]));
            w.write_record(&rec)?;
        }
        w.write_record([""])?;
        let mut header = vec!["rank".to_owned()];
        header.extend(self.grid.col_labels.iter().cloned());
        header.push("accum_rank".into());
        w.write_record(&header)?;
        for (r, label) in self.grid.row_labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.ranks[r].iter().map(|&v| fmt_rank(v)));
            rec.push(fmt_rank(self.accumulated[r]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_rank(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Ranks every column and sums ranks per row.
pub fn rank_accumulate(grid: &Grid, policy: TiePolicy) -> Result<RankTable, ReportError> {
    grid.validate()?;
    let rows = grid.values.len();
    let mut ranks = vec![vec![0.0; grid.col_labels.len()]; rows];
    for c in 0..grid.col_labels.len() {
        let col: Vec<f64> = grid.values.iter().map(|r| r[c]).collect();
        for (r, rank) in rank_column(&col, grid.higher_better[c], policy).into_iter().enumerate() {
            ranks[r][c] = rank;
        }
    }
    let accumulated = ranks.iter().map(|r| r.iter().sum()).collect();
    Ok(RankTable {
        grid: grid.clone(),
        policy,
        ranks,
        accumulated,
    })
}

/// Outcome of trying every tie policy against published sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieSweep {
    pub expected: Vec<f64>,
    /// Policies in the order tried, with their accumulated ranks.
    pub attempts: Vec<(TiePolicy, Vec<f64>)>,
    pub matched: Option<TiePolicy>,
}

/// Tries `first`, then the remaining policies, stopping at the first whose
/// accumulated ranks equal `expected`.
pub fn reproduce_accumulated(grid: &Grid, expected: &[f64], first: TiePolicy) -> Result<TieSweep, ReportError> {
    let order = std::iter::once(first).chain(TiePolicy::ALL.into_iter().filter(|&p| p != first));
    let mut attempts = Vec::new();
    let mut matched = None;
    for policy in order {
        let table = rank_accumulate(grid, policy)?;
        let hit = table.accumulated.len() == expected.len() && table.accumulated.iter().zip(expected).all(|(a, e)| a == e);
        attempts.push((policy, table.accumulated));
        if hit {
            matched = Some(policy);
            break;
        }
    }
    Ok(TieSweep {
        expected: expected.to_vec(),
        attempts,
        matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(cols: &[&[f64]]) -> Grid {
        let rows = cols[0].len();
        Grid::new(
            (0..rows).map(|r| format!("r{r}")).collect(),
            (0..cols.len()).map(|c| format!("c{c}")).collect(),
            (0..rows).map(|r| cols.iter().map(|c| c[r]).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn column_examples() {
        assert_eq!(rank_column(&[3.0, 1.0, 2.0], true, TiePolicy::Min), vec![1.0, 3.0, 2.0]);
        assert_eq!(rank_column(&[5.0, 5.0, 1.0], true, TiePolicy::Min), vec![1.0, 1.0, 3.0]);
        assert_eq!(rank_column(&[5.0, 5.0, 1.0], true, TiePolicy::Dense), vec![1.0, 1.0, 2.0]);
        assert_eq!(rank_column(&[5.0, 5.0, 1.0], true, TiePolicy::Fractional), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_column(&[0.3, 0.1, 0.2], false, TiePolicy::Min), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn rejects_nan_and_single_rows() {
        let e = Grid::new(vec!["a".into()], vec!["x".into()], vec![vec![1.0]]).unwrap_err();
        assert!(e.to_string().contains("need ≥2 rows"));
        assert!(Grid::new(vec!["a".into(), "b".into()], vec!["x".into()], vec![vec![1.0], vec![f64::NAN]]).is_err());
    }

    #[test]
    fn identical_rows_tie() {
        let t = rank_accumulate(&grid(&[&[1.0, 1.0], &[2.0, 2.0]]), TiePolicy::Min).unwrap();
        assert_eq!(t.accumulated[0], t.accumulated[1]);
    }

    #[test]
    fn csv_round_trip() {
        let text = "label,a,b\nx,1,2\ny,3,0.5\n";
        let g = Grid::read_csv(text.as_bytes()).unwrap();
        assert_eq!(g.col_labels, vec!["a", "b"]);
        let t = rank_accumulate(&g, TiePolicy::Min).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("label,a,b,accum_rank\nx,1,2,3\ny,3,0.5,3\n"), "{s}");
    }

    proptest! {
        #[test]
        fn rank_sum_identity(col in proptest::collection::vec(0u8..6, 2..9)) {
            let v: Vec<f64> = col.iter().map(|&x| f64::from(x)).collect();
            let n = v.len() as f64;
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let full = n * (n + 1.0) / 2.0;
            let min_sum: f64 = rank_column(&v, true, TiePolicy::Min).iter().sum();
            let frac_sum: f64 = rank_column(&v, true, TiePolicy::Fractional).iter().sum();
            prop_assert_eq!(frac_sum, full);
            if sorted.len() == v.len() {
                prop_assert_eq!(min_sum, full);
            } else {
                prop_assert!(min_sum < full);
            }
        }

        #[test]
        fn permutation_invariance(
            vals in proptest::collection::vec(proptest::collection::vec(0u8..5, 3), 2..8),
            seed in any::<u64>(),
            policy in prop_oneof![Just(TiePolicy::Min), Just(TiePolicy::Dense), Just(TiePolicy::Fractional)],
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = vals.len();
            let g = Grid::new(
                (0..n).map(|r| r.to_string()).collect(),
                vec!["a".into(), "b".into(), "c".into()],
                vals.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect(),
            ).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = Grid {
                row_labels: perm.iter().map(|&i| g.row_labels[i].clone()).collect(),
                values: perm.iter().map(|&i| g.values[i].clone()).collect(),
                ..g.clone()
            };
            let (a, b) = (rank_accumulate(&g, policy).unwrap(), rank_accumulate(&p, policy).unwrap());
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&b.ranks[k], &a.ranks[i]);
                prop_assert_eq!(b.accumulated[k], a.accumulated[i]);
            }
        }
    }
}
