//! The irregular multi-resolution observation panel.
//!
//! Observations are stored per `(subject, series)` cell, sorted by time. The
//! interchange format is a long CSV with header `subject,series,time,value`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["subject", "series", "time", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

impl Observation {
    pub fn new(time: f64, value: f64) -> Self {
        Self { time, value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPanel {
    subject_ids: Vec<String>,
    series_ids: Vec<String>,
    domain_end: f64,
    /// Row-major over (subject, series).
    cells: Vec<Vec<Observation>>,
}

impl ObservationPanel {
    /// Builds a panel from per-cell observations laid out as
    /// `cells[subject][series]`. Cells are sorted by time; every timestamp
    /// must lie in `[0, domain_end]`.
    pub fn new(
        subject_ids: Vec<String>,
        series_ids: Vec<String>,
        domain_end: f64,
        cells: Vec<Vec<Vec<Observation>>>,
    ) -> Result<Self> {
        let panel = Self::with_empty_allowed(subject_ids, series_ids, domain_end, cells)?;
        if panel.total_observations() == 0 {
            return Err(Error::NoObservations);
        }
        Ok(panel)
    }

    /// Like [`ObservationPanel::new`] but accepts a panel with no
    /// observations at all (used for held-out test sets).
    pub fn with_empty_allowed(
        subject_ids: Vec<String>,
        series_ids: Vec<String>,
        domain_end: f64,
        cells: Vec<Vec<Vec<Observation>>>,
    ) -> Result<Self> {
        if subject_ids.is_empty() || series_ids.is_empty() {
            return Err(Error::InvalidArgument(
                "panel needs at least one subject and one series".into(),
            ));
        }
        if !(domain_end.is_finite() && domain_end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "domain end must be positive, got {domain_end}"
            )));
        }
        if cells.len() != subject_ids.len() || cells.iter().any(|c| c.len() != series_ids.len()) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} x {} cells",
                subject_ids.len(),
                series_ids.len()
            )));
        }
        let mut flat = Vec::with_capacity(subject_ids.len() * series_ids.len());
        for row in cells {
            for mut cell in row {
                for o in &cell {
                    if !(0.0..=domain_end).contains(&o.time) {
                        return Err(Error::Domain {
                            t: o.time,
                            end: domain_end,
                        });
                    }
                    if !o.value.is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "non-finite value at time {}",
                            o.time
                        )));
                    }
                }
                cell.sort_by(|a, b| a.time.total_cmp(&b.time));
                flat.push(cell);
            }
        }
        Ok(Self {
            subject_ids,
            series_ids,
            domain_end,
            cells: flat,
        })
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn num_series(&self) -> usize {
        self.series_ids.len()
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }

    pub fn series_index(&self, id: &str) -> Option<usize> {
        self.series_ids.iter().position(|s| s == id)
    }

    pub fn cell(&self, subject: usize, series: usize) -> &[Observation] {
        &self.cells[subject * self.series_ids.len() + series]
    }

    pub fn total_observations(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Number of observations in one series summed over subjects.
    pub fn series_count(&self, series: usize) -> usize {
        (0..self.num_subjects())
            .map(|i| self.cell(i, series).len())
            .sum()
    }

    /// Iterates `(subject, series, observation)` in row-major cell order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Observation)> + '_ {
        let j_count = self.series_ids.len();
        self.cells.iter().enumerate().flat_map(move |(idx, cell)| {
            cell.iter().map(move |o| (idx / j_count, idx % j_count, o))
        })
    }

    fn map_cells(&self, mut f: impl FnMut(usize, usize, &[Observation]) -> Vec<Observation>) -> Self {
        let j_count = self.series_ids.len();
        let cells = self
            .cells
            .iter()
            .enumerate()
            .map(|(idx, c)| f(idx / j_count, idx % j_count, c))
            .collect();
        Self {
            subject_ids: self.subject_ids.clone(),
            series_ids: self.series_ids.clone(),
            domain_end: self.domain_end,
            cells,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for (i, j, o) in self.iter() {
            w.write_record([
                self.subject_ids[i].as_str(),
                self.series_ids[j].as_str(),
                &o.time.to_string(),
                &o.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a long-format panel CSV from a file. When `domain_end` is `None`
/// the domain is `[0, max observed time]`.
pub fn read_panel_csv(path: impl AsRef<Path>, domain_end: Option<f64>) -> Result<ObservationPanel> {
    let file = std::fs::File::open(path)?;
    read_panel(file, domain_end)
}

pub fn read_panel<R: Read>(reader: R, domain_end: Option<f64>) -> Result<ObservationPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header 'subject,series,time,value', got '{}'", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut subjects: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    let mut subject_pos: HashMap<String, usize> = HashMap::new();
    let mut series_pos: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<(usize, usize, Observation)> = Vec::new();

    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("invalid {what} '{s}'"),
                })
        };
        let time = parse(&record[2], "time")?;
        let value = parse(&record[3], "value")?;
        if time < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative time {time} at line {line}"
            )));
        }
        let i = *subject_pos.entry(record[0].to_string()).or_insert_with(|| {
            subjects.push(record[0].to_string());
            subjects.len() - 1
        });
        let j = *series_pos.entry(record[1].to_string()).or_insert_with(|| {
            series.push(record[1].to_string());
            series.len() - 1
        });
        raw.push((i, j, Observation::new(time, value)));
    }

    if raw.is_empty() {
        return Err(Error::NoObservations);
    }
    let max_time = raw.iter().map(|(_, _, o)| o.time).fold(0.0, f64::max);
    let end = match domain_end {
        Some(end) => end,
        None if max_time > 0.0 => max_time,
        None => 1.0,
    };
    let mut cells = vec![vec![Vec::new(); series.len()]; subjects.len()];
    for (i, j, o) in raw {
        cells[i][j].push(o);
    }
    ObservationPanel::new(subjects, series, end, cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    /// Population standard deviation (divide by n).
    pub std: f64,
    /// Singleton, empty or constant cells are left unscaled.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub num_subjects: usize,
    pub num_series: usize,
    /// Row-major over (subject, series).
    pub cells: Vec<CellStats>,
}

impl StandardizationStats {
    pub fn get(&self, subject: usize, series: usize) -> Result<&CellStats> {
        if subject >= self.num_subjects || series >= self.num_series {
            return Err(Error::UnknownCell { subject, series });
        }
        Ok(&self.cells[subject * self.num_series + series])
    }
}

/// Centers and scales each `(subject, series)` cell to mean 0 and population
/// standard deviation 1.
pub fn standardize(panel: &ObservationPanel) -> (ObservationPanel, StandardizationStats) {
    let mut stats = Vec::with_capacity(panel.cells.len());
    let out = panel.map_cells(|_, _, cell| {
        let n = cell.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = cell.iter().map(|o| o.value).sum::<f64>() / n as f64;
            let var = cell.iter().map(|o| (o.value - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let degenerate = n < 2 || std == 0.0;
        stats.push(CellStats {
            mean,
            std,
            degenerate,
        });
        if degenerate {
            cell.to_vec()
        } else {
            cell.iter()
                .map(|o| Observation::new(o.time, (o.value - mean) / std))
                .collect()
        }
    });
    let stats = StandardizationStats {
        num_subjects: panel.num_subjects(),
        num_series: panel.num_series(),
        cells: stats,
    };
    (out, stats)
}

/// Maps standardized values of one cell back to the original scale.
pub fn destandardize(
    values: &[f64],
    stats: &StandardizationStats,
    subject: usize,
    series: usize,
) -> Result<Vec<f64>> {
    let c = stats.get(subject, series)?;
    if c.degenerate {
        return Ok(values.to_vec());
    }
    Ok(values.iter().map(|v| v * c.std + c.mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SplitMode {
    /// Hold out `floor(test_fraction * K_i)` random target points per subject.
    RandomFraction { test_fraction: f64 },
    /// Hold out target points whose times appear in `times[subject]`.
    ExplicitTimepoints { times: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Series whose points may be held out; defaults to the last series.
    pub target_series: Option<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn random(test_fraction: f64, target_series: Option<usize>, seed: u64) -> Self {
        Self {
            mode: SplitMode::RandomFraction { test_fraction },
            target_series,
            seed,
        }
    }
}

/// Splits a panel into training and testing panels. Only points of the
/// target series can land in the test panel.
pub fn split(panel: &ObservationPanel, spec: &SplitSpec) -> Result<(ObservationPanel, ObservationPanel)> {
    let target = spec.target_series.unwrap_or(panel.num_series() - 1);
    if target >= panel.num_series() {
        return Err(Error::Index(format!("target series {target}")));
    }
    // held[i] marks which target observations of subject i are test points.
    let held: Vec<Vec<bool>> = match &spec.mode {
        SplitMode::RandomFraction { test_fraction } => {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "test fraction must lie in (0, 1), got {test_fraction}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            (0..panel.num_subjects())
                .map(|i| {
                    let k = panel.cell(i, target).len();
                    if k < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "subject '{}' has {k} target observations; need at least 2",
                            panel.subject_ids[i]
                        )));
                    }
                    let n_test = (test_fraction * k as f64).floor() as usize;
                    let mut idx: Vec<usize> = (0..k).collect();
                    idx.shuffle(&mut rng);
                    let mut mask = vec![false; k];
                    for &x in &idx[..n_test] {
                        mask[x] = true;
                    }
                    Ok(mask)
                })
                .collect::<Result<_>>()?
        }
        SplitMode::ExplicitTimepoints { times } => {
            if times.len() != panel.num_subjects() {
                return Err(Error::ShapeMismatch(format!(
                    "explicit split needs {} time lists, got {}",
                    panel.num_subjects(),
                    times.len()
                )));
            }
            (0..panel.num_subjects())
                .map(|i| {
                    let mut wanted = times[i].clone();
                    wanted.sort_by(f64::total_cmp);
                    panel
                        .cell(i, target)
                        .iter()
                        .map(|o| wanted.binary_search_by(|t| t.total_cmp(&o.time)).is_ok())
                        .collect()
                })
                .collect()
        }
    };

    let pick = |keep_test: bool| {
        panel.map_cells(|i, j, cell| {
            if j != target {
                return if keep_test { Vec::new() } else { cell.to_vec() };
            }
            cell.iter()
                .zip(&held[i])
                .filter(|(_, &h)| h == keep_test)
                .map(|(o, _)| *o)
                .collect()
        })
    };
    Ok((pick(false), pick(true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn panel_from(cells: Vec<Vec<Vec<(f64, f64)>>>, end: f64) -> ObservationPanel {
        let subjects = (0..cells.len()).map(|i| format!("s{i}")).collect();
        let series = (0..cells[0].len()).map(|j| format!("y{j}")).collect();
        let cells = cells
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|c| c.into_iter().map(|(t, v)| Observation::new(t, v)).collect())
                    .collect()
            })
            .collect();
        ObservationPanel::new(subjects, series, end, cells).unwrap()
    }

    #[test]
    fn reads_minimal_csv() {
        let csv = "subject,series,time,value\ns1,hr,0,70\ns1,hr,2,72\n";
        let p = read_panel(csv.as_bytes(), None).unwrap();
        assert_eq!(p.num_subjects(), 1);
        assert_eq!(p.num_series(), 1);
        assert_eq!(p.cell(0, 0).len(), 2);
        assert_eq!(p.domain_end(), 2.0);
    }

    #[test]
    fn empty_csv_has_no_observations() {
        let err = read_panel("subject,series,time,value\n# nothing here\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::NoObservations));
        assert_eq!(err.to_string(), "no observations");
    }

    #[test]
    fn sorts_unsorted_times() {
        let csv = "subject,series,time,value\na,x,5,1\na,x,1,2\na,x,3,3\n";
        let p = read_panel(csv.as_bytes(), Some(10.0)).unwrap();
        let times: Vec<f64> = p.cell(0, 0).iter().map(|o| o.time).collect();
        assert_eq!(times, vec![1.0, 3.0, 5.0]);
        let values: Vec<f64> = p.cell(0, 0).iter().map(|o| o.value).collect();
        assert_eq!(values, vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn parse_error_reports_line() {
        let csv = "subject,series,time,value\n# comment\na,x,1,2\na,x,oops,3\n";
        match read_panel(csv.as_bytes(), None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_time_rejected() {
        let csv = "subject,series,time,value\na,x,-1,2\n";
        assert!(matches!(read_panel(csv.as_bytes(), None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn wrong_header_rejected() {
        let csv = "id,series,time,value\na,x,1,2\n";
        assert!(matches!(read_panel(csv.as_bytes(), None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let p = panel_from(vec![vec![vec![(0.5, 1.25)], vec![(0.1, -3.0), (0.7, 1e-9)]]], 1.0);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = read_panel(buf.as_slice(), Some(1.0)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn standardize_two_values() {
        let p = panel_from(vec![vec![vec![(0.0, 1.0), (1.0, 3.0)]]], 1.0);
        let (s, stats) = standardize(&p);
        let v: Vec<f64> = s.cell(0, 0).iter().map(|o| o.value).collect();
        assert_abs_diff_eq!(v[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-15);
        let c = stats.get(0, 0).unwrap();
        assert_eq!(c.mean, 2.0);
        assert_abs_diff_eq!(c.std, 1.0, epsilon = 1e-15);
        assert!(!c.degenerate);
        let back = destandardize(&v, &stats, 0, 0).unwrap();
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_cell_is_flagged_and_unchanged() {
        let p = panel_from(vec![vec![vec![(0.0, 5.0), (0.5, 5.0), (1.0, 5.0)], vec![(0.2, 7.0)]]], 1.0);
        let (s, stats) = standardize(&p);
        assert_eq!(s.cell(0, 0), p.cell(0, 0));
        assert!(stats.get(0, 0).unwrap().degenerate);
        assert!(stats.get(0, 1).unwrap().degenerate);
        assert_eq!(destandardize(&[5.0, 5.0], &stats, 0, 0).unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let p = panel_from(vec![vec![vec![(0.0, 1.0), (1.0, 3.0), (2.0, 8.0), (3.0, -4.0)]]], 3.0);
        let (once, _) = standardize(&p);
        let (twice, _) = standardize(&once);
        for (a, b) in once.cell(0, 0).iter().zip(twice.cell(0, 0)) {
            assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn unknown_cell_error() {
        let p = panel_from(vec![vec![vec![(0.0, 1.0), (1.0, 3.0)]]], 1.0);
        let (_, stats) = standardize(&p);
        assert!(matches!(destandardize(&[1.0], &stats, 1, 0), Err(Error::UnknownCell { .. })));
    }

    fn dense_panel(k: usize) -> ObservationPanel {
        let cells = vec![vec![
            (0..k).map(|t| (t as f64, (t as f64).sin())).collect(),
            (0..k).map(|t| (t as f64, t as f64)).collect(),
        ]];
        panel_from(cells, k as f64)
    }

    #[test]
    fn random_split_uses_floor_rule() {
        let p = dense_panel(100);
        let (train, test) = split(&p, &SplitSpec::random(0.3, None, 11)).unwrap();
        assert_eq!(test.cell(0, 1).len(), 30);
        assert_eq!(train.cell(0, 1).len(), 70);
        assert_eq!(train.cell(0, 0).len(), 100);
        assert!(test.cell(0, 0).is_empty());

        let p = dense_panel(7);
        let (_, test) = split(&p, &SplitSpec::random(0.3, None, 11)).unwrap();
        assert_eq!(test.cell(0, 1).len(), 2);
    }

    #[test]
    fn random_split_is_deterministic() {
        let p = dense_panel(50);
        let a = split(&p, &SplitSpec::random(0.3, None, 5)).unwrap();
        let b = split(&p, &SplitSpec::random(0.3, None, 5)).unwrap();
        assert_eq!(a, b);
        let c = split(&p, &SplitSpec::random(0.3, None, 6)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let p = dense_panel(10);
        for f in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(split(&p, &SplitSpec::random(f, None, 0)), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn explicit_split_holds_out_listed_times() {
        // full grid 1..=10 for the target; observed set {1, 4, 7, 10}
        let p = panel_from(
            vec![vec![
                (1..=10).map(|t| (t as f64, 0.0)).collect(),
                (1..=10).map(|t| (t as f64, t as f64)).collect(),
            ]],
            10.0,
        );
        let observed = [1.0, 4.0, 7.0, 10.0];
        let complement: Vec<f64> = (1..=10).map(|t| t as f64).filter(|t| !observed.contains(t)).collect();
        let spec = SplitSpec {
            mode: SplitMode::ExplicitTimepoints { times: vec![complement.clone()] },
            target_series: Some(1),
            seed: 0,
        };
        let (train, test) = split(&p, &spec).unwrap();
        let tr: Vec<f64> = train.cell(0, 1).iter().map(|o| o.time).collect();
        let te: Vec<f64> = test.cell(0, 1).iter().map(|o| o.time).collect();
        assert_eq!(tr, observed);
        assert_eq!(te, complement);
    }

    proptest! {
        #[test]
        fn split_partitions_target(k in 2usize..80, frac in 0.01f64..0.99, seed in 0u64..1000) {
            let p = dense_panel(k);
            let (train, test) = split(&p, &SplitSpec::random(frac, None, seed)).unwrap();
            let mut all: Vec<f64> = train.cell(0, 1).iter().chain(test.cell(0, 1)).map(|o| o.time).collect();
            all.sort_by(f64::total_cmp);
            let orig: Vec<f64> = p.cell(0, 1).iter().map(|o| o.time).collect();
            prop_assert_eq!(all, orig);
            prop_assert_eq!(test.cell(0, 1).len(), (frac * k as f64).floor() as usize);
        }

        #[test]
        fn standardized_cells_have_unit_scale(values in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let cell: Vec<(f64, f64)> = values.iter().enumerate().map(|(t, &v)| (t as f64, v)).collect();
            let p = panel_from(vec![vec![cell]], values.len() as f64);
            let (s, stats) = standardize(&p);
            let c = stats.get(0, 0).unwrap();
            prop_assume!(!c.degenerate && c.std > 1e-6);
            let n = values.len() as f64;
            let z: Vec<f64> = s.cell(0, 0).iter().map(|o| o.value).collect();
            let mean = z.iter().sum::<f64>() / n;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((std - 1.0).abs() < 1e-12);
            let back = destandardize(&z, &stats, 0, 0).unwrap();
            for (a, b) in back.iter().zip(p.cell(0, 0)) {
                prop_assert!((a - b.value).abs() <= 1e-12 * b.value.abs().max(1.0));
            }
        }
    }
}
