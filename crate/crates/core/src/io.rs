//! Wide-format CSV ingestion and emission.
//!
//! Columns follow `id`, `X<t>_<name>`, `A<t>`, `Y<t>`. A cell is missing when
//! it is empty or exactly `NA`. Treatments may be coded `-1/+1` or `0/1`; the
//! latter is recoded with `2a - 1`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, Stage};
use crate::error::{Error, Result};

/// Role of one CSV column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRole {
    Id,
    Covariate { stage: usize, name: String },
    Treatment { stage: usize },
    Outcome { stage: usize },
    Ignore,
}

/// Column-role map for a CSV file.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    roles: HashMap<String, ColumnRole>,
}

impl Schema {
    /// Schema with explicit roles; columns not listed are inferred from their
    /// names when the file is read.
    pub fn from_roles(roles: HashMap<String, ColumnRole>) -> Self {
        Schema { roles }
    }

    /// The naming-convention schema (roles inferred from every header).
    pub fn conventional() -> Self {
        Schema::default()
    }

    fn role_of(&self, header: &str) -> Result<ColumnRole> {
        if let Some(r) = self.roles.get(header) {
            return Ok(r.clone());
        }
        parse_header(header).ok_or_else(|| Error::UnknownColumn(header.to_string()))
    }
}

/// Infer a column role from the `X<t>_<name>` / `A<t>` / `Y<t>` / `id` convention.
pub fn parse_header(h: &str) -> Option<ColumnRole> {
    if h == "id" {
        return Some(ColumnRole::Id);
    }
    let stage_num = |s: &str| s.parse::<usize>().ok().filter(|&t| t >= 1);
    if let Some(rest) = h.strip_prefix('A') {
        return stage_num(rest).map(|stage| ColumnRole::Treatment { stage });
    }
    if let Some(rest) = h.strip_prefix('Y') {
        return stage_num(rest).map(|stage| ColumnRole::Outcome { stage });
    }
    if let Some(rest) = h.strip_prefix('X') {
        let (t, name) = rest.split_once('_')?;
        if name.is_empty() {
            return None;
        }
        return stage_num(t).map(|stage| ColumnRole::Covariate {
            stage,
            name: name.to_string(),
        });
    }
    None
}

/// Side information from [`load_csv`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    /// Number of treatment cells recoded from `0/1` to `-1/+1`, per stage.
    pub recoded: Vec<usize>,
}

impl LoadReport {
    pub fn total_recoded(&self) -> usize {
        self.recoded.iter().sum()
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let normalized = cell.trim().replace('\u{2212}', "-");
    normalized.parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{cell}` is not a number"),
    })
}

#[derive(Default)]
struct StageColumns {
    covariates: Vec<(String, usize)>,
    treatment: Option<usize>,
    outcome: Option<usize>,
}

/// Read a dataset from a CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Read a dataset from any CSV source.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<(Dataset, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();

    let mut id_col = None;
    let mut by_stage: BTreeMap<usize, StageColumns> = BTreeMap::new();
    for (c, h) in headers.iter().enumerate() {
        match schema.role_of(h)? {
            ColumnRole::Id => id_col = Some(c),
            ColumnRole::Covariate { stage, name } => {
                by_stage.entry(stage).or_default().covariates.push((name, c))
            }
            ColumnRole::Treatment { stage } => by_stage.entry(stage).or_default().treatment = Some(c),
            ColumnRole::Outcome { stage } => by_stage.entry(stage).or_default().outcome = Some(c),
            ColumnRole::Ignore => {}
        }
    }
    let n_stages = by_stage.keys().copied().max().unwrap_or(0);
    if n_stages == 0 {
        return Err(Error::Validation("no stage columns found in header".into()));
    }
    for t in 1..=n_stages {
        let sc = by_stage.entry(t).or_default();
        if sc.treatment.is_none() || sc.outcome.is_none() {
            return Err(Error::Validation(format!("stage {t} needs columns A{t} and Y{t}")));
        }
    }

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let n = records.len();
    let ids: Vec<String> = match id_col {
        Some(c) => records.iter().map(|r| r[c].to_string()).collect(),
        None => (1..=n).map(|i| i.to_string()).collect(),
    };

    let mut stages = Vec::with_capacity(n_stages);
    let mut report = LoadReport::default();
    for t in 1..=n_stages {
        let sc = &by_stage[&t];
        let mut names = Vec::new();
        let mut columns = Vec::new();
        let mut observed = Vec::new();
        for (name, c) in &sc.covariates {
            let mut col = Vec::with_capacity(n);
            let mut obs = Vec::with_capacity(n);
            for (row, rec) in records.iter().enumerate() {
                let cell = &rec[*c];
                if is_missing(cell) {
                    col.push(0.0);
                    obs.push(false);
                } else {
                    col.push(parse_number(cell, row + 1, &headers[*c])?);
                    obs.push(true);
                }
            }
            names.push(name.clone());
            columns.push(col);
            observed.push(obs);
        }
        let read_full = |c: usize, what: &str| -> Result<Vec<f64>> {
            records
                .iter()
                .enumerate()
                .map(|(row, rec)| {
                    let cell = &rec[c];
                    if is_missing(cell) {
                        Err(Error::Validation(format!(
                            "row {}: {} `{}` must be fully observed",
                            row + 1,
                            what,
                            headers[c]
                        )))
                    } else {
                        parse_number(cell, row + 1, &headers[c])
                    }
                })
                .collect()
        };
        let mut a = read_full(sc.treatment.unwrap(), "treatment")?;
        let y = read_full(sc.outcome.unwrap(), "outcome")?;
        let zero_one = a.iter().all(|&v| v == 0.0 || v == 1.0) && a.iter().any(|&v| v == 0.0);
        let mut recoded = 0;
        if zero_one {
            for v in a.iter_mut() {
                *v = 2.0 * *v - 1.0;
                recoded += 1;
            }
        } else if let Some((row, v)) = a.iter().enumerate().find(|(_, &v)| v != 1.0 && v != -1.0) {
            return Err(Error::Validation(format!(
                "row {}: treatment A{t} = {v} not in {{-1,+1}} or {{0,1}}",
                row + 1
            )));
        }
        report.recoded.push(recoded);
        stages.push(Stage::new(names, columns, observed, a, y)?);
    }
    Ok((Dataset::new(ids, stages)?, report))
}

/// Header names in emission order.
pub fn headers(ds: &Dataset) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for (k, s) in ds.stages().iter().enumerate() {
        let t = k + 1;
        h.extend(s.names().iter().map(|n| format!("X{t}_{n}")));
        h.push(format!("A{t}"));
        h.push(format!("Y{t}"));
    }
    h
}

/// Write a dataset as CSV using the naming convention; missing cells become `NA`.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(headers(ds))?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.ids()[i].clone()];
        for s in ds.stages() {
            for j in 0..s.p() {
                rec.push(match s.x(j, i) {
                    Some(v) => format!("{v}"),
                    None => "NA".to_string(),
                });
            }
            rec.push(format!("{}", s.a()[i]));
            rec.push(format!("{}", s.y()[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a dataset to a file.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2: &str = "id,X1_1,X1_2,A1,Y1,X2_1,X2_2,A2,Y2
1,0.1,1.2,1,2,0.3,0.5,1,1
2,-0.3,0.4,-1,1,0.2,1.1,1,0
3,0.7,1.9,1,0.5,-0.1,,-1,2
";

    #[test]
    fn blank_cell_marks_stage_incomplete() {
        let (ds, rep) = read_csv(FIG2.as_bytes(), &Schema::conventional()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.n_stages(), 2);
        assert_eq!(rep.total_recoded(), 0);
        assert_eq!(ds.complete_upto(2).unwrap().mask, vec![true, true, false]);
        assert_eq!(ds.stage(1).unwrap().a(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_one_treatments_are_recoded() {
        let text = "id,A1,Y1\na,0,1\nb,1,2\nc,0,3\n";
        let (ds, rep) = read_csv(text.as_bytes(), &Schema::conventional()).unwrap();
        assert_eq!(ds.stage(1).unwrap().a(), &[-1.0, 1.0, -1.0]);
        assert_eq!(rep.recoded, vec![3]);
    }

    #[test]
    fn plus_minus_coding_kept() {
        let text = "id,A1,Y1\na,+1,1\nb,\u{2212}1,2\n";
        let (ds, rep) = read_csv(text.as_bytes(), &Schema::conventional()).unwrap();
        assert_eq!(ds.stage(1).unwrap().a(), &[1.0, -1.0]);
        assert_eq!(rep.total_recoded(), 0);
    }

    #[test]
    fn malformed_cell_names_row_and_column() {
        let text = "id,X1_a,A1,Y1\na,1.0,1,1\nb,abc,1,2\n";
        match read_csv(text.as_bytes(), &Schema::conventional()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "X1_a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_outcome_or_treatment_rejected() {
        let text = "id,A1,Y1\na,1,NA\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &Schema::conventional()),
            Err(Error::Validation(_))
        ));
        let text = "id,A1,Y1\na,,1\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &Schema::conventional()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "id,A1,Y1\na,1,1\na,-1,2\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &Schema::conventional()),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn explicit_roles_override_convention() {
        let mut roles = HashMap::new();
        roles.insert("patient".to_string(), ColumnRole::Id);
        roles.insert("hr".to_string(), ColumnRole::Covariate { stage: 1, name: "hr".into() });
        roles.insert("note".to_string(), ColumnRole::Ignore);
        let text = "patient,hr,note,A1,Y1\nx,70,foo,1,1\ny,NA,bar,-1,0\n";
        let (ds, _) = read_csv(text.as_bytes(), &Schema::from_roles(roles)).unwrap();
        assert_eq!(ds.ids(), &["x".to_string(), "y".to_string()]);
        assert_eq!(ds.stage(1).unwrap().x(0, 1), None);
    }

    #[test]
    fn emit_then_read_is_identity() {
        let (ds, _) = read_csv(FIG2.as_bytes(), &Schema::conventional()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, _) = read_csv(buf.as_slice(), &Schema::conventional()).unwrap();
        assert_eq!(ds, back);
    }
}
