//! Panel CSV reading and writing.

use std::io::{Read, Write};

use csv::StringRecord;
use pwrd_core::error::RowError;
use pwrd_core::{PanelBuilder, PanelDataset, RawRow, TestInRule};
use serde::{Deserialize, Serialize};

use crate::numfmt::num;
use crate::schema::Schema;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestInSource {
    Column,
    ThresholdRule,
    Absent,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub panel: PanelDataset,
    /// 1-based data rows dropped for a missing outcome.
    pub deleted_rows: Vec<usize>,
    pub test_in_source: TestInSource,
}

struct Columns {
    unit: usize,
    cluster: usize,
    block: Option<usize>,
    treatment: usize,
    cohort: usize,
    grade: usize,
    year: usize,
    outcome: usize,
    tested_in: Option<usize>,
    covariates: Vec<usize>,
    score: Option<usize>,
}

impl Columns {
    fn resolve(headers: &StringRecord, schema: &Schema) -> Result<Self> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Core(pwrd_core::Error::MissingColumn(name.to_string())))
        };
        let optional = |name: &Option<String>| name.as_deref().map(find).transpose();
        let score = match (&schema.tested_in, &schema.test_in_rule) {
            (None, Some(rule)) => Some(find(rule.score.as_deref().unwrap_or(&schema.outcome))?),
            _ => None,
        };
        Ok(Self {
            unit: find(&schema.unit)?,
            cluster: find(&schema.cluster)?,
            block: optional(&schema.block)?,
            treatment: find(&schema.treatment)?,
            cohort: find(&schema.cohort)?,
            grade: find(&schema.grade)?,
            year: find(&schema.year)?,
            outcome: find(&schema.outcome)?,
            tested_in: optional(&schema.tested_in)?,
            covariates: schema.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?,
            score,
        })
    }
}

struct Parsed {
    treated: bool,
    cohort: i32,
    grade: i32,
    year: u32,
    outcome: f64,
    tested_in: bool,
    covariates: Vec<f64>,
    score: f64,
}

fn binary(field: &str, what: &str) -> std::result::Result<bool, String> {
    match field {
        "1" | "1.0" | "true" | "TRUE" => Ok(true),
        "0" | "0.0" | "false" | "FALSE" => Ok(false),
        "" => Err(format!("{what} is missing")),
        other => Err(format!("{what} must be 0 or 1, got `{other}`")),
    }
}

fn real(field: &str, what: &str) -> std::result::Result<f64, String> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ if field.is_empty() => Err(format!("{what} is missing")),
        _ => Err(format!("{what} is not a finite number: `{field}`")),
    }
}

fn integer<T: std::str::FromStr>(field: &str, what: &str) -> std::result::Result<T, String> {
    field.parse::<T>().map_err(|_| format!("{what} is not an integer: `{field}`"))
}

/// `Ok(None)` means the outcome is missing and the row is deleted.
fn parse_row(r: &StringRecord, c: &Columns) -> std::result::Result<Option<Parsed>, String> {
    if r.get(c.unit).unwrap_or("").is_empty() {
        return Err("unit is missing".into());
    }
    if r.get(c.cluster).unwrap_or("").is_empty() {
        return Err("cluster is missing".into());
    }
    let outcome_field = r.get(c.outcome).unwrap_or("");
    if outcome_field.is_empty() {
        return Ok(None);
    }
    let year: u32 = integer(&r[c.year], "year")?;
    if year < 1 {
        return Err("year must be >= 1".into());
    }
    Ok(Some(Parsed {
        treated: binary(&r[c.treatment], "treatment")?,
        cohort: integer(&r[c.cohort], "cohort")?,
        grade: integer(&r[c.grade], "grade")?,
        year,
        outcome: real(outcome_field, "outcome")?,
        tested_in: c.tested_in.map(|i| binary(&r[i], "tested_in")).transpose()?.unwrap_or(false),
        covariates: c.covariates.iter().map(|&i| real(&r[i], "covariate")).collect::<std::result::Result<_, _>>()?,
        score: c.score.map(|i| real(&r[i], "score")).transpose()?.unwrap_or(f64::NAN),
    }))
}

/// Reads a panel. With `schema = None` the default column names are used.
pub fn read_panel<R: Read>(reader: R, schema: Option<&Schema>) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let detected;
    let schema = match schema {
        Some(s) => s,
        None => {
            detected = Schema::detect(&headers);
            &detected
        }
    };
    let cols = Columns::resolve(&headers, schema)?;

    let mut records = Vec::new();
    let mut parsed = Vec::new();
    let mut errors = Vec::new();
    let mut deleted_rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError { row, message: e.to_string() });
                continue;
            }
        };
        match parse_row(&rec, &cols) {
            Ok(Some(p)) => {
                records.push(rec);
                parsed.push(p);
            }
            Ok(None) => deleted_rows.push(row),
            Err(message) => errors.push(RowError { row, message }),
        }
    }
    if !errors.is_empty() {
        return Err(pwrd_core::Error::InvalidRows(errors).into());
    }

    let test_in_source = match (cols.tested_in, &schema.test_in_rule) {
        (Some(_), _) => TestInSource::Column,
        (None, Some(_)) => TestInSource::ThresholdRule,
        (None, None) => TestInSource::Absent,
    };
    let mut builder = PanelBuilder::new(schema.covariates.clone(), test_in_source == TestInSource::Column);
    for (rec, p) in records.iter().zip(&parsed) {
        builder.push(RawRow {
            unit: &rec[cols.unit],
            cluster: &rec[cols.cluster],
            block: cols.block.map(|b| &rec[b]).filter(|b| !b.is_empty()),
            treated: p.treated,
            cohort: p.cohort,
            grade: p.grade,
            year: p.year,
            outcome: p.outcome,
            tested_in: p.tested_in,
            covariates: p.covariates.clone(),
        });
    }
    if let (TestInSource::ThresholdRule, Some(rule)) = (test_in_source, &schema.test_in_rule) {
        let rule = TestInRule { cutoffs: rule.cutoffs.clone(), defer_one_year: rule.defer_one_year };
        let scores: Vec<f64> = parsed.iter().map(|p| p.score).collect();
        let n_units = builder.n_units();
        rule.apply(builder.observations_mut(), &scores, n_units)?;
        builder.set_has_test_in(true);
    }
    Ok(Ingested { panel: builder.build()?, deleted_rows, test_in_source })
}

/// Writes a panel under the default column names. `block` and `tested_in`
/// are written only when the panel carries them.
pub fn write_panel<W: Write>(panel: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let has_block = !panel.block_labels().is_empty();
    let mut header = vec!["unit", "cluster"];
    if has_block {
        header.push("block");
    }
    header.extend(["treatment", "cohort", "grade", "year", "outcome"]);
    if panel.has_test_in() {
        header.push("tested_in");
    }
    header.extend(panel.covariate_names().iter().map(String::as_str));
    w.write_record(&header)?;

    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for o in panel.observations() {
        fields.clear();
        fields.push(panel.unit_label(o.unit).to_string());
        fields.push(panel.cluster_label(o.cluster).to_string());
        if has_block {
            fields.push(o.block.map(|b| panel.block_label(b).to_string()).unwrap_or_default());
        }
        fields.push(u8::from(o.treated).to_string());
        fields.push(o.cohort.to_string());
        fields.push(o.grade.to_string());
        fields.push(o.year.to_string());
        fields.push(num(o.outcome));
        if panel.has_test_in() {
            fields.push(u8::from(o.tested_in).to_string());
        }
        fields.extend(o.covariates.iter().map(|&x| num(x)));
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io("panel csv", e))?;
    Ok(())
}
