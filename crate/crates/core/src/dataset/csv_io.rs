//! CSV layout: any number of feature columns, one `target` column and one
//! `bias:<name>` column per bias attribute. Labels are nonnegative integers.

use std::collections::BTreeMap;
use std::path::Path;

use super::{BiasAttr, Dataset, Example, Provenance, TaskSchema};
use crate::error::{Error, Result};

/// Overrides for label cardinalities that would otherwise be inferred as
/// `max + 1` (and at least 2).
#[derive(Debug, Clone, Default)]
pub struct SchemaHints {
    pub num_classes: Option<usize>,
    pub cardinalities: BTreeMap<String, usize>,
}

enum Column {
    Feature,
    Target,
    Bias(usize),
}

pub fn load_csv(path: impl AsRef<Path>, hints: &SchemaHints) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut dataset = read_csv(file, hints)?;
    dataset.provenance.source = Some(path.display().to_string());
    Ok(dataset)
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R, hints: &SchemaHints) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.is_empty() {
        return Err(Error::Csv {
            line: 1,
            message: "missing header row".into(),
        });
    }

    let mut bias_names = Vec::new();
    let mut columns = Vec::with_capacity(header.len());
    let mut has_target = false;
    for name in header.iter() {
        let name = name.trim();
        if name == "target" {
            if has_target {
                return Err(Error::Schema("duplicate 'target' column".into()));
            }
            has_target = true;
            columns.push(Column::Target);
        } else if let Some(attr) = name.strip_prefix("bias:") {
            columns.push(Column::Bias(bias_names.len()));
            bias_names.push(attr.to_string());
        } else {
            columns.push(Column::Feature);
        }
    }
    if !has_target {
        return Err(Error::Schema("missing 'target' column".into()));
    }
    let feature_dim = columns.iter().filter(|c| matches!(c, Column::Feature)).count();

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Csv {
            line,
            message: e.to_string(),
        })?;
        if record.len() != columns.len() {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, found {}", columns.len(), record.len()),
            });
        }
        let mut features = Vec::with_capacity(feature_dim);
        let mut target = 0;
        let mut bias = vec![0; bias_names.len()];
        for ((column, field), name) in columns.iter().zip(record.iter()).zip(header.iter()) {
            let field = field.trim();
            match column {
                Column::Feature => {
                    let v: f64 = field.parse().map_err(|_| Error::Csv {
                        line,
                        message: format!("column '{name}': '{field}' is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Csv {
                            line,
                            message: format!("column '{name}': non-finite value"),
                        });
                    }
                    features.push(v);
                }
                Column::Target | Column::Bias(_) => {
                    let v: usize = field.parse().map_err(|_| Error::Csv {
                        line,
                        message: format!("column '{name}': '{field}' is not a nonnegative integer label"),
                    })?;
                    match column {
                        Column::Target => target = v,
                        Column::Bias(a) => bias[*a] = v,
                        Column::Feature => unreachable!(),
                    }
                }
            }
        }
        rows.push(Example { features, target, bias });
    }

    let resolve = |observed: usize, hint: Option<usize>, what: &str| -> Result<usize> {
        let inferred = observed.max(2);
        match hint {
            Some(h) if h < observed => Err(Error::Schema(format!(
                "{what}: hint {h} is smaller than observed label range {observed}"
            ))),
            Some(h) => Ok(h),
            None => Ok(inferred),
        }
    };
    let max_target = rows.iter().map(|e| e.target + 1).max().unwrap_or(0);
    let num_classes = resolve(max_target, hints.num_classes, "target")?;
    let mut bias_attrs = Vec::with_capacity(bias_names.len());
    for (a, name) in bias_names.iter().enumerate() {
        let observed = rows.iter().map(|e| e.bias[a] + 1).max().unwrap_or(0);
        bias_attrs.push(BiasAttr {
            name: name.clone(),
            cardinality: resolve(observed, hints.cardinalities.get(name).copied(), name)?,
        });
    }
    let schema = TaskSchema::new(num_classes, bias_attrs, feature_dim)?;
    Dataset::new(schema, rows, Provenance::default())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, file)
}

pub(crate) fn write_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let schema = dataset.schema();
    let header: Vec<String> = (0..schema.feature_dim)
        .map(|d| format!("f{d}"))
        .chain(std::iter::once("target".to_string()))
        .chain(schema.bias_attrs.iter().map(|a| format!("bias:{}", a.name)))
        .collect();
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(&header).map_err(to_io)?;
    for ex in dataset.examples() {
        // `Display` for f64 is the shortest representation that parses back exactly.
        let record: Vec<String> = ex
            .features
            .iter()
            .map(|v| v.to_string())
            .chain(std::iter::once(ex.target.to_string()))
            .chain(ex.bias.iter().map(|b| b.to_string()))
            .collect();
        wtr.write_record(&record).map_err(to_io)?;
    }
    wtr.flush()?;
    Ok(())
}
