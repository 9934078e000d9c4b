//! Dataset CSV: `x0,...,x{d-1},label,domain`, one row per sample.

use std::io::{BufRead, Write};

use super::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_csv(w: &mut impl Write, datasets: &[&DomainDataset]) -> Result<()> {
    let d = datasets.first().map_or(0, |ds| ds.dim());
    if datasets.iter().any(|ds| ds.dim() != d) {
        return Err(Error::shape("write_csv", "datasets have different feature dimensions"));
    }
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push("domain".into());
    writeln!(w, "{}", header.join(","))?;
    for ds in datasets {
        for r in 0..ds.len() {
            let mut fields: Vec<String> = ds.features.row(r).iter().map(|v| v.to_string()).collect();
            fields.push(ds.labels[r].to_string());
            fields.push(ds.domain.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::invalid("csv", format!("line {line}: {}", detail.into()))
}

/// Reads a file written by [`write_csv`] holding a single domain.
pub fn read_csv(r: impl BufRead, classes: usize) -> Result<DomainDataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Empty("csv file"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(bad(1, "header must end with label,domain"));
    }
    let d = cols.len() - 2;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(bad(i + 2, format!("expected {} fields, got {}", d + 2, fields.len())));
        }
        for f in &fields[..d] {
            values.push(f.trim().parse::<f64>().map_err(|e| bad(i + 2, e.to_string()))?);
        }
        labels.push(fields[d].trim().parse::<i64>().map_err(|e| bad(i + 2, e.to_string()))?);
        let tag = match fields[d + 1].trim() {
            "source" => DomainTag::Source,
            "target" => DomainTag::Target,
            other => return Err(bad(i + 2, format!("unknown domain `{other}`"))),
        };
        if domain.is_some_and(|t| t != tag) {
            return Err(bad(i + 2, "file mixes domains"));
        }
        domain = Some(tag);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("csv dataset"));
    }
    DomainDataset::new(Tensor::matrix(n, d, values)?, labels, domain.unwrap_or(DomainTag::Source), classes)
}
