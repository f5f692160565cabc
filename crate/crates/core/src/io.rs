//! CSV ingest and artifact writers.
//!
//! Identifiers are never quoted; fields containing quotes are rejected, and
//! a comma inside an identifier simply produces a wrong field count.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{BdsError, Result};
use crate::model::{
    validate_dataset, Observation, PanelDataset, RawCovariateRow, RawDataset, RawGenotypeRow,
    RawReducedRow, RawSource, INTERCEPT,
};
use crate::sim::EventLog;

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn check_header(found: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<&str> = found.iter().collect();
    if got != expected {
        return Err(BdsError::InvalidInput(format!(
            "{what} header must be `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_f64(field: &str, line: u64, name: &str, problems: &mut Vec<String>) -> Option<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => {
            problems.push(format!("line {line}: {name} `{field}` is not a finite decimal"));
            None
        }
    }
}

fn parse_count(field: &str, line: u64, name: &str, problems: &mut Vec<String>) -> Option<usize> {
    match field.parse::<usize>() {
        Ok(v) => Some(v),
        Err(_) => {
            problems.push(format!("line {line}: {name} `{field}` is not a non-negative integer"));
            None
        }
    }
}

fn check_identifier(field: &str, line: u64, problems: &mut Vec<String>) -> bool {
    if field.contains('"') {
        problems.push(format!("line {line}: quoted identifiers are not supported"));
        false
    } else {
        true
    }
}

fn finish<T>(rows: T, problems: Vec<String>) -> Result<T> {
    if problems.is_empty() {
        Ok(rows)
    } else {
        Err(BdsError::Validation(problems))
    }
}

pub fn parse_genotypes<R: Read>(r: R) -> Result<Vec<RawGenotypeRow>> {
    let mut rdr = reader(r);
    check_header(rdr.headers()?, &["patient_id", "time", "site_id"], "genotype CSV")?;
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            problems.push(format!("line {line}: expected 3 fields, found {}", rec.len()));
            continue;
        }
        if !(check_identifier(&rec[0], line, &mut problems)
            && check_identifier(&rec[2], line, &mut problems))
        {
            continue;
        }
        if rec[0].is_empty() {
            problems.push(format!("line {line}: empty patient_id"));
            continue;
        }
        let Some(time) = parse_f64(&rec[1], line, "time", &mut problems) else {
            continue;
        };
        rows.push(RawGenotypeRow {
            line: line as usize,
            patient_id: rec[0].to_string(),
            time,
            site_id: (!rec[2].is_empty()).then(|| rec[2].to_string()),
        });
    }
    finish(rows, problems)
}

/// Returns covariate names (header minus `patient_id`) and rows.
pub fn parse_covariates<R: Read>(r: R) -> Result<(Vec<String>, Vec<RawCovariateRow>)> {
    let mut rdr = reader(r);
    let header = rdr.headers()?.clone();
    if header.is_empty() || &header[0] != "patient_id" {
        return Err(BdsError::InvalidInput(
            "covariates CSV header must start with `patient_id`".into(),
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut problems = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if name.is_empty() || name.contains(['"', '~', '+']) {
            problems.push(format!("covariate column {} has an invalid name `{name}`", i + 1));
        }
        if names[..i].contains(name) {
            problems.push(format!("covariate `{name}` appears twice in the header"));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if !check_identifier(&rec[0], line, &mut problems) {
            continue;
        }
        let values: Vec<f64> = rec
            .iter()
            .skip(1)
            .filter_map(|f| parse_f64(f, line, "covariate", &mut problems))
            .collect();
        rows.push(RawCovariateRow {
            line: line as usize,
            patient_id: rec[0].to_string(),
            values,
        });
    }
    finish((names, rows), problems)
}

pub fn parse_reduced<R: Read>(r: R) -> Result<Vec<RawReducedRow>> {
    let mut rdr = reader(r);
    check_header(
        rdr.headers()?,
        &["patient_id", "t_start", "t_end", "a", "b", "c_new"],
        "reduced CSV",
    )?;
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 6 {
            problems.push(format!("line {line}: expected 6 fields, found {}", rec.len()));
            continue;
        }
        if !check_identifier(&rec[0], line, &mut problems) {
            continue;
        }
        let t_start = parse_f64(&rec[1], line, "t_start", &mut problems);
        let t_end = parse_f64(&rec[2], line, "t_end", &mut problems);
        let a = parse_count(&rec[3], line, "a", &mut problems);
        let b = parse_count(&rec[4], line, "b", &mut problems);
        let c = parse_count(&rec[5], line, "c_new", &mut problems);
        if let (Some(t_start), Some(t_end), Some(a), Some(b), Some(c_new)) = (t_start, t_end, a, b, c)
        {
            rows.push(RawReducedRow {
                line: line as usize,
                patient_id: rec[0].to_string(),
                t_start,
                t_end,
                a,
                b,
                c_new,
            });
        }
    }
    finish(rows, problems)
}

/// Where the observations come from.
#[derive(Debug, Clone, Copy)]
pub enum ObservationSource<'a> {
    Genotypes(&'a Path),
    Reduced(&'a Path),
}

/// Read, parse and validate a dataset from files.
pub fn load_dataset(source: ObservationSource<'_>, covariates: Option<&Path>) -> Result<PanelDataset> {
    let (covariate_names, covariate_rows) = match covariates {
        Some(p) => parse_covariates(File::open(p)?)?,
        None => (Vec::new(), Vec::new()),
    };
    let source = match source {
        ObservationSource::Genotypes(p) => RawSource::Genotypes(parse_genotypes(File::open(p)?)?),
        ObservationSource::Reduced(p) => RawSource::Reduced(parse_reduced(File::open(p)?)?),
    };
    validate_dataset(RawDataset {
        covariate_names,
        covariates: covariate_rows,
        source,
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Long-form genotype CSV. Empty genotypes get one row with an empty site.
pub fn write_genotypes<W: Write>(w: W, patients: &[(String, Vec<Observation>)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "time", "site_id"])?;
    for (id, obs) in patients {
        for o in obs {
            let t = fmt_f64(o.time);
            if o.genotype.is_empty() {
                wtr.write_record([id.as_str(), &t, ""])?;
            }
            for site in o.genotype.sites() {
                wtr.write_record([id.as_str(), &t, site])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Covariates CSV. The intercept column is dropped if present.
pub fn write_covariates<W: Write>(w: W, dataset: &PanelDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let keep: Vec<usize> = (0..dataset.covariate_names.len())
        .filter(|&i| dataset.covariate_names[i] != INTERCEPT)
        .collect();
    let mut header = vec!["patient_id".to_string()];
    header.extend(keep.iter().map(|&i| dataset.covariate_names[i].clone()));
    wtr.write_record(&header)?;
    for p in &dataset.patients {
        let mut row = vec![p.id.clone()];
        row.extend(keep.iter().map(|&i| fmt_f64(p.covariates[i])));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_reduced<W: Write>(w: W, dataset: &PanelDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "t_start", "t_end", "a", "b", "c_new"])?;
    for p in &dataset.patients {
        for ti in &p.intervals {
            let iv = ti.interval;
            wtr.write_record([
                p.id.clone(),
                fmt_f64(ti.t_start),
                fmt_f64(ti.t_end),
                iv.a.to_string(),
                iv.b.to_string(),
                iv.c_new.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Events CSV, one log per patient, prefixed with the patient id.
pub fn write_events<W: Write>(w: W, logs: &[(String, EventLog)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "time", "event", "site_from", "site_to"])?;
    for (id, log) in logs {
        for e in &log.events {
            wtr.write_record([
                id.clone(),
                fmt_f64(e.time),
                e.kind.name().to_string(),
                e.site_from.clone().unwrap_or_default(),
                e.site_to.clone().unwrap_or_default(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// `l,m,<col>...` dump of one or more `n × n` matrices.
pub fn write_matrix<W: Write>(w: W, n: usize, columns: &[(&str, &[f64])]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["l".to_string(), "m".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.to_string()));
    wtr.write_record(&header)?;
    for l in 0..n {
        for m in 0..n {
            let mut row = vec![l.to_string(), m.to_string()];
            row.extend(columns.iter().map(|(_, v)| format!("{:.12e}", v[l * n + m])));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Genotype;

    #[test]
    fn genotype_rows_parse() {
        let text = "patient_id,time,site_id\np1,0,a\np1,0,b\np1,1.5,\n";
        let rows = parse_genotypes(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].site_id, None);
        assert_eq!(rows[1].line, 3);
    }

    #[test]
    fn quotes_and_bad_fields_rejected() {
        let text = "patient_id,time,site_id\n\"p1\",0,a\np2,x,a\np3,0,a,b\n";
        let err = parse_genotypes(text.as_bytes()).unwrap_err();
        let BdsError::Validation(p) = err else { panic!() };
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(parse_genotypes("id,time,site\n".as_bytes()).is_err());
        assert!(parse_reduced("patient_id,t_start,t_end,a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn covariates_parse() {
        let (names, rows) = parse_covariates("patient_id,EI,HIV\np1,1,0\np2,0,1\n".as_bytes()).unwrap();
        assert_eq!(names, vec!["EI", "HIV"]);
        assert_eq!(rows[1].values, vec![0.0, 1.0]);
    }

    #[test]
    fn genotype_round_trip() {
        let obs = vec![
            Observation {
                time: 0.0,
                genotype: ["x", "y"].into_iter().collect(),
            },
            Observation {
                time: 0.5,
                genotype: Genotype::new(),
            },
        ];
        let mut buf = Vec::new();
        write_genotypes(&mut buf, &[("p".into(), obs)]).unwrap();
        let rows = parse_genotypes(buf.as_slice()).unwrap();
        let ds = validate_dataset(RawDataset {
            source: RawSource::Genotypes(rows),
            ..Default::default()
        })
        .unwrap();
        let iv = ds.patients[0].intervals[0].interval;
        assert_eq!((iv.a, iv.b, iv.c_new), (2, 0, 0));
    }

    #[test]
    fn matrix_dump_layout() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, 2, &[("p", &[0.5, 0.25, 0.125, 0.125])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "l,m,p");
        assert!(lines[2].starts_with("0,1,2.5"));
    }
}
