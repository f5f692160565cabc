use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use bds_core::baselines::{fit_direct, fit_fm, FmCounts, FmOptions, NelderMeadOptions};
use bds_core::em::{fit_em, FitOptions, FitResult};
use bds_core::io::{load_dataset, write_covariates, write_events, write_genotypes, write_matrix, write_reduced, ObservationSource};
use bds_core::model::{ModelSpec, PanelDataset, Rate, RegressionCoefficients, INTERCEPT};
use bds_core::sim::{
    mc_paths, mc_transition, simulate_covariates, simulate_simple, uniformization_probs,
    CovariateRecipe, SimpleRecipe, SimulatedPanel, DEFAULT_GENOME_SIZE,
};
use bds_core::spectral::{choose_grid_size, invert_moments, invert_probabilities, SpectralOptions};
use serde::Serialize;

use crate::config::{Data, DataSource, FitSettings, Method, Oracle, QuerySettings, Recipe, SimSettings};

pub const DEFAULT_MODEL: &str = "lambda~1, nu~1, mu~1";

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotConverged,
}

pub fn load(data: &Data) -> Result<PanelDataset> {
    let src = match &data.source {
        DataSource::Genotypes(p) => ObservationSource::Genotypes(p),
        DataSource::Reduced(p) => ObservationSource::Reduced(p),
    };
    Ok(load_dataset(src, data.covariates.as_deref())?)
}

fn is_intercept_only(model: &ModelSpec) -> bool {
    Rate::ALL.iter().all(|&r| model.term_names(r) == [INTERCEPT])
}

fn fit_options(s: &FitSettings, se: bool) -> FitOptions {
    let mut o = FitOptions {
        tol: s.tol,
        grid: s.grid,
        accelerate: s.accelerate,
        n_units: s.n_units,
        compute_se: se,
        ..FitOptions::default()
    };
    if let Some(m) = s.max_iter {
        o.max_iter = m;
    }
    if let Some(r) = s.rtol {
        o.genfun.rtol = r;
    }
    if let Some(a) = s.atol {
        o.genfun.atol = a;
    }
    o
}

pub fn run_fit(ds: &PanelDataset, model: &ModelSpec, s: &FitSettings, se: bool) -> Result<FitResult> {
    let start = match &s.start {
        Some(v) => Some(RegressionCoefficients::unflatten(v, model.widths())?),
        None => None,
    };
    let fit = match s.method {
        Method::Em => fit_em(ds, model, start.as_ref(), &fit_options(s, se), None)?,
        Method::Fm => {
            if !is_intercept_only(model) {
                bail!(bds_core::BdsError::InvalidInput(format!(
                    "the fm method fits constant rates only; got '{}'",
                    model.describe()
                )));
            }
            let mut o = FmOptions {
                n_units: s.n_units,
                ..FmOptions::default()
            };
            if let Some(m) = s.max_iter {
                o.max_iter = m;
            }
            fit_fm(ds, &o)?
        }
        Method::Direct => {
            let nm = NelderMeadOptions {
                tol: s.tol,
                max_iter: s.max_iter.unwrap_or(2000),
                ..NelderMeadOptions::default()
            };
            fit_direct(ds, model, start.as_ref(), &nm, &fit_options(s, se))?
        }
    };
    Ok(fit)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

pub fn summary_text(fit: &FitResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method: {}", fit.method.name());
    let _ = writeln!(s, "model: {}", fit.model);
    let _ = writeln!(s, "log-likelihood: {:.6}", fit.loglik);
    let _ = writeln!(s, "parameters (k): {}", fit.k);
    let _ = writeln!(s, "units (n): {}", fit.n_units);
    let _ = writeln!(s, "BIC: {:.4}", fit.bic);
    let _ = writeln!(
        s,
        "converged: {} after {} iterations",
        if fit.converged { "yes" } else { "no" },
        fit.n_iterations
    );
    if let Some(c) = &fit.fm_counts {
        let _ = writeln!(
            s,
            "intervals: {} none, {} birth, {} shift, {} death, {} dropped",
            c.n_none, c.n_birth, c.n_shift, c.n_death, c.dropped
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8}{:<12}{:>12}{:>12}{:>26}", "rate", "term", "estimate", "std.err", "95% CI");
    for c in &fit.coefficients {
        let ci = match (c.ci_low, c.ci_high) {
            (Some(lo), Some(hi)) => format!("[{lo:.6}, {hi:.6}]"),
            _ => "NA".into(),
        };
        let _ = writeln!(
            s,
            "{:<8}{:<12}{:>12.6}{:>12}{:>26}",
            c.rate.name(),
            c.term,
            c.estimate,
            fmt_opt(c.std_error),
            ci
        );
    }
    let rate_rows: Vec<String> = Rate::ALL
        .iter()
        .filter_map(|&r| {
            fit.rate_estimate(r).map(|(v, ci)| {
                let ci = ci
                    .map(|(lo, hi)| format!("[{lo:.6}, {hi:.6}]"))
                    .unwrap_or_else(|| "NA".into());
                format!("{:<8}{:>12.6}{:>26}", r.name(), v, ci)
            })
        })
        .collect();
    if !rate_rows.is_empty() {
        let _ = writeln!(s, "\nrate-scale estimates:");
        for row in rate_rows {
            let _ = writeln!(s, "{row}");
        }
    }
    if let Some(d) = &fit.se_diagnostics {
        let _ = writeln!(s, "\nstandard errors: {d}");
    }
    for w in &fit.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn write_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iter,loglik,delta")?;
    for r in &fit.trace {
        let d = r.delta.map(|d| format!("{d:.12e}")).unwrap_or_default();
        writeln!(w, "{},{:.12e},{}", r.iter, r.loglik, d)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit(data: &Data, model: Option<&str>, s: &FitSettings) -> Result<Status> {
    let ds = load(data)?;
    let model = ModelSpec::parse(model.unwrap_or(DEFAULT_MODEL), &ds.covariate_names)?;
    let fit = run_fit(&ds, &model, s, s.se)?;
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let mut w = create(&s.out.join("fit.json"))?;
    serde_json::to_writer_pretty(&mut w, &fit)?;
    writeln!(w)?;
    w.flush()?;
    write_trace(&s.out.join("trace.csv"), &fit)?;
    let text = summary_text(&fit);
    fs::write(s.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(if fit.converged { Status::Ok } else { Status::NotConverged })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub model: String,
    pub k: Option<usize>,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

pub fn compare_rows(ds: &PanelDataset, models: &[String], s: &FitSettings) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = models
        .iter()
        .map(|text| {
            let attempt = ModelSpec::parse(text, &ds.covariate_names)
                .map_err(anyhow::Error::from)
                .and_then(|m| run_fit(ds, &m, s, false).map(|f| (m, f)));
            match attempt {
                Ok((m, f)) => CompareRow {
                    model: m.describe(),
                    k: Some(f.k),
                    loglik: Some(f.loglik),
                    bic: Some(f.bic),
                    converged: Some(f.converged),
                    error: None,
                },
                Err(e) => CompareRow {
                    model: text.clone(),
                    k: None,
                    loglik: None,
                    bic: None,
                    converged: None,
                    error: Some(format!("{e:#}")),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.bic, b.bic) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn compare(data: &Data, models: &[String], s: &FitSettings) -> Result<Status> {
    if models.len() < 2 {
        bail!(bds_core::BdsError::InvalidInput(format!(
            "compare needs at least two models, got {}",
            models.len()
        )));
    }
    let ds = load(data)?;
    let rows = compare_rows(&ds, models, s);
    fs::create_dir_all(&s.out)?;
    let mut w = create(&s.out.join("compare.csv"))?;
    writeln!(w, "model,k,loglik,bic,converged,error")?;
    let mut text = format!("{:<44}{:>4}{:>16}{:>14}  {}\n", "model", "k", "loglik", "BIC", "status");
    let mut all_converged = true;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            csv_field(&r.model),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.loglik.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.bic.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.converged.map(|v| v.to_string()).unwrap_or_default(),
            csv_field(r.error.as_deref().unwrap_or(""))
        )?;
        let status = match (&r.error, r.converged) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(false)) => "not converged".into(),
            _ => "ok".into(),
        };
        all_converged &= r.converged == Some(true);
        let _ = writeln!(
            text,
            "{:<44}{:>4}{:>16}{:>14}  {}",
            r.model,
            r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            r.loglik.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.bic.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            status
        );
    }
    w.flush()?;
    fs::write(s.out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(if all_converged { Status::Ok } else { Status::NotConverged })
}

fn query_grid(q: &QuerySettings) -> usize {
    q.grid.unwrap_or_else(|| choose_grid_size(q.a))
}

fn spectral_opts(q: &QuerySettings) -> SpectralOptions {
    SpectralOptions {
        allow_alias: q.allow_alias,
        ..SpectralOptions::default()
    }
}

fn output(q: &QuerySettings) -> Result<Box<dyn Write>> {
    Ok(match &q.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

pub fn probs(q: &QuerySettings) -> Result<Status> {
    let n = query_grid(q);
    let tm = invert_probabilities(q.a, q.t, &q.rates, n, &spectral_opts(q))?;
    let mut cols: Vec<(String, Vec<f64>)> = vec![("p".into(), tm.p.clone())];
    match q.oracle {
        Some(Oracle::Unif) => {
            let row = uniformization_probs(q.a, q.t, &q.rates, (q.a, n - 1))?;
            let v = (0..n * n).map(|i| row.get(i / n, i % n)).collect();
            cols.push(("unif".into(), v));
        }
        Some(Oracle::Mc) => {
            let mc = mc_transition(q.a, q.t, &q.rates, q.reps, q.seed, DEFAULT_GENOME_SIZE)?;
            let cell = |i: usize| (i / n, i % n);
            cols.push(("mc".into(), (0..n * n).map(|i| { let (l, m) = cell(i); mc.frequency(l, m) }).collect()));
            cols.push(("mc_lo".into(), (0..n * n).map(|i| { let (l, m) = cell(i); mc.interval(l, m).0 }).collect()));
            cols.push(("mc_hi".into(), (0..n * n).map(|i| { let (l, m) = cell(i); mc.interval(l, m).1 }).collect()));
        }
        None => {}
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    write_matrix(output(q)?, n, &refs)?;
    if tm.tail > 0.0 && q.allow_alias {
        eprintln!("note: upper-half tail mass {:.3e} at N={n}", tm.tail);
    }
    Ok(Status::Ok)
}

pub fn moments(q: &QuerySettings) -> Result<Status> {
    let n = query_grid(q);
    let mm = invert_moments(q.a, q.t, &q.rates, n, &spectral_opts(q))?;
    let mut cols: Vec<(String, Vec<f64>)> = vec![
        ("m_plus".into(), mm.m_plus.clone()),
        ("m_shift".into(), mm.m_shift.clone()),
        ("m_minus".into(), mm.m_minus.clone()),
        ("m_star".into(), mm.m_star.clone()),
    ];
    match q.oracle {
        Some(Oracle::Unif) => bail!(bds_core::BdsError::InvalidInput(
            "the unif oracle covers probabilities only; use --oracle mc for moments".into()
        )),
        Some(Oracle::Mc) => {
            let paths = mc_paths(q.a, q.t, &q.rates, q.reps, q.seed, DEFAULT_GENOME_SIZE)?;
            let mut sum = vec![[0.0f64; 4]; n * n];
            let mut sq = vec![[0.0f64; 4]; n * n];
            for ((l, m), st) in &paths {
                if *l >= n || *m >= n {
                    continue;
                }
                let x = st.as_array();
                for k in 0..4 {
                    sum[l * n + m][k] += x[k];
                    sq[l * n + m][k] += x[k] * x[k];
                }
            }
            let r = q.reps as f64;
            for (k, name) in ["mc_plus", "mc_shift", "mc_minus", "mc_star"].iter().enumerate() {
                let mean: Vec<f64> = sum.iter().map(|s| s[k] / r).collect();
                let se: Vec<f64> = sum
                    .iter()
                    .zip(&sq)
                    .map(|(s, s2)| {
                        let m = s[k] / r;
                        ((s2[k] / r - m * m).max(0.0) / (r - 1.0).max(1.0)).sqrt()
                    })
                    .collect();
                cols.push((name.to_string(), mean));
                cols.push((format!("{name}_se"), se));
            }
        }
        None => {}
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    write_matrix(output(q)?, n, &refs)?;
    Ok(Status::Ok)
}

fn write_panel(dir: &Path, panel: &SimulatedPanel, with_covariates: bool) -> Result<Vec<String>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(BufWriter<File>) -> bds_core::Result<()>| -> Result<()> {
        f(create(&dir.join(name))?)?;
        files.push(name.to_string());
        Ok(())
    };
    put("genotypes.csv", &|w| write_genotypes(w, &panel.segments))?;
    put("reduced.csv", &|w| write_reduced(w, &panel.dataset))?;
    put("events.csv", &|w| write_events(w, &panel.events))?;
    if with_covariates {
        let segs = PanelDataset::from_intervals(
            panel.dataset.covariate_names.clone(),
            panel
                .segments
                .iter()
                .zip(&panel.segment_covariates)
                .map(|((id, _), z)| (id.clone(), z.clone(), Vec::new()))
                .collect(),
        )?;
        put("covariates.csv", &|w| write_covariates(w, &segs))?;
        put("reduced_covariates.csv", &|w| write_covariates(w, &panel.dataset))?;
    }
    Ok(files)
}

pub fn simulate(s: &SimSettings) -> Result<Status> {
    let (panel, with_cov) = match s.recipe {
        Recipe::Simple => {
            let mut r = SimpleRecipe::default();
            if let Some(n) = s.n {
                r.n_intervals = n;
            }
            if let Some(dt) = s.dt {
                r.dt = dt;
            }
            if let Some(rates) = s.rates {
                r.rates = rates;
            }
            if let Some(g) = s.genome_size {
                r.genome_size = g;
            }
            (simulate_simple(&r, s.seed)?, false)
        }
        Recipe::Covariate => {
            if s.rates.is_some() {
                bail!(bds_core::BdsError::InvalidInput(
                    "--rates applies to the simple recipe only".into()
                ));
            }
            let mut r = CovariateRecipe::default();
            if let Some(n) = s.n {
                r.n_patients = n;
            }
            if let Some(dt) = s.dt {
                r.dt = dt;
            }
            if let Some(g) = s.genome_size {
                r.genome_size = g;
            }
            (simulate_covariates(&r, s.seed)?, true)
        }
    };
    let files = write_panel(&s.out, &panel, with_cov)?;
    println!("seed: {}", s.seed);
    for f in files {
        println!("wrote {}", s.out.join(f).display());
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    covariate_names: Vec<String>,
    summary: bds_core::model::DatasetSummary,
    fm_counts: FmCounts,
}

pub fn validate(data: &Data) -> Result<Status> {
    let ds = load(data)?;
    let report = ValidationReport {
        valid: true,
        covariate_names: ds.covariate_names.clone(),
        summary: ds.summary(),
        fm_counts: FmCounts::from_data(&ds),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Status::Ok)
}
