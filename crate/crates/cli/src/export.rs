//! Plot-ready CSV files. Columns are fixed; see the README for the layout.

use std::error::Error;
use std::path::Path;

use covsteer::monte_carlo::{McReport, TrialOutput};

type Res<T> = Result<T, Box<dyn Error>>;

const HISTOGRAM_BINS: usize = 50;

fn writer(path: &Path, header: &[&str]) -> Res<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

fn f(v: f64) -> String {
    v.to_string()
}

/// One row per RK4 step of every successful trial, plus its terminal state.
pub fn write_trials(path: &Path, outputs: &[TrialOutput]) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let Some(first) = outputs.iter().find(|o| !o.dense.is_empty()) else {
        writer(path, &["trial", "t", "psi"])?.flush()?;
        return Ok(());
    };
    let n = first.dense[0].state.len();
    let m = first.dense[0].control.len();
    let mut header = vec!["trial".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("psi".into());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for o in outputs.iter().filter(|o| o.succeeded()) {
        for s in &o.dense {
            let mut row = vec![o.trial.to_string(), f(s.t)];
            row.extend(s.state.iter().map(|v| f(*v)));
            row.extend(s.control.iter().map(|v| f(*v)));
            row.push(f(s.field));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn envelope_rows(
    w: &mut csv::Writer<std::fs::File>,
    label: &str,
    source: &str,
    times: &[(f64, f64)],
    mean: &[Vec<f64>],
    cov: &[Vec<Vec<f64>>],
) -> Res<()> {
    for (k, ((t0, t1), (mu, c))) in times.iter().zip(mean.iter().zip(cov)).enumerate() {
        for (i, m) in mu.iter().enumerate() {
            let s3 = 3.0 * c[i][i].max(0.0).sqrt();
            w.write_record([
                label.to_string(),
                source.to_string(),
                k.to_string(),
                f(*t0),
                f(*t1),
                i.to_string(),
                f(*m),
                f(m - s3),
                f(m + s3),
            ])?;
        }
    }
    Ok(())
}

/// Writes every CSV and returns the file names.
pub fn write_report_csvs(dir: &Path, reports: &[McReport]) -> Res<Vec<&'static str>> {
    let header = ["label", "source", "step", "t_start", "t_end", "component", "mean", "lower_3sigma", "upper_3sigma"];
    let mut states = writer(&dir.join("state_envelopes.csv"), &header)?;
    let mut controls = writer(&dir.join("control_fan.csv"), &header)?;
    let mut density = writer(
        &dir.join("density_envelope.csv"),
        &["label", "knot", "t", "mc_mean", "mc_std", "lincov_mean", "lincov_std"],
    )?;
    let mut constraints = writer(
        &dir.join("constraints.csv"),
        &["label", "name", "target", "step", "allowed", "violations", "samples", "rate", "ci_low", "ci_high"],
    )?;
    let mut percentiles = writer(
        &dir.join("percentiles.csv"),
        &["label", "functional", "percentile", "value", "samples", "excluded"],
    )?;

    for (ri, r) in reports.iter().enumerate() {
        let label = if r.label.is_empty() { format!("report{ri}") } else { r.label.clone() };
        let knot_times: Vec<(f64, f64)> = r.knots.iter().map(|&t| (t, t)).collect();
        let step_times: Vec<(f64, f64)> = r.knots.windows(2).map(|w| (w[0], w[1])).collect();
        envelope_rows(&mut states, &label, "monte_carlo", &knot_times, &r.state_mean, &r.state_cov)?;
        envelope_rows(&mut controls, &label, "monte_carlo", &step_times, &r.control_mean, &r.control_cov)?;
        if let Some(lc) = &r.lincov {
            envelope_rows(&mut states, &label, "linear_covariance", &knot_times, &lc.state_mean, &lc.state_cov)?;
            envelope_rows(&mut controls, &label, "linear_covariance", &step_times, &lc.control_mean, &lc.control_cov)?;
        }
        for (k, t) in r.knots.iter().enumerate() {
            let (lm, ls) = r
                .lincov
                .as_ref()
                .map(|lc| (f(lc.field_mean[k]), f(lc.field_std[k])))
                .unwrap_or_default();
            density.write_record([
                label.clone(),
                k.to_string(),
                f(*t),
                f(r.field_mean[k]),
                f(r.field_std[k]),
                lm,
                ls,
            ])?;
        }
        for c in &r.constraints {
            constraints.write_record([
                label.clone(),
                c.name.clone(),
                format!("{:?}", c.target).to_lowercase(),
                c.step.to_string(),
                f(c.allowed),
                c.violations.to_string(),
                c.samples.to_string(),
                f(c.rate),
                f(c.ci_low),
                f(c.ci_high),
            ])?;
        }
        if let Some(t) = &r.terminal {
            for (q, v) in &t.percentiles {
                percentiles.write_record([
                    label.clone(),
                    t.name.clone(),
                    f(*q),
                    f(*v),
                    t.samples.len().to_string(),
                    t.excluded.to_string(),
                ])?;
            }
        }
    }
    for w in [&mut states, &mut controls, &mut density, &mut constraints, &mut percentiles] {
        w.flush()?;
    }

    let mut names = vec![
        "state_envelopes.csv",
        "control_fan.csv",
        "density_envelope.csv",
        "constraints.csv",
        "percentiles.csv",
    ];
    if write_histogram(&dir.join("terminal_histogram.csv"), reports)? {
        names.push("terminal_histogram.csv");
    }
    Ok(names)
}

/// Shared bins over all reports' terminal samples; `false` if none have any.
fn write_histogram(path: &Path, reports: &[McReport]) -> Res<bool> {
    let all: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.terminal.as_ref())
        .flat_map(|t| t.samples.iter().copied())
        .collect();
    if all.is_empty() {
        return Ok(false);
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut w = writer(path, &["label", "functional", "bin_low", "bin_high", "count", "density"])?;
    for (ri, r) in reports.iter().enumerate() {
        let Some(t) = &r.terminal else { continue };
        let label = if r.label.is_empty() { format!("report{ri}") } else { r.label.clone() };
        let mut counts = [0usize; HISTOGRAM_BINS];
        for v in &t.samples {
            let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        let total = t.samples.len().max(1) as f64;
        for (b, c) in counts.iter().enumerate() {
            let low = lo + b as f64 * width;
            w.write_record([
                label.clone(),
                t.name.clone(),
                f(low),
                f(low + width),
                c.to_string(),
                f(*c as f64 / (total * width)),
            ])?;
        }
    }
    w.flush()?;
    Ok(true)
}
