//! File formats: CSV tables, the flat model file and the summary report.
//!
//! All files are UTF-8 with LF line endings and carry a comment header
//! with the config fingerprint and seed. Floats use Rust's shortest
//! round-trip decimal formatting; infinities serialize as `inf`/`-inf`.
//! Writes go through a temp file plus rename, so readers never observe a
//! partial file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::experiment::{ExperimentOutput, Summary};
use crate::gp::TrainingSet;
use crate::kernels::{Hyperparameters, InputPoint};
use crate::quality::RhoGapSample;
use crate::sim::SimResult;

pub const TRAINING_FILE: &str = "training.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const RHO_FIELD_FILE: &str = "rho_field.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes atomically: the content lands in `<path>.tmp` first and is
/// renamed over the target.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = PathBuf::from(path);
    let mut name = tmp
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    // Display for f64 is shortest round-trip; inf prints as "inf"
    format!("{v}")
}

/// Comment header common to every artifact.
#[derive(Debug, Clone, Default)]
pub struct FileMeta {
    pub fingerprint: String,
    pub seed: u64,
    pub extra: Vec<(String, String)>,
}

impl FileMeta {
    fn header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_fingerprint = {}", self.fingerprint);
        let _ = writeln!(s, "# seed = {}", self.seed);
        for (k, v) in &self.extra {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }
}

/// Training-set CSV: comment header, then `x1,...,xd,u,y` rows.
pub fn write_training_csv(path: &Path, data: &TrainingSet, meta: &FileMeta) -> Result<()> {
    let d = data.dim().unwrap_or(2);
    let mut s = meta.header();
    let _ = writeln!(s, "# s_on2 = {}", fmt(data.s_on2));
    for i in 1..=d {
        let _ = write!(s, "x{i},");
    }
    let _ = writeln!(s, "u,y");
    for (p, y) in data.inputs.iter().zip(&data.targets) {
        for v in p.x.iter() {
            let _ = write!(s, "{},", fmt(*v));
        }
        let _ = writeln!(s, "{},{}", fmt(p.u), fmt(*y));
    }
    atomic_write(path, &s)
}

pub fn read_training_csv(path: &Path) -> Result<TrainingSet> {
    let text = fs::read_to_string(path)?;
    let perr = |msg: String| Error::Parse {
        path: path.display().to_string(),
        message: msg,
    };
    let mut s_on2 = 0.0f64;
    let mut header: Option<Vec<String>> = None;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                if k.trim() == "s_on2" {
                    s_on2 = v
                        .trim()
                        .parse()
                        .map_err(|_| perr(format!("line {}: bad s_on2", lineno + 1)))?;
                }
            }
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|c| c.trim().to_string()).collect());
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let ncols = header.as_ref().map(|h| h.len()).unwrap_or(0);
        if cols.len() != ncols {
            return Err(perr(format!(
                "line {}: expected {ncols} columns, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        let vals: Vec<f64> = cols
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(format!("line {}: non-numeric value", lineno + 1)))?;
        let d = vals.len() - 2;
        if d == 0 {
            return Err(perr(format!("line {}: need at least x1,u,y", lineno + 1)));
        }
        inputs.push(InputPoint::new(
            DVector::from_row_slice(&vals[..d]),
            vals[d],
        )?);
        targets.push(vals[d + 1]);
    }
    TrainingSet::new(inputs, targets, s_on2)
}

/// Self-describing model file: hyperparameters and prior identifier up
/// front, then the training set. Factorizations are rebuilt on load.
pub fn write_model(
    path: &Path,
    data: &TrainingSet,
    h: &Hyperparameters,
    prior: &str,
    meta: &FileMeta,
) -> Result<()> {
    let mut s = meta.header();
    let _ = writeln!(s, "format = rhogap-model-v1");
    let _ = writeln!(s, "prior = {prior}");
    let _ = writeln!(s, "s_f2 = {}", fmt(h.s_f2));
    let _ = writeln!(s, "s_g2 = {}", fmt(h.s_g2));
    let _ = writeln!(s, "l_f = {}", fmt(h.l_f));
    let _ = writeln!(s, "l_g = {}", fmt(h.l_g));
    let _ = writeln!(s, "s_on2 = {}", fmt(h.s_on2));
    let _ = writeln!(s, "n = {}", data.len());
    let d = data.dim().unwrap_or(2);
    let _ = writeln!(s, "d_x = {d}");
    let _ = writeln!(s, "data:");
    for (p, y) in data.inputs.iter().zip(&data.targets) {
        for v in p.x.iter() {
            let _ = write!(s, "{},", fmt(*v));
        }
        let _ = writeln!(s, "{},{}", fmt(p.u), fmt(*y));
    }
    atomic_write(path, &s)
}

/// Loads a model file: training set, hyperparameters and prior name.
pub fn read_model(path: &Path) -> Result<(TrainingSet, Hyperparameters, String)> {
    let text = fs::read_to_string(path)?;
    let perr = |msg: String| Error::Parse {
        path: path.display().to_string(),
        message: msg,
    };
    let mut prior = String::new();
    let mut fields = std::collections::HashMap::new();
    let mut n: Option<usize> = None;
    let mut d_x: Option<usize> = None;
    let mut lines = text.lines().enumerate();
    let mut saw_format = false;
    for (lineno, raw) in lines.by_ref() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "data:" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr(format!("line {}: expected 'key = value'", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "format" => {
                if v != "rhogap-model-v1" {
                    return Err(perr(format!("unsupported format '{v}'")));
                }
                saw_format = true;
            }
            "prior" => prior = v.to_string(),
            "n" => {
                n = Some(v.parse().map_err(|_| perr(format!("line {}: bad n", lineno + 1)))?)
            }
            "d_x" => {
                d_x = Some(
                    v.parse()
                        .map_err(|_| perr(format!("line {}: bad d_x", lineno + 1)))?,
                )
            }
            "s_f2" | "s_g2" | "l_f" | "l_g" | "s_on2" => {
                let val: f64 = v
                    .parse()
                    .map_err(|_| perr(format!("line {}: bad {k}", lineno + 1)))?;
                fields.insert(k.to_string(), val);
            }
            other => return Err(perr(format!("line {}: unknown key '{other}'", lineno + 1))),
        }
    }
    if !saw_format {
        return Err(perr("missing 'format = rhogap-model-v1' line".into()));
    }
    let get = |k: &str| -> Result<f64> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| perr(format!("missing field '{k}'")))
    };
    let h = Hyperparameters::new(get("s_f2")?, get("s_g2")?, get("l_f")?, get("l_g")?, get("s_on2")?)?;
    let n = n.ok_or_else(|| perr("missing field 'n'".into()))?;
    let d = d_x.ok_or_else(|| perr("missing field 'd_x'".into()))?;

    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(format!("line {}: non-numeric data row", lineno + 1)))?;
        if vals.len() != d + 2 {
            return Err(perr(format!(
                "line {}: expected {} columns, got {}",
                lineno + 1,
                d + 2,
                vals.len()
            )));
        }
        inputs.push(InputPoint::new(
            DVector::from_row_slice(&vals[..d]),
            vals[d],
        )?);
        targets.push(vals[d + 1]);
    }
    if inputs.len() != n {
        return Err(perr(format!("expected {n} data rows, got {}", inputs.len())));
    }
    let s_on2 = h.s_on2;
    Ok((TrainingSet::new(inputs, targets, s_on2)?, h, prior))
}

/// Trajectory CSV: `t,x1,...,xd,u,r,err_lambda,radius,alpha,k_tilde,feasible`.
pub fn write_trajectory_csv(path: &Path, sim: &SimResult, meta: &FileMeta) -> Result<()> {
    let d = sim.states.first().map(|x| x.len()).unwrap_or(2);
    let mut s = meta.header();
    let _ = write!(s, "t,");
    for i in 1..=d {
        let _ = write!(s, "x{i},");
    }
    let _ = writeln!(s, "u,r,err_lambda,radius,alpha,k_tilde,feasible");
    for i in 0..sim.len() {
        let b = &sim.bounds[i];
        let _ = write!(s, "{},", fmt(sim.times[i]));
        for v in sim.states[i].iter() {
            let _ = write!(s, "{},", fmt(*v));
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt(sim.inputs[i]),
            fmt(sim.filtered[i]),
            fmt(sim.filtered[i].abs()),
            fmt(b.radius),
            fmt(b.alpha),
            fmt(b.k_tilde),
            u8::from(b.feasible),
        );
    }
    atomic_write(path, &s)
}

/// Rho-field CSV:
/// `x1,...,xd,phi_f,phi_g,phibar2_f,phibar2_g,theta_f,theta_g,rho_f,rho_g,feasible_f,feasible_g`.
pub fn write_rho_csv(path: &Path, samples: &[RhoGapSample], meta: &FileMeta) -> Result<()> {
    let d = samples.first().map(|r| r.x.len()).unwrap_or(2);
    let mut s = meta.header();
    for i in 1..=d {
        let _ = write!(s, "x{i},");
    }
    let _ = writeln!(
        s,
        "phi_f,phi_g,phibar2_f,phibar2_g,theta_f,theta_g,rho_f,rho_g,feasible_f,feasible_g"
    );
    for r in samples {
        for v in r.x.iter() {
            let _ = write!(s, "{},", fmt(*v));
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt(r.phi_f),
            fmt(r.phi_g),
            fmt(r.phibar2_f),
            fmt(r.phibar2_g),
            fmt(r.theta_f),
            fmt(r.theta_g),
            fmt(r.rho_f),
            fmt(r.rho_g),
            u8::from(r.feasible_f),
            u8::from(r.feasible_g),
        );
    }
    atomic_write(path, &s)
}

/// Human-readable summary report.
pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    atomic_write(path, &render_summary(summary))
}

pub fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_fingerprint = {}", s.fingerprint);
    let _ = writeln!(out, "# seed = {}", s.seed);
    let _ = writeln!(out, "n_train = {}", s.n_train);
    let _ = writeln!(
        out,
        "fitted: s_f2 = {}, s_g2 = {}, l_f = {}, l_g = {}, s_on2 = {}",
        fmt(s.fitted.s_f2),
        fmt(s.fitted.s_g2),
        fmt(s.fitted.l_f),
        fmt(s.fitted.l_g),
        fmt(s.fitted.s_on2)
    );
    let _ = writeln!(
        out,
        "input quantiles: u_bar_f = {}, u_low_g = {}, u_bar_g = {}",
        fmt(s.u_bar_f),
        fmt(s.u_low_g),
        fmt(s.u_bar_g)
    );
    let _ = writeln!(
        out,
        "lipschitz: mu_f = {}, mu_g = {}, sigma2_f = {}, sigma2_g = {}, f = {}, g = {}",
        fmt(s.lipschitz.mu_f),
        fmt(s.lipschitz.mu_g),
        fmt(s.lipschitz.sigma2_f),
        fmt(s.lipschitz.sigma2_g),
        fmt(s.lipschitz.f),
        fmt(s.lipschitz.g)
    );
    let _ = writeln!(
        out,
        "bounds: beta = {}, gamma_f = {}, gamma_g = {}, eta = {}",
        fmt(s.beta),
        fmt(s.gamma_f),
        fmt(s.gamma_g),
        fmt(s.eta)
    );
    let _ = writeln!(
        out,
        "theta: theta_f = {}, theta_g = {}",
        fmt(s.theta_f),
        fmt(s.theta_g)
    );
    let _ = writeln!(
        out,
        "trajectory: max_alpha = {}, feasible_fraction = {}, containment_fraction(t>1) = {}",
        fmt(s.max_alpha_on_trajectory),
        fmt(s.feasible_fraction),
        fmt(s.containment_fraction)
    );
    let _ = writeln!(
        out,
        "rho_f vs radius rank correlation (last period) = {} over {} samples",
        fmt(s.rho_f_radius_rank_correlation),
        s.rank_correlation_pairs
    );
    let _ = writeln!(
        out,
        "uniform tube violations: f = {}, g = {}",
        fmt(s.uniform_violation_fraction_f),
        fmt(s.uniform_violation_fraction_g)
    );
    let _ = writeln!(
        out,
        "grid posterior floors: min sigma_f = {}, min sigma_g = {}",
        fmt(s.min_sigma_f_grid),
        fmt(s.min_sigma_g_grid)
    );
    if let Some(w) = &s.stability_warning {
        let _ = writeln!(out, "warning: {w}");
    }
    for (name, secs) in &s.stage_seconds {
        let _ = writeln!(out, "stage {name}: {secs:.3} s");
    }
    out
}

/// Writes every artifact of a finished experiment into a directory.
pub fn write_all_artifacts(dir: &Path, output: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = FileMeta {
        fingerprint: output.config.fingerprint(),
        seed: output.config.seed,
        extra: vec![(
            "datagen_gain".to_string(),
            fmt(output.config.datagen_gain),
        )],
    };
    write_training_csv(&dir.join(TRAINING_FILE), &output.data, &meta)?;
    write_model(
        &dir.join(MODEL_FILE),
        output.model.data(),
        output.model.hyperparameters(),
        &output.config.system,
        &meta,
    )?;
    write_trajectory_csv(&dir.join(TRAJECTORY_FILE), &output.sim, &meta)?;
    write_rho_csv(&dir.join(RHO_FIELD_FILE), &output.grid.rho, &meta)?;
    write_summary(&dir.join(SUMMARY_FILE), &output.summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn sample_set() -> TrainingSet {
        TrainingSet::new(
            vec![
                InputPoint::from_slice(&[0.25, -1.5], 0.125).unwrap(),
                InputPoint::from_slice(&[1e-17, 2.0], -3.0).unwrap(),
                InputPoint::from_slice(&[0.3333333333333333, 0.1], 0.0).unwrap(),
            ],
            vec![1.5, -0.25, 0.1 + 0.2],
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn training_csv_round_trips_bitexact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let data = sample_set();
        let meta = FileMeta {
            fingerprint: "abc".into(),
            seed: 7,
            extra: vec![],
        };
        write_training_csv(&path, &data, &meta).unwrap();
        let loaded = read_training_csv(&path).unwrap();
        assert_eq!(loaded, data);
        // same bytes when written twice
        let first = fs::read(&path).unwrap();
        write_training_csv(&path, &data, &meta).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn model_file_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let data = sample_set();
        let h = Hyperparameters::new(1.25, 0.5, 2.0, 0.7, 0.25).unwrap();
        write_model(&path, &data, &h, "benchmark", &FileMeta::default()).unwrap();
        let (data2, h2, prior) = read_model(&path).unwrap();
        assert_eq!(data2, data);
        assert_eq!(h2, h);
        assert_eq!(prior, "benchmark");
    }

    #[test]
    fn model_file_empty_data_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let data = TrainingSet::empty(0.25);
        let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.25).unwrap();
        write_model(&path, &data, &h, "benchmark_exact", &FileMeta::default()).unwrap();
        let (data2, _, prior) = read_model(&path).unwrap();
        assert!(data2.is_empty());
        assert_eq!(prior, "benchmark_exact");
    }

    #[test]
    fn model_file_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        fs::write(
            &path,
            "format = rhogap-model-v1\nprior = p\nwalrus = 1\ndata:\n",
        )
        .unwrap();
        assert!(matches!(read_model(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn infinities_serialize_as_inf_tokens() {
        assert_eq!(fmt(f64::INFINITY), "inf");
        assert_eq!(fmt(f64::NEG_INFINITY), "-inf");
        // shortest round-trip formatting preserves the value exactly
        let v = 0.1 + 0.2;
        let parsed: f64 = fmt(v).parse().unwrap();
        assert_eq!(parsed, v);
        assert_relative_eq!(parsed, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn atomic_write_replaces_content_without_temp_residue() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nested").join("file.txt");
        atomic_write(&path, "one").unwrap();
        atomic_write(&path, "two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        let entries: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries.len(), 1);
    }
}
