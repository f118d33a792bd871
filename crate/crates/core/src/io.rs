//! Persistence formats: profile and result CSVs, the parameter document and
//! run manifests.
//!
//! Every float is written in scientific notation with 17 significant
//! digits, which round-trips any `f64` bit-exactly. Readers reject invalid
//! input instead of repairing it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchResult;
use crate::ecm::{EcmParams, Profile, SimSample};
use crate::error::{Error, Result};

/// Formats `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A profile plus the optional true SoC column `z` found next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFile {
    pub profile: Profile,
    pub soc: Option<Vec<f64>>,
}

/// Parses a profile CSV with header `t,i[,v]`. Columns are matched by
/// name; a `z` column is returned as the true SoC and any other column is
/// ignored.
pub fn parse_profile(reader: impl Read) -> Result<ProfileFile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| header.iter().position(|h| h.trim() == name);
    let (Some(ct), Some(ci)) = (column("t"), column("i")) else {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header must contain `t` and `i`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    };
    let (cv, cz) = (column("v"), column("z"));

    let mut t = Vec::new();
    let mut i = Vec::new();
    let mut v = cv.map(|_| Vec::new());
    let mut z = cz.map(|_| Vec::new());
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).ok_or_else(|| Error::Parse {
                line,
                reason: format!("missing `{name}` field"),
            })?;
            let x: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                reason: format!("`{name}` is not a number: `{raw}`"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("`{name}` is not finite: `{raw}`"),
                });
            }
            Ok(x)
        };
        let tk = field(ct, "t")?;
        if let Some(&prev) = t.last() {
            if !(tk > prev) {
                return Err(Error::validation(
                    "t",
                    format!("timestamps not strictly increasing at line {line} ({tk} after {prev})"),
                ));
            }
        }
        t.push(tk);
        i.push(field(ci, "i")?);
        if let (Some(col), Some(v)) = (cv, v.as_mut()) {
            v.push(field(col, "v")?);
        }
        if let (Some(col), Some(z)) = (cz, z.as_mut()) {
            z.push(field(col, "z")?);
        }
    }
    if t.is_empty() {
        return Err(Error::Parse {
            line: 1,
            reason: "profile has no samples".into(),
        });
    }
    Ok(ProfileFile {
        profile: Profile::new(t, i, v)?,
        soc: z,
    })
}

pub fn read_profile(path: &Path) -> Result<ProfileFile> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_profile(std::io::BufReader::new(file))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

fn write_rows<'a>(header: &[&str], rows: impl Iterator<Item = Vec<String>> + 'a) -> Result<String> {
    let mut w = csv_writer();
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// Profile CSV `t,i[,v]`.
pub fn format_profile(profile: &Profile) -> Result<String> {
    let header: &[&str] = if profile.voltage().is_some() { &["t", "i", "v"] } else { &["t", "i"] };
    let rows = (0..profile.len()).map(|k| {
        let mut row = vec![fmt_f64(profile.timestamps()[k]), fmt_f64(profile.current()[k])];
        if let Some(v) = profile.voltage() {
            row.push(fmt_f64(v[k]));
        }
        row
    });
    write_rows(header, rows)
}

pub fn write_profile(path: &Path, profile: &Profile) -> Result<()> {
    write_file(path, &format_profile(profile)?)
}

/// Trajectory CSV `t,i,v,z,v_r1,v_r2`. Readable back as a profile.
pub fn format_trajectory(profile: &Profile, trajectory: &[SimSample]) -> Result<String> {
    if trajectory.len() != profile.len() {
        return Err(Error::validation("trajectory", "length differs from the profile"));
    }
    let rows = trajectory.iter().enumerate().map(|(k, s)| {
        vec![
            fmt_f64(profile.timestamps()[k]),
            fmt_f64(profile.current()[k]),
            fmt_f64(s.voltage),
            fmt_f64(s.state.z),
            fmt_f64(s.state.v_r1),
            fmt_f64(s.state.v_r2),
        ]
    });
    write_rows(&["t", "i", "v", "z", "v_r1", "v_r2"], rows)
}

/// Estimate CSV `t,z_est[,z_true]`.
pub fn format_estimate(timestamps: &[f64], estimate: &[f64], truth: Option<&[f64]>) -> Result<String> {
    if estimate.len() != timestamps.len() || truth.is_some_and(|z| z.len() != timestamps.len()) {
        return Err(Error::validation("estimate", "column lengths differ"));
    }
    let header: &[&str] = if truth.is_some() { &["t", "z_est", "z_true"] } else { &["t", "z_est"] };
    let rows = (0..timestamps.len()).map(|k| {
        let mut row = vec![fmt_f64(timestamps[k]), fmt_f64(estimate[k])];
        if let Some(z) = truth {
            row.push(fmt_f64(z[k]));
        }
        row
    });
    write_rows(header, rows)
}

/// Tidy benchmark CSV `axis_value,estimator,mae_mean,ci_lo,ci_hi`.
pub fn format_bench(result: &BenchResult) -> Result<String> {
    let rows = result.rows.iter().map(|r| {
        vec![
            fmt_f64(r.axis_value),
            r.estimator.name().to_string(),
            fmt_f64(r.mae_mean),
            fmt_f64(r.ci_lo),
            fmt_f64(r.ci_hi),
        ]
    });
    write_rows(&["axis_value", "estimator", "mae_mean", "ci_lo", "ci_hi"], rows)
}

fn fmt_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", items.join(", "))
}

/// TOML parameter document. Keys mirror the `EcmParams` fields; the OCV
/// table is the `[ocv]` section.
pub fn format_params(params: &EcmParams) -> String {
    let mut s = String::new();
    for (name, value) in [
        ("r0", params.r0),
        ("r1", params.r1),
        ("c1", params.c1),
        ("r2", params.r2),
        ("c2", params.c2),
        ("q_max", params.q_max),
    ] {
        let _ = writeln!(s, "{name} = {}", fmt_f64(value));
    }
    let _ = writeln!(s, "\n[ocv]");
    let _ = writeln!(s, "soc_grid = {}", fmt_array(params.ocv.soc_grid()));
    let _ = writeln!(s, "ocv_values = {}", fmt_array(params.ocv.ocv_values()));
    s
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a parameter document.
pub fn parse_params(text: &str) -> Result<EcmParams> {
    let params: EcmParams = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        reason: e.message().trim().to_string(),
    })?;
    params.validate()?;
    Ok(params)
}

pub fn read_params(path: &Path) -> Result<EcmParams> {
    parse_params(&read_file(path)?)
}

pub fn write_params(path: &Path, params: &EcmParams) -> Result<()> {
    write_file(path, &format_params(params))
}

/// Provenance record written next to every CLI output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved options, defaults included.
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    /// Input path to lowercase hex SHA-256.
    pub input_digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, master_seed: Option<u64>) -> Self {
        Self {
            tool: "soc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            master_seed,
            input_digests: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.input_digests.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        file.write_all(self.to_json().as_bytes()).map_err(io_err(path))
    }
}
