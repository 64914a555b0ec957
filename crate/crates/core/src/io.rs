//! Tensor files, CSV matrices, fit directories and run configuration.
//!
//! Tensor files start with the magic `MLSM1` and come in two encodings:
//!
//! - binary: an 8-byte magic `MLSM1\0\0\0`, a little-endian `u32` version,
//!   a value-kind byte, three reserved bytes, the dimensions as three
//!   little-endian `u64`, then every entry as a little-endian `f64` in the
//!   [`Tensor3`] storage order (`i` fastest, then `j`, then `t`);
//! - triples: a header line `MLSM1 triples version=1 dims=n,n,T kind=real`
//!   followed by one `i,j,t,value` line per entry with 1-based indices.
//!   Entries that are not listed are 0. For Gaussian data this means an
//!   observed zero, not a missing value.
//!
//! Lines starting with `#` and blank lines in triples files are skipped.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{FitDiagnostics, FitResult};
use crate::factor::{FactorPair, FitConfig};
use crate::family::FamilySpec;
use crate::simgen::{CoreKind, CoreSequence, GenOptions, ModelParams};
use crate::tensor::Tensor3;

pub const MAGIC: &str = "MLSM1";
pub const VERSION: u32 = 1;
const BINARY_MAGIC: [u8; 8] = *b"MLSM1\0\0\0";
const HEADER_LEN: usize = 8 + 4 + 4 + 3 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorFormat {
    Binary,
    Triples,
}

impl std::str::FromStr for TensorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "bin" => Ok(TensorFormat::Binary),
            "triples" | "text" | "txt" => Ok(TensorFormat::Triples),
            other => Err(Error::arg(format!("unknown tensor format '{other}'"))),
        }
    }
}

/// Kind of values stored, recorded in the header for the reader's benefit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    #[default]
    Real,
    Count,
    Binary,
}

impl ValueKind {
    fn code(self) -> u8 {
        match self {
            ValueKind::Real => 0,
            ValueKind::Count => 1,
            ValueKind::Binary => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ValueKind::Real),
            1 => Some(ValueKind::Count),
            2 => Some(ValueKind::Binary),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ValueKind::Real => "real",
            ValueKind::Count => "count",
            ValueKind::Binary => "binary",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "real" => Some(ValueKind::Real),
            "count" => Some(ValueKind::Count),
            "binary" => Some(ValueKind::Binary),
            _ => None,
        }
    }
}

impl From<crate::family::FamilyKind> for ValueKind {
    fn from(k: crate::family::FamilyKind) -> Self {
        match k {
            crate::family::FamilyKind::Gaussian => ValueKind::Real,
            crate::family::FamilyKind::Poisson => ValueKind::Count,
            crate::family::FamilyKind::Bernoulli => ValueKind::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: ValueKind,
    pub tensor: Tensor3,
}

fn check_network_dims(dims: [usize; 3], loc: &str) -> Result<()> {
    if dims[0] != dims[1] {
        return Err(Error::parse(loc, format!("dims {dims:?} are not of the form n,n,T")));
    }
    if dims.contains(&0) {
        return Err(Error::parse(loc, format!("dims {dims:?} contain a zero")));
    }
    Ok(())
}

pub fn write_tensor(path: &Path, x: &Tensor3, format: TensorFormat, kind: ValueKind) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        TensorFormat::Binary => write_binary(&mut w, x, kind)?,
        TensorFormat::Triples => write_triples(&mut w, x, kind)?,
    }
    w.flush()?;
    Ok(())
}

fn write_binary(w: &mut impl Write, x: &Tensor3, kind: ValueKind) -> Result<()> {
    w.write_all(&BINARY_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind.code(), 0, 0, 0])?;
    for d in x.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in x.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_triples(w: &mut impl Write, x: &Tensor3, kind: ValueKind) -> Result<()> {
    let [a, b, c] = x.dims();
    writeln!(w, "{MAGIC} triples version={VERSION} dims={a},{b},{c} kind={}", kind.name())?;
    for t in 0..c {
        for j in 0..b {
            for i in 0..a {
                let v = x.get(i, j, t);
                if v != 0.0 || v.is_sign_negative() {
                    // `{}` on f64 prints the shortest string that parses back
                    // to the same value.
                    writeln!(w, "{},{},{},{}", i + 1, j + 1, t + 1, v)?;
                }
            }
        }
    }
    Ok(())
}

/// Reads a tensor file. With `format = None` the encoding is detected from
/// the first bytes.
pub fn read_tensor(path: &Path, format: Option<TensorFormat>) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display().to_string();
    let format = match format {
        Some(f) => f,
        None => detect_format(&bytes, &name)?,
    };
    match format {
        TensorFormat::Binary => parse_binary(&bytes, &name),
        TensorFormat::Triples => parse_triples(BufReader::new(bytes.as_slice()), &name),
    }
}

fn detect_format(bytes: &[u8], name: &str) -> Result<TensorFormat> {
    if bytes.starts_with(&BINARY_MAGIC) {
        Ok(TensorFormat::Binary)
    } else if bytes.starts_with(format!("{MAGIC} ").as_bytes()) {
        Ok(TensorFormat::Triples)
    } else {
        Err(Error::parse(format!("{name}: offset 0"), format!("missing {MAGIC} magic")))
    }
}

fn parse_binary(bytes: &[u8], name: &str) -> Result<TensorFile> {
    let at = |off: usize| format!("{name}: offset {off}");
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(at(bytes.len()), "truncated header"));
    }
    if bytes[..8] != BINARY_MAGIC {
        return Err(Error::parse(at(0), format!("missing {MAGIC} magic")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::parse(at(8), format!("unsupported version {version}")));
    }
    let kind = ValueKind::from_code(bytes[12]).ok_or_else(|| Error::parse(at(12), format!("unknown value kind {}", bytes[12])))?;
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let off = 16 + 8 * k;
        let raw = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        *d = usize::try_from(raw).map_err(|_| Error::parse(at(off), format!("dimension {raw} too large")))?;
    }
    check_network_dims(dims, &at(16))?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|l| l.checked_mul(8))
        .ok_or_else(|| Error::parse(at(16), "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::parse(
            at(HEADER_LEN),
            format!("payload has {} bytes, dims {dims:?} need {len}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TensorFile {
        kind,
        tensor: Tensor3::new(dims, data)?,
    })
}

fn parse_header(line: &str, loc: &str) -> Result<([usize; 3], ValueKind)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) || parts.next() != Some("triples") {
        return Err(Error::parse(loc, format!("header must start with '{MAGIC} triples'")));
    }
    let (mut version, mut dims, mut kind) = (None, None, ValueKind::Real);
    for p in parts {
        let (key, val) = p
            .split_once('=')
            .ok_or_else(|| Error::parse(loc, format!("malformed header field '{p}'")))?;
        match key {
            "version" => version = Some(val.parse::<u32>().map_err(|_| Error::parse(loc, format!("bad version '{val}'")))?),
            "dims" => {
                let v: Vec<usize> = val
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(loc, format!("bad dims '{val}'")))?;
                if v.len() != 3 {
                    return Err(Error::parse(loc, format!("dims '{val}' must have three entries")));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            "kind" => kind = ValueKind::from_name(val).ok_or_else(|| Error::parse(loc, format!("unknown value kind '{val}'")))?,
            other => return Err(Error::parse(loc, format!("unknown header field '{other}'"))),
        }
    }
    match version {
        Some(VERSION) => {}
        Some(v) => return Err(Error::parse(loc, format!("unsupported version {v}"))),
        None => return Err(Error::parse(loc, "header lacks version")),
    }
    let dims = dims.ok_or_else(|| Error::parse(loc, "header lacks dims"))?;
    check_network_dims(dims, loc)?;
    Ok((dims, kind))
}

fn parse_triples(r: impl BufRead, name: &str) -> Result<TensorFile> {
    let mut lines = r.lines().enumerate();
    let (dims, kind) = match lines.next() {
        Some((_, line)) => parse_header(&line?, &format!("{name}: line 1"))?,
        None => return Err(Error::parse(format!("{name}: line 1"), "empty file")),
    };
    let mut x = Tensor3::zeros(dims);
    let mut seen = HashSet::new();
    for (no, line) in lines {
        let line = line?;
        let loc = format!("{name}: line {}", no + 1);
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = s.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::parse(loc, format!("expected 'i,j,t,value', got '{s}'")));
        }
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let v: usize = f[k]
                .parse()
                .map_err(|_| Error::parse(&loc, format!("index '{}' is not a positive integer", f[k])))?;
            if v == 0 || v > dims[k] {
                return Err(Error::parse(
                    &loc,
                    format!("index {v} out of range 1..={} in position {}", dims[k], k + 1),
                ));
            }
            idx[k] = v - 1;
        }
        let value: f64 = f[3]
            .parse()
            .map_err(|_| Error::parse(&loc, format!("value '{}' is not a number", f[3])))?;
        if !seen.insert(idx) {
            return Err(Error::parse(loc, format!("duplicate entry ({},{},{})", f[0], f[1], f[2])));
        }
        x.set(idx[0], idx[1], idx[2], value);
    }
    Ok(TensorFile { kind, tensor: x })
}

/// Writes a matrix as CSV with header `c1,…,ck` and one line per row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=m.ncols()).map(|c| format!("c{c}")))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let loc = format!("{}: line {}", path.display(), k + 2);
        if rec.len() != cols {
            return Err(Error::parse(loc, format!("expected {cols} fields, got {}", rec.len())));
        }
        for f in rec.iter() {
            data.push(f.parse::<f64>().map_err(|_| Error::parse(&loc, format!("'{f}' is not a number")))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Writes a `k1 × k2 × T` core in long format `t,i,j,value` (1-based).
pub fn write_core_csv(path: &Path, core: &Tensor3) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "i", "j", "value"])?;
    let [a, b, c] = core.dims();
    for t in 0..c {
        for i in 0..a {
            for j in 0..b {
                w.write_record([
                    (t + 1).to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    core.get(i, j, t).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CoreRow {
    t: usize,
    i: usize,
    j: usize,
    value: f64,
}

pub fn read_core_csv(path: &Path, dims: [usize; 3]) -> Result<Tensor3> {
    let mut r = csv::Reader::from_path(path)?;
    let mut x = Tensor3::zeros(dims);
    for (k, row) in r.deserialize::<CoreRow>().enumerate() {
        let row = row?;
        let (i, j, t) = (row.i, row.j, row.t);
        if i == 0 || j == 0 || t == 0 || i > dims[0] || j > dims[1] || t > dims[2] {
            return Err(Error::parse(
                format!("{}: line {}", path.display(), k + 2),
                format!("entry ({i},{j},{t}) outside dims {dims:?}"),
            ));
        }
        x.set(i - 1, j - 1, t - 1, row.value);
    }
    Ok(x)
}

/// Metadata written next to the CSV matrices of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub format: String,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k1: usize,
    pub k2: usize,
    /// 1-based positions of the latent columns in `Û1` and `Û2`.
    pub selected1: Vec<usize>,
    pub selected2: Vec<usize>,
    pub family: FamilySpec,
    pub config: FitConfig,
    pub diagnostics: FitDiagnostics,
}

/// Files of a fit directory.
pub const FIT_FILES: [&str; 8] = [
    "theta.csv",
    "phi.csv",
    "core.csv",
    "u1.csv",
    "v1.csv",
    "u2.csv",
    "v2.csv",
    "fit.json",
];

pub fn write_fit(dir: &Path, fit: &FitResult, family: &FamilySpec, cfg: &FitConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("theta.csv"), &fit.theta)?;
    write_matrix_csv(&dir.join("phi.csv"), &fit.phi)?;
    write_core_csv(&dir.join("core.csv"), &fit.core)?;
    write_matrix_csv(&dir.join("u1.csv"), &fit.pair1.u)?;
    write_matrix_csv(&dir.join("v1.csv"), &fit.pair1.v)?;
    write_matrix_csv(&dir.join("u2.csv"), &fit.pair2.u)?;
    write_matrix_csv(&dir.join("v2.csv"), &fit.pair2.v)?;
    let summary = FitSummary {
        format: format!("{MAGIC} fit version={VERSION}"),
        n: fit.n,
        t: fit.t,
        k1: fit.k1(),
        k2: fit.k2(),
        selected1: fit.s1.iter().map(|s| s + 1).collect(),
        selected2: fit.s2.iter().map(|s| s + 1).collect(),
        family: *family,
        config: cfg.clone(),
        diagnostics: fit.diagnostics.clone(),
    };
    write_json(&dir.join("fit.json"), &summary)
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

pub fn read_fit(dir: &Path) -> Result<(FitResult, FitSummary)> {
    let summary: FitSummary = read_json(&dir.join("fit.json"))?;
    let to_zero = |s: &[usize], d: usize, what: &str| -> Result<Vec<usize>> {
        s.iter()
            .map(|&c| {
                if c == 0 || c > d {
                    Err(Error::parse("fit.json", format!("{what} index {c} outside 1..={d}")))
                } else {
                    Ok(c - 1)
                }
            })
            .collect()
    };
    let pair1 = FactorPair {
        u: read_matrix_csv(&dir.join("u1.csv"))?,
        v: read_matrix_csv(&dir.join("v1.csv"))?,
    };
    let pair2 = FactorPair {
        u: read_matrix_csv(&dir.join("u2.csv"))?,
        v: read_matrix_csv(&dir.join("v2.csv"))?,
    };
    let s1 = to_zero(&summary.selected1, pair1.u.ncols(), "selected1")?;
    let s2 = to_zero(&summary.selected2, pair2.u.ncols(), "selected2")?;
    let theta = read_matrix_csv(&dir.join("theta.csv"))?;
    let phi = read_matrix_csv(&dir.join("phi.csv"))?;
    let (n, t) = (summary.n, summary.t);
    if theta.shape() != (n, summary.k1) || phi.shape() != (n, summary.k2) {
        return Err(Error::dim("theta/phi shapes disagree with fit.json"));
    }
    if pair1.u.nrows() != n || pair1.v.nrows() != n * t || pair2.u.nrows() != n || pair2.v.nrows() != n * t {
        return Err(Error::dim("factor shapes disagree with fit.json"));
    }
    let core = read_core_csv(&dir.join("core.csv"), [summary.k1, summary.k2, t])?;
    let fit = FitResult {
        n,
        t,
        theta,
        phi,
        core,
        v1c: select_columns(&pair1.v, &s1),
        v2c: select_columns(&pair2.v, &s2),
        s1,
        s2,
        pair1,
        pair2,
        diagnostics: summary.diagnostics.clone(),
    };
    Ok((fit, summary))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(fs::File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Writes ground-truth parameters: `theta.csv`, `phi.csv`, `core.csv`,
/// `u_alpha.csv`, `v_alpha.csv`, `u_beta.csv`, `v_beta.csv`.
pub fn write_params(dir: &Path, p: &ModelParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("theta.csv"), &p.theta)?;
    write_matrix_csv(&dir.join("phi.csv"), &p.phi)?;
    write_core_csv(&dir.join("core.csv"), &p.core)?;
    write_matrix_csv(&dir.join("u_alpha.csv"), &p.u_alpha)?;
    write_matrix_csv(&dir.join("v_alpha.csv"), &p.v_alpha)?;
    write_matrix_csv(&dir.join("u_beta.csv"), &p.u_beta)?;
    write_matrix_csv(&dir.join("v_beta.csv"), &p.v_beta)?;
    Ok(())
}

pub fn read_params(dir: &Path) -> Result<ModelParams> {
    let theta = read_matrix_csv(&dir.join("theta.csv"))?;
    let phi = read_matrix_csv(&dir.join("phi.csv"))?;
    let v_alpha = read_matrix_csv(&dir.join("v_alpha.csv"))?;
    let t = v_alpha.nrows();
    let core = read_core_csv(&dir.join("core.csv"), [theta.ncols(), phi.ncols(), t])?;
    Ok(ModelParams {
        theta,
        phi,
        core,
        u_alpha: read_matrix_csv(&dir.join("u_alpha.csv"))?,
        v_alpha,
        u_beta: read_matrix_csv(&dir.join("u_beta.csv"))?,
        v_beta: read_matrix_csv(&dir.join("v_beta.csv"))?,
    })
}

/// Everything a command needs besides its file arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: FamilySpec,
    pub fit: FitConfig,
    /// Optional stacked ranks; when present they must equal
    /// `k1 + k_beta + 1` and `k2 + k_alpha + 1`.
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Core scale for simulation; `None` picks the family default.
    pub signal: Option<f64>,
    pub core_kind: CoreKind,
    pub core_sequence: CoreSequence,
    pub level: f64,
    pub alpha: f64,
    pub reps: usize,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: FamilySpec::gaussian(1.0),
            fit: FitConfig::new(2, 2, 1, 1),
            d1: None,
            d2: None,
            seed: 0,
            n: 100,
            t: 10,
            signal: None,
            core_kind: CoreKind::Diagonal,
            core_sequence: CoreSequence::Independent,
            level: 0.95,
            alpha: 0.05,
            reps: 200,
            input: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.fit.validate()?;
        for (given, want, name) in [(self.d1, self.fit.d1(), "d1"), (self.d2, self.fit.d2(), "d2")] {
            if let Some(d) = given {
                if d != want {
                    return Err(Error::arg(format!(
                        "{name} = {d} but the ranks imply {name} = {want}"
                    )));
                }
            }
        }
        if !(self.level > 0.0 && self.level <= 1.0) {
            return Err(Error::arg(format!("level must lie in (0, 1], got {}", self.level)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::arg(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(s) = self.signal {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::arg(format!("signal must be a nonnegative number, got {s}")));
            }
        }
        Ok(())
    }

    /// Parses and validates a JSON config.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Json(j) => Error::parse(path.display().to_string(), j.to_string()),
            other => other,
        })
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            n: self.n,
            t: self.t,
            k1: self.fit.k1,
            k2: self.fit.k2,
            k_alpha: self.fit.k_alpha,
            k_beta: self.fit.k_beta,
            signal: self.signal.unwrap_or(GenOptions::default_signal(self.family.kind)),
            core_kind: self.core_kind,
            core_sequence: self.core_sequence,
            tolerances: self.fit.tolerances,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1e3..1e3))
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut x = random([4, 4, 3], 1);
        x.set(0, 0, 0, -0.0);
        x.set(1, 0, 0, f64::MIN_POSITIVE / 3.0);
        write_tensor(&p, &x, TensorFormat::Binary, ValueKind::Real).unwrap();
        let back = read_tensor(&p, None).unwrap();
        assert_eq!(back.kind, ValueKind::Real);
        for (a, b) in x.as_slice().iter().zip(back.tensor.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn triples_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        let mut x = random([3, 3, 2], 2);
        x.set(2, 1, 0, 0.0);
        x.set(0, 2, 1, 1.0 / 3.0);
        write_tensor(&p, &x, TensorFormat::Triples, ValueKind::Count).unwrap();
        let back = read_tensor(&p, None).unwrap();
        assert_eq!(back.kind, ValueKind::Count);
        assert_eq!(back.tensor, x);
    }

    #[test]
    fn single_triple_gives_single_nonzero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "MLSM1 triples version=1 dims=2,2,2 kind=real\n1,1,1,5\n").unwrap();
        let x = read_tensor(&p, Some(TensorFormat::Triples)).unwrap().tensor;
        assert_eq!(x.get(0, 0, 0), 5.0);
        assert_eq!(x.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn out_of_range_triple_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "MLSM1 triples version=1 dims=2,2,2 kind=real\n# ok\n1,1,1,1\n3,1,1,5\n").unwrap();
        match read_tensor(&p, None) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with("line 4"), "{location}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let cases: [&[u8]; 6] = [
            b"hello",
            b"MLSM1 triples version=2 dims=2,2,2\n",
            b"MLSM1 triples version=1 dims=2,3,2\n",
            b"MLSM1 triples version=1 dims=2,2,2\n1,1,1,1\n1,1,1,2\n",
            b"MLSM1 triples version=1 dims=2,2,2\n1,1,x,1\n",
            b"MLSM1\0\0\0\x01\0\0\0\0\0\0\0",
        ];
        for c in cases {
            fs::write(&p, c).unwrap();
            assert!(matches!(read_tensor(&p, None), Err(Error::Parse { .. })), "{:?}", String::from_utf8_lossy(c));
        }
        let x = random([2, 2, 2], 3);
        write_tensor(&p, &x, TensorFormat::Binary, ValueKind::Real).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn matrix_and_core_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        write_matrix_csv(&dir.path().join("m.csv"), &m).unwrap();
        assert_eq!(read_matrix_csv(&dir.path().join("m.csv")).unwrap(), m);
        let c = random([2, 3, 4], 4);
        write_core_csv(&dir.path().join("c.csv"), &c).unwrap();
        assert_eq!(read_core_csv(&dir.path().join("c.csv"), [2, 3, 4]).unwrap(), c);
        let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert!(text.starts_with("t,i,j,value\n1,1,1,"));
    }

    #[test]
    fn run_config_checks_stacked_ranks() {
        let ok = r#"{"family": {"kind": "poisson"}, "fit": {"k1": 3, "k2": 2, "k_alpha": 1, "k_beta": 2}, "d1": 6, "d2": 4}"#;
        let cfg = RunConfig::from_json(ok).unwrap();
        assert_eq!(cfg.family, FamilySpec::poisson());
        assert_eq!(cfg.gen_options().signal, 0.5);
        let bad = r#"{"fit": {"k1": 3, "k2": 2, "k_alpha": 1, "k_beta": 2}, "d1": 5}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Argument(_))));
        assert!(matches!(RunConfig::from_json(r#"{"level": 1.5}"#), Err(Error::Argument(_))));
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Json(_))));
        let round: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }
}
