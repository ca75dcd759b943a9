//! Everything that touches the filesystem: CSV ingestion and output, the
//! model file, flat key-value configuration and line-delimited traces.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FhmmParams, Observations, TransitionMatrix};
use crate::numerics::CholFactor;
use crate::recognition::{Activation, MlpSpec, RecognitionNet, Sharing};

/// First line of every model file.
pub const MODEL_FORMAT_VERSION: &str = "fhmm-model/1";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Inclusive, 1-based row selection `start:end`; either end may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl FromStr for RowRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("row range {s:?} must look like start:end")))?;
        let num = |v: &str| -> Result<Option<usize>> {
            let v = v.trim();
            if v.is_empty() {
                return Ok(None);
            }
            v.parse::<usize>()
                .map(Some)
                .map_err(|_| Error::config(format!("row range {s:?}: {v:?} is not a row number")))
        };
        let start = num(a)?.unwrap_or(1);
        let end = num(b)?;
        if start == 0 {
            return Err(Error::config("row numbers start at 1"));
        }
        if end.is_some_and(|e| e < start) {
            return Err(Error::config(format!("row range {s:?} is empty")));
        }
        Ok(Self { start, end })
    }
}

/// Parses a 1-based column list such as `2,3`.
pub fn parse_columns(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|c| {
            let c = c.trim();
            match c.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::config(format!(
                    "column {c:?} is not a 1-based column number"
                ))),
                Ok(v) => Ok(v),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvOptions {
    /// 1-based columns to keep, in the given order.
    pub columns: Option<Vec<usize>>,
    pub rows: Option<RowRange>,
    pub standardize: bool,
}

/// Per-column affine map `z = (y - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation; constant columns keep scale 1.
    pub fn fit(y: &Observations) -> Self {
        let (len, d) = (y.len() as f64, y.dim());
        let mut mean = vec![0.0; d];
        for t in 0..y.len() {
            for (m, v) in mean.iter_mut().zip(y.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= len);
        let mut var = vec![0.0; d];
        for t in 0..y.len() {
            for ((s, v), m) in var.iter_mut().zip(y.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / len).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, y: &Observations) -> Result<Observations> {
        if y.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                what: "standardized columns",
                expected: self.mean.len(),
                actual: y.dim(),
            });
        }
        let d = y.dim();
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.scale[i % d])
            .collect();
        Observations::new(y.len(), d, data)
    }

    /// Log-density per step shifts by the Jacobian of the map.
    pub fn loglik_to_original(&self, ll: f64) -> f64 {
        ll - self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub fn mse_to_original(&self, mse: &[f64]) -> Vec<f64> {
        mse.iter()
            .zip(&self.scale)
            .map(|(e, s)| e * s * s)
            .collect()
    }
}

/// Reads a numeric CSV (optionally headed) into a `T × D` block.
///
/// A first line with no numeric cell is taken as a header. Every other cell
/// must be a finite number: missing data is not supported.
pub fn load_csv(
    path: &Path,
    options: &CsvOptions,
) -> Result<(Observations, Option<Standardization>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path, options)
}

/// [`load_csv`] over any reader; `origin` only labels errors.
pub fn read_csv<R: Read>(
    reader: R,
    origin: &Path,
    options: &CsvOptions,
) -> Result<(Observations, Option<Standardization>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut row_no = 0usize;
    let mut first = true;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(origin, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.iter().all(|c| c.parse::<f64>().is_err()) {
                width = Some(record.len());
                continue;
            }
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    origin,
                    line,
                    format!("expected {w} columns, found {}", record.len()),
                ));
            }
            _ => width = Some(record.len()),
        }
        row_no += 1;
        if options
            .rows
            .is_some_and(|r| row_no < r.start || r.end.is_some_and(|e| row_no > e))
        {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (j, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(_) => {
                    return Err(parse_err(
                        origin,
                        line,
                        format!(
                            "column {}: {cell:?} is not finite (missing data is not supported)",
                            j + 1
                        ),
                    ))
                }
                Err(_) => {
                    return Err(parse_err(
                        origin,
                        line,
                        format!("column {}: {cell:?} is not a number", j + 1),
                    ));
                }
            }
        }
        rows.push(row);
    }
    if row_no == 0 {
        return Err(parse_err(origin, 1, "no data rows"));
    }
    if let Some(r) = options.rows {
        if r.start > row_no || r.end.is_some_and(|e| e > row_no) {
            return Err(Error::config(format!(
                "row range {}:{} exceeds the {row_no} data rows of {}",
                r.start,
                r.end.map_or(String::new(), |e| e.to_string()),
                origin.display()
            )));
        }
    }
    let width = width.unwrap_or(0);
    if let Some(cols) = &options.columns {
        if let Some(bad) = cols.iter().find(|&&c| c == 0 || c > width) {
            return Err(Error::config(format!(
                "column {bad} is outside 1..={width}"
            )));
        }
        rows = rows
            .into_iter()
            .map(|r| cols.iter().map(|&c| r[c - 1]).collect())
            .collect();
    }
    let y = Observations::from_rows(&rows)?;
    if options.standardize {
        let st = Standardization::fit(&y);
        let z = st.apply(&y)?;
        Ok((z, Some(st)))
    } else {
        Ok((y, None))
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes a headed CSV; floats use the shortest text that reads back exactly.
pub fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_observations(path: &Path, y: &Observations) -> Result<()> {
    let header: Vec<String> = (1..=y.dim()).map(|j| format!("y{j}")).collect();
    write_csv(path, &header, (0..y.len()).map(|t| y.row(t).to_vec()))
}

/// One JSON object per line; the file is created or truncated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Where a model came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub algorithm: String,
    pub seed: u64,
    /// Hex SHA-256 of the canonical training configuration.
    pub config_hash: String,
    pub iterations: usize,
    /// Transform applied to the training data, if any.
    pub standardization: Option<Standardization>,
}

/// A persisted model: generative parameters, optional recognition network
/// and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: FhmmParams,
    pub net: Option<RecognitionNet>,
    pub provenance: Provenance,
}

/// Seventeen significant digits: enough to reproduce every `f64` exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_floats(out: &mut String, key: &str, vals: &[f64]) {
    out.push_str(key);
    for v in vals {
        out.push(' ');
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let (m, d) = (p.num_chains(), p.dim());
        let mut out = String::new();
        out.push_str(MODEL_FORMAT_VERSION);
        out.push('\n');
        let _ = writeln!(out, "chains {m}");
        let _ = writeln!(out, "dim {d}");
        let _ = writeln!(
            out,
            "dt {}",
            self.net.as_ref().map_or(0, |n| n.spec().window)
        );
        push_floats(&mut out, "w", p.w());
        let l = p.chol();
        let tri: Vec<f64> = (0..d)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|(i, j)| l.get(i, j))
            .collect();
        push_floats(&mut out, "l", &tri);
        for (k, a) in p.transitions().iter().enumerate() {
            push_floats(
                &mut out,
                &format!("transition {k}"),
                &[a.p[0][0], a.p[0][1], a.p[1][0], a.p[1][1]],
            );
        }
        if let Some(net) = &self.net {
            let s = net.spec();
            let hidden: Vec<String> = s.hidden.iter().map(|h| h.to_string()).collect();
            let _ = writeln!(
                out,
                "net hidden={} activation={} sharing={}",
                hidden.join(","),
                s.activation,
                s.sharing
            );
            push_floats(&mut out, "weights", net.flat());
        }
        let pv = &self.provenance;
        let _ = writeln!(
            out,
            "provenance algorithm={} seed={} iterations={} config_hash={}",
            pv.algorithm, pv.seed, pv.iterations, pv.config_hash
        );
        match &pv.standardization {
            Some(st) => {
                push_floats(&mut out, "standardize_mean", &st.mean);
                push_floats(&mut out, "standardize_scale", &st.scale);
            }
            None => out.push_str("standardize none\n"),
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .by_ref()
                .find(|(_, l)| !l.is_empty())
                .ok_or_else(|| parse_err(origin, 0, format!("file ends before {what}")))
        };
        let (_, version) = next("the version line")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                expected: MODEL_FORMAT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let keyed = |(n, line): (usize, &str), key: &str| -> Result<(usize, Vec<String>)> {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some(k) if k == key => Ok((n, toks.map(str::to_string).collect())),
                _ => Err(parse_err(origin, n, format!("expected `{key}`"))),
            }
        };
        let scalar = |(n, toks): (usize, Vec<String>)| -> Result<usize> {
            match toks.as_slice() {
                [v] => v
                    .parse()
                    .map_err(|_| parse_err(origin, n, format!("{v:?} is not a count"))),
                _ => Err(parse_err(origin, n, "expected one value")),
            }
        };
        let floats = |(n, toks): (usize, Vec<String>), len: usize| -> Result<Vec<f64>> {
            if toks.len() != len {
                return Err(parse_err(
                    origin,
                    n,
                    format!("expected {len} values, found {}", toks.len()),
                ));
            }
            toks.iter()
                .map(|v| match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(parse_err(
                        origin,
                        n,
                        format!("{v:?} is not a finite number"),
                    )),
                })
                .collect()
        };
        let m = scalar(keyed(next("chains")?, "chains")?)?;
        let d = scalar(keyed(next("dim")?, "dim")?)?;
        let dt = scalar(keyed(next("dt")?, "dt")?)?;
        if m == 0 || d == 0 {
            return Err(parse_err(origin, 2, "chains and dim must be positive"));
        }
        let w = floats(keyed(next("w")?, "w")?, (m + 1) * d)?;
        let l_line = next("l")?;
        let tri = floats(keyed(l_line, "l")?, d * (d + 1) / 2)?;
        let mut l = vec![0.0; d * d];
        let mut it = tri.into_iter();
        for i in 0..d {
            for j in 0..=i {
                l[i * d + j] = it.next().expect("length checked");
            }
        }
        let chol = CholFactor::new(d, l).map_err(|e| parse_err(origin, l_line.0, e.to_string()))?;
        let mut trans = Vec::with_capacity(m);
        for k in 0..m {
            let (n, toks) = keyed(next("transition")?, "transition")?;
            if toks.first().map(String::as_str) != Some(k.to_string().as_str()) {
                return Err(parse_err(origin, n, format!("expected transition {k}")));
            }
            let v = floats((n, toks[1..].to_vec()), 4)?;
            let a = TransitionMatrix::new([[v[0], v[1]], [v[2], v[3]]])
                .map_err(|e| parse_err(origin, n, e.to_string()))?;
            trans.push(a);
        }
        let params = FhmmParams::new(m, d, w, chol, trans)
            .map_err(|e| parse_err(origin, 0, e.to_string()))?;

        let net = if dt > 0 {
            let (n, toks) = keyed(next("net")?, "net")?;
            let fields = key_values(&toks, origin, n)?;
            let get = |k: &str| {
                fields
                    .iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.as_str())
                    .ok_or_else(|| parse_err(origin, n, format!("net line lacks {k}=")))
            };
            let hidden = get("hidden")?
                .split(',')
                .map(|h| {
                    h.parse::<usize>()
                        .map_err(|_| parse_err(origin, n, format!("bad hidden size {h:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let activation: Activation = get("activation")?
                .parse()
                .map_err(|e: Error| parse_err(origin, n, e.to_string()))?;
            let sharing: Sharing = get("sharing")?
                .parse()
                .map_err(|e: Error| parse_err(origin, n, e.to_string()))?;
            let spec = MlpSpec::new(dt, d, m, hidden, activation, sharing)
                .map_err(|e| parse_err(origin, n, e.to_string()))?;
            let wl = next("weights")?;
            let flat = floats(keyed(wl, "weights")?, spec.num_params())?;
            Some(
                RecognitionNet::from_flat(spec, flat)
                    .map_err(|e| parse_err(origin, wl.0, e.to_string()))?,
            )
        } else {
            None
        };

        let (n, toks) = keyed(next("provenance")?, "provenance")?;
        let fields = key_values(&toks, origin, n)?;
        let get = |k: &str| {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| parse_err(origin, n, format!("provenance lacks {k}=")))
        };
        let number = |k: &str| -> Result<u64> {
            let v = get(k)?;
            v.parse()
                .map_err(|_| parse_err(origin, n, format!("{k}={v:?} is not an integer")))
        };
        let algorithm = get("algorithm")?;
        let seed = number("seed")?;
        let iterations = number("iterations")? as usize;
        let config_hash = get("config_hash")?;

        let st_line = next("standardize")?;
        let standardization = if st_line.1 == "standardize none" {
            None
        } else {
            let mean = floats(keyed(st_line, "standardize_mean")?, d)?;
            let sl = next("standardize_scale")?;
            let scale = floats(keyed(sl, "standardize_scale")?, d)?;
            if scale.iter().any(|s| *s <= 0.0) {
                return Err(parse_err(origin, sl.0, "scales must be positive"));
            }
            Some(Standardization { mean, scale })
        };
        let (n, last) = next("end")?;
        if last != "end" {
            return Err(parse_err(origin, n, "expected `end`"));
        }
        Ok(Self {
            params,
            net,
            provenance: Provenance {
                algorithm,
                seed,
                config_hash,
                iterations,
                standardization,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?, path)
    }
}

fn key_values(toks: &[String], origin: &Path, line: usize) -> Result<Vec<(String, String)>> {
    toks.iter()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| parse_err(origin, line, format!("expected key=value, found {t:?}")))
        })
        .collect()
}

/// Flat `key = value` lines; `#` starts a comment. Keys keep file order.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            parse_err(
                origin,
                i + 1,
                format!("expected key = value, found {line:?}"),
            )
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(parse_err(origin, i + 1, "empty key"));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
