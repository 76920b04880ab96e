//! Text record format.
//!
//! ```text
//! ENECG1 <record_id> <C> <T> <fs_hz>
//! <T comma-separated samples>        (C lines)
//! rr_ms,age_years,sex,potassium_abnormal,arrhythmia_class
//! ```
//!
//! Records are concatenated in one file. Floats are written with the
//! shortest representation that parses back to the same bits. A dataset
//! manifest lists record files one per line, relative to the manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::{try_map_range, Exec};
use crate::signal::generator::GeneratorConfig;
use crate::signal::record::{EcgRecord, LabelSet};
use crate::signal::ARRHYTHMIA_CLASSES;

const MAGIC: &str = "ENECG1";

pub fn write_records<W: Write>(mut w: W, records: &[(EcgRecord, LabelSet)]) -> std::io::Result<()> {
    let mut line = String::new();
    for (rec, labels) in records {
        let (c, t) = (rec.n_leads(), rec.n_samples());
        writeln!(w, "{MAGIC} {} {c} {t} {}", rec.record_id, rec.sampling_rate_hz)?;
        for lead in 0..c {
            line.clear();
            for (i, v) in rec.lead(lead).iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                write!(line, "{v}").expect("writing to a String");
            }
            writeln!(w, "{line}")?;
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            labels.rr_ms, labels.age_years, labels.sex, labels.potassium_abnormal, labels.arrhythmia_class
        )?;
    }
    w.flush()
}

pub fn save_records(path: impl AsRef<Path>, records: &[(EcgRecord, LabelSet)]) -> Result<()> {
    let path = path.as_ref();
    for (rec, _) in records {
        if rec.record_id.is_empty() || rec.record_id.contains(char::is_whitespace) {
            return Err(Error::usage(format!(
                "record id {:?} must be nonempty and free of whitespace",
                rec.record_id
            )));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("cannot parse {what} from {s:?}")))
}

fn parse_labels(text: &str, line: usize) -> Result<LabelSet> {
    let f: Vec<&str> = text.split(',').collect();
    if f.len() != 5 {
        return Err(Error::parse(line, format!("label line needs 5 fields, found {}", f.len())));
    }
    let labels = LabelSet {
        rr_ms: parse_field(f[0], line, "rr_ms")?,
        age_years: parse_field(f[1], line, "age_years")?,
        sex: parse_field(f[2], line, "sex")?,
        potassium_abnormal: parse_field(f[3], line, "potassium_abnormal")?,
        arrhythmia_class: parse_field(f[4], line, "arrhythmia_class")?,
    };
    if !(labels.rr_ms.is_finite() && labels.rr_ms > 0.0) {
        return Err(Error::parse(line, "rr_ms must be positive"));
    }
    if !(0.0..=110.0).contains(&labels.age_years) {
        return Err(Error::parse(line, "age_years must lie in [0, 110]"));
    }
    if labels.sex > 1 || labels.potassium_abnormal > 1 {
        return Err(Error::parse(line, "binary labels must be 0 or 1"));
    }
    if labels.arrhythmia_class as usize >= ARRHYTHMIA_CLASSES {
        return Err(Error::parse(line, format!("arrhythmia_class must be < {ARRHYTHMIA_CLASSES}")));
    }
    Ok(labels)
}

/// Parses every record from a reader.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<(EcgRecord, LabelSet)>> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut out = Vec::new();
    let next = |lines: &mut dyn Iterator<Item = (usize, std::io::Result<String>)>| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((n, Ok(s))) => Ok(Some((n, s))),
            Some((n, Err(e))) => Err(Error::parse(n, format!("unreadable line: {e}"))),
        }
    };
    while let Some((hline, header)) = next(&mut lines)? {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != MAGIC {
            return Err(Error::parse(
                hline,
                format!("malformed header {header:?}; expected `{MAGIC} <id> <C> <T> <fs_hz>`"),
            ));
        }
        let id = parts[1].to_string();
        let c: usize = parse_field(parts[2], hline, "lead count")?;
        let t: usize = parse_field(parts[3], hline, "sample count")?;
        let fs: f64 = parse_field(parts[4], hline, "sampling rate")?;
        if c < 1 || t < 2 {
            return Err(Error::parse(hline, format!("need C >= 1 and T >= 2, header says C={c} T={t}")));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::parse(hline, "sampling rate must be positive"));
        }
        let mut data = Vec::with_capacity(c * t);
        for row in 0..c {
            let Some((n, text)) = next(&mut lines)? else {
                return Err(Error::parse(
                    hline,
                    format!("record {id}: header declares C={c} but only {row} rows follow"),
                ));
            };
            let fields: Vec<&str> = text.split(',').collect();
            if fields.len() != t {
                return Err(Error::parse(
                    n,
                    format!(
                        "record {id}: header declares C={c} rows of T={t} samples; row {} has {} values after {row} complete rows",
                        row + 1,
                        fields.len()
                    ),
                ));
            }
            for f in fields {
                let v: f64 = parse_field(f, n, "sample")?;
                if !v.is_finite() {
                    return Err(Error::parse(n, "samples must be finite"));
                }
                data.push(v);
            }
        }
        let Some((lline, label_text)) = next(&mut lines)? else {
            return Err(Error::parse(hline, format!("record {id}: missing label line")));
        };
        let labels = parse_labels(&label_text, lline)?;
        let leads = Tensor::new(&[c, t], data).map_err(|e| Error::parse(hline, e.to_string()))?;
        let rec = EcgRecord::new(id, leads, fs).map_err(|e| Error::parse(hline, e.to_string()))?;
        out.push((rec, labels));
    }
    if out.is_empty() {
        return Err(Error::parse(1, "file contains no records"));
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<(EcgRecord, LabelSet)>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file))
}

fn shard_name(i: usize) -> String {
    format!("records_{i:04}.enecg")
}

fn write_manifest(dir: &Path, names: &[String]) -> Result<PathBuf> {
    let manifest = dir.join("dataset.manifest");
    let mut body = names.join("\n");
    body.push('\n');
    fs::write(&manifest, body).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Writes records in shards of `shard_size` plus a manifest naming them.
/// Returns the manifest path.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    records: &[(EcgRecord, LabelSet)],
    shard_size: usize,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (i, shard) in records.chunks(shard_size.max(1)).enumerate() {
        let name = shard_name(i);
        save_records(dir.join(&name), shard)?;
        names.push(name);
    }
    write_manifest(dir, &names)
}

/// Like [`save_dataset`] for a synthetic dataset, generating one shard at a
/// time. The files are identical to saving `cfg.generate(..)`.
pub fn save_generated(
    dir: impl AsRef<Path>,
    cfg: &GeneratorConfig,
    shard_size: usize,
    exec: Exec,
) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shard_size = shard_size.max(1);
    let mut names = Vec::new();
    for (i, start) in (0..cfg.n_records).step_by(shard_size).enumerate() {
        let end = (start + shard_size).min(cfg.n_records);
        let shard = try_map_range(exec, end - start, |k| cfg.generate_record(start + k))?;
        let name = shard_name(i);
        save_records(dir.join(&name), &shard)?;
        names.push(name);
    }
    write_manifest(dir, &names)
}

/// Record files named by a manifest, resolved against its directory.
pub fn manifest_files(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let files: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    if files.is_empty() {
        return Err(Error::parse(1, format!("manifest {} lists no records", path.display())));
    }
    Ok(files)
}

/// Loads every file named in a manifest, in manifest order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(EcgRecord, LabelSet)>> {
    let mut out = Vec::new();
    for f in manifest_files(path)? {
        out.extend(load_records(f)?);
    }
    Ok(out)
}
