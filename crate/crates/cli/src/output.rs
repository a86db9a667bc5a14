use std::fs;
use std::io::Write;
use std::path::Path;

use mglmm::data::format_real;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Writes `bytes` to `dir/name` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(name)).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// A CSV table rendered in memory.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

pub fn real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format_real(v)
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub status: &'static str,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_path: String,
    pub config_sha256: Option<String>,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_sha256: Option<String>,
    pub options: Value,
    pub seed: Option<u64>,
    pub convergence: Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, config_path: &Path) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            status: "error",
            exit_code: 1,
            error: None,
            config_path: config_path.display().to_string(),
            config_sha256: sha256_file(config_path).ok(),
            config: Value::Null,
            data_path: None,
            data_sha256: None,
            options: Value::Null,
            seed: None,
            convergence: Value::Null,
            outputs: Vec::new(),
        }
    }

    pub fn with_data(mut self, path: &Path) -> Self {
        self.data_path = Some(path.display().to_string());
        self.data_sha256 = sha256_file(path).ok();
        self
    }
}

/// Collects output files and writes them, then the manifest, atomically.
pub struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<(String, Vec<u8>)>,
}

impl<'a> Outputs<'a> {
    pub fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn table(&mut self, name: impl Into<String>, t: &Table) {
        self.add(name, t.to_bytes());
    }

    /// Writes every file and the manifest; returns the final exit code.
    pub fn finish(self, mut manifest: Manifest, code: u8) -> u8 {
        let mut code = code;
        manifest.exit_code = code;
        manifest.status = match code {
            0 => "ok",
            2 => "not_converged",
            _ => "error",
        };
        manifest.outputs = self.files.iter().map(|(n, _)| n.clone()).collect();
        for (name, bytes) in &self.files {
            if let Err(e) = write_atomic(self.dir, name, bytes) {
                eprintln!("error: cannot write {}: {e}", self.dir.join(name).display());
                code = 1;
                manifest.exit_code = 1;
                manifest.status = "error";
                manifest.error = Some(format!("cannot write {name}: {e}"));
                break;
            }
        }
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        if let Err(e) = write_atomic(self.dir, MANIFEST, text.as_bytes()) {
            eprintln!("error: cannot write {}: {e}", self.dir.join(MANIFEST).display());
            code = 1;
        }
        code
    }
}
