// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output directory handling: every run leaves `run.json` behind with the
//! effective configuration and a SHA-256 of each input file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct InputHash {
    role: String,
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    inputs: &'a [InputHash],
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunDir {
    pub root: PathBuf,
    verbose: bool,
    inputs: Vec<InputHash>,
}

impl RunDir {
    /// The directory itself is created on the first write, so runs that
    /// fail while reading their inputs leave nothing behind.
    pub fn create(root: PathBuf, verbose: bool) -> Result<Self> {
        Ok(Self {
            root,
            verbose,
            inputs: Vec::new(),
        })
    }

    /// Path of an output file; ensures the directory exists.
    pub fn path(&self, name: &str) -> PathBuf {
        let _ = std::fs::create_dir_all(&self.root);
        self.root.join(name)
    }

    /// Registers an input file and its hash.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputHash {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.note(&format!("wrote {}", p.display()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    /// Echoes the effective configuration and the input hashes.
    pub fn finish<C: Serialize>(&self, command: &str, config: &C) -> Result<()> {
        self.write_json(
            "run.json",
            &RunRecord {
                command,
                version: env!("CARGO_PKG_VERSION"),
                config,
                inputs: &self.inputs,
            },
        )
    }

    pub fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn run_record_lists_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"x").unwrap();
        let mut run = RunDir::create(dir.path().join("out"), false).unwrap();
        run.input("dataset", &input).unwrap();
        run.finish("filter", &serde_json::json!({"k": 1})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(run.path("run.json")).unwrap()).unwrap();
        assert_eq!(v["command"], "filter");
        assert_eq!(v["inputs"][0]["role"], "dataset");
        assert_eq!(v["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    }
}
