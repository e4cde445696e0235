//! Dataset manifests: one `split cloud [weak]` line per cloud.
//!
//! Relative paths are resolved against the manifest's own directory.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub split: Split,
    pub cloud: PathBuf,
    pub weak: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| CliError::Data(format!("manifest line {}: {m}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(bad("expected `split cloud [weak]`"));
            }
            let split = match fields[0] {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(bad(&format!("unknown split '{other}'"))),
            };
            entries.push(Entry {
                split,
                cloud: base.join(fields[1]),
                weak: fields.get(2).map(|w| base.join(w)),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let split = match e.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            s.push_str(&format!("{split} {}", e.cloud.display()));
            if let Some(w) = &e.weak {
                s.push_str(&format!(" {}", w.display()));
            }
            s.push('\n');
        }
        s
    }

    pub fn train(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn val(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.split == Split::Val)
    }
}
