//! Shared artifact plumbing: atomic file writes and the line-oriented
//! `key = value` configuration format used by the command-line tools.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("key `{key}`: expected {want}, got `{got}`")]
    BadValue { key: String, want: &'static str, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Write `bytes` to `path` through a sibling temporary file and an atomic
/// rename, so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Parsed `key = value` configuration. Keys are flat strings; dotted names
/// (`model.d_model`) group related settings without nesting syntax. Within a
/// file, later assignments to the same key win, mirroring the
/// flags-override-file precedence of the command line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse config text. Blank lines and lines starting with `#` are
    /// skipped; everything else must be `key = value`. Values keep any `=`
    /// after the first.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Parse { line: i + 1, msg: "empty key".into() });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Set a key, returning the previous value. Command-line overrides go
    /// through here after the file is parsed.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Option<String> {
        self.entries.insert(key.to_string(), value.into())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn typed<T>(&self, key: &str, want: &'static str) -> Result<Option<T>, ConfigError>
    where
        T: std::str::FromStr,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                want,
                got: raw.to_string(),
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.typed(key, "unsigned integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.typed(key, "unsigned integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.typed(key, "number")
    }

    pub fn get_f32(&self, key: &str) -> Result<Option<f32>, ConfigError> {
        self.typed(key, "number")
    }

    /// Accepts `true`/`false` only; anything looser hides typos.
    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(raw) => Err(ConfigError::BadValue {
                key: key.to_string(),
                want: "true or false",
                got: raw.to_string(),
            }),
        }
    }
}

/// Canonical rendering: sorted keys, one `key = value` per line. Parsing the
/// rendering reproduces the config, so artifacts can embed it verbatim.
impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
