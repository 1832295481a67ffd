use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ftm_core::kv::KvMap;

use crate::Common;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

const TOP_LEVEL: &[&str] = &["seed", "data", "checkpoint", "image", "taxonomy", "truth"];
const SECTIONS: &[&str] = &["data", "synthetic", "model", "stage1", "stage2", "adapt", "eval", "sweep", "map", "mosaic"];

/// Command-line values keyed like the config file.
pub struct Flags(KvMap);

impl Flags {
    pub fn new() -> Self {
        Self(KvMap::new())
    }

    pub fn with(mut self, key: &str, value: Option<impl Display>) -> Self {
        if let Some(v) = value {
            self.0.set(key, v);
        }
        self
    }
}

/// Config file overlaid with flags, and the fully resolved settings a run
/// actually used.
pub struct Settings {
    input: KvMap,
    pub resolved: KvMap,
}

impl Settings {
    pub fn load(common: &Common, flags: Flags) -> Result<Self> {
        let mut input = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        input.overlay(&flags.0);
        if let Some(s) = common.seed {
            input.set("seed", s);
        }
        Ok(Self {
            input,
            resolved: KvMap::new(),
        })
    }

    pub fn get<V: FromStr + Display>(&mut self, key: &str, default: V) -> Result<V> {
        let v = self.input.get(key)?.unwrap_or(default);
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn get_list<V: FromStr + Display>(&mut self, key: &str, default: Vec<V>) -> Result<Vec<V>> {
        let v = self.input.get_list(key)?.unwrap_or(default);
        self.resolved.set_list(key, &v);
        Ok(v)
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        match self.input.get_str(key) {
            Some(v) if !v.is_empty() => {
                let v = v.to_string();
                self.resolved.set(key, &v);
                Ok(v)
            }
            _ => bail!("missing setting `{key}` (flag --{} or config key)", key.rsplit('.').next().unwrap_or(key)),
        }
    }

    /// Optional path; recorded as an empty value when absent.
    pub fn optional(&mut self, key: &str) -> Option<String> {
        let v = self.input.get_str(key).filter(|v| !v.is_empty()).map(str::to_string);
        self.resolved.set(key, v.clone().unwrap_or_default());
        v
    }

    pub fn input_section(&self, prefix: &str) -> KvMap {
        self.input.section(prefix)
    }

    pub fn record(&mut self, prefix: &str, kv: &KvMap) {
        self.resolved.merge_section(prefix, kv);
    }

    /// Reject misspelled keys. Sections another command reads are left
    /// alone so one file can drive a whole pipeline; inside a section this
    /// command resolved, every key must have been consumed.
    pub fn check_unknown(&self) -> Result<()> {
        let known: Vec<&str> = self.resolved.keys().collect();
        let section = |k: &str| k.split_once('.').map_or("", |(s, _)| s).to_string();
        let used: Vec<String> = known.iter().map(|k| section(k)).collect();
        for k in self.input.keys() {
            let shared = k
                .strip_prefix("stage2.")
                .is_some_and(|rest| known.iter().any(|q| *q == format!("stage2.ftm.{rest}") || *q == format!("stage2.finetune.{rest}")));
            if known.contains(&k) || shared {
                continue;
            }
            let sec = section(k);
            let foreign = if sec.is_empty() { TOP_LEVEL.contains(&k) } else { SECTIONS.contains(&sec.as_str()) && !used.contains(&sec) };
            if !foreign {
                bail!("unknown setting `{k}`");
            }
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_file(out, RESOLVED_CONFIG, self.resolved.to_text())
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_dir(dir)?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}
