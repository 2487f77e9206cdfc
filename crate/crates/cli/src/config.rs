use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Bad flags, unreadable or malformed config files; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Tool name, crate version and `git describe` of the build.
pub fn tool_version() -> String {
    format!("chemflow {} ({})", env!("CARGO_PKG_VERSION"), env!("CHEMFLOW_GIT_DESCRIBE"))
}

/// Flag overrides as dotted key paths, applied after the config file.
#[derive(Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set<V: Into<Value>>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
        self
    }

    /// A string flag naming an enum variant; hyphens become underscores.
    pub fn variant(&mut self, key: &str, v: Option<&String>) -> &mut Self {
        self.set(key, v.map(|s| s.replace('-', "_")))
    }

    pub fn list<V: Into<Value> + Clone>(&mut self, key: &str, v: &[V]) -> &mut Self {
        if !v.is_empty() {
            self.0.push((key.to_string(), Value::Array(v.iter().cloned().map(Into::into).collect())));
        }
        self
    }

    pub fn table(&mut self, key: &str, t: Table) -> &mut Self {
        self.0.push((key.to_string(), Value::Table(t)));
        self
    }
}

fn tag_of(t: &Table) -> Option<(&str, &Value)> {
    ["kind", "mode", "model"].into_iter().find_map(|k| t.get(k).map(|v| (k, v)))
}

/// Merges `over` into `base`. Keys must already exist in `base` unless the
/// base table is empty (an open map). A table whose tag field changes
/// replaces the base table wholesale; arrays and scalars are replaced.
fn merge(base: &mut Table, over: Table, path: &str) -> Result<()> {
    let open = base.is_empty();
    for (k, v) in over {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                let retag = matches!((tag_of(b), tag_of(&o)), (Some((bk, bv)), Some((ok, ov))) if bk == ok && bv != ov);
                if retag {
                    *b = o;
                } else {
                    merge(b, o, &here)?;
                }
            }
            (Some(slot), v) => *slot = v,
            (None, v) if open => {
                base.insert(k, v);
            }
            (None, _) => return Err(usage(format!("unknown config key `{here}`"))),
        }
    }
    Ok(())
}

fn set_path(root: &mut Table, key: &str, v: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut over = Table::new();
    over.insert(last.to_string(), v);
    for p in parts.into_iter().rev() {
        let mut t = Table::new();
        t.insert(p.to_string(), Value::Table(over));
        over = t;
    }
    merge(root, over, "")
}

/// Defaults, then the optional TOML file, then flag overrides.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: Overrides) -> Result<C> {
    let mut table = Table::try_from(C::default()).context("serializing defaults")?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table = toml::from_str(&text).map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
        merge(&mut table, over, "")?;
    }
    for (k, v) in overrides.0 {
        set_path(&mut table, &k, v)?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| usage(format!("invalid configuration: {e}")))
}

#[derive(Serialize)]
struct Snapshot<'a, C> {
    tool_version: String,
    subcommand: &'a str,
    config: &'a C,
}

/// Writes `resolved_config.toml` with the tool version into `dir`.
pub fn write_snapshot<C: Serialize>(dir: &Path, subcommand: &str, cfg: &C) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let snap = Snapshot {
        tool_version: tool_version(),
        subcommand,
        config: cfg,
    };
    let text = toml::to_string(&snap).context("serializing resolved config")?;
    fs::write(dir.join("resolved_config.toml"), text).context("writing resolved config")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u64,
        b: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Opt {
        Plain,
        Mom { momentum: f64 },
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Cfg {
        seed: u64,
        name: String,
        inner: Inner,
        opt: Opt,
        map: std::collections::BTreeMap<String, String>,
    }

    impl Default for Cfg {
        fn default() -> Self {
            Self {
                seed: 1,
                name: "x".into(),
                inner: Inner { a: 2, b: 0.5 },
                opt: Opt::Plain,
                map: Default::default(),
            }
        }
    }

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_win_over_file() {
        let f = file("seed = 5\n[inner]\na = 9\n");
        let mut o = Overrides::default();
        o.set("seed", Some(7));
        let c: Cfg = resolve(Some(f.path()), o).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.inner, Inner { a: 9, b: 0.5 });
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let f = file("[inner]\nc = 1\n");
        let e = resolve::<Cfg>(Some(f.path()), Overrides::default()).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some(), "{e}");
    }

    #[test]
    fn retagged_table_is_replaced() {
        let f = file("[opt]\nkind = \"mom\"\nmomentum = 0.9\n");
        let c: Cfg = resolve(Some(f.path()), Overrides::default()).unwrap();
        assert_eq!(c.opt, Opt::Mom { momentum: 0.9 });
    }

    #[test]
    fn open_maps_accept_new_keys() {
        let f = file("[map]\nwave = \"a.ckpt\"\n");
        let c: Cfg = resolve(Some(f.path()), Overrides::default()).unwrap();
        assert_eq!(c.map["wave"], "a.ckpt");
    }

    #[test]
    fn bad_value_and_missing_file_are_usage_errors() {
        let mut o = Overrides::default();
        o.set("seed", Some("many"));
        assert!(resolve::<Cfg>(None, o).unwrap_err().downcast_ref::<UsageError>().is_some());
        let e = resolve::<Cfg>(Some(Path::new("/nonexistent/cfg.toml")), Overrides::default()).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }
}
