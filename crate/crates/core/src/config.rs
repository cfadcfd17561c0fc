//! Flat `key = value` configuration files and their mapping onto config structs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A config struct whose fields can be read and written by name.
pub trait KeyValueConfig {
    /// Sets `key`; returns `Ok(false)` if the key is not one of this struct's fields.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every field as `(key, value)` text, in a fixed order.
    fn entries(&self) -> Vec<(String, String)>;
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

/// Applies every pair to the first config in `targets` that accepts it.
/// Unknown keys are a config error.
pub fn apply_all(targets: &mut [&mut dyn KeyValueConfig], pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        let mut taken = false;
        for t in targets.iter_mut() {
            if t.set(k, v)? {
                taken = true;
                break;
            }
        }
        if !taken {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn entries_map(targets: &[&dyn KeyValueConfig]) -> BTreeMap<String, String> {
    targets.iter().flat_map(|t| t.entries()).collect()
}

pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// `none` (any case) or a value.
pub fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

pub fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

pub fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct A {
        x: usize,
    }

    impl KeyValueConfig for A {
        fn set(&mut self, key: &str, value: &str) -> Result<bool> {
            match key {
                "x" => self.x = parse(key, value)?,
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn entries(&self) -> Vec<(String, String)> {
            vec![("x".into(), self.x.to_string())]
        }
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse_key_values("# header\n\nx = 3  # trailing\n", Path::new("c")).unwrap();
        assert_eq!(kv, vec![("x".to_string(), "3".to_string())]);
        assert!(matches!(
            parse_key_values("x 3", Path::new("c")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn apply_dispatches_and_rejects_unknown() {
        let mut a = A::default();
        apply_all(&mut [&mut a], &[("x".into(), "7".into())]).unwrap();
        assert_eq!(a.x, 7);
        assert!(apply_all(&mut [&mut a], &[("y".into(), "1".into())]).is_err());
        assert!(apply_all(&mut [&mut a], &[("x".into(), "-1".into())]).is_err());
    }

    #[test]
    fn optional_and_list_values() {
        assert_eq!(parse_optional::<f64>("g", "None").unwrap(), None);
        assert_eq!(parse_optional::<f64>("g", "1.5").unwrap(), Some(1.5));
        assert_eq!(parse_list::<f64>("r", "0.8, 0.1,0.1").unwrap(), vec![0.8, 0.1, 0.1]);
        assert_eq!(show_list(&[1, 2]), "1,2");
    }
}
